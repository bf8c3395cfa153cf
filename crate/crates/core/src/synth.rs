//! Synthetic two-frame scenes with exact backward flow and joint positions.
//!
//! Every scene is a stack of textured capsules ("parts") over a static
//! background. Each part moves rigidly between the source and the driving
//! frame; an articulated arm chains its segments through shared joints.
//! Images are anti-aliased by 4×4 supersampling, and the texture is attached
//! to each part so it moves with it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};
use crate::flow::FlowField;
use crate::geometry::{GridSpec, Mat2, Point2};
use crate::warp::ImageGrid;

/// Foreground pixels keep at least this many pixels to the frame border.
pub const FRAME_MARGIN_PX: f64 = 2.0;
/// A pixel counts as evaluation foreground when its source location lies this
/// deep inside a single part, so that bilinear sampling never touches an edge.
pub const FOREGROUND_DEPTH_PX: f64 = 2.2;
const SUPERSAMPLE: usize = 4;
const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Translate,
    Rotate,
    ArticulatedArm,
    TwoBlobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Noise,
}

/// Kind-specific motion parameters, in pixels and degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneMotion {
    /// One capsule shifted by `shift_px = [dx, dy]`.
    Translate {
        shift_px: [f64; 2],
        orientation_deg: f64,
    },
    /// One capsule rotated by `angle_deg` about its center, which sits at
    /// `pivot_px = [col, row]`.
    Rotate {
        angle_deg: f64,
        pivot_px: [f64; 2],
        orientation_deg: f64,
    },
    /// A chain of segments hinged at `base_px`; angles are relative to the
    /// previous segment (the first one is absolute).
    ArticulatedArm {
        base_px: [f64; 2],
        lengths_px: Vec<f64>,
        source_angles_deg: Vec<f64>,
        driving_angles_deg: Vec<f64>,
    },
    /// Two discs with independent shifts.
    TwoBlobs {
        centers_px: [[f64; 2]; 2],
        shifts_px: [[f64; 2]; 2],
    },
}

impl SceneMotion {
    pub fn kind(&self) -> SceneKind {
        match self {
            SceneMotion::Translate { .. } => SceneKind::Translate,
            SceneMotion::Rotate { .. } => SceneKind::Rotate,
            SceneMotion::ArticulatedArm { .. } => SceneKind::ArticulatedArm,
            SceneMotion::TwoBlobs { .. } => SceneKind::TwoBlobs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub name: String,
    pub grid: GridSpec,
    pub motion: SceneMotion,
    pub texture_seed: u64,
    pub background: BackgroundKind,
}

impl SceneSpec {
    pub fn kind(&self) -> SceneKind {
        self.motion.kind()
    }

    fn scale(&self) -> f64 {
        self.grid.height.min(self.grid.width) as f64 / 64.0
    }

    pub fn translate(grid: GridSpec, shift_px: [f64; 2]) -> Self {
        SceneSpec {
            name: "translate".into(),
            grid,
            motion: SceneMotion::Translate {
                shift_px,
                orientation_deg: 20.0,
            },
            texture_seed: 1,
            background: BackgroundKind::Gradient,
        }
    }

    pub fn rotate(grid: GridSpec, angle_deg: f64) -> Self {
        SceneSpec {
            name: "rotate".into(),
            grid,
            motion: SceneMotion::Rotate {
                angle_deg,
                pivot_px: [
                    (grid.width - 1) as f64 / 2.0,
                    (grid.height - 1) as f64 / 2.0,
                ],
                orientation_deg: 0.0,
            },
            texture_seed: 2,
            background: BackgroundKind::Flat,
        }
    }

    /// Three-segment arm with a fixed pose change, scaled to the grid.
    pub fn arm(grid: GridSpec) -> Self {
        let s = grid.height.min(grid.width) as f64 / 64.0;
        SceneSpec {
            name: "articulated_arm".into(),
            grid,
            motion: SceneMotion::ArticulatedArm {
                base_px: [16.0 * s, 30.0 * s],
                lengths_px: vec![14.0 * s, 12.0 * s, 10.0 * s],
                source_angles_deg: vec![-10.0, 30.0, -35.0],
                driving_angles_deg: vec![5.0, 10.0, -10.0],
            },
            texture_seed: 3,
            background: BackgroundKind::Noise,
        }
    }
}

/// `q = R(angle)(p − center) + center + shift`, source → driving, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Rigid {
    rotation: Mat2,
    center: Point2,
    shift: Point2,
}

impl Rigid {
    fn new(angle_deg: f64, center: Point2, shift: Point2) -> Self {
        Rigid {
            rotation: Mat2::rotation(angle_deg.to_radians()),
            center,
            shift,
        }
    }

    fn forward(&self, p: Point2) -> Point2 {
        self.rotation.mul_point(p - self.center) + self.center + self.shift
    }

    fn backward(&self, q: Point2) -> Point2 {
        self.rotation
            .transpose()
            .mul_point(q - self.center - self.shift)
            + self.center
    }
}

#[derive(Debug, Clone)]
struct Texture {
    base: [f64; CHANNELS],
    amplitude: f64,
    wave: [Point2; CHANNELS],
    phase: [f64; CHANNELS],
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, scale: f64) -> Self {
        let mut base = [0.0; CHANNELS];
        let mut wave = [Point2::ZERO; CHANNELS];
        let mut phase = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            base[c] = rng.gen_range(0.4..0.85);
            let dir = rng.gen_range(0.0..std::f64::consts::TAU);
            let wavelength = rng.gen_range(36.0..56.0) * scale;
            let k = std::f64::consts::TAU / wavelength;
            wave[c] = Point2::new(dir.cos() * k, dir.sin() * k);
            phase[c] = rng.gen_range(0.0..std::f64::consts::TAU);
        }
        Texture {
            base,
            amplitude: 0.1,
            wave,
            phase,
        }
    }

    fn color(&self, p: Point2, c: usize) -> f64 {
        self.base[c] + self.amplitude * (self.wave[c].dot(p) + self.phase[c]).sin()
    }
}

#[derive(Debug, Clone)]
struct Part {
    a: Point2,
    b: Point2,
    radius: f64,
    motion: Rigid,
    texture: Texture,
}

impl Part {
    /// Signed distance to the capsule, in source-frame pixels.
    fn sdf(&self, p: Point2) -> f64 {
        let ab = self.b - self.a;
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 {
            ((p - self.a).dot(ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (p - (self.a + ab * t)).norm() - self.radius
    }

    fn sdf_driving(&self, q: Point2) -> f64 {
        self.sdf(self.motion.backward(q))
    }
}

#[derive(Debug, Clone)]
enum Background {
    Flat([f64; CHANNELS]),
    Gradient {
        base: [f64; CHANNELS],
        slope: Point2,
    },
    Noise {
        lattice: Vec<[f64; CHANNELS]>,
        cols: usize,
        cell: f64,
    },
}

impl Background {
    fn new(kind: BackgroundKind, grid: GridSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut base = [0.0; CHANNELS];
        for v in &mut base {
            *v = rng.gen_range(0.05..0.25);
        }
        match kind {
            BackgroundKind::Flat => Background::Flat(base),
            BackgroundKind::Gradient => {
                let dir = rng.gen_range(0.0..std::f64::consts::TAU);
                let span = grid.width.max(grid.height) as f64;
                Background::Gradient {
                    base,
                    slope: Point2::new(dir.cos(), dir.sin()) * (0.15 / span),
                }
            }
            BackgroundKind::Noise => {
                let cell = 8.0 * grid.height.min(grid.width) as f64 / 64.0;
                let cols = (grid.width as f64 / cell).ceil() as usize + 2;
                let rows = (grid.height as f64 / cell).ceil() as usize + 2;
                let lattice = (0..rows * cols)
                    .map(|_| {
                        let mut v = base;
                        for x in &mut v {
                            *x += rng.gen_range(-0.05..0.05);
                        }
                        v
                    })
                    .collect();
                Background::Noise {
                    lattice,
                    cols,
                    cell,
                }
            }
        }
    }

    fn color(&self, p: Point2, c: usize) -> f64 {
        match self {
            Background::Flat(v) => v[c],
            Background::Gradient { base, slope } => base[c] + slope.dot(p),
            Background::Noise {
                lattice,
                cols,
                cell,
            } => {
                let gx = (p.x / cell).max(0.0);
                let gy = (p.y / cell).max(0.0);
                let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
                let rows = lattice.len() / cols;
                let (x0, y0) = (x0.min(cols - 2), y0.min(rows - 2));
                let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
                // smoothstep weights keep the field C1
                let sx = fx * fx * (3.0 - 2.0 * fx);
                let sy = fy * fy * (3.0 - 2.0 * fy);
                let at = |x: usize, y: usize| lattice[y * cols + x][c];
                let top = at(x0, y0) * (1.0 - sx) + at(x0 + 1, y0) * sx;
                let bottom = at(x0, y0 + 1) * (1.0 - sx) + at(x0 + 1, y0 + 1) * sx;
                top * (1.0 - sy) + bottom * sy
            }
        }
    }
}

/// Exact ground truth for a rendered scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Backward flow, driving → source, in normalized coordinates.
    pub flow: FlowField,
    pub joints_source: Vec<Point2>,
    pub joints_driving: Vec<Point2>,
    /// Evaluation foreground, row-major.
    pub foreground: Vec<bool>,
    grid: GridSpec,
    parts: Vec<Part>,
}

impl GroundTruth {
    /// Analytic backward map at an arbitrary driving position (normalized).
    pub fn source_of(&self, q: Point2) -> Point2 {
        let qp = to_px(&self.grid, q);
        match owner_driving(&self.parts, qp) {
            Some(i) => to_norm(&self.grid, self.parts[i].motion.backward(qp)),
            None => q,
        }
    }

    /// Backward map of a driving-frame joint through a part it belongs to.
    pub fn joint_source_of(&self, j: usize) -> Point2 {
        let qp = to_px(&self.grid, self.joints_driving[j]);
        let part = self.joint_part(j);
        to_norm(&self.grid, self.parts[part].motion.backward(qp))
    }

    fn joint_part(&self, j: usize) -> usize {
        // joints are listed part by part: either (a, b) per part, or a chain
        // a_0, a_1 = b_0, ..., b_last
        if self.joints_driving.len() == self.parts.len() + 1 {
            j.min(self.parts.len() - 1)
        } else if self.joints_driving.len() == 2 * self.parts.len() {
            j / 2
        } else {
            j
        }
    }
}

fn to_px(grid: &GridSpec, p: Point2) -> Point2 {
    let (row, col) = grid.norm_to_pixel(p);
    Point2::new(col, row)
}

fn to_norm(grid: &GridSpec, p: Point2) -> Point2 {
    Point2::new(
        p.x / grid.px_per_unit_x() - 1.0,
        p.y / grid.px_per_unit_y() - 1.0,
    )
}

fn owner_source(parts: &[Part], p: Point2) -> Option<usize> {
    (0..parts.len()).rev().find(|&i| parts[i].sdf(p) < 0.0)
}

fn owner_driving(parts: &[Part], q: Point2) -> Option<usize> {
    (0..parts.len())
        .rev()
        .find(|&i| parts[i].sdf_driving(q) < 0.0)
}

fn capsule_along(center: Point2, half_length: f64, orientation_deg: f64) -> (Point2, Point2) {
    let (s, c) = orientation_deg.to_radians().sin_cos();
    let d = Point2::new(c, s) * half_length;
    (center - d, center + d)
}

fn arm_joints(base: Point2, lengths: &[f64], relative_deg: &[f64]) -> (Vec<Point2>, Vec<f64>) {
    let mut joints = vec![base];
    let mut absolute = Vec::with_capacity(lengths.len());
    let mut angle = 0.0;
    for (l, rel) in lengths.iter().zip(relative_deg) {
        angle += rel;
        absolute.push(angle);
        let (s, c) = f64::to_radians(angle).sin_cos();
        let last = joints[joints.len() - 1];
        joints.push(last + Point2::new(c, s) * *l);
    }
    (joints, absolute)
}

struct Layout {
    parts: Vec<Part>,
    joints_source: Vec<Point2>,
    joints_driving: Vec<Point2>,
}

fn layout(scene: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let s = scene.scale();
    let center = Point2::new(
        (scene.grid.width - 1) as f64 / 2.0,
        (scene.grid.height - 1) as f64 / 2.0,
    );
    let mut texture = || Texture::random(rng, s);
    let layout = match &scene.motion {
        SceneMotion::Translate {
            shift_px,
            orientation_deg,
        } => {
            let (a, b) = capsule_along(center, 9.0 * s, *orientation_deg);
            let motion = Rigid::new(0.0, center, Point2::from(*shift_px));
            let part = Part {
                a,
                b,
                radius: 8.0 * s,
                motion,
                texture: texture(),
            };
            Layout {
                joints_source: vec![a, b],
                joints_driving: vec![motion.forward(a), motion.forward(b)],
                parts: vec![part],
            }
        }
        SceneMotion::Rotate {
            angle_deg,
            pivot_px,
            orientation_deg,
        } => {
            let pivot = Point2::from(*pivot_px);
            let (a, b) = capsule_along(pivot, 13.0 * s, *orientation_deg);
            let motion = Rigid::new(*angle_deg, pivot, Point2::ZERO);
            let part = Part {
                a,
                b,
                radius: 7.0 * s,
                motion,
                texture: texture(),
            };
            Layout {
                joints_source: vec![a, b],
                joints_driving: vec![motion.forward(a), motion.forward(b)],
                parts: vec![part],
            }
        }
        SceneMotion::ArticulatedArm {
            base_px,
            lengths_px,
            source_angles_deg,
            driving_angles_deg,
        } => {
            if lengths_px.is_empty()
                || lengths_px.len() != source_angles_deg.len()
                || lengths_px.len() != driving_angles_deg.len()
            {
                return Err(DamError::InvalidConfig(
                    "arm needs one length and one angle per segment in each frame".into(),
                ));
            }
            let base = Point2::from(*base_px);
            let (src_joints, src_abs) = arm_joints(base, lengths_px, source_angles_deg);
            let (drv_joints, drv_abs) = arm_joints(base, lengths_px, driving_angles_deg);
            let parts = (0..lengths_px.len())
                .map(|i| Part {
                    a: src_joints[i],
                    b: src_joints[i + 1],
                    radius: 6.0 * s,
                    motion: Rigid::new(
                        drv_abs[i] - src_abs[i],
                        src_joints[i],
                        drv_joints[i] - src_joints[i],
                    ),
                    texture: texture(),
                })
                .collect();
            Layout {
                parts,
                joints_source: src_joints,
                joints_driving: drv_joints,
            }
        }
        SceneMotion::TwoBlobs {
            centers_px,
            shifts_px,
        } => {
            let radii = [9.0 * s, 8.0 * s];
            let parts: Vec<Part> = (0..2)
                .map(|i| {
                    let c = Point2::from(centers_px[i]);
                    Part {
                        a: c,
                        b: c,
                        radius: radii[i],
                        motion: Rigid::new(0.0, c, Point2::from(shifts_px[i])),
                        texture: texture(),
                    }
                })
                .collect();
            Layout {
                joints_source: parts.iter().map(|p| p.a).collect(),
                joints_driving: parts.iter().map(|p| p.motion.forward(p.a)).collect(),
                parts,
            }
        }
    };
    Ok(layout)
}

fn check_in_frame(grid: &GridSpec, parts: &[Part]) -> Result<()> {
    let max_x = (grid.width - 1) as f64 - FRAME_MARGIN_PX;
    let max_y = (grid.height - 1) as f64 - FRAME_MARGIN_PX;
    for (i, p) in parts.iter().enumerate() {
        for (frame, ends) in [
            ("source", [p.a, p.b]),
            ("driving", [p.motion.forward(p.a), p.motion.forward(p.b)]),
        ] {
            for e in ends {
                if e.x - p.radius < FRAME_MARGIN_PX
                    || e.y - p.radius < FRAME_MARGIN_PX
                    || e.x + p.radius > max_x
                    || e.y + p.radius > max_y
                {
                    return Err(DamError::MotionOutOfFrame(format!(
                        "part {i} comes within {FRAME_MARGIN_PX} px of the border in the {frame} frame"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn render_frame(
    grid: GridSpec,
    parts: &[Part],
    background: &Background,
    driving: bool,
) -> ImageGrid {
    let n = grid.len();
    let mut values = vec![0.0; CHANNELS * n];
    let inv = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for row in 0..grid.height {
        for col in 0..grid.width {
            let mut acc = [0.0; CHANNELS];
            for si in 0..SUPERSAMPLE {
                for sj in 0..SUPERSAMPLE {
                    let q = Point2::new(
                        col as f64 + (sj as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5,
                        row as f64 + (si as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5,
                    );
                    let hit = if driving {
                        owner_driving(parts, q).map(|i| (i, parts[i].motion.backward(q)))
                    } else {
                        owner_source(parts, q).map(|i| (i, q))
                    };
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += match hit {
                            Some((i, p)) => parts[i].texture.color(p, c),
                            None => background.color(q, c),
                        };
                    }
                }
            }
            for c in 0..CHANNELS {
                values[c * n + row * grid.width + col] = (acc[c] * inv).clamp(0.0, 1.0);
            }
        }
    }
    ImageGrid::new(grid, CHANNELS, values).expect("sizes agree")
}

pub fn render_scene(scene: &SceneSpec) -> Result<(ImageGrid, ImageGrid, GroundTruth)> {
    let grid = scene.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(scene.texture_seed);
    let Layout {
        parts,
        joints_source,
        joints_driving,
    } = layout(scene, &mut rng)?;
    check_in_frame(&grid, &parts)?;
    let background = Background::new(scene.background, grid, &mut rng);

    let src = render_frame(grid, &parts, &background, false);
    let drv = render_frame(grid, &parts, &background, true);

    let mut vectors = Vec::with_capacity(grid.len());
    let mut foreground = Vec::with_capacity(grid.len());
    for row in 0..grid.height {
        for col in 0..grid.width {
            let q = Point2::new(col as f64, row as f64);
            match owner_driving(&parts, q) {
                Some(i) => {
                    let p = parts[i].motion.backward(q);
                    vectors.push(to_norm(&grid, p));
                    let deep = parts[i].sdf(p) < -FOREGROUND_DEPTH_PX;
                    let clear = parts[i + 1..].iter().all(|o| {
                        o.sdf_driving(q) > FOREGROUND_DEPTH_PX && o.sdf(p) > FOREGROUND_DEPTH_PX
                    });
                    foreground.push(deep && clear);
                }
                None => {
                    vectors.push(grid.pixel_to_norm(row, col));
                    foreground.push(false);
                }
            }
        }
    }
    let gt = GroundTruth {
        flow: FlowField::new(grid, vectors)?,
        joints_source: joints_source.iter().map(|&p| to_norm(&grid, p)).collect(),
        joints_driving: joints_driving.iter().map(|&p| to_norm(&grid, p)).collect(),
        foreground,
        grid,
        parts,
    };
    Ok((src, drv, gt))
}

fn sample_scene(kind: SceneKind, grid: GridSpec, index: usize, rng: &mut ChaCha8Rng) -> SceneSpec {
    let s = grid.height.min(grid.width) as f64 / 64.0;
    let cx = (grid.width - 1) as f64 / 2.0;
    let cy = (grid.height - 1) as f64 / 2.0;
    let background = [
        BackgroundKind::Flat,
        BackgroundKind::Gradient,
        BackgroundKind::Noise,
    ][rng.gen_range(0..3)];
    // rejection sampling keeps every scene inside the frame
    loop {
        let motion = match kind {
            SceneKind::Translate => SceneMotion::Translate {
                shift_px: [rng.gen_range(-6.0..6.0) * s, rng.gen_range(-6.0..6.0) * s],
                orientation_deg: rng.gen_range(-90.0..90.0),
            },
            SceneKind::Rotate => {
                let magnitude = rng.gen_range(8.0..30.0);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                SceneMotion::Rotate {
                    angle_deg: sign * magnitude,
                    pivot_px: [
                        cx + rng.gen_range(-4.0..4.0) * s,
                        cy + rng.gen_range(-4.0..4.0) * s,
                    ],
                    orientation_deg: rng.gen_range(-90.0..90.0),
                }
            }
            SceneKind::ArticulatedArm => {
                let source: Vec<f64> = vec![
                    rng.gen_range(-25.0..25.0),
                    rng.gen_range(-45.0..45.0),
                    rng.gen_range(-45.0..45.0),
                ];
                let driving = source
                    .iter()
                    .map(|a| a + rng.gen_range(-25.0..25.0))
                    .collect();
                SceneMotion::ArticulatedArm {
                    base_px: [
                        rng.gen_range(12.0..18.0) * s,
                        cy + rng.gen_range(-4.0..4.0) * s,
                    ],
                    lengths_px: vec![
                        rng.gen_range(12.0..15.0) * s,
                        rng.gen_range(10.0..13.0) * s,
                        rng.gen_range(8.0..11.0) * s,
                    ],
                    source_angles_deg: source,
                    driving_angles_deg: driving,
                }
            }
            SceneKind::TwoBlobs => SceneMotion::TwoBlobs {
                centers_px: [
                    [
                        cx - rng.gen_range(9.0..14.0) * s,
                        cy - rng.gen_range(4.0..10.0) * s,
                    ],
                    [
                        cx + rng.gen_range(9.0..14.0) * s,
                        cy + rng.gen_range(4.0..10.0) * s,
                    ],
                ],
                shifts_px: [
                    [rng.gen_range(-5.0..5.0) * s, rng.gen_range(-5.0..5.0) * s],
                    [rng.gen_range(-5.0..5.0) * s, rng.gen_range(-5.0..5.0) * s],
                ],
            },
        };
        let scene = SceneSpec {
            name: format!("scene_{index:04}_{}", kind_name(kind)),
            grid,
            motion,
            texture_seed: rng.gen(),
            background,
        };
        let mut probe = ChaCha8Rng::seed_from_u64(scene.texture_seed);
        if let Ok(l) = layout(&scene, &mut probe) {
            if check_in_frame(&grid, &l.parts).is_ok() {
                return scene;
            }
        }
    }
}

pub fn kind_name(kind: SceneKind) -> &'static str {
    match kind {
        SceneKind::Translate => "translate",
        SceneKind::Rotate => "rotate",
        SceneKind::ArticulatedArm => "articulated_arm",
        SceneKind::TwoBlobs => "two_blobs",
    }
}

/// Deterministic benchmark list on 64×64 grids: 40% articulated arms and
/// 20% of each other kind, in a seeded order.
pub fn benchmark_suite(seed: u64, count: usize) -> Vec<SceneSpec> {
    benchmark_suite_on(
        seed,
        count,
        GridSpec {
            height: 64,
            width: 64,
        },
    )
}

pub fn benchmark_suite_on(seed: u64, count: usize, grid: GridSpec) -> Vec<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arms = (0.4 * count as f64).round() as usize;
    let mut kinds: Vec<SceneKind> = vec![SceneKind::ArticulatedArm; arms];
    let others = [SceneKind::Translate, SceneKind::Rotate, SceneKind::TwoBlobs];
    for i in 0..count - arms {
        kinds.push(others[i % 3]);
    }
    // Fisher–Yates with the seeded generator
    for i in (1..kinds.len()).rev() {
        let j = rng.gen_range(0..=i);
        kinds.swap(i, j);
    }
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| sample_scene(kind, grid, i, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::warp_image;

    fn grid64() -> GridSpec {
        GridSpec::new(64, 64).unwrap()
    }

    #[test]
    fn zero_translation_is_static() {
        let (src, drv, gt) = render_scene(&SceneSpec::translate(grid64(), [0.0, 0.0])).unwrap();
        assert_eq!(src, drv);
        assert_eq!(gt.flow, FlowField::identity(grid64()));
    }

    #[test]
    fn translation_ground_truth_points_four_pixels_left() {
        let g = grid64();
        let (_, _, gt) = render_scene(&SceneSpec::translate(g, [4.0, 0.0])).unwrap();
        let mut fg = 0;
        for row in 0..64 {
            for col in 0..64 {
                let v = gt.flow.at(row, col);
                let (r, c) = g.norm_to_pixel(v);
                if gt.foreground[row * 64 + col] {
                    fg += 1;
                    assert!((c - (col as f64 - 4.0)).abs() < 1e-9);
                    assert!((r - row as f64).abs() < 1e-9);
                }
            }
        }
        assert!(fg > 100, "{fg}");
    }

    #[test]
    fn quarter_turn_moves_joint_by_ninety_degrees() {
        let g = grid64();
        let scene = SceneSpec::rotate(g, 90.0);
        let (_, _, gt) = render_scene(&scene).unwrap();
        let pivot = Point2::new(31.5, 31.5);
        let js = to_px(&g, gt.joints_source[1]) - pivot;
        let jd = to_px(&g, gt.joints_driving[1]) - pivot;
        assert!((js.norm() - jd.norm()).abs() < 1e-9);
        // source joint at angle 0 lands at angle 90
        assert!(js.y.abs() < 1e-9 && js.x > 0.0);
        assert!(jd.x.abs() < 1e-9 && (jd.y - js.x).abs() < 1e-9);
    }

    #[test]
    fn driving_joints_map_back_to_source_joints() {
        for scene in benchmark_suite(11, 10) {
            let (_, _, gt) = render_scene(&scene).unwrap();
            for j in 0..gt.joints_driving.len() {
                let back = gt.joint_source_of(j);
                assert!(
                    (back - gt.joints_source[j]).norm() < 1e-9,
                    "{}: joint {j}",
                    scene.name
                );
            }
        }
    }

    #[test]
    fn warping_source_with_ground_truth_reproduces_driving() {
        for scene in benchmark_suite(5, 10) {
            let (src, drv, gt) = render_scene(&scene).unwrap();
            let warped = warp_image(&src, &gt.flow);
            let n = scene.grid.len();
            let mut worst: f64 = 0.0;
            for i in (0..n).filter(|&i| gt.foreground[i]) {
                for c in 0..3 {
                    worst = worst.max((warped.channel(c)[i] - drv.channel(c)[i]).abs());
                }
            }
            assert!(worst < 1e-3, "{}: {worst}", scene.name);
        }
    }

    #[test]
    fn suite_is_deterministic_and_mixed() {
        let a = benchmark_suite(1, 20);
        assert_eq!(a, benchmark_suite(1, 20));
        assert_ne!(a, benchmark_suite(2, 20));
        let arms = |s: &[SceneSpec]| {
            s.iter()
                .filter(|x| x.kind() == SceneKind::ArticulatedArm)
                .count()
        };
        assert_eq!(arms(&a), 8);
        for kind in [SceneKind::Translate, SceneKind::Rotate, SceneKind::TwoBlobs] {
            assert_eq!(a.iter().filter(|x| x.kind() == kind).count(), 4);
        }
        assert_eq!(arms(&benchmark_suite(9, 5)), 2);
    }

    #[test]
    fn whole_suite_renders_in_frame() {
        for seed in 0..5 {
            for scene in benchmark_suite(seed, 20) {
                let (_, _, gt) = render_scene(&scene).unwrap();
                assert!(gt.foreground.iter().any(|&b| b), "{}", scene.name);
            }
        }
    }

    #[test]
    fn out_of_frame_motion_is_rejected() {
        let scene = SceneSpec::translate(grid64(), [40.0, 0.0]);
        assert!(matches!(
            render_scene(&scene),
            Err(DamError::MotionOutOfFrame(_))
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = SceneSpec::arm(grid64());
        let (a, b, _) = render_scene(&scene).unwrap();
        let (c, d, _) = render_scene(&scene).unwrap();
        assert_eq!((a, b), (c, d));
    }

    #[test]
    fn scene_spec_serializes() {
        let s = SceneSpec::arm(grid64());
        let text = serde_json::to_string(&s).unwrap();
        let back: SceneSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
