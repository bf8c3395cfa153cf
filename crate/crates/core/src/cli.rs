//! The `damflow` command-line tool.
//!
//! Exit codes: 0 success, 2 I/O or file format, 3 non-finite loss,
//! 4 invalid configuration (including unknown flags), 5 dimension mismatch.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{DamError, Result};
use crate::fit::{fit_pair_with_log, gradient_check_detailed, perturbed_state, FitConfig, Problem};
use crate::flow::AnchorSet;
use crate::geometry::{GridSpec, Point2};
use crate::io;
use crate::losses::Mode;
use crate::metrics::{evaluate_scene, EvalReport, SceneInputs};
use crate::structure::attention_from_logits;
use crate::synth::{benchmark_suite_on, render_scene, SceneSpec};
use crate::warp::{warp_image, ImageGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_INVALID_CONFIG: i32 = 4;
pub const EXIT_DIMENSION: i32 = 5;
/// Gradient check ran but exceeded its tolerance.
pub const EXIT_CHECK_FAILED: i32 = 1;

/// Tolerance of the `gradcheck` subcommand.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "damflow", version, about = "Deformable-anchor motion flows")]
pub struct Cli {
    /// Print per-iteration progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render synthetic benchmark scenes with ground truth.
    Synth(SynthArgs),
    /// Fit anchors and masks to a source/driving pair.
    Fit(FitArgs),
    /// Warp an image with a flow file.
    Warp(WarpArgs),
    /// Evaluate a predicted flow against ground truth.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a synthetic scene.
    Gradcheck(GradcheckArgs),
    /// Draw the anchor hierarchy of a checkpoint onto an image.
    Viz(VizArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub count: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Side length of the square scenes in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    None,
    Dam,
    Hdam,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::None => Mode::None,
            ModeArg::Dam => Mode::Dam,
            ModeArg::Hdam => Mode::Hdam,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub drv: PathBuf,
    #[arg(long, value_enum, default_value = "dam")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 10)]
    pub anchors: usize,
    #[arg(long, default_value_t = 3)]
    pub intermediates: usize,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the checkpoint, masks, flow and loss log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub no_equivariance: bool,
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub flow: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred_flow: PathBuf,
    #[arg(long)]
    pub gt_flow: PathBuf,
    /// Joints document written by `synth` (joints and foreground).
    #[arg(long)]
    pub joints: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 64)]
    pub probes: usize,
    /// Check a single mode instead of all three.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(err: &DamError) -> i32 {
    match err {
        DamError::Io { .. } | DamError::Format { .. } => EXIT_IO,
        DamError::NonFiniteLoss { .. } => EXIT_NON_FINITE,
        DamError::DimensionMismatch(_)
        | DamError::MaskNotNormalized { .. }
        | DamError::EmptyForeground => EXIT_DIMENSION,
        DamError::InvalidConfig(_)
        | DamError::InvalidGrid(_)
        | DamError::TooManyLevels { .. }
        | DamError::MissingRoot
        | DamError::IndexOutOfRange { .. }
        | DamError::SingularTransform { .. }
        | DamError::MotionOutOfFrame(_) => EXIT_INVALID_CONFIG,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID_CONFIG
            } else {
                EXIT_OK
            };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("damflow: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Fit(a) => cmd_fit(a, cli.verbose),
        Command::Warp(a) => cmd_warp(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    name: String,
    kind: String,
    files: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    seed: u64,
    count: usize,
    scenes: Vec<ManifestEntry>,
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| DamError::io(path, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<i32> {
    if a.count == 0 {
        return Err(DamError::InvalidConfig("--count must be at least 1".into()));
    }
    let grid = GridSpec::new(a.size, a.size)?;
    create_dir(&a.out_dir)?;
    let mut scenes = Vec::with_capacity(a.count);
    for scene in benchmark_suite_on(a.seed, a.count, grid) {
        let (src, drv, gt) = render_scene(&scene)?;
        let files = [
            format!("{}_src.ppm", scene.name),
            format!("{}_drv.ppm", scene.name),
            format!("{}_gt_flow.damf", scene.name),
            format!("{}_joints.json", scene.name),
            format!("{}_scene.json", scene.name),
        ];
        let at = |f: &str| a.out_dir.join(f);
        io::write_pnm(&at(&files[0]), &src)?;
        io::write_pnm(&at(&files[1]), &drv)?;
        io::write_flow(&at(&files[2]), &gt.flow)?;
        let joints =
            io::JointsDoc::new(&gt.joints_source, &gt.joints_driving, grid, &gt.foreground);
        io::write_json(&at(&files[3]), &joints)?;
        io::write_json(&at(&files[4]), &scene)?;
        scenes.push(ManifestEntry {
            name: scene.name.clone(),
            kind: crate::synth::kind_name(scene.kind()).to_string(),
            files: files.to_vec(),
        });
    }
    io::write_json(
        &a.out_dir.join("manifest.json"),
        &Manifest {
            seed: a.seed,
            count: a.count,
            scenes,
        },
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_fit(a: &FitArgs, verbose: u8) -> Result<i32> {
    let mut config = FitConfig {
        anchors: a.anchors,
        intermediates: a.intermediates,
        mode: a.mode.into(),
        iterations: a.iters,
        seed: a.seed,
        equivariance: !a.no_equivariance,
        ..FitConfig::default()
    };
    if let Some(s) = a.step_size {
        config.step_size = s;
    }
    config.validate()?;
    let src = io::read_pnm(&a.src)?;
    let drv = io::read_pnm(&a.drv)?;
    create_dir(&a.out)?;

    let mut log = String::new();
    let state = fit_pair_with_log(&src, &drv, &config, &mut |it, r| {
        let line = r.log_line(it);
        if verbose > 0 {
            eprintln!("{line}");
        }
        log.push_str(&line);
        log.push('\n');
    })?;
    let spec = src.spec();
    let final_mode = crate::fit::phase_mode(&config, config.iterations);
    let final_report = Problem::new(&src, &drv, &config)?
        .evaluate(&state, final_mode, false)?
        .report;

    io::write_file(
        &a.out.join("anchors.json"),
        io::anchor_document(&state.anchors, &state.attention_logits).as_bytes(),
    )?;
    io::write_masks(&a.out.join("masks.damm"), &state.masks(spec, &config))?;
    io::write_flow(&a.out.join("flow.damf"), &state.flow(spec, &config)?)?;
    io::write_file(&a.out.join("log.jsonl"), log.as_bytes())?;
    println!("{}", final_report.log_line(config.iterations));
    Ok(EXIT_OK)
}

pub fn cmd_warp(a: &WarpArgs) -> Result<i32> {
    let src = io::read_pnm(&a.src)?;
    let flow = io::read_flow(&a.flow)?;
    if flow.spec() != src.spec() {
        return Err(DamError::DimensionMismatch(format!(
            "image is {}x{}, flow is {}x{}",
            src.spec().height,
            src.spec().width,
            flow.spec().height,
            flow.spec().width
        )));
    }
    io::write_pnm(&a.out, &warp_image(&src, &flow))?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let pred = io::read_flow(&a.pred_flow)?;
    let gt = io::read_flow(&a.gt_flow)?;
    let joints: io::JointsDoc = io::read_json(&a.joints)?;
    let generated = io::read_pnm(&a.generated)?;
    let target = io::read_pnm(&a.target)?;
    let foreground = joints.foreground_mask(gt.spec(), &a.joints)?;
    let name = a
        .pred_flow
        .file_stem()
        .map_or_else(|| "scene".to_string(), |s| s.to_string_lossy().into_owned());
    let scene = evaluate_scene(
        &name,
        &SceneInputs {
            generated: &generated,
            target: &target,
            pred: &pred,
            gt: &gt,
            foreground: &foreground,
            source_joints: &joints.source_points(),
            driving_joints: &joints.driving_points(),
        },
    )?;
    let report = EvalReport::from_scenes(vec![scene]);
    io::write_file(&a.report, report.to_json().as_bytes())?;
    print!("{}", report.to_table());
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Result<i32> {
    if a.probes == 0 {
        return Err(DamError::InvalidConfig(
            "--probes must be at least 1".into(),
        ));
    }
    let (src, drv, _) = render_scene(&SceneSpec::arm(GridSpec::new(a.size, a.size)?))?;
    let modes = match a.mode {
        Some(m) => vec![Mode::from(m)],
        None => vec![Mode::None, Mode::Dam, Mode::Hdam],
    };
    let mut worst: f64 = 0.0;
    for mode in modes {
        let config = FitConfig {
            mode,
            seed: a.seed,
            ..FitConfig::default()
        };
        let state = perturbed_state(&config, src.spec())?;
        let r = gradient_check_detailed(&state, &src, &drv, &config, a.probes)?;
        println!(
            "mode={mode} max_rel_error={:.3e} checked={} skipped={}",
            r.max_error, r.checked, r.skipped
        );
        worst = worst.max(r.max_error);
    }
    println!("max_rel_error={worst:.3e}");
    Ok(if worst < GRADCHECK_TOLERANCE {
        EXIT_OK
    } else {
        EXIT_CHECK_FAILED
    })
}

const ROOT_COLOR: [f64; 3] = [1.0, 0.15, 0.1];
const INTERMEDIATE_COLOR: [f64; 3] = [0.1, 0.9, 0.2];
const MOTION_COLOR: [f64; 3] = [0.2, 0.45, 1.0];
const LINE_COLOR: [f64; 3] = [1.0, 1.0, 0.6];

fn to_rgb(img: &ImageGrid) -> ImageGrid {
    match img.channels() {
        3 => img.clone(),
        _ => ImageGrid::from_fn(img.spec(), 3, |_, r, c| img.get(0, r, c)),
    }
}

fn paint(img: &mut ImageGrid, row: isize, col: isize, color: [f64; 3]) {
    let spec = img.spec();
    if row < 0 || col < 0 || row as usize >= spec.height || col as usize >= spec.width {
        return;
    }
    for (c, v) in color.iter().enumerate() {
        img.set(c, row as usize, col as usize, *v);
    }
}

fn draw_disc(img: &mut ImageGrid, center: Point2, radius: f64, color: [f64; 3]) {
    let (r0, c0) = img.spec().norm_to_pixel(center);
    let reach = radius.ceil() as isize;
    for dr in -reach..=reach {
        for dc in -reach..=reach {
            let (r, c) = (r0.round() as isize + dr, c0.round() as isize + dc);
            let d = ((r as f64 - r0).powi(2) + (c as f64 - c0).powi(2)).sqrt();
            if d <= radius {
                paint(img, r, c, color);
            }
        }
    }
}

fn draw_line(img: &mut ImageGrid, a: Point2, b: Point2, color: [f64; 3]) {
    let spec = img.spec();
    let (ra, ca) = spec.norm_to_pixel(a);
    let (rb, cb) = spec.norm_to_pixel(b);
    let steps = (rb - ra).abs().max((cb - ca).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        paint(
            img,
            (ra + t * (rb - ra)).round() as isize,
            (ca + t * (cb - ca)).round() as isize,
            color,
        );
    }
}

/// Overlays the hierarchy: lines from each motion anchor to its
/// highest-attention intermediate and from each intermediate to the root,
/// then small, medium and large dots for motion, intermediate and root
/// anchors, all at their driving-frame positions.
pub fn render_hierarchy(
    image: &ImageGrid,
    anchors: &AnchorSet,
    attention_logits: &[Vec<f64>],
) -> Result<ImageGrid> {
    let mut out = to_rgb(image);
    let spec = out.spec();
    let unit = (spec.height.min(spec.width) as f64 / 64.0).max(1.0);
    let k = anchors.num_motion();
    let has_attention =
        !anchors.intermediates.is_empty() && attention_logits.len() == anchors.intermediates.len();
    if has_attention && attention_logits.iter().any(|r| r.len() != k) {
        return Err(DamError::DimensionMismatch(
            "attention logits do not match the anchors".into(),
        ));
    }
    if let Some(root) = &anchors.root {
        for a in &anchors.intermediates {
            draw_line(&mut out, a.pos_d, root.pos_d, LINE_COLOR);
        }
        if !has_attention {
            for m in &anchors.motion {
                draw_line(&mut out, m.pos_d, root.pos_d, LINE_COLOR);
            }
        }
    }
    if has_attention {
        let attn = attention_from_logits(attention_logits);
        for (j, m) in anchors.motion.iter().enumerate() {
            let i = attn.argmax_column(j);
            draw_line(
                &mut out,
                m.pos_d,
                anchors.intermediates[i].pos_d,
                LINE_COLOR,
            );
        }
    }
    for m in &anchors.motion {
        draw_disc(&mut out, m.pos_d, 1.5 * unit, MOTION_COLOR);
    }
    for a in &anchors.intermediates {
        draw_disc(&mut out, a.pos_d, 2.5 * unit, INTERMEDIATE_COLOR);
    }
    if let Some(root) = &anchors.root {
        draw_disc(&mut out, root.pos_d, 4.0 * unit, ROOT_COLOR);
    }
    Ok(out)
}

pub fn cmd_viz(a: &VizArgs) -> Result<i32> {
    let (anchors, logits) = io::read_anchor_document(&a.checkpoint)?;
    let image = io::read_pnm(&a.image)?;
    io::write_pnm(&a.out, &render_hierarchy(&image, &anchors, &logits)?)?;
    Ok(EXIT_OK)
}
