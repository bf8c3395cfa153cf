//! Bilinear backward warping and image pyramids.
//!
//! Warping is done in pixel space: every output pixel samples the source image
//! at the location the backward flow points to. Sampling outside the frame
//! clamps to the nearest edge pixel.

use crate::error::{DamError, Result};
use crate::flow::FlowField;
use crate::geometry::{norm_to_pixel, GridSpec, Point2};

/// Channel-major `C×H×W` raster. Values are nominally in `[0, 1]`; only the
/// I/O layer clamps, so intermediate grids (logits, gradients) may hold any
/// finite value.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    spec: GridSpec,
    channels: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(spec: GridSpec, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(DamError::DimensionMismatch(
                "image must have at least one channel".into(),
            ));
        }
        if values.len() != channels * spec.len() {
            return Err(DamError::DimensionMismatch(format!(
                "{} values for a {}x{}x{} image",
                values.len(),
                channels,
                spec.height,
                spec.width
            )));
        }
        Ok(ImageGrid {
            spec,
            channels,
            values,
        })
    }

    pub fn filled(spec: GridSpec, channels: usize, value: f64) -> Self {
        ImageGrid {
            spec,
            channels,
            values: vec![value; channels * spec.len()],
        }
    }

    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        Self::filled(spec, channels, 0.0)
    }

    pub fn from_fn(
        spec: GridSpec,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(channels * spec.len());
        for c in 0..channels {
            for r in 0..spec.height {
                for col in 0..spec.width {
                    values.push(f(c, r, col));
                }
            }
        }
        ImageGrid {
            spec,
            channels,
            values,
        }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spec.len();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spec.len();
        &mut self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.values[(c * self.spec.height + row) * self.spec.width + col]
    }

    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        let w = self.spec.width;
        let h = self.spec.height;
        self.values[(c * h + row) * w + col] = v;
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.spec == other.spec && self.channels == other.channels
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Distance (in pixels) below which a sample coordinate snaps onto a pixel
/// center, so that identity flows reproduce the source exactly.
const SNAP_PX: f64 = 1e-9;

/// The four bilinear taps of a sample point, with the weight derivatives
/// with respect to the normalized sample coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub dweight_dx: [f64; 4],
    pub dweight_dy: [f64; 4],
}

fn split_coordinate(v: f64, n: usize) -> (usize, usize, f64) {
    let rounded = v.round();
    let v = if (v - rounded).abs() < SNAP_PX {
        rounded
    } else {
        v
    };
    let base = v.floor();
    let frac = v - base;
    let max = (n - 1) as isize;
    // `as` saturates for huge magnitudes and maps NaN to 0
    let b = base as isize;
    let lo = b.clamp(0, max) as usize;
    let hi = b.saturating_add(1).clamp(0, max) as usize;
    (lo, hi, frac)
}

pub fn bilinear_taps(spec: &GridSpec, p: Point2) -> Taps {
    let (row, col) = norm_to_pixel(spec, p);
    let (r0, r1, fr) = split_coordinate(row, spec.height);
    let (c0, c1, fc) = split_coordinate(col, spec.width);
    let w = spec.width;
    let sx = spec.px_per_unit_x();
    let sy = spec.px_per_unit_y();
    Taps {
        index: [r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1],
        weight: [
            (1.0 - fr) * (1.0 - fc),
            (1.0 - fr) * fc,
            fr * (1.0 - fc),
            fr * fc,
        ],
        dweight_dx: [-(1.0 - fr) * sx, (1.0 - fr) * sx, -fr * sx, fr * sx],
        dweight_dy: [-(1.0 - fc) * sy, -fc * sy, (1.0 - fc) * sy, fc * sy],
    }
}

impl Taps {
    pub fn sample(&self, plane: &[f64]) -> f64 {
        self.weight[0] * plane[self.index[0]]
            + self.weight[1] * plane[self.index[1]]
            + self.weight[2] * plane[self.index[2]]
            + self.weight[3] * plane[self.index[3]]
    }

    pub fn gradient(&self, plane: &[f64]) -> Point2 {
        let mut g = Point2::ZERO;
        for t in 0..4 {
            let v = plane[self.index[t]];
            g.x += self.dweight_dx[t] * v;
            g.y += self.dweight_dy[t] * v;
        }
        g
    }

    pub fn scatter(&self, plane: &mut [f64], value: f64) {
        for t in 0..4 {
            plane[self.index[t]] += self.weight[t] * value;
        }
    }
}

pub fn bilinear_sample(img: &ImageGrid, p: Point2) -> Vec<f64> {
    let taps = bilinear_taps(&img.spec, p);
    (0..img.channels)
        .map(|c| taps.sample(img.channel(c)))
        .collect()
}

pub fn warp_image(src: &ImageGrid, flow: &FlowField) -> ImageGrid {
    let out_spec = flow.spec();
    let n = out_spec.len();
    let mut values = vec![0.0; src.channels * n];
    for (i, &p) in flow.vectors().iter().enumerate() {
        let taps = bilinear_taps(&src.spec, p);
        for c in 0..src.channels {
            values[c * n + i] = taps.sample(src.channel(c));
        }
    }
    ImageGrid {
        spec: out_spec,
        channels: src.channels,
        values,
    }
}

/// Gradient of a scalar loss with respect to the flow vectors, given the
/// loss gradient with respect to the warped output.
pub fn warp_image_backward(src: &ImageGrid, flow: &FlowField, grad_out: &ImageGrid) -> Vec<Point2> {
    let n = flow.spec().len();
    flow.vectors()
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let taps = bilinear_taps(&src.spec, p);
            let mut g = Point2::ZERO;
            for c in 0..src.channels {
                let go = grad_out.values[c * n + i];
                if go != 0.0 {
                    g += taps.gradient(src.channel(c)) * go;
                }
            }
            g
        })
        .collect()
}

const KERNEL: [f64; 3] = [0.25, 0.5, 0.25];

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

fn filter_rows(plane: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..w {
            let ci = c as isize;
            out[r * w + c] = KERNEL[0] * row[reflect(ci - 1, w)]
                + KERNEL[1] * row[c]
                + KERNEL[2] * row[reflect(ci + 1, w)];
        }
    }
}

fn filter_cols(plane: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for r in 0..h {
        let ri = r as isize;
        let up = reflect(ri - 1, h);
        let down = reflect(ri + 1, h);
        for c in 0..w {
            out[r * w + c] = KERNEL[0] * plane[up * w + c]
                + KERNEL[1] * plane[r * w + c]
                + KERNEL[2] * plane[down * w + c];
        }
    }
}

fn filter_rows_adjoint(grad: &[f64], h: usize, w: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..h {
        for c in 0..w {
            let g = grad[r * w + c];
            if g == 0.0 {
                continue;
            }
            let ci = c as isize;
            out[r * w + reflect(ci - 1, w)] += KERNEL[0] * g;
            out[r * w + c] += KERNEL[1] * g;
            out[r * w + reflect(ci + 1, w)] += KERNEL[2] * g;
        }
    }
}

fn filter_cols_adjoint(grad: &[f64], h: usize, w: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..h {
        let ri = r as isize;
        let up = reflect(ri - 1, h);
        let down = reflect(ri + 1, h);
        for c in 0..w {
            let g = grad[r * w + c];
            if g == 0.0 {
                continue;
            }
            out[up * w + c] += KERNEL[0] * g;
            out[r * w + c] += KERNEL[1] * g;
            out[down * w + c] += KERNEL[2] * g;
        }
    }
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Grid sizes of every pyramid level, or `TooManyLevels`.
pub fn pyramid_specs(spec: GridSpec, levels: usize) -> Result<Vec<GridSpec>> {
    if levels == 0 {
        return Err(DamError::TooManyLevels {
            levels,
            height: spec.height,
            width: spec.width,
        });
    }
    let mut specs = vec![spec];
    for _ in 1..levels {
        let last = specs[specs.len() - 1];
        let (h, w) = (half(last.height), half(last.width));
        if h < 2 || w < 2 {
            return Err(DamError::TooManyLevels {
                levels,
                height: spec.height,
                width: spec.width,
            });
        }
        specs.push(GridSpec {
            height: h,
            width: w,
        });
    }
    Ok(specs)
}

fn downsample_once(img: &ImageGrid) -> ImageGrid {
    let (h, w) = (img.spec.height, img.spec.width);
    let spec = GridSpec {
        height: half(h),
        width: half(w),
    };
    let mut tmp = vec![0.0; h * w];
    let mut filtered = vec![0.0; h * w];
    let mut values = Vec::with_capacity(img.channels * spec.len());
    for c in 0..img.channels {
        filter_rows(img.channel(c), h, w, &mut tmp);
        filter_cols(&tmp, h, w, &mut filtered);
        for r in (0..h).step_by(2) {
            for col in (0..w).step_by(2) {
                values.push(filtered[r * w + col]);
            }
        }
    }
    ImageGrid {
        spec,
        channels: img.channels,
        values,
    }
}

fn downsample_once_adjoint(grad: &ImageGrid, fine: GridSpec) -> ImageGrid {
    let (h, w) = (fine.height, fine.width);
    let cw = grad.spec.width;
    let mut up = vec![0.0; h * w];
    let mut tmp = vec![0.0; h * w];
    let mut values = vec![0.0; grad.channels * fine.len()];
    for c in 0..grad.channels {
        up.iter_mut().for_each(|v| *v = 0.0);
        let g = grad.channel(c);
        for r in (0..h).step_by(2) {
            for col in (0..w).step_by(2) {
                up[r * w + col] = g[(r / 2) * cw + col / 2];
            }
        }
        filter_cols_adjoint(&up, h, w, &mut tmp);
        filter_rows_adjoint(&tmp, h, w, &mut values[c * h * w..(c + 1) * h * w]);
    }
    ImageGrid {
        spec: fine,
        channels: grad.channels,
        values,
    }
}

/// Level 0 is the input; each further level is smoothed with the separable
/// `[1 2 1]/4` kernel (mirrored at the border) and decimated by 2.
pub fn downsample_pyramid(img: &ImageGrid, levels: usize) -> Result<Vec<ImageGrid>> {
    pyramid_specs(img.spec, levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = downsample_once(&out[out.len() - 1]);
        out.push(next);
    }
    Ok(out)
}

/// Pulls per-level gradients back to a single gradient on level 0.
pub fn pyramid_adjoint(level_grads: &[ImageGrid], specs: &[GridSpec]) -> ImageGrid {
    let mut acc = level_grads[level_grads.len() - 1].clone();
    for l in (1..level_grads.len()).rev() {
        let mut finer = downsample_once_adjoint(&acc, specs[l - 1]);
        for (v, g) in finer.values.iter_mut().zip(&level_grads[l - 1].values) {
            *v += g;
        }
        acc = finer;
    }
    acc
}
