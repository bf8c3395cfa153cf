//! Reconstruction and equivariance objectives, and their weighted totals.
//!
//! The reconstruction term is a pixel-space image pyramid of mean absolute
//! differences, normalized per level by `1/(C·H_l·W_l)`. It stands in for a
//! multi-layer perceptual loss, which would need a pretrained network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};
use crate::geometry::{invert_affine, Affine2, Mat2, Point2};
use crate::numeric::Accumulator;
use crate::structure::NormKind;
use crate::warp::{downsample_pyramid, pyramid_adjoint, pyramid_specs, ImageGrid};

/// Which structure prior regularizes the motion anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Unregularized anchors.
    None,
    /// Root anchor only.
    Dam,
    /// Root plus intermediate anchors.
    Hdam,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::None => "none",
            Mode::Dam => "dam",
            Mode::Hdam => "hdam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_equi: f64,
    pub w_dam: f64,
    pub w_hdam: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_rec: 1.0,
            w_equi: 1.0,
            w_dam: 1.0,
            w_hdam: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_rec", self.w_rec),
            ("w_equi", self.w_equi),
            ("w_dam", self.w_dam),
            ("w_hdam", self.w_hdam),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(DamError::InvalidConfig(format!(
                    "{name} = {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub reconstruction: f64,
    pub equivariance: f64,
    pub dam: f64,
    pub hdam: f64,
}

/// Weighted total plus the components that produced it. The component of
/// the inactive structure prior is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: LossComponents,
}

impl LossReport {
    /// One fitting-log line: `{"iter":n,"total":…,"rec":…,"equi":…,"dam":…,"hdam":…}`.
    pub fn log_line(&self, iter: usize) -> String {
        #[derive(Serialize)]
        struct Line {
            iter: usize,
            total: f64,
            rec: f64,
            equi: f64,
            dam: f64,
            hdam: f64,
        }
        let line = Line {
            iter,
            total: self.total,
            rec: self.components.reconstruction,
            equi: self.components.equivariance,
            dam: self.components.dam,
            hdam: self.components.hdam,
        };
        serde_json::to_string(&line).expect("plain struct serializes")
    }
}

pub fn total_loss(components: LossComponents, weights: &LossWeights, mode: Mode) -> LossReport {
    let mut c = components;
    match mode {
        Mode::None => {
            c.dam = 0.0;
            c.hdam = 0.0;
        }
        Mode::Dam => c.hdam = 0.0,
        Mode::Hdam => c.dam = 0.0,
    }
    let total = weights.w_rec * c.reconstruction
        + weights.w_equi * c.equivariance
        + weights.w_dam * c.dam
        + weights.w_hdam * c.hdam;
    LossReport {
        total,
        components: c,
    }
}

fn check_pair(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if !a.same_shape(b) {
        return Err(DamError::DimensionMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.spec().height,
            a.spec().width,
            b.channels(),
            b.spec().height,
            b.spec().width
        )));
    }
    Ok(())
}

pub fn reconstruction_loss(
    generated: &ImageGrid,
    target: &ImageGrid,
    levels: usize,
) -> Result<f64> {
    check_pair(generated, target)?;
    let g = downsample_pyramid(generated, levels)?;
    let t = downsample_pyramid(target, levels)?;
    let mut total = 0.0;
    for (gl, tl) in g.iter().zip(&t) {
        let mut acc = Accumulator::default();
        for (a, b) in gl.values().iter().zip(tl.values()) {
            acc.add((a - b).abs());
        }
        total += acc.value() / gl.values().len() as f64;
    }
    Ok(total)
}

/// Reconstruction loss with its gradient with respect to `generated`.
/// `target_pyramid` must come from [`downsample_pyramid`] on the target.
pub fn reconstruction_loss_grad(
    generated: &ImageGrid,
    target_pyramid: &[ImageGrid],
) -> Result<(f64, ImageGrid)> {
    check_pair(generated, &target_pyramid[0])?;
    let levels = target_pyramid.len();
    let specs = pyramid_specs(generated.spec(), levels)?;
    let g = downsample_pyramid(generated, levels)?;
    let mut total = 0.0;
    let mut level_grads = Vec::with_capacity(levels);
    for (gl, tl) in g.iter().zip(target_pyramid) {
        let n = gl.values().len() as f64;
        let mut acc = Accumulator::default();
        let mut grad = ImageGrid::zeros(gl.spec(), gl.channels());
        for ((a, b), out) in gl.values().iter().zip(tl.values()).zip(grad.values_mut()) {
            let d = a - b;
            acc.add(d.abs());
            *out = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
        total += acc.value() / n;
        level_grads.push(grad);
    }
    Ok((total, pyramid_adjoint(&level_grads, &specs)))
}

/// Signs of the per-level residuals, where the absolute value has its kink.
pub fn reconstruction_residual_signs(
    generated: &ImageGrid,
    target_pyramid: &[ImageGrid],
) -> Result<Vec<i8>> {
    let g = downsample_pyramid(generated, target_pyramid.len())?;
    Ok(g.iter()
        .zip(target_pyramid)
        .flat_map(|(gl, tl)| {
            gl.values()
                .iter()
                .zip(tl.values())
                .map(|(a, b)| (a - b).partial_cmp(&0.0).map_or(0, |o| o as i8))
                .collect::<Vec<_>>()
        })
        .collect())
}

pub fn equivariance_loss(
    anchors_on_image: &[Point2],
    anchors_on_transformed: &[Point2],
    t: &Affine2,
) -> Result<f64> {
    equivariance_loss_grad(
        anchors_on_image,
        anchors_on_transformed,
        t,
        NormKind::Euclidean,
    )
    .map(|(v, _)| v)
}

/// Equivariance loss and its gradient with respect to `anchors_on_image`;
/// the transformed-image anchors are treated as constants.
pub fn equivariance_loss_grad(
    anchors_on_image: &[Point2],
    anchors_on_transformed: &[Point2],
    t: &Affine2,
    norm: NormKind,
) -> Result<(f64, Vec<Point2>)> {
    if anchors_on_image.len() != anchors_on_transformed.len() {
        return Err(DamError::DimensionMismatch(format!(
            "{} anchors on the image, {} on the transformed image",
            anchors_on_image.len(),
            anchors_on_transformed.len()
        )));
    }
    let inv = invert_affine(t)?;
    let mut acc = Accumulator::default();
    let grads = anchors_on_image
        .iter()
        .zip(anchors_on_transformed)
        .map(|(&a, &b)| {
            let v = a - inv.apply(b);
            acc.add(norm.value(v));
            norm.gradient(v)
        })
        .collect();
    Ok((acc.value(), grads))
}

/// Sampling ranges for random equivariance transforms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformRanges {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    pub translation: (f64, f64),
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            rotation_deg: (-30.0, 30.0),
            scale: (0.75, 1.25),
            translation: (-0.25, 0.25),
        }
    }
}

impl TransformRanges {
    pub fn identity() -> Self {
        TransformRanges {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            translation: (0.0, 0.0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Random rotation·scale + translation, a pure function of `seed`.
pub fn sample_equivariance_transform(seed: u64, ranges: &TransformRanges) -> Result<Affine2> {
    let (slo, shi) = ranges.scale;
    if slo <= 0.0 && shi >= 0.0 || !(slo.is_finite() && shi.is_finite()) {
        return Err(DamError::InvalidConfig(format!(
            "scale range [{slo}, {shi}] must exclude 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = uniform(&mut rng, ranges.rotation_deg).to_radians();
    let sx = uniform(&mut rng, ranges.scale);
    let sy = uniform(&mut rng, ranges.scale);
    let tx = uniform(&mut rng, ranges.translation);
    let ty = uniform(&mut rng, ranges.translation);
    let linear = Mat2::rotation(angle).mul_mat(&Mat2::diag(sx, sy));
    Ok(Affine2::new(linear, Point2::new(tx, ty)))
}
