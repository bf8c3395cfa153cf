//! Anchor-local affine flows and their mask-weighted blend into one dense
//! backward flow.
//!
//! Each motion anchor `k` defines `T_k(z) = pos_s + θ_k (z − pos_d)`, which
//! maps driving-frame coordinates to source-frame coordinates and sends its
//! own driving position onto its source position. The dense flow is
//! `M_0(z)·z + Σ_k M_k(z)·T_k(z)`: the background channel is tied to the
//! identity flow so that background pixels stay where they are.

use crate::error::{DamError, Result};
use crate::geometry::{GridSpec, Mat2, Point2};
use crate::warp::{bilinear_taps, warp_image, ImageGrid};

/// Tolerance on the per-pixel mask sum.
pub const MASK_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionAnchor {
    /// Position in the driving frame.
    pub pos_d: Point2,
    /// Corresponding position in the source frame.
    pub pos_s: Point2,
    /// Local linear part of the anchor's affine flow.
    pub theta: Mat2,
}

impl MotionAnchor {
    pub fn identity_at(p: Point2) -> Self {
        MotionAnchor {
            pos_d: p,
            pos_s: p,
            theta: Mat2::IDENTITY,
        }
    }

    pub fn zero() -> Self {
        MotionAnchor {
            pos_d: Point2::ZERO,
            pos_s: Point2::ZERO,
            theta: Mat2::ZERO,
        }
    }

    pub fn flow_at(&self, z: Point2) -> Point2 {
        anchor_flow_at(self, z)
    }
}

/// A root or intermediate anchor. It never enters the dense blend; its
/// affine prior `flow_at + θ (p − pos_d)` only feeds the structure losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentAnchor {
    pub pos_d: Point2,
    /// The anchor's own flow value, `T(pos_d)`.
    pub flow_at: Point2,
    pub theta: Mat2,
}

impl LatentAnchor {
    pub fn identity_at(p: Point2) -> Self {
        LatentAnchor {
            pos_d: p,
            flow_at: p,
            theta: Mat2::IDENTITY,
        }
    }

    pub fn zero() -> Self {
        LatentAnchor {
            pos_d: Point2::ZERO,
            flow_at: Point2::ZERO,
            theta: Mat2::ZERO,
        }
    }

    pub fn prior_at(&self, p: Point2) -> Point2 {
        self.flow_at + self.theta.mul_point(p - self.pos_d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub motion: Vec<MotionAnchor>,
    pub root: Option<LatentAnchor>,
    pub intermediates: Vec<LatentAnchor>,
}

fn in_unit_box(p: Point2) -> bool {
    p.is_finite() && (-1.0..=1.0).contains(&p.x) && (-1.0..=1.0).contains(&p.y)
}

impl AnchorSet {
    pub fn num_motion(&self) -> usize {
        self.motion.len()
    }

    pub fn num_intermediates(&self) -> usize {
        self.intermediates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.motion.is_empty() {
            return Err(DamError::InvalidConfig(
                "at least one motion anchor is required".into(),
            ));
        }
        if !self.intermediates.is_empty() && self.root.is_none() {
            return Err(DamError::MissingRoot);
        }
        for (k, a) in self.motion.iter().enumerate() {
            if !in_unit_box(a.pos_d) || !in_unit_box(a.pos_s) || !a.theta.is_finite() {
                return Err(DamError::InvalidConfig(format!(
                    "motion anchor {k} is outside [-1,1]² or not finite"
                )));
            }
        }
        for (i, a) in self.root.iter().chain(&self.intermediates).enumerate() {
            if !in_unit_box(a.pos_d) || !a.flow_at.is_finite() || !a.theta.is_finite() {
                return Err(DamError::InvalidConfig(format!(
                    "latent anchor {i} is outside [-1,1]² or not finite"
                )));
            }
        }
        Ok(())
    }

    /// A zero-valued set with the same shape, used as a gradient buffer.
    pub fn zeros_like(&self) -> AnchorSet {
        AnchorSet {
            motion: vec![MotionAnchor::zero(); self.motion.len()],
            root: self.root.map(|_| LatentAnchor::zero()),
            intermediates: vec![LatentAnchor::zero(); self.intermediates.len()],
        }
    }

    /// Number of scalars in the flattened parameter vector.
    pub fn param_count(&self) -> usize {
        8 * (self.motion.len() + self.root.iter().count() + self.intermediates.len())
    }

    /// Flattens in the order motion anchors, root, intermediates; each anchor
    /// as `pos_d.x, pos_d.y, pos_s|flow_at .x, .y, θ00, θ01, θ10, θ11`.
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        let push = |out: &mut Vec<f64>, a: Point2, b: Point2, t: &Mat2| {
            out.extend_from_slice(&[a.x, a.y, b.x, b.y]);
            out.extend_from_slice(&t.entries());
        };
        for m in &self.motion {
            push(out, m.pos_d, m.pos_s, &m.theta);
        }
        for l in self.root.iter().chain(&self.intermediates) {
            push(out, l.pos_d, l.flow_at, &l.theta);
        }
    }

    /// Inverse of [`AnchorSet::write_flat`]; returns the number of values read.
    pub fn read_flat(&mut self, values: &[f64]) -> usize {
        let mut i = 0;
        let mut take = |n: usize| {
            let s = &values[i..i + n];
            i += n;
            s
        };
        for m in &mut self.motion {
            let v = take(8);
            m.pos_d = Point2::new(v[0], v[1]);
            m.pos_s = Point2::new(v[2], v[3]);
            m.theta = Mat2::from_entries([v[4], v[5], v[6], v[7]]);
        }
        for l in self.root.iter_mut().chain(self.intermediates.iter_mut()) {
            let v = take(8);
            l.pos_d = Point2::new(v[0], v[1]);
            l.flow_at = Point2::new(v[2], v[3]);
            l.theta = Mat2::from_entries([v[4], v[5], v[6], v[7]]);
        }
        i
    }
}

/// Dense backward flow: `vectors[row * width + col]` is the source-frame
/// position for the driving-frame pixel center at `(row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    spec: GridSpec,
    vectors: Vec<Point2>,
}

impl FlowField {
    pub fn new(spec: GridSpec, vectors: Vec<Point2>) -> Result<Self> {
        if vectors.len() != spec.len() {
            return Err(DamError::DimensionMismatch(format!(
                "{} vectors for a {}x{} flow",
                vectors.len(),
                spec.height,
                spec.width
            )));
        }
        Ok(FlowField { spec, vectors })
    }

    pub fn identity(spec: GridSpec) -> Self {
        Self::from_fn(spec, |z| z)
    }

    /// Evaluates `f` at every pixel center.
    pub fn from_fn(spec: GridSpec, f: impl FnMut(Point2) -> Point2) -> Self {
        FlowField {
            spec,
            vectors: spec.centers().map(f).collect(),
        }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn vectors(&self) -> &[Point2] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [Point2] {
        &mut self.vectors
    }

    pub fn at(&self, row: usize, col: usize) -> Point2 {
        self.vectors[row * self.spec.width + col]
    }

    /// Bilinear interpolation of the field at an arbitrary driving position.
    pub fn sample(&self, p: Point2) -> Point2 {
        let taps = bilinear_taps(&self.spec, p);
        let mut out = Point2::ZERO;
        for t in 0..4 {
            out += self.vectors[taps.index[t]] * taps.weight[t];
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.vectors.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel blending weights, channel-major `(K+1)×H×W`; channel 0 is the
/// background.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    spec: GridSpec,
    channels: usize,
    weights: Vec<f64>,
}

impl MaskStack {
    /// Checks shape only; normalization is checked by [`MaskStack::validate`]
    /// and by [`blend_flows`].
    pub fn new(spec: GridSpec, channels: usize, weights: Vec<f64>) -> Result<Self> {
        if channels < 2 {
            return Err(DamError::DimensionMismatch(
                "mask stack needs a background channel and at least one anchor channel".into(),
            ));
        }
        if weights.len() != channels * spec.len() {
            return Err(DamError::DimensionMismatch(format!(
                "{} weights for {} channels of {}x{}",
                weights.len(),
                channels,
                spec.height,
                spec.width
            )));
        }
        Ok(MaskStack {
            spec,
            channels,
            weights,
        })
    }

    /// All mass on one channel.
    pub fn concentrated(spec: GridSpec, channels: usize, channel: usize) -> Self {
        let mut weights = vec![0.0; channels * spec.len()];
        weights[channel * spec.len()..(channel + 1) * spec.len()]
            .iter_mut()
            .for_each(|w| *w = 1.0);
        MaskStack {
            spec,
            channels,
            weights,
        }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_anchors(&self) -> usize {
        self.channels - 1
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spec.len();
        &self.weights[c * n..(c + 1) * n]
    }

    pub fn weight(&self, c: usize, pixel: usize) -> f64 {
        self.weights[c * self.spec.len() + pixel]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.spec.len();
        for i in 0..n {
            let mut sum = 0.0;
            for c in 0..self.channels {
                let w = self.weights[c * n + i];
                if !(-MASK_SUM_TOLERANCE..=1.0 + MASK_SUM_TOLERANCE).contains(&w) {
                    sum = f64::NAN;
                    break;
                }
                sum += w;
            }
            if !((sum - 1.0).abs() <= MASK_SUM_TOLERANCE) {
                return Err(DamError::MaskNotNormalized {
                    row: i / self.spec.width,
                    col: i % self.spec.width,
                    sum,
                });
            }
        }
        Ok(())
    }
}

pub fn anchor_flow_at(anchor: &MotionAnchor, z: Point2) -> Point2 {
    anchor.pos_s + anchor.theta.mul_point(z - anchor.pos_d)
}

pub fn rasterize_anchor_flows(anchors: &AnchorSet, spec: GridSpec) -> Vec<FlowField> {
    anchors
        .motion
        .iter()
        .map(|a| FlowField::from_fn(spec, |z| anchor_flow_at(a, z)))
        .collect()
}

pub fn blend_flows(anchor_flows: &[FlowField], masks: &MaskStack) -> Result<FlowField> {
    let spec = masks.spec;
    if anchor_flows.len() != masks.num_anchors() {
        return Err(DamError::DimensionMismatch(format!(
            "{} anchor flows for {} mask channels",
            anchor_flows.len(),
            masks.channels
        )));
    }
    if let Some(f) = anchor_flows.iter().find(|f| f.spec != spec) {
        return Err(DamError::DimensionMismatch(format!(
            "flow grid {}x{} differs from mask grid {}x{}",
            f.spec.height, f.spec.width, spec.height, spec.width
        )));
    }
    masks.validate()?;
    let n = spec.len();
    let vectors = spec
        .centers()
        .enumerate()
        .map(|(i, z)| {
            let mut v = z * masks.weights[i];
            for (k, f) in anchor_flows.iter().enumerate() {
                v += f.vectors[i] * masks.weights[(k + 1) * n + i];
            }
            v
        })
        .collect();
    Ok(FlowField { spec, vectors })
}

/// Gradients of a scalar loss through [`blend_flows`] of rasterized anchor
/// flows, given the loss gradient with respect to the blended vectors.
pub struct BlendGradients {
    /// Same layout as the anchors; `pos_s` holds the source-position gradient.
    pub motion: Vec<MotionAnchor>,
    /// Channel-major gradient with respect to the mask weights.
    pub masks: Vec<f64>,
}

pub fn blend_backward(
    anchors: &AnchorSet,
    anchor_flows: &[FlowField],
    masks: &MaskStack,
    grad_flow: &[Point2],
) -> BlendGradients {
    let spec = masks.spec;
    let n = spec.len();
    let mut motion = vec![MotionAnchor::zero(); anchors.motion.len()];
    let mut mask_grad = vec![0.0; masks.weights.len()];
    // per-anchor sums of g and g·(z − pos_d)ᵀ, folded into θ and pos_d below
    let mut sum_g = vec![Point2::ZERO; anchors.motion.len()];
    let mut sum_outer = vec![Mat2::ZERO; anchors.motion.len()];
    for (i, z) in spec.centers().enumerate() {
        let g = grad_flow[i];
        if g.x == 0.0 && g.y == 0.0 {
            continue;
        }
        mask_grad[i] = g.dot(z);
        for (k, a) in anchors.motion.iter().enumerate() {
            mask_grad[(k + 1) * n + i] = g.dot(anchor_flows[k].vectors[i]);
            let w = masks.weights[(k + 1) * n + i];
            if w != 0.0 {
                let gk = g * w;
                sum_g[k] += gk;
                sum_outer[k].add_scaled(&Mat2::outer(gk, z - a.pos_d), 1.0);
            }
        }
    }
    for (k, a) in anchors.motion.iter().enumerate() {
        motion[k].pos_s = sum_g[k];
        motion[k].theta = sum_outer[k];
        motion[k].pos_d = -a.theta.transpose().mul_point(sum_g[k]);
    }
    BlendGradients {
        motion,
        masks: mask_grad,
    }
}

/// Per-pixel softmax of `logits / temperature` across channels.
pub fn softargmax_masks(logits: &ImageGrid, temperature: f64) -> MaskStack {
    let spec = logits.spec();
    let channels = logits.channels();
    let n = spec.len();
    let values = logits.values();
    let mut weights = vec![0.0; channels * n];
    let mut scratch = vec![0.0; channels];
    for i in 0..n {
        let max = (0..channels)
            .map(|c| values[c * n + i])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..channels {
            let e = ((values[c * n + i] - max) / temperature).exp();
            scratch[c] = e;
            sum += e;
        }
        for c in 0..channels {
            weights[c * n + i] = scratch[c] / sum;
        }
    }
    MaskStack {
        spec,
        channels,
        weights,
    }
}

pub fn softargmax_backward(masks: &MaskStack, grad_masks: &[f64], temperature: f64) -> Vec<f64> {
    let n = masks.spec.len();
    let ch = masks.channels;
    let mut out = vec![0.0; grad_masks.len()];
    for i in 0..n {
        let mut inner = 0.0;
        for c in 0..ch {
            inner += masks.weights[c * n + i] * grad_masks[c * n + i];
        }
        for c in 0..ch {
            let m = masks.weights[c * n + i];
            out[c * n + i] = m * (grad_masks[c * n + i] - inner) / temperature;
        }
    }
    out
}

/// Bilinear resampling of a (coarse) logit grid onto the pixel centers of
/// `spec`, aligned through normalized coordinates.
pub fn upsample_logits(logits: &ImageGrid, spec: GridSpec) -> ImageGrid {
    if logits.spec() == spec {
        return logits.clone();
    }
    warp_image(logits, &FlowField::identity(spec))
}

pub fn upsample_logits_adjoint(grad: &ImageGrid, coarse: GridSpec) -> ImageGrid {
    if grad.spec() == coarse {
        return grad.clone();
    }
    let mut out = ImageGrid::zeros(coarse, grad.channels());
    for (i, z) in grad.spec().centers().enumerate() {
        let taps = bilinear_taps(&coarse, z);
        for c in 0..grad.channels() {
            let g = grad.channel(c)[i];
            taps.scatter(out.channel_mut(c), g);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(h: usize, w: usize) -> GridSpec {
        GridSpec::new(h, w).unwrap()
    }

    fn random_anchor(rng: &mut ChaCha8Rng) -> MotionAnchor {
        let mut p = || Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let (pos_d, pos_s) = (p(), p());
        MotionAnchor {
            pos_d,
            pos_s,
            theta: Mat2::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ),
        }
    }

    fn random_masks(s: GridSpec, channels: usize, rng: &mut ChaCha8Rng) -> MaskStack {
        let logits = ImageGrid::from_fn(s, channels, |_, _, _| rng.gen_range(-3.0..3.0));
        softargmax_masks(&logits, 1.0)
    }

    fn single(a: MotionAnchor) -> AnchorSet {
        AnchorSet {
            motion: vec![a],
            root: None,
            intermediates: vec![],
        }
    }

    #[test]
    fn translation_anchor_carries_offset() {
        let a = MotionAnchor {
            pos_d: Point2::new(0.5, 0.5),
            pos_s: Point2::new(0.3, 0.5),
            theta: Mat2::IDENTITY,
        };
        let v = anchor_flow_at(&a, Point2::new(0.6, 0.5));
        assert!((v - Point2::new(0.4, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn anchor_maps_its_driving_position_to_its_source_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a = random_anchor(&mut rng);
            assert_eq!(anchor_flow_at(&a, a.pos_d), a.pos_s);
        }
    }

    #[test]
    fn anisotropic_theta() {
        let a = MotionAnchor {
            pos_d: Point2::ZERO,
            pos_s: Point2::ZERO,
            theta: Mat2::diag(2.0, 1.0),
        };
        let z = Point2::new(0.25, 0.5);
        // scalar oracle
        let expected = Point2::new(2.0 * 0.25 + 0.0 * 0.5, 0.0 * 0.25 + 1.0 * 0.5);
        assert_eq!(anchor_flow_at(&a, z), expected);
        assert_eq!(expected, Point2::new(0.5, 0.5));
    }

    #[test]
    fn identity_anchor_rasterizes_to_identity_flow() {
        let s = spec(6, 9);
        let set = single(MotionAnchor::identity_at(Point2::new(0.2, -0.3)));
        let flows = rasterize_anchor_flows(&set, s);
        assert_eq!(flows.len(), 1);
        let id = FlowField::identity(s);
        for (a, b) in flows[0].vectors().iter().zip(id.vectors()) {
            assert!((*a - *b).norm() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_translation_enumerated() {
        let s = spec(2, 2);
        let t = Point2::new(0.25, -0.5);
        let set = single(MotionAnchor {
            pos_d: Point2::ZERO,
            pos_s: t,
            theta: Mat2::IDENTITY,
        });
        let f = &rasterize_anchor_flows(&set, s)[0];
        let corners = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)];
        for (i, &(x, y)) in corners.iter().enumerate() {
            assert_eq!(f.vectors()[i], Point2::new(x + 0.25, y - 0.5));
        }
    }

    #[test]
    fn rasterization_matches_per_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = spec(8, 8);
        let set = single(random_anchor(&mut rng));
        let f = &rasterize_anchor_flows(&set, s)[0];
        for r in 0..8 {
            for c in 0..8 {
                let z = s.pixel_to_norm(r, c);
                assert_eq!(f.at(r, c), anchor_flow_at(&set.motion[0], z));
            }
        }
    }

    #[test]
    fn nearest_pixel_to_anchor_is_within_one_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = spec(16, 16);
        for _ in 0..20 {
            let mut a = random_anchor(&mut rng);
            a.theta = Mat2::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let f = &rasterize_anchor_flows(&single(a), s)[0];
            let (r, c) = s.norm_to_pixel(a.pos_d);
            let (r, c) = (r.round() as usize, c.round() as usize);
            let z = s.pixel_to_norm(r, c);
            let expected = a.pos_s + a.theta.mul_point(z - a.pos_d);
            assert!((f.at(r, c) - expected).norm() < 1e-12);
            let spacing = 2.0 / 15.0;
            let theta_norm = a.theta.entries().iter().map(|v| v.abs()).sum::<f64>();
            assert!((f.at(r, c) - a.pos_s).norm() <= spacing * theta_norm + 1e-12);
        }
    }

    #[test]
    fn full_single_channel_reproduces_anchor_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = spec(5, 4);
        let set = single(random_anchor(&mut rng));
        let flows = rasterize_anchor_flows(&set, s);
        let out = blend_flows(&flows, &MaskStack::concentrated(s, 2, 1)).unwrap();
        assert_eq!(out, flows[0]);
    }

    #[test]
    fn equal_weights_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec(4, 4);
        let set = AnchorSet {
            motion: vec![random_anchor(&mut rng), random_anchor(&mut rng)],
            root: None,
            intermediates: vec![],
        };
        let flows = rasterize_anchor_flows(&set, s);
        let mut w = vec![0.0; 3 * s.len()];
        w[s.len()..].iter_mut().for_each(|v| *v = 0.5);
        let masks = MaskStack::new(s, 3, w).unwrap();
        let out = blend_flows(&flows, &masks).unwrap();
        for i in 0..s.len() {
            let avg = (flows[0].vectors()[i] + flows[1].vectors()[i]) * 0.5;
            assert!((out.vectors()[i] - avg).norm() < 1e-15);
        }
    }

    #[test]
    fn background_channel_keeps_pixels_static() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = spec(3, 3);
        let flows = rasterize_anchor_flows(&single(random_anchor(&mut rng)), s);
        let out = blend_flows(&flows, &MaskStack::concentrated(s, 2, 0)).unwrap();
        assert_eq!(out, FlowField::identity(s));
    }

    #[test]
    fn blend_rejects_bad_inputs() {
        let s = spec(3, 3);
        let flows = rasterize_anchor_flows(&single(MotionAnchor::identity_at(Point2::ZERO)), s);
        let bad = MaskStack::new(s, 2, vec![0.5; 2 * s.len() - 1]);
        assert!(bad.is_err());
        let mut w = vec![0.5; 2 * s.len()];
        w[4] = 0.6;
        let masks = MaskStack::new(s, 2, w).unwrap();
        assert!(matches!(
            blend_flows(&flows, &masks),
            Err(DamError::MaskNotNormalized { row: 1, col: 1, .. })
        ));
        let three = MaskStack::concentrated(s, 3, 1);
        assert!(matches!(
            blend_flows(&flows, &three),
            Err(DamError::DimensionMismatch(_))
        ));
        let other = MaskStack::concentrated(spec(4, 3), 2, 1);
        assert!(matches!(
            blend_flows(&flows, &other),
            Err(DamError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let s = spec(2, 3);
        let m = softargmax_masks(&ImageGrid::zeros(s, 2), 1.0);
        assert!(m.weights().iter().all(|&w| w == 0.5));

        let mut logits = ImageGrid::zeros(s, 3);
        logits.channel_mut(2).iter_mut().for_each(|v| *v = 1000.0);
        let m = softargmax_masks(&logits, 1.0);
        m.validate().unwrap();
        assert!(m.channel(2).iter().all(|&w| (w - 1.0).abs() < 1e-12));
        assert!(m.channel(0).iter().all(|&w| w < 1e-12));

        let mut logits = ImageGrid::zeros(s, 2);
        logits
            .channel_mut(1)
            .iter_mut()
            .for_each(|v| *v = 3f64.ln());
        let m = softargmax_masks(&logits, 1.0);
        for i in 0..s.len() {
            assert!((m.weight(0, i) - 0.25).abs() < 1e-15);
            assert!((m.weight(1, i) - 0.75).abs() < 1e-15);
        }
    }

    #[test]
    fn blend_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = spec(5, 6);
        let set = AnchorSet {
            motion: (0..3).map(|_| random_anchor(&mut rng)).collect(),
            root: None,
            intermediates: vec![],
        };
        let logits = ImageGrid::from_fn(s, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let weights: Vec<Point2> = (0..s.len())
            .map(|_| Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let temperature = 0.5;
        let loss = |set: &AnchorSet, logits: &ImageGrid| -> f64 {
            let flows = rasterize_anchor_flows(set, s);
            let out = blend_flows(&flows, &softargmax_masks(logits, temperature)).unwrap();
            out.vectors()
                .iter()
                .zip(&weights)
                .map(|(v, w)| v.dot(*w))
                .sum()
        };
        let flows = rasterize_anchor_flows(&set, s);
        let masks = softargmax_masks(&logits, temperature);
        let g = blend_backward(&set, &flows, &masks, &weights);
        let g_logits = softargmax_backward(&masks, &g.masks, temperature);
        let check = |an: f64, fd: f64, what: &str| {
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!((an - fd).abs() / denom < 1e-4, "{what}: {an} vs {fd}");
        };
        let h = 1e-5;
        let mut flat = Vec::new();
        set.write_flat(&mut flat);
        let mut gflat = Vec::new();
        AnchorSet {
            motion: g.motion.clone(),
            root: None,
            intermediates: vec![],
        }
        .write_flat(&mut gflat);
        for p in 0..flat.len() {
            let mut plus = set.clone();
            let mut minus = set.clone();
            let mut v = flat.clone();
            v[p] += h;
            plus.read_flat(&v);
            v[p] -= 2.0 * h;
            minus.read_flat(&v);
            let fd = (loss(&plus, &logits) - loss(&minus, &logits)) / (2.0 * h);
            check(gflat[p], fd, &format!("anchor param {p}"));
        }
        for p in 0..logits.values().len() {
            let mut plus = logits.clone();
            let mut minus = logits.clone();
            plus.values_mut()[p] += h;
            minus.values_mut()[p] -= h;
            let fd = (loss(&set, &plus) - loss(&set, &minus)) / (2.0 * h);
            check(g_logits[p], fd, &format!("logit {p}"));
        }
    }

    #[test]
    fn upsample_adjoint_matches_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coarse = spec(4, 5);
        let fine = spec(16, 18);
        let x = ImageGrid::from_fn(coarse, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let g = ImageGrid::from_fn(fine, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let up = upsample_logits(&x, fine);
        let lhs: f64 = up.values().iter().zip(g.values()).map(|(a, b)| a * b).sum();
        let back = upsample_logits_adjoint(&g, coarse);
        let rhs: f64 = x
            .values()
            .iter()
            .zip(back.values())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn blend_is_a_convex_combination(seed in 0u64..2000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = spec(rng.gen_range(2..7), rng.gen_range(2..7));
            let set = AnchorSet {
                motion: (0..k).map(|_| random_anchor(&mut rng)).collect(),
                root: None,
                intermediates: vec![],
            };
            let flows = rasterize_anchor_flows(&set, s);
            let masks = random_masks(s, k + 1, &mut rng);
            let out = blend_flows(&flows, &masks).unwrap();
            for (i, z) in s.centers().enumerate() {
                let candidates: Vec<Point2> = std::iter::once(z)
                    .chain(flows.iter().map(|f| f.vectors()[i]))
                    .collect();
                let (lo_x, hi_x) = candidates.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.x), b.max(p.x)));
                let (lo_y, hi_y) = candidates.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.y), b.max(p.y)));
                let v = out.vectors()[i];
                prop_assert!(v.x >= lo_x - 1e-12 && v.x <= hi_x + 1e-12);
                prop_assert!(v.y >= lo_y - 1e-12 && v.y <= hi_y + 1e-12);
            }
        }

        #[test]
        fn concentrated_mask_selects_field_exactly(seed in 0u64..2000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = spec(4, 3);
            let set = AnchorSet {
                motion: (0..k).map(|_| random_anchor(&mut rng)).collect(),
                root: None,
                intermediates: vec![],
            };
            let flows = rasterize_anchor_flows(&set, s);
            let pick = rng.gen_range(1..=k);
            let out = blend_flows(&flows, &MaskStack::concentrated(s, k + 1, pick)).unwrap();
            prop_assert_eq!(&out, &flows[pick - 1]);
        }

        #[test]
        fn softmax_output_is_normalized(seed in 0u64..2000, temperature in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = spec(3, 4);
            let logits = ImageGrid::from_fn(s, 4, |_, _, _| rng.gen_range(-500.0..500.0));
            let m = softargmax_masks(&logits, temperature);
            prop_assert!(m.validate().is_ok());
        }
    }
}
