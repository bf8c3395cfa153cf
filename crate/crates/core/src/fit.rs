//! Per-pair fitting of anchors, mask logits and attention logits by
//! adaptive-moment gradient descent, plus finite-difference gradient checks.
//!
//! All parameters live in one flat vector laid out as
//! `[anchor parameters | mask logits | attention logits]`; the anchor part
//! follows [`AnchorSet::write_flat`], mask logits are channel-major and the
//! attention logits row-major.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};
use crate::flow::{
    blend_backward, blend_flows, rasterize_anchor_flows, softargmax_backward, softargmax_masks,
    upsample_logits, upsample_logits_adjoint, AnchorSet, FlowField, LatentAnchor, MaskStack,
    MotionAnchor,
};
use crate::geometry::{Affine2, GridSpec, Point2};
use crate::losses::{
    equivariance_loss_grad, reconstruction_loss_grad, reconstruction_residual_signs,
    sample_equivariance_transform, total_loss, LossComponents, LossReport, LossWeights, Mode,
    TransformRanges,
};
use crate::metrics::{evaluate_scene, SceneEval, SceneInputs};
use crate::structure::{
    attention_from_logits, dam_loss_grad, dam_residuals, hdam_loss_grad, hdam_residuals, NormKind,
};
use crate::synth::{render_scene, SceneSpec};
use crate::warp::{downsample_pyramid, warp_image, warp_image_backward, ImageGrid};

/// Two anchors closer than this are considered collapsed.
pub const COLLAPSE_DISTANCE: f64 = 1e-4;
/// Size of the one-time nudge that separates collapsed anchors.
pub const REPULSION_NUDGE: f64 = 1e-3;
/// Central-difference step of the gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Parameters whose ±step straddles, or comes this close to, a kink are skipped.
pub const KINK_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Number of motion anchors (K).
    pub anchors: usize,
    /// Number of intermediate anchors (I).
    pub intermediates: usize,
    pub mode: Mode,
    pub iterations: usize,
    pub step_size: f64,
    /// Fraction of `step_size` reached at the last iteration under cosine
    /// annealing; 1 keeps the step constant.
    pub final_step_fraction: f64,
    pub moment_decays: (f64, f64),
    pub epsilon: f64,
    pub pyramid_levels: usize,
    pub equivariance: bool,
    /// Iterations between refreshes of the equivariance target.
    pub equivariance_interval: usize,
    /// Inner fitting steps on the transformed image.
    pub equivariance_steps: usize,
    /// Also apply the equivariance loss to the root and intermediates.
    pub equivariance_latent: bool,
    pub transform_ranges: TransformRanges,
    pub seed: u64,
    pub weights: LossWeights,
    /// Softmax temperature of the mask logits.
    pub temperature: f64,
    /// Mask logits live on a grid this many times coarser than the image.
    pub mask_downsample: usize,
    pub prior_norm: NormKind,
    pub equivariance_norm: NormKind,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            anchors: 10,
            intermediates: 3,
            mode: Mode::Dam,
            iterations: 500,
            step_size: 0.05,
            final_step_fraction: 0.02,
            moment_decays: (0.9, 0.999),
            epsilon: 1e-8,
            pyramid_levels: 3,
            equivariance: true,
            equivariance_interval: 25,
            equivariance_steps: 10,
            equivariance_latent: false,
            transform_ranges: TransformRanges::default(),
            seed: 0,
            weights: LossWeights::default(),
            temperature: 0.1,
            mask_downsample: 4,
            prior_norm: NormKind::Euclidean,
            equivariance_norm: NormKind::Euclidean,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DamError::InvalidConfig(msg));
        if self.anchors == 0 {
            return bad("at least one motion anchor is required".into());
        }
        if self.mode == Mode::Hdam && self.intermediates == 0 {
            return bad("hdam mode needs at least one intermediate anchor".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad(format!(
                "step size {} must be positive and finite",
                self.step_size
            ));
        }
        if !(self.final_step_fraction > 0.0 && self.final_step_fraction <= 1.0) {
            return bad(format!(
                "final step fraction {} must lie in (0, 1]",
                self.final_step_fraction
            ));
        }
        let (b1, b2) = self.moment_decays;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("moment decays ({b1}, {b2}) must lie in [0, 1)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid needs at least one level".into());
        }
        if self.equivariance && (self.equivariance_interval == 0 || self.equivariance_steps == 0) {
            return bad("equivariance interval and inner steps must be positive".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.mask_downsample == 0 {
            return bad("mask downsampling factor must be at least 1".into());
        }
        self.weights.validate()
    }

    /// Grid on which the mask logits are stored.
    pub fn mask_spec(&self, spec: GridSpec) -> GridSpec {
        let f = self.mask_downsample;
        if f <= 1 {
            return spec;
        }
        GridSpec {
            height: spec.height.div_ceil(f).max(2),
            width: spec.width.div_ceil(f).max(2),
        }
    }
}

/// Anchor positions on a transformed driving image, fitted from a shared
/// initialization; the equivariance loss compares the current anchors with
/// these mapped back through the inverse transform.
#[derive(Debug, Clone, PartialEq)]
pub struct EquivarianceTarget {
    pub transform: Affine2,
    /// Motion-anchor driving positions, followed by the root and
    /// intermediates when the latent flag is set.
    pub points: Vec<Point2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub anchors: AnchorSet,
    pub mask_logits: ImageGrid,
    /// `I×K` logits of the attention weights.
    pub attention_logits: Vec<Vec<f64>>,
    pub moments: Moments,
    pub iteration: usize,
    pub history: Vec<LossReport>,
    pub equivariance: Option<EquivarianceTarget>,
    nudged: BTreeSet<(usize, usize)>,
}

fn lin(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -0.5 + i as f64 / (n - 1) as f64
    }
}

/// `K` points on a centered grid over `[-0.5, 0.5]²`; a short last row is
/// spread over the full width.
fn grid_positions(k: usize) -> Vec<Point2> {
    let cols = (k as f64).sqrt().ceil() as usize;
    let rows = k.div_ceil(cols);
    let mut out = Vec::with_capacity(k);
    for r in 0..rows {
        let in_row = cols.min(k - r * cols);
        for c in 0..in_row {
            out.push(Point2::new(lin(c, in_row), lin(r, rows)));
        }
    }
    out
}

pub fn initialize(config: &FitConfig, spec: GridSpec) -> Result<FitState> {
    config.validate()?;
    let motion = grid_positions(config.anchors)
        .into_iter()
        .map(MotionAnchor::identity_at)
        .collect();
    let intermediates = (0..config.intermediates)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / config.intermediates as f64;
            LatentAnchor::identity_at(Point2::new(0.25 * a.cos(), 0.25 * a.sin()))
        })
        .collect();
    let anchors = AnchorSet {
        motion,
        root: Some(LatentAnchor::identity_at(Point2::ZERO)),
        intermediates,
    };
    let mask_logits = ImageGrid::zeros(config.mask_spec(spec), config.anchors + 1);
    let attention_logits = vec![vec![0.0; config.anchors]; config.intermediates];
    let n =
        anchors.param_count() + mask_logits.values().len() + config.intermediates * config.anchors;
    Ok(FitState {
        anchors,
        mask_logits,
        attention_logits,
        moments: Moments::zeros(n),
        iteration: 0,
        history: Vec::new(),
        equivariance: None,
        nudged: BTreeSet::new(),
    })
}

impl FitState {
    pub fn param_count(&self) -> usize {
        self.anchors.param_count()
            + self.mask_logits.values().len()
            + self.attention_logits.iter().map(Vec::len).sum::<usize>()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.anchors.write_flat(&mut out);
        out.extend_from_slice(self.mask_logits.values());
        for row in &self.attention_logits {
            out.extend_from_slice(row);
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) {
        let mut i = self.anchors.read_flat(values);
        let n = self.mask_logits.values().len();
        self.mask_logits
            .values_mut()
            .copy_from_slice(&values[i..i + n]);
        i += n;
        for row in &mut self.attention_logits {
            let k = row.len();
            row.copy_from_slice(&values[i..i + k]);
            i += k;
        }
    }

    /// Mask weights at the resolution of `spec`.
    pub fn masks(&self, spec: GridSpec, config: &FitConfig) -> MaskStack {
        softargmax_masks(
            &upsample_logits(&self.mask_logits, spec),
            config.temperature,
        )
    }

    /// The blended backward flow on `spec`.
    pub fn flow(&self, spec: GridSpec, config: &FitConfig) -> Result<FlowField> {
        let flows = rasterize_anchor_flows(&self.anchors, spec);
        blend_flows(&flows, &self.masks(spec, config))
    }

    fn clamp_positions(&mut self) {
        let c = |p: Point2| Point2::new(p.x.clamp(-1.0, 1.0), p.y.clamp(-1.0, 1.0));
        for m in &mut self.anchors.motion {
            m.pos_d = c(m.pos_d);
            m.pos_s = c(m.pos_s);
        }
        for l in self
            .anchors
            .root
            .iter_mut()
            .chain(self.anchors.intermediates.iter_mut())
        {
            l.pos_d = c(l.pos_d);
            l.flow_at = c(l.flow_at);
        }
    }

    /// Separates collapsed motion anchors, once per pair, by moving the later
    /// one along x.
    fn repel_collapsed(&mut self) {
        let k = self.anchors.motion.len();
        for a in 0..k {
            for b in a + 1..k {
                let d = (self.anchors.motion[a].pos_d - self.anchors.motion[b].pos_d).norm();
                if d < COLLAPSE_DISTANCE && self.nudged.insert((a, b)) {
                    let p = &mut self.anchors.motion[b].pos_d;
                    p.x = if p.x + REPULSION_NUDGE <= 1.0 {
                        p.x + REPULSION_NUDGE
                    } else {
                        p.x - REPULSION_NUDGE
                    };
                }
            }
        }
    }

    /// Driving positions that enter the equivariance loss.
    fn equivariance_points(&self, latent: bool) -> Vec<Point2> {
        let mut pts: Vec<Point2> = self.anchors.motion.iter().map(|m| m.pos_d).collect();
        if latent {
            pts.extend(
                self.anchors
                    .root
                    .iter()
                    .chain(&self.anchors.intermediates)
                    .map(|l| l.pos_d),
            );
        }
        pts
    }
}

/// One evaluation of the fitting objective.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: LossReport,
    /// Gradient in the flat parameter layout, when requested.
    pub gradient: Option<Vec<f64>>,
}

/// Quantities whose change flags a non-smooth point of the objective.
#[derive(Debug, Clone, PartialEq)]
pub struct KinkSignature {
    /// Bilinear cell of every sample and the sign of every absolute residual.
    pub discrete: Vec<i64>,
    /// Arguments of every Euclidean norm in the objective.
    pub residuals: Vec<Point2>,
}

/// A source/driving pair prepared for repeated objective evaluation.
pub struct Problem<'a> {
    pub src: &'a ImageGrid,
    pub target_pyramid: Vec<ImageGrid>,
    pub config: &'a FitConfig,
}

impl<'a> Problem<'a> {
    pub fn new(src: &'a ImageGrid, drv: &ImageGrid, config: &'a FitConfig) -> Result<Self> {
        if !src.same_shape(drv) {
            return Err(DamError::DimensionMismatch(format!(
                "source is {}x{}x{}, driving is {}x{}x{}",
                src.spec().height,
                src.spec().width,
                src.channels(),
                drv.spec().height,
                drv.spec().width,
                drv.channels()
            )));
        }
        Ok(Problem {
            src,
            target_pyramid: downsample_pyramid(drv, config.pyramid_levels)?,
            config,
        })
    }

    pub fn spec(&self) -> GridSpec {
        self.src.spec()
    }

    /// Loss and optional gradient of `state` under `mode`, including the
    /// equivariance term when the state carries a target.
    pub fn evaluate(&self, state: &FitState, mode: Mode, want_grad: bool) -> Result<Evaluation> {
        let cfg = self.config;
        let w = &cfg.weights;
        let spec = self.spec();
        let anchors = &state.anchors;
        let k = anchors.num_motion();

        let masks = state.masks(spec, cfg);
        let flows = rasterize_anchor_flows(anchors, spec);
        let flow = blend_flows(&flows, &masks)?;
        let generated = warp_image(self.src, &flow);
        let (rec, grad_generated) = reconstruction_loss_grad(&generated, &self.target_pyramid)?;

        let mut comps = LossComponents {
            reconstruction: rec,
            ..LossComponents::default()
        };
        let n_anchor = anchors.param_count();
        let n_mask = state.mask_logits.values().len();
        let mut grad = if want_grad {
            vec![0.0; state.param_count()]
        } else {
            Vec::new()
        };

        if want_grad && w.w_rec != 0.0 {
            let mut g_gen = grad_generated;
            g_gen.values_mut().iter_mut().for_each(|v| *v *= w.w_rec);
            let g_flow = warp_image_backward(self.src, &flow, &g_gen);
            let bg = blend_backward(anchors, &flows, &masks, &g_flow);
            let mut g_anchor = anchors.zeros_like();
            g_anchor.motion = bg.motion;
            let mut flat = Vec::with_capacity(n_anchor);
            g_anchor.write_flat(&mut flat);
            add_into(&mut grad[..n_anchor], &flat);
            let g_logits_full = softargmax_backward(&masks, &bg.masks, cfg.temperature);
            let g_logits_full = ImageGrid::new(spec, k + 1, g_logits_full)?;
            let g_logits = upsample_logits_adjoint(&g_logits_full, state.mask_logits.spec());
            add_into(&mut grad[n_anchor..n_anchor + n_mask], g_logits.values());
        }

        match mode {
            Mode::None => {}
            Mode::Dam => {
                let (v, g) = dam_loss_grad(anchors, cfg.prior_norm)?;
                comps.dam = v;
                if want_grad {
                    add_scaled_anchor_grad(&mut grad[..n_anchor], &g, w.w_dam);
                }
            }
            Mode::Hdam => {
                let attn = attention_from_logits(&state.attention_logits);
                let (v, g, g_logits) = hdam_loss_grad(anchors, &attn, cfg.prior_norm)?;
                comps.hdam = v;
                if want_grad {
                    add_scaled_anchor_grad(&mut grad[..n_anchor], &g, w.w_hdam);
                    let flat: Vec<f64> = g_logits.iter().flatten().map(|v| v * w.w_hdam).collect();
                    add_into(&mut grad[n_anchor + n_mask..], &flat);
                }
            }
        }

        if let Some(target) = &state.equivariance {
            let pts = state.equivariance_points(target.points.len() > k);
            let (v, g) = equivariance_loss_grad(
                &pts,
                &target.points,
                &target.transform,
                cfg.equivariance_norm,
            )?;
            comps.equivariance = v;
            if want_grad {
                for (j, gj) in g.iter().enumerate() {
                    grad[8 * j] += w.w_equi * gj.x;
                    grad[8 * j + 1] += w.w_equi * gj.y;
                }
            }
        }

        Ok(Evaluation {
            report: total_loss(comps, w, mode),
            gradient: want_grad.then_some(grad),
        })
    }

    pub fn kink_signature(&self, state: &FitState, mode: Mode) -> Result<KinkSignature> {
        let spec = self.spec();
        let src_spec = self.src.spec();
        let flow = state.flow(spec, self.config)?;
        let generated = warp_image(self.src, &flow);
        let mut discrete = Vec::with_capacity(2 * spec.len());
        let cell = |v: f64| -> i64 {
            let r = v.round();
            if (v - r).abs() < KINK_MARGIN {
                2 * r as i64
            } else {
                2 * v.floor() as i64 + 1
            }
        };
        for &p in flow.vectors() {
            let (row, col) = src_spec.norm_to_pixel(p);
            discrete.push(cell(row));
            discrete.push(cell(col));
        }
        discrete.extend(
            reconstruction_residual_signs(&generated, &self.target_pyramid)?
                .into_iter()
                .map(i64::from),
        );
        let mut residuals = Vec::new();
        if self.config.prior_norm == NormKind::Euclidean {
            match mode {
                Mode::None => {}
                Mode::Dam => residuals.extend(dam_residuals(&state.anchors)?),
                Mode::Hdam => {
                    let h = hdam_residuals(&state.anchors)?;
                    residuals.extend(h.upper.into_iter().flatten());
                    residuals.extend(h.lower);
                }
            }
        }
        if let Some(t) = &state.equivariance {
            if self.config.equivariance_norm == NormKind::Euclidean {
                let inv = t.transform.inverse()?;
                let pts = state.equivariance_points(t.points.len() > state.anchors.num_motion());
                residuals.extend(pts.iter().zip(&t.points).map(|(&a, &b)| a - inv.apply(b)));
            }
        }
        Ok(KinkSignature {
            discrete,
            residuals,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_scaled_anchor_grad(dst: &mut [f64], g: &AnchorSet, scale: f64) {
    let mut flat = Vec::with_capacity(dst.len());
    g.write_flat(&mut flat);
    for (d, s) in dst.iter_mut().zip(flat) {
        *d += scale * s;
    }
}

/// Bias-corrected adaptive-moment update.
struct Adam {
    step: f64,
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    fn new(config: &FitConfig) -> Self {
        Adam {
            step: config.step_size,
            b1: config.moment_decays.0,
            b2: config.moment_decays.1,
            eps: config.epsilon,
        }
    }

    /// Updates the first `grad.len()` parameters. `t` counts updates from 1
    /// and `scale` multiplies the step size.
    fn update(
        &self,
        params: &mut [f64],
        grad: &[f64],
        moments: &mut Moments,
        t: usize,
        scale: f64,
    ) {
        let step = self.step * scale;
        let c1 = 1.0 - self.b1.powi(t as i32);
        let c2 = 1.0 - self.b2.powi(t as i32);
        for (i, &g) in grad.iter().enumerate() {
            let m = &mut moments.first[i];
            let v = &mut moments.second[i];
            *m = self.b1 * *m + (1.0 - self.b1) * g;
            *v = self.b2 * *v + (1.0 - self.b2) * g * g;
            params[i] -= step * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Optimizer moments, one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }
}

/// Cosine-annealed step multiplier at iteration `it`.
pub fn step_scale(config: &FitConfig, it: usize) -> f64 {
    let f = config.final_step_fraction;
    if f >= 1.0 || config.iterations <= 1 {
        return 1.0;
    }
    let progress = it as f64 / (config.iterations - 1) as f64;
    f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Structure prior active at iteration `it`: hierarchical fits spend the
/// first half of the budget in DAM mode.
pub fn phase_mode(config: &FitConfig, it: usize) -> Mode {
    if config.mode == Mode::Hdam && it < config.iterations / 2 {
        Mode::Dam
    } else {
        config.mode
    }
}

/// Places each intermediate on the root's prior so the hierarchy starts
/// self-consistent when the HDAM phase begins.
fn warm_start_intermediates(state: &mut FitState) {
    if let Some(r) = state.anchors.root {
        for a in &mut state.anchors.intermediates {
            a.flow_at = r.prior_at(a.pos_d);
            a.theta = r.theta;
        }
    }
}

/// Seed of the equivariance transform drawn at iteration `it`.
fn transform_seed(seed: u64, it: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (it as u64).wrapping_add(1)
}

/// Fits anchors on the transformed driving image and returns the resulting
/// equivariance target.
fn refresh_equivariance(
    state: &FitState,
    src: &ImageGrid,
    drv: &ImageGrid,
    config: &FitConfig,
    mode: Mode,
) -> Result<EquivarianceTarget> {
    let t = sample_equivariance_transform(
        transform_seed(config.seed, state.iteration),
        &config.transform_ranges,
    )?;
    let inv = t.inverse()?;
    let spec = drv.spec();
    let transformed = warp_image(drv, &FlowField::from_fn(spec, |q| inv.apply(q)));

    // shared initialization: the current anchors carried through T
    let a_inv = inv.linear;
    let mut inner = state.clone();
    inner.equivariance = None;
    for m in &mut inner.anchors.motion {
        m.pos_d = t.apply(m.pos_d);
        m.theta = m.theta.mul_mat(&a_inv);
    }
    for l in inner
        .anchors
        .root
        .iter_mut()
        .chain(inner.anchors.intermediates.iter_mut())
    {
        l.pos_d = t.apply(l.pos_d);
        l.theta = l.theta.mul_mat(&a_inv);
    }
    let lspec = state.mask_logits.spec();
    inner.mask_logits = warp_image(
        &state.mask_logits,
        &FlowField::from_fn(lspec, |q| inv.apply(q)),
    );

    let problem = Problem::new(src, &transformed, config)?;
    let adam = Adam::new(config);
    let n_anchor = inner.anchors.param_count();
    let mut moments = Moments::zeros(n_anchor);
    for step in 1..=config.equivariance_steps {
        let eval = problem.evaluate(&inner, mode, true)?;
        let grad = eval.gradient.expect("gradient requested");
        let mut params = inner.params();
        adam.update(
            &mut params,
            &grad[..n_anchor],
            &mut moments,
            step,
            step_scale(config, state.iteration),
        );
        if params[..n_anchor].iter().any(|p| !p.is_finite()) {
            return Err(DamError::NonFiniteLoss {
                iteration: state.iteration,
            });
        }
        inner.set_params(&params);
        inner.clamp_positions();
    }
    Ok(EquivarianceTarget {
        transform: t,
        points: inner.equivariance_points(config.equivariance_latent),
    })
}

/// Runs the full fitting loop, reporting each iteration's losses to `log`.
pub fn fit_pair_with_log(
    src: &ImageGrid,
    drv: &ImageGrid,
    config: &FitConfig,
    log: &mut dyn FnMut(usize, &LossReport),
) -> Result<FitState> {
    let problem = Problem::new(src, drv, config)?;
    let mut state = initialize(config, src.spec())?;
    let adam = Adam::new(config);
    for it in 0..config.iterations {
        let mode = phase_mode(config, it);
        if config.mode == Mode::Hdam && it == config.iterations / 2 && it > 0 {
            warm_start_intermediates(&mut state);
        }
        if config.equivariance && it % config.equivariance_interval == 0 {
            state.equivariance = Some(refresh_equivariance(&state, src, drv, config, mode)?);
        }
        let eval = problem.evaluate(&state, mode, true)?;
        if !eval.report.total.is_finite() {
            return Err(DamError::NonFiniteLoss { iteration: it });
        }
        log(it, &eval.report);
        let grad = eval.gradient.expect("gradient requested");
        let mut params = state.params();
        adam.update(
            &mut params,
            &grad,
            &mut state.moments,
            it + 1,
            step_scale(config, it),
        );
        if params.iter().any(|p| !p.is_finite()) {
            return Err(DamError::NonFiniteLoss { iteration: it });
        }
        state.set_params(&params);
        state.clamp_positions();
        state.repel_collapsed();
        state.history.push(eval.report);
        state.iteration = it + 1;
    }
    Ok(state)
}

pub fn fit_pair(
    src: &ImageGrid,
    drv: &ImageGrid,
    config: &FitConfig,
) -> Result<(FitState, Vec<LossReport>)> {
    let state = fit_pair_with_log(src, drv, config, &mut |_, _| {})?;
    let history = state.history.clone();
    Ok((state, history))
}

/// Maximum relative error `|ga − gn| / max(|ga|, |gn|, 1e−8)` over the
/// probed coordinates, with central differences of step `h`. `f` returns
/// the value and the analytic gradient at a point.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x: &[f64],
    indices: &[usize],
    h: f64,
) -> f64 {
    let (_, analytic) = f(x);
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for &i in indices {
        probe[i] = x[i] + h;
        let (plus, _) = f(&probe);
        probe[i] = x[i] - h;
        let (minus, _) = f(&probe);
        probe[i] = x[i];
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Whether moving one parameter by ±`FD_STEP` crosses or grazes a kink.
fn near_kink(lo: &KinkSignature, hi: &KinkSignature) -> bool {
    if lo.discrete != hi.discrete {
        return true;
    }
    lo.residuals.iter().zip(&hi.residuals).any(|(a, b)| {
        let moved = (*a - *b).norm();
        moved > 0.0 && a.norm().min(b.norm()) < KINK_MARGIN + moved
    })
}

/// Compares the analytic gradient of the objective against central finite
/// differences on `probes` seeded parameters, drawn in turn from each
/// non-empty parameter group. Parameters adjacent to a kink are replaced by
/// fresh draws; returns the maximum relative error over the checked ones.
pub fn gradient_check(
    state: &FitState,
    src: &ImageGrid,
    drv: &ImageGrid,
    config: &FitConfig,
    probes: usize,
) -> Result<f64> {
    Ok(gradient_check_detailed(state, src, drv, config, probes)?.max_error)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheckReport {
    pub max_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

pub fn gradient_check_detailed(
    state: &FitState,
    src: &ImageGrid,
    drv: &ImageGrid,
    config: &FitConfig,
    probes: usize,
) -> Result<GradientCheckReport> {
    let problem = Problem::new(src, drv, config)?;
    let mode = config.mode;
    let analytic = problem
        .evaluate(state, mode, true)?
        .gradient
        .expect("gradient requested");
    let x = state.params();

    let k = state.anchors.num_motion();
    let n_motion = 8 * k;
    let n_anchor = state.anchors.param_count();
    let n_mask = state.mask_logits.values().len();
    let groups: Vec<std::ops::Range<usize>> = [
        0..n_motion,
        n_motion..n_motion + 8 * state.anchors.root.iter().count(),
        n_motion + 8 * state.anchors.root.iter().count()..n_anchor,
        n_anchor..n_anchor + n_mask,
        n_anchor + n_mask..x.len(),
    ]
    .into_iter()
    .filter(|r| !r.is_empty())
    .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6752_4144);
    let mut probe_state = state.clone();
    let mut eval_at = |values: &[f64]| -> Result<(f64, KinkSignature)> {
        probe_state.set_params(values);
        let v = problem.evaluate(&probe_state, mode, false)?.report.total;
        Ok((v, problem.kink_signature(&probe_state, mode)?))
    };
    let mut report = GradientCheckReport {
        max_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let max_draws = 20 * probes.max(1);
    let mut draws = 0;
    let mut p = x.clone();
    while report.checked < probes && draws < max_draws {
        let group = &groups[draws % groups.len()];
        draws += 1;
        let i = rng.gen_range(group.clone());
        p[i] = x[i] + FD_STEP;
        let (plus, sig_plus) = eval_at(&p)?;
        p[i] = x[i] - FD_STEP;
        let (minus, sig_minus) = eval_at(&p)?;
        p[i] = x[i];
        if near_kink(&sig_minus, &sig_plus) {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.max_error = report.max_error.max(relative_error(analytic[i], numeric));
        report.checked += 1;
    }
    Ok(report)
}

/// A generic, non-degenerate state for gradient checks: the initialization
/// with seeded perturbations of every parameter group and a seeded
/// equivariance target, so no sample sits exactly on a pixel center and no
/// prior residual is zero.
pub fn perturbed_state(config: &FitConfig, spec: GridSpec) -> Result<FitState> {
    let mut state = initialize(config, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5045_5254);
    let mut jitter =
        |p: Point2, s: f64| Point2::new(p.x + rng.gen_range(-s..s), p.y + rng.gen_range(-s..s));
    for m in &mut state.anchors.motion {
        m.pos_d = jitter(m.pos_d, 0.1);
        m.pos_s = jitter(m.pos_d, 0.1);
        let e = m.theta.entries();
        let d0 = jitter(Point2::new(e[0], e[1]), 0.1);
        let d1 = jitter(Point2::new(e[2], e[3]), 0.1);
        m.theta = crate::geometry::Mat2::new(d0.x, d0.y, d1.x, d1.y);
    }
    for l in state
        .anchors
        .root
        .iter_mut()
        .chain(state.anchors.intermediates.iter_mut())
    {
        l.pos_d = jitter(l.pos_d, 0.1);
        l.flow_at = jitter(l.pos_d, 0.1);
        let e = l.theta.entries();
        let d0 = jitter(Point2::new(e[0], e[1]), 0.1);
        let d1 = jitter(Point2::new(e[2], e[3]), 0.1);
        l.theta = crate::geometry::Mat2::new(d0.x, d0.y, d1.x, d1.y);
    }
    for v in state.mask_logits.values_mut() {
        *v = rng.gen_range(-0.2..0.2);
    }
    for row in &mut state.attention_logits {
        for v in row {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    if config.equivariance {
        let t = sample_equivariance_transform(
            transform_seed(config.seed, 0),
            &config.transform_ranges,
        )?;
        let pts = state.equivariance_points(config.equivariance_latent);
        let points = pts
            .iter()
            .map(|&p| {
                let q = t.apply(p);
                Point2::new(
                    q.x + rng.gen_range(-0.05..0.05),
                    q.y + rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        state.equivariance = Some(EquivarianceTarget {
            transform: t,
            points,
        });
    }
    Ok(state)
}

/// Renders `scene`, fits it with `config` and scores the fitted flow
/// against the ground truth.
pub fn fit_and_evaluate(scene: &SceneSpec, config: &FitConfig) -> Result<SceneEval> {
    let (src, drv, gt) = render_scene(scene)?;
    let (state, _) = fit_pair(&src, &drv, config)?;
    let flow = state.flow(src.spec(), config)?;
    let generated = warp_image(&src, &flow);
    evaluate_scene(
        &scene.name,
        &SceneInputs {
            generated: &generated,
            target: &drv,
            pred: &flow,
            gt: &gt.flow,
            foreground: &gt.foreground,
            source_joints: &gt.joints_source,
            driving_joints: &gt.joints_driving,
        },
    )
}
