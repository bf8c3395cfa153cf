//! Root-anchor prior flows and the DAM / HDAM structure losses.
//!
//! The root anchor carries an affine prior `T_r(p) = T_r(z_r) + θ_r (p − z_r)`
//! that predicts where every motion anchor should move. DAM penalizes the
//! distance between each motion anchor's own flow at its driving position
//! (which is its source position) and the root's prediction there.
//!
//! HDAM inserts a layer of intermediate anchors. Each intermediate carries its
//! own affine prior, is itself regularized by the root, and regularizes the
//! motion anchors through a row of attention weights `ω_i·`.

use crate::error::{DamError, Result};
use crate::flow::{AnchorSet, LatentAnchor};
use crate::geometry::{Mat2, Point2};

/// Residual norms smaller than this are treated as exactly zero when
/// differentiating, so that converged residuals stay stationary.
pub const NORM_KINK: f64 = 1e-12;

/// Penalty applied to each residual vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// `‖v‖₂`
    #[default]
    Euclidean,
    /// `‖v‖₂²`
    Squared,
}

impl NormKind {
    pub fn value(self, v: Point2) -> f64 {
        match self {
            NormKind::Euclidean => v.norm(),
            NormKind::Squared => v.norm_squared(),
        }
    }

    pub fn gradient(self, v: Point2) -> Point2 {
        match self {
            NormKind::Euclidean => {
                let n = v.norm();
                if n < NORM_KINK {
                    Point2::ZERO
                } else {
                    v * (1.0 / n)
                }
            }
            NormKind::Squared => v * 2.0,
        }
    }
}

/// Row-stochastic `I×K` weights over motion anchors, one row per
/// intermediate anchor, derived from free logits.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub logits: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
}

impl AttentionWeights {
    pub fn rows(&self) -> usize {
        self.omega.len()
    }

    pub fn cols(&self) -> usize {
        self.omega.first().map_or(0, Vec::len)
    }

    /// Index of the largest weight in row `i` (lowest index on ties).
    pub fn argmax_row(&self, i: usize) -> usize {
        let row = &self.omega[i];
        let mut best = 0;
        for (k, &w) in row.iter().enumerate() {
            if w > row[best] {
                best = k;
            }
        }
        best
    }

    /// For motion anchor `k`, the intermediate with the largest weight on it.
    pub fn argmax_column(&self, k: usize) -> usize {
        let mut best = 0;
        for i in 0..self.rows() {
            if self.omega[i][k] > self.omega[best][k] {
                best = i;
            }
        }
        best
    }
}

fn root(anchors: &AnchorSet) -> Result<&LatentAnchor> {
    anchors.root.as_ref().ok_or(DamError::MissingRoot)
}

pub fn root_prior_flow(anchors: &AnchorSet, p: Point2) -> Result<Point2> {
    Ok(root(anchors)?.prior_at(p))
}

pub fn intermediate_prior_flow(anchors: &AnchorSet, i: usize, p: Point2) -> Result<Point2> {
    root(anchors)?;
    let a = anchors
        .intermediates
        .get(i)
        .ok_or(DamError::IndexOutOfRange {
            index: i,
            len: anchors.intermediates.len(),
        })?;
    Ok(a.prior_at(p))
}

/// The root's prediction at intermediate `i`'s driving position.
pub fn root_prior_at_intermediate(anchors: &AnchorSet, i: usize) -> Result<Point2> {
    let r = root(anchors)?;
    let a = anchors
        .intermediates
        .get(i)
        .ok_or(DamError::IndexOutOfRange {
            index: i,
            len: anchors.intermediates.len(),
        })?;
    Ok(r.prior_at(a.pos_d))
}

pub fn attention_from_logits(logits: &[Vec<f64>]) -> AttentionWeights {
    let omega = logits
        .iter()
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    AttentionWeights {
        logits: logits.to_vec(),
        omega,
    }
}

/// `pos_s_k − T_r(pos_d_k)` for every motion anchor.
pub fn dam_residuals(anchors: &AnchorSet) -> Result<Vec<Point2>> {
    let r = root(anchors)?;
    Ok(anchors
        .motion
        .iter()
        .map(|m| m.pos_s - r.prior_at(m.pos_d))
        .collect())
}

pub fn dam_loss(anchors: &AnchorSet) -> Result<f64> {
    dam_loss_with(anchors, NormKind::Euclidean)
}

pub fn dam_loss_with(anchors: &AnchorSet, norm: NormKind) -> Result<f64> {
    Ok(crate::numeric::sum(
        dam_residuals(anchors)?.into_iter().map(|v| norm.value(v)),
    ))
}

/// Accumulates `∂/∂·` of a weighted penalty on `target − prior.prior_at(p)`
/// into the prior's gradient; returns the gradient with respect to `p`.
fn pull_through_prior(
    prior: &LatentAnchor,
    grad_prior: &mut LatentAnchor,
    p: Point2,
    g: Point2,
) -> Point2 {
    // residual = target − (flow_at + θ (p − pos_d))
    grad_prior.flow_at -= g;
    grad_prior
        .theta
        .add_scaled(&Mat2::outer(g, p - prior.pos_d), -1.0);
    let back = prior.theta.transpose().mul_point(g);
    grad_prior.pos_d += back;
    -back
}

/// DAM loss and its gradient with respect to every anchor parameter.
pub fn dam_loss_grad(anchors: &AnchorSet, norm: NormKind) -> Result<(f64, AnchorSet)> {
    let r = *root(anchors)?;
    let mut grad = anchors.zeros_like();
    let mut grad_root = LatentAnchor::zero();
    let mut total = crate::numeric::Accumulator::default();
    for (k, m) in anchors.motion.iter().enumerate() {
        let v = m.pos_s - r.prior_at(m.pos_d);
        total.add(norm.value(v));
        let g = norm.gradient(v);
        grad.motion[k].pos_s += g;
        let dp = pull_through_prior(&r, &mut grad_root, m.pos_d, g);
        grad.motion[k].pos_d += dp;
    }
    grad.root = Some(grad_root);
    Ok((total.value(), grad))
}

fn check_attention(anchors: &AnchorSet, attn: &AttentionWeights) -> Result<()> {
    root(anchors)?;
    let (i, k) = (anchors.intermediates.len(), anchors.motion.len());
    if i == 0 {
        return Err(DamError::DimensionMismatch(
            "hierarchical loss needs at least one intermediate anchor".into(),
        ));
    }
    if attn.rows() != i || attn.omega.iter().any(|row| row.len() != k) {
        return Err(DamError::DimensionMismatch(format!(
            "attention is {}x{}, expected {i}x{k}",
            attn.rows(),
            attn.cols()
        )));
    }
    Ok(())
}

/// Residuals of the hierarchy: `upper[i][k] = pos_s_k − T_i(pos_d_k)` and
/// `lower[i] = flow_at_i − T_r(pos_d_i)`.
pub struct HierarchyResiduals {
    pub upper: Vec<Vec<Point2>>,
    pub lower: Vec<Point2>,
}

pub fn hdam_residuals(anchors: &AnchorSet) -> Result<HierarchyResiduals> {
    let r = root(anchors)?;
    let upper = anchors
        .intermediates
        .iter()
        .map(|a| {
            anchors
                .motion
                .iter()
                .map(|m| m.pos_s - a.prior_at(m.pos_d))
                .collect()
        })
        .collect();
    let lower = anchors
        .intermediates
        .iter()
        .map(|a| a.flow_at - r.prior_at(a.pos_d))
        .collect();
    Ok(HierarchyResiduals { upper, lower })
}

pub fn hdam_loss(anchors: &AnchorSet, attn: &AttentionWeights) -> Result<f64> {
    hdam_loss_with(anchors, attn, NormKind::Euclidean)
}

pub fn hdam_loss_with(anchors: &AnchorSet, attn: &AttentionWeights, norm: NormKind) -> Result<f64> {
    check_attention(anchors, attn)?;
    let res = hdam_residuals(anchors)?;
    let mut total = crate::numeric::Accumulator::default();
    for (i, row) in res.upper.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            total.add(attn.omega[i][k] * norm.value(v));
        }
        total.add(norm.value(res.lower[i]));
    }
    Ok(total.value())
}

/// HDAM loss with gradients for anchor parameters and attention logits.
pub fn hdam_loss_grad(
    anchors: &AnchorSet,
    attn: &AttentionWeights,
    norm: NormKind,
) -> Result<(f64, AnchorSet, Vec<Vec<f64>>)> {
    check_attention(anchors, attn)?;
    let r = *root(anchors)?;
    let mut grad = anchors.zeros_like();
    let mut grad_root = LatentAnchor::zero();
    let mut grad_logits = Vec::with_capacity(attn.rows());
    let mut total = crate::numeric::Accumulator::default();
    for (i, a) in anchors.intermediates.iter().enumerate() {
        let mut norms = Vec::with_capacity(anchors.motion.len());
        for (k, m) in anchors.motion.iter().enumerate() {
            let w = attn.omega[i][k];
            let v = m.pos_s - a.prior_at(m.pos_d);
            let n = norm.value(v);
            norms.push(n);
            total.add(w * n);
            let g = norm.gradient(v) * w;
            grad.motion[k].pos_s += g;
            let dp = pull_through_prior(a, &mut grad.intermediates[i], m.pos_d, g);
            grad.motion[k].pos_d += dp;
        }
        // softmax backward over the row
        let inner: f64 = attn.omega[i].iter().zip(&norms).map(|(w, n)| w * n).sum();
        grad_logits.push(
            attn.omega[i]
                .iter()
                .zip(&norms)
                .map(|(w, n)| w * (n - inner))
                .collect(),
        );

        let u = a.flow_at - r.prior_at(a.pos_d);
        total.add(norm.value(u));
        let g = norm.gradient(u);
        grad.intermediates[i].flow_at += g;
        let dp = pull_through_prior(&r, &mut grad_root, a.pos_d, g);
        grad.intermediates[i].pos_d += dp;
    }
    grad.root = Some(grad_root);
    Ok((total.value(), grad, grad_logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::MotionAnchor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    fn random_point(rng: &mut ChaCha8Rng) -> Point2 {
        p(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9))
    }

    fn random_mat(rng: &mut ChaCha8Rng) -> Mat2 {
        Mat2::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        )
    }

    fn random_set(rng: &mut ChaCha8Rng, k: usize, i: usize) -> AnchorSet {
        AnchorSet {
            motion: (0..k)
                .map(|_| MotionAnchor {
                    pos_d: random_point(rng),
                    pos_s: random_point(rng),
                    theta: random_mat(rng),
                })
                .collect(),
            root: Some(LatentAnchor {
                pos_d: random_point(rng),
                flow_at: random_point(rng),
                theta: random_mat(rng),
            }),
            intermediates: (0..i)
                .map(|_| LatentAnchor {
                    pos_d: random_point(rng),
                    flow_at: random_point(rng),
                    theta: random_mat(rng),
                })
                .collect(),
        }
    }

    /// Builds a hierarchy whose priors are all exactly satisfied.
    fn consistent_set(rng: &mut ChaCha8Rng, k: usize, i: usize) -> AnchorSet {
        let mut set = random_set(rng, k, i);
        let r = set.root.unwrap();
        for a in &mut set.intermediates {
            a.theta = r.theta;
            a.flow_at = r.prior_at(a.pos_d);
        }
        for m in &mut set.motion {
            m.pos_s = r.prior_at(m.pos_d);
        }
        set
    }

    #[test]
    fn identity_root_prior_predicts_no_motion() {
        let mut set = random_set(&mut ChaCha8Rng::seed_from_u64(0), 1, 0);
        let r = set.root.as_mut().unwrap();
        r.theta = Mat2::IDENTITY;
        r.flow_at = r.pos_d;
        assert!((root_prior_flow(&set, p(0.3, -0.2)).unwrap() - p(0.3, -0.2)).norm() < 1e-15);
        let r = set.root.as_mut().unwrap();
        r.flow_at = r.pos_d + p(0.2, 0.0);
        let q = root_prior_flow(&set, p(0.3, -0.2)).unwrap();
        assert!((q - p(0.5, -0.2)).norm() < 1e-15);
    }

    #[test]
    fn scaled_root_prior() {
        let set = AnchorSet {
            motion: vec![MotionAnchor::identity_at(Point2::ZERO)],
            root: Some(LatentAnchor {
                pos_d: Point2::ZERO,
                flow_at: Point2::ZERO,
                theta: Mat2::diag(2.0, 2.0),
            }),
            intermediates: vec![],
        };
        assert_eq!(root_prior_flow(&set, p(0.1, 0.2)).unwrap(), p(0.2, 0.4));
    }

    #[test]
    fn missing_root_errors() {
        let set = AnchorSet {
            motion: vec![MotionAnchor::identity_at(Point2::ZERO)],
            root: None,
            intermediates: vec![],
        };
        assert!(matches!(
            root_prior_flow(&set, Point2::ZERO),
            Err(DamError::MissingRoot)
        ));
        assert!(matches!(dam_loss(&set), Err(DamError::MissingRoot)));
        assert!(matches!(
            intermediate_prior_flow(&set, 0, Point2::ZERO),
            Err(DamError::MissingRoot)
        ));
    }

    #[test]
    fn dam_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(dam_loss(&consistent_set(&mut rng, 6, 0)).unwrap().abs() < 1e-12);

        let mut set = AnchorSet {
            motion: vec![MotionAnchor::identity_at(p(0.1, 0.1))],
            root: Some(LatentAnchor::identity_at(Point2::ZERO)),
            intermediates: vec![],
        };
        set.motion[0].pos_s = set.motion[0].pos_d + p(3.0, 4.0);
        assert!((dam_loss(&set).unwrap() - 5.0).abs() < 1e-12);

        // rigid translation scene
        let t = p(0.13, -0.07);
        let mut set = AnchorSet {
            motion: (0..5)
                .map(|i| MotionAnchor::identity_at(p(0.1 * i as f64 - 0.2, 0.05 * i as f64)))
                .collect(),
            root: Some(LatentAnchor::identity_at(p(0.02, 0.01))),
            intermediates: vec![],
        };
        for m in &mut set.motion {
            m.pos_s = m.pos_d + t;
        }
        set.root.as_mut().unwrap().flow_at += t;
        assert!(dam_loss(&set).unwrap() < 1e-12);
    }

    #[test]
    fn intermediate_examples() {
        let mut set = AnchorSet {
            motion: vec![MotionAnchor::identity_at(Point2::ZERO)],
            root: Some(LatentAnchor {
                pos_d: p(0.1, 0.2),
                flow_at: p(-0.3, 0.25),
                theta: Mat2::new(1.2, 0.1, -0.3, 0.8),
            }),
            intermediates: vec![LatentAnchor::identity_at(p(0.5, 0.0))],
        };
        let q = intermediate_prior_flow(&set, 0, p(0.7, -0.4)).unwrap();
        assert!((q - p(0.7, -0.4)).norm() < 1e-15);
        assert_eq!(root_prior_flow(&set, p(0.1, 0.2)).unwrap(), p(-0.3, 0.25));

        set.intermediates[0] = LatentAnchor {
            pos_d: p(0.5, 0.0),
            flow_at: p(0.4, 0.0),
            theta: Mat2::diag(1.0, 0.5),
        };
        let q = intermediate_prior_flow(&set, 0, p(0.5, 0.2)).unwrap();
        assert!((q - p(0.4, 0.1)).norm() < 1e-15);
        assert!(matches!(
            intermediate_prior_flow(&set, 1, Point2::ZERO),
            Err(DamError::IndexOutOfRange { index: 1, len: 1 })
        ));
        assert!(matches!(
            root_prior_at_intermediate(&set, 3),
            Err(DamError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn attention_examples() {
        let a = attention_from_logits(&[vec![0.7], vec![-3.0]]);
        assert_eq!(a.omega, vec![vec![1.0], vec![1.0]]);
        let a = attention_from_logits(&[vec![0.3; 4]]);
        assert!(a.omega[0].iter().all(|&w| (w - 0.25).abs() < 1e-15));
        let a = attention_from_logits(&[vec![0.0, 2f64.ln(), 4f64.ln(), 0.0]]);
        let expected = [1.0 / 8.0, 2.0 / 8.0, 4.0 / 8.0, 1.0 / 8.0];
        for (w, e) in a.omega[0].iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
    }

    #[test]
    fn hdam_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set = consistent_set(&mut rng, 5, 3);
        let attn = attention_from_logits(&vec![vec![0.0; 5]; 3]);
        assert!(hdam_loss(&set, &attn).unwrap() < 1e-12);

        // one intermediate, one motion anchor: upper residual (0, 0.3), lower (0.4, 0)
        let set = AnchorSet {
            motion: vec![MotionAnchor {
                pos_d: p(0.2, 0.2),
                pos_s: p(0.6, 0.5),
                theta: Mat2::IDENTITY,
            }],
            root: Some(LatentAnchor::identity_at(Point2::ZERO)),
            intermediates: vec![LatentAnchor {
                pos_d: p(-0.2, 0.1),
                flow_at: p(0.2, 0.1),
                theta: Mat2::IDENTITY,
            }],
        };
        let res = hdam_residuals(&set).unwrap();
        assert!((res.upper[0][0] - p(0.0, 0.3)).norm() < 1e-15);
        assert!((res.lower[0] - p(0.4, 0.0)).norm() < 1e-15);
        let attn = attention_from_logits(&[vec![0.0]]);
        assert!((hdam_loss(&set, &attn).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn hdam_dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&mut rng, 3, 2);
        let attn = attention_from_logits(&vec![vec![0.0; 3]; 1]);
        assert!(matches!(
            hdam_loss(&set, &attn),
            Err(DamError::DimensionMismatch(_))
        ));
        let attn = attention_from_logits(&vec![vec![0.0; 4]; 2]);
        assert!(matches!(
            hdam_loss(&set, &attn),
            Err(DamError::DimensionMismatch(_))
        ));
        let flat = random_set(&mut rng, 3, 0);
        let attn = attention_from_logits(&[]);
        assert!(matches!(
            hdam_loss(&flat, &attn),
            Err(DamError::DimensionMismatch(_))
        ));
        let mut orphan = random_set(&mut rng, 3, 1);
        orphan.root = None;
        let attn = attention_from_logits(&[vec![0.0; 3]]);
        assert!(matches!(
            hdam_loss(&orphan, &attn),
            Err(DamError::MissingRoot)
        ));
    }

    #[test]
    fn hierarchy_collapses_to_dam() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let mut set = random_set(&mut rng, 6, 1);
            let r = set.root.unwrap();
            let a = &mut set.intermediates[0];
            a.theta = r.theta;
            a.flow_at = r.prior_at(a.pos_d);
            let res = hdam_residuals(&set).unwrap();
            assert!(res.lower[0].norm() < 1e-15);
            let upper: f64 = res.upper[0].iter().map(|v| v.norm()).sum();
            let dam = dam_loss(&set).unwrap();
            assert!((upper - dam).abs() < 1e-9);
            // with uniform ω the weighted upper term is the mean residual
            let attn = attention_from_logits(&[vec![0.0; 6]]);
            let hdam = hdam_loss(&set, &attn).unwrap();
            assert!((hdam - dam / 6.0).abs() < 1e-9);
        }
    }

    fn perturbed_params(v: &[f64], idx: usize, delta: f64) -> Vec<f64> {
        let mut v = v.to_vec();
        v[idx] += delta;
        v
    }

    fn assert_close(an: f64, fd: f64, what: &str) {
        let denom = an.abs().max(fd.abs()).max(1e-8);
        assert!(
            (an - fd).abs() / denom < 1e-4,
            "{what}: analytic {an} vs numeric {fd}"
        );
    }

    #[test]
    fn dam_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for norm in [NormKind::Euclidean, NormKind::Squared] {
            let set = random_set(&mut rng, 4, 2);
            let (_, grad) = dam_loss_grad(&set, norm).unwrap();
            let mut x = Vec::new();
            set.write_flat(&mut x);
            let mut g = Vec::new();
            grad.write_flat(&mut g);
            let h = 1e-5;
            for idx in 0..x.len() {
                let eval = |v: Vec<f64>| {
                    let mut s = set.clone();
                    s.read_flat(&v);
                    dam_loss_with(&s, norm).unwrap()
                };
                let fd = (eval(perturbed_params(&x, idx, h)) - eval(perturbed_params(&x, idx, -h)))
                    / (2.0 * h);
                assert_close(g[idx], fd, &format!("{norm:?} param {idx}"));
            }
        }
    }

    #[test]
    fn hdam_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for norm in [NormKind::Euclidean, NormKind::Squared] {
            let set = random_set(&mut rng, 4, 3);
            let logits: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let attn = attention_from_logits(&logits);
            let (_, grad, glog) = hdam_loss_grad(&set, &attn, norm).unwrap();
            let mut x = Vec::new();
            set.write_flat(&mut x);
            let mut g = Vec::new();
            grad.write_flat(&mut g);
            let h = 1e-5;
            for idx in 0..x.len() {
                let eval = |v: Vec<f64>| {
                    let mut s = set.clone();
                    s.read_flat(&v);
                    hdam_loss_with(&s, &attn, norm).unwrap()
                };
                let fd = (eval(perturbed_params(&x, idx, h)) - eval(perturbed_params(&x, idx, -h)))
                    / (2.0 * h);
                assert_close(g[idx], fd, &format!("{norm:?} param {idx}"));
            }
            for i in 0..3 {
                for k in 0..4 {
                    let eval = |d: f64| {
                        let mut l = logits.clone();
                        l[i][k] += d;
                        hdam_loss_with(&set, &attention_from_logits(&l), norm).unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    assert_close(glog[i][k], fd, &format!("{norm:?} logit {i},{k}"));
                }
            }
        }
    }

    #[test]
    fn zero_residual_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = consistent_set(&mut rng, 3, 0);
        let (loss, grad) = dam_loss_grad(&set, NormKind::Euclidean).unwrap();
        assert!(loss < 1e-12);
        let mut g = Vec::new();
        grad.write_flat(&mut g);
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 1 + (seed % 5) as usize, 1 + (seed % 3) as usize);
            let attn = attention_from_logits(&vec![vec![0.1; set.motion.len()]; set.intermediates.len()]);
            prop_assert!(dam_loss(&set).unwrap() >= 0.0);
            prop_assert!(hdam_loss(&set, &attn).unwrap() >= 0.0);
        }

        #[test]
        fn dam_is_translation_invariant(seed in 0u64..5000, tx in -0.5f64..0.5, ty in -0.5f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 5, 0);
            let mut moved = set.clone();
            for m in &mut moved.motion {
                m.pos_s += p(tx, ty);
            }
            moved.root.as_mut().unwrap().flow_at += p(tx, ty);
            let a = dam_residuals(&set).unwrap();
            let b = dam_residuals(&moved).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((*u - *v).norm() < 1e-12);
            }
        }

        #[test]
        fn softmax_shift_leaves_hdam_unchanged(seed in 0u64..5000, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = random_set(&mut rng, 4, 2);
            let logits: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
            let shifted: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let a = hdam_loss(&set, &attention_from_logits(&logits)).unwrap();
            let b = hdam_loss(&set, &attention_from_logits(&shifted)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
