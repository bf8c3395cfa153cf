//! Evaluation metrics: image L1, average keypoint distance and flow
//! endpoint error.

use serde::{Deserialize, Serialize};

use crate::error::{DamError, Result};
use crate::flow::FlowField;
use crate::geometry::{GridSpec, Point2};
use crate::numeric;
use crate::warp::ImageGrid;

pub fn l1_metric(generated: &ImageGrid, target: &ImageGrid) -> Result<f64> {
    if !generated.same_shape(target) {
        return Err(DamError::DimensionMismatch(
            "generated and target images differ in shape".into(),
        ));
    }
    let n = generated.values().len() as f64;
    Ok(numeric::sum(
        generated
            .values()
            .iter()
            .zip(target.values())
            .map(|(a, b)| (a - b).abs()),
    ) / n)
}

/// Mean Euclidean distance between index-aligned keypoints, in the units of
/// the inputs.
pub fn akd_metric(pred: &[Point2], gt: &[Point2]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(DamError::DimensionMismatch(format!(
            "{} predicted vs {} ground-truth keypoints",
            pred.len(),
            gt.len()
        )));
    }
    Ok(numeric::sum(pred.iter().zip(gt).map(|(a, b)| (*a - *b).norm())) / pred.len() as f64)
}

/// Converts a normalized-coordinate displacement to pixels.
pub fn to_pixels(spec: &GridSpec, v: Point2) -> Point2 {
    Point2::new(v.x * spec.px_per_unit_x(), v.y * spec.px_per_unit_y())
}

/// AKD measured in pixels of `spec`.
pub fn akd_metric_px(spec: &GridSpec, pred: &[Point2], gt: &[Point2]) -> Result<f64> {
    let p: Vec<Point2> = pred.iter().map(|&v| to_pixels(spec, v)).collect();
    let g: Vec<Point2> = gt.iter().map(|&v| to_pixels(spec, v)).collect();
    akd_metric(&p, &g)
}

/// Mean endpoint error in pixels over the foreground.
pub fn epe_metric(pred: &FlowField, gt: &FlowField, foreground: &[bool]) -> Result<f64> {
    let spec = pred.spec();
    if gt.spec() != spec || foreground.len() != spec.len() {
        return Err(DamError::DimensionMismatch(
            "flow fields and foreground mask differ in size".into(),
        ));
    }
    let errors: Vec<f64> = endpoint_errors(pred, gt)
        .zip(foreground)
        .filter(|(_, &fg)| fg)
        .map(|(e, _)| e)
        .collect();
    if errors.is_empty() {
        return Err(DamError::EmptyForeground);
    }
    Ok(numeric::sum(errors.iter().copied()) / errors.len() as f64)
}

/// Per-pixel endpoint error in pixels.
pub fn endpoint_errors<'a>(
    pred: &'a FlowField,
    gt: &'a FlowField,
) -> impl Iterator<Item = f64> + 'a {
    let spec = pred.spec();
    pred.vectors()
        .iter()
        .zip(gt.vectors())
        .map(move |(a, b)| to_pixels(&spec, *a - *b).norm())
}

/// Joints predicted by a fitted backward flow: the flow sampled at the
/// driving-frame joints.
pub fn predicted_joints(pred: &FlowField, driving_joints: &[Point2]) -> Vec<Point2> {
    driving_joints.iter().map(|&j| pred.sample(j)).collect()
}

/// All metrics for one scene. `generated` is the source warped by `pred`.
pub struct SceneInputs<'a> {
    pub generated: &'a ImageGrid,
    pub target: &'a ImageGrid,
    pub pred: &'a FlowField,
    pub gt: &'a FlowField,
    pub foreground: &'a [bool],
    pub source_joints: &'a [Point2],
    pub driving_joints: &'a [Point2],
}

pub fn evaluate_scene(name: &str, inputs: &SceneInputs<'_>) -> Result<SceneEval> {
    let joints = predicted_joints(inputs.pred, inputs.driving_joints);
    let spec = inputs.pred.spec();
    Ok(SceneEval {
        name: name.to_string(),
        l1: l1_metric(inputs.generated, inputs.target)?,
        akd: akd_metric(&joints, inputs.source_joints)?,
        akd_px: akd_metric_px(&spec, &joints, inputs.source_joints)?,
        epe: epe_metric(inputs.pred, inputs.gt, inputs.foreground)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEval {
    pub name: String,
    pub l1: f64,
    pub akd: f64,
    pub akd_px: f64,
    pub epe: f64,
}

/// Aggregate report; `akd` is in normalized units, `akd_px` and `epe` in
/// pixels. MKR is not computed (it needs a keypoint detector).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub l1: f64,
    pub akd: f64,
    pub akd_px: f64,
    pub epe: f64,
    pub scenes: Vec<SceneEval>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn from_scenes(scenes: Vec<SceneEval>) -> Self {
        let n = scenes.len().max(1) as f64;
        let mean = |f: fn(&SceneEval) -> f64| numeric::sum(scenes.iter().map(f)) / n;
        EvalReport {
            l1: mean(|s| s.l1),
            akd: mean(|s| s.akd),
            akd_px: mean(|s| s.akd_px),
            epe: mean(|s| s.epe),
            notes: vec!["MKR not reported: requires an external keypoint detector".into()],
            scenes,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table with one row per scene and a mean row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>10} {:>10} {:>10}\n",
            "scene", "L1", "AKD", "AKD(px)", "EPE(px)"
        ));
        let row = |name: &str, l1: f64, akd: f64, akd_px: f64, epe: f64| {
            format!("{name:<24} {l1:>10.5} {akd:>10.5} {akd_px:>10.4} {epe:>10.4}\n")
        };
        for s in &self.scenes {
            out.push_str(&row(&s.name, s.l1, s.akd, s.akd_px, s.epe));
        }
        out.push_str(&row("mean", self.l1, self.akd, self.akd_px, self.epe));
        out
    }
}
