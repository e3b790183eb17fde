//! Composite detection loss and a finite-difference gradient checker.
//!
//! Every term is written once over [`Scalar`]; the training path evaluates
//! it on forward-mode duals so each slot's logit gradients come out exact.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, TargetAssignment};
use crate::error::{config_err, shape_err, Error, Result};
use crate::geometry::PixelBox;
use crate::model_graph::PredictionGrid;
use crate::scalar::{Dual, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    #[serde(rename = "box")]
    pub box_w: f64,
    pub obj: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { box_w: 0.05, obj: 1.0, cls: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub fl_gamma: f64,
    /// Apply the focal modulation to objectness as well.
    pub focal_obj: bool,
    /// Objectness weight per head level, finest first.
    pub balance: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { weights: LossWeights::default(), fl_gamma: 0.3, focal_obj: false, balance: vec![4.0, 1.0, 0.4, 0.1] }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.box_w, w.obj, w.cls].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(config_err("loss weights must be finite and non-negative"));
        }
        if !(self.fl_gamma >= 0.0) {
            return Err(config_err("fl_gamma must be non-negative"));
        }
        if self.balance.iter().any(|v| !(*v >= 0.0)) {
            return Err(config_err("objectness balance must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "box")]
    pub box_loss: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
    pub assigned: usize,
}

/// Complete IoU of two center-form boxes. `eps` guards the divisions.
pub fn ciou_s<S: Scalar>(a: [S; 4], b: [S; 4], eps: f64) -> S {
    let half = |v: S| v * 0.5;
    let (ax1, ax2) = (a[0] - half(a[2]), a[0] + half(a[2]));
    let (ay1, ay2) = (a[1] - half(a[3]), a[1] + half(a[3]));
    let (bx1, bx2) = (b[0] - half(b[2]), b[0] + half(b[2]));
    let (by1, by2) = (b[1] - half(b[3]), b[1] + half(b[3]));
    let zero = S::cst(0.0);
    let iw = (ax2.min_s(bx2) - ax1.max_s(bx1)).max_s(zero);
    let ih = (ay2.min_s(by2) - ay1.max_s(by1)).max_s(zero);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter + eps;
    let iou = inter / union;
    let cw = ax2.max_s(bx2) - ax1.min_s(bx1);
    let ch = ay2.max_s(by2) - ay1.min_s(by1);
    let c2 = cw * cw + ch * ch + eps;
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let rho2 = dx * dx + dy * dy;
    let da = (b[2] / (b[3] + eps)).atan() - (a[2] / (a[3] + eps)).atan();
    let v = da * da * (4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    if v.value() == 0.0 {
        // aspect penalty and its weight vanish together; skip the 0/0
        return iou - rho2 / c2;
    }
    let alpha = v / (v - iou + (1.0 + eps));
    iou - (rho2 / c2 + v * alpha)
}

pub fn ciou(a: &PixelBox, b: &PixelBox) -> Result<f64> {
    for bx in [a, b] {
        let ok = [bx.cx, bx.cy, bx.w, bx.h].iter().all(|v| v.is_finite()) && bx.w > 0.0 && bx.h > 0.0;
        if !ok {
            return Err(Error::Domain(format!("degenerate box {bx:?}")));
        }
    }
    Ok(ciou_s([a.cx, a.cy, a.w, a.h], [b.cx, b.cy, b.w, b.h], 0.0))
}

/// Binary cross-entropy on a logit, scaled by `(1 − p_t)^γ`.
pub fn focal_bce_s<S: Scalar>(logit: S, target: f64, gamma: f64) -> S {
    let bce = logit.softplus() - logit * target;
    if gamma == 0.0 {
        return bce;
    }
    let p = logit.sigmoid();
    let p_t = p * target + (S::cst(1.0) - p) * (1.0 - target);
    (S::cst(1.0) - p_t).powf(gamma) * bce
}

pub fn focal_bce(pred_logit: f64, target: f64, gamma: f64) -> f64 {
    focal_bce_s(pred_logit, target, gamma)
}

/// Soft objectness targets, one vector per level aligned with its slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjTargets(pub Vec<Vec<f64>>);

fn slot_index(g: &PredictionGrid, t: &TargetAssignment) -> usize {
    ((t.image * g.ny + t.cell.1) * g.nx + t.cell.0) * g.na + t.anchor
}

fn predicted_box<S: Scalar>(t: [S; 4], anchor: (f64, f64), stride: f64) -> [S; 4] {
    let s: Vec<S> = t.iter().map(|v| v.sigmoid() * 2.0).collect();
    [s[0] - 0.5, s[1] - 0.5, s[2] * s[2] * (anchor.0 / stride), s[3] * s[3] * (anchor.1 / stride)]
}

const BOX_EPS: f64 = 1e-9;

fn check_inputs(preds: &[PredictionGrid], assignments: &[TargetAssignment], anchors: &AnchorSet) -> Result<()> {
    for (i, g) in preds.iter().enumerate() {
        if g.no < 6 || g.data.len() != g.num_slots() * g.no {
            return Err(shape_err(format!("prediction grid {i} is malformed")));
        }
        if anchors.get(g.level).len() != g.na {
            return Err(shape_err(format!("{} has {} anchors but {} prediction slots", g.level, anchors.get(g.level).len(), g.na)));
        }
        if g.batch != preds[0].batch || g.no != preds[0].no {
            return Err(shape_err("prediction grids disagree in batch or outputs"));
        }
    }
    for t in assignments {
        let g = preds
            .iter()
            .find(|g| g.level == t.level)
            .ok_or_else(|| shape_err(format!("assignment at {} has no prediction grid", t.level)))?;
        if t.image >= g.batch || t.cell.0 >= g.nx || t.cell.1 >= g.ny || t.anchor >= g.na || t.bbox.class_id + 5 >= g.no {
            return Err(shape_err(format!("assignment {t:?} falls outside its grid")));
        }
    }
    Ok(())
}

/// Objectness targets implied by the current box predictions: the largest
/// clamped CIoU among the assignments landing on each slot, zero elsewhere.
pub fn objectness_targets(preds: &[PredictionGrid], assignments: &[TargetAssignment], anchors: &AnchorSet) -> Result<ObjTargets> {
    check_inputs(preds, assignments, anchors)?;
    let mut out: Vec<Vec<f64>> = preds.iter().map(|g| vec![0.0; g.num_slots()]).collect();
    for t in assignments {
        let li = preds.iter().position(|g| g.level == t.level).expect("checked");
        let g = &preds[li];
        let raw = g.slot(t.image, t.cell.1, t.cell.0, t.anchor);
        let anchor = anchors.get(g.level)[t.anchor];
        let pb = predicted_box([raw[0], raw[1], raw[2], raw[3]], anchor, g.stride as f64);
        let c = ciou_s(pb, t.offsets, BOX_EPS).clamp(0.0, 1.0);
        let s = &mut out[li][slot_index(g, t)];
        *s = s.max(c);
    }
    Ok(ObjTargets(out))
}

pub fn total_loss(
    preds: &[PredictionGrid],
    assignments: &[TargetAssignment],
    anchors: &AnchorSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    Ok(evaluate(preds, assignments, anchors, cfg, None, false)?.0)
}

/// Loss together with its gradient with respect to every raw prediction.
/// With `frozen` set, objectness targets are taken from it instead of being
/// recomputed from the predictions.
pub fn loss_and_gradient(
    preds: &[PredictionGrid],
    assignments: &[TargetAssignment],
    anchors: &AnchorSet,
    cfg: &LossConfig,
    frozen: Option<&ObjTargets>,
) -> Result<(LossBreakdown, Vec<PredictionGrid>)> {
    let (b, g) = evaluate(preds, assignments, anchors, cfg, frozen, true)?;
    Ok((b, g.expect("gradient requested")))
}

fn evaluate(
    preds: &[PredictionGrid],
    assignments: &[TargetAssignment],
    anchors: &AnchorSet,
    cfg: &LossConfig,
    frozen: Option<&ObjTargets>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<PredictionGrid>>)> {
    cfg.validate()?;
    check_inputs(preds, assignments, anchors)?;
    if cfg.balance.len() < preds.len() {
        return Err(config_err(format!("{} balance weights for {} levels", cfg.balance.len(), preds.len())));
    }
    let w = cfg.weights;
    let mut grads: Option<Vec<PredictionGrid>> = want_grad.then(|| {
        preds.iter().map(|g| PredictionGrid { data: vec![0.0; g.data.len()], ..g.clone() }).collect()
    });

    // canonical order so the reductions do not depend on input order
    let mut order: Vec<&TargetAssignment> = assignments.iter().collect();
    order.sort_by_key(|t| t.key());

    let n = order.len();
    let nc = preds.first().map_or(1, |g| g.no - 5);
    let mut tobj: Vec<Vec<f64>> = preds.iter().map(|g| vec![0.0; g.num_slots()]).collect();
    let (mut box_sum, mut cls_sum) = (0.0, 0.0);
    for t in &order {
        let li = preds.iter().position(|g| g.level == t.level).expect("checked");
        let g = &preds[li];
        let off = g.offset(t.image, t.cell.1, t.cell.0, t.anchor);
        let raw = &g.data[off..off + g.no];
        let anchor = anchors.get(g.level)[t.anchor];
        let tb = t.offsets.map(Dual::<4>::constant);
        let xs = [0, 1, 2, 3].map(|i| Dual::<4>::var(raw[i], i));
        let c = ciou_s(predicted_box(xs, anchor, g.stride as f64), tb, BOX_EPS);
        box_sum += 1.0 - c.v;
        let slot = &mut tobj[li][slot_index(g, t)];
        *slot = slot.max(c.v.clamp(0.0, 1.0));
        for k in 0..nc {
            let target = if k == t.bbox.class_id { 1.0 } else { 0.0 };
            let f = focal_bce_s(Dual::<1>::var(raw[5 + k], 0), target, cfg.fl_gamma);
            cls_sum += f.v;
            if let Some(gr) = grads.as_mut() {
                gr[li].data[off + 5 + k] += w.cls * f.d[0] / (n * nc) as f64;
            }
        }
        if let Some(gr) = grads.as_mut() {
            for i in 0..4 {
                gr[li].data[off + i] -= w.box_w * c.d[i] / n as f64;
            }
        }
    }
    let (box_loss, cls) = if n > 0 { (box_sum / n as f64, cls_sum / (n * nc) as f64) } else { (0.0, 0.0) };

    let obj_gamma = if cfg.focal_obj { cfg.fl_gamma } else { 0.0 };
    let mut obj = 0.0;
    for (li, g) in preds.iter().enumerate() {
        let targets = match frozen {
            Some(f) => f.0.get(li).filter(|v| v.len() == g.num_slots()).ok_or_else(|| shape_err("frozen objectness targets do not match"))?,
            None => &tobj[li],
        };
        let count = g.num_slots() as f64;
        let bal = cfg.balance[li];
        let mut sum = 0.0;
        for (s, &target) in targets.iter().enumerate() {
            let o = s * g.no + 4;
            let f = focal_bce_s(Dual::<1>::var(g.data[o], 0), target, obj_gamma);
            sum += f.v;
            if let Some(gr) = grads.as_mut() {
                gr[li].data[o] += w.obj * bal * f.d[0] / count;
            }
        }
        obj += bal * sum / count;
    }
    let total = w.box_w * box_loss + w.obj * obj + w.cls * cls;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite: box {box_loss} obj {obj} cls {cls}")));
    }
    Ok((LossBreakdown { box_loss, obj, cls, total, assigned: n }, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub coordinates: usize,
    pub seed: u64,
    /// Denominator floor of the relative error, so coordinates whose true
    /// derivative is ~0 are judged on absolute error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { epsilon: 1e-3, coordinates: 200, seed: 0, floor: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against central differences of `f` on a random subset
/// of coordinates (all of them when there are fewer than requested).
pub fn check_gradients<F>(mut f: F, params: &[f64], analytic: &[f64], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() || params.is_empty() {
        return Err(shape_err("gradient and parameter vectors differ in length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = sample(&mut rng, params.len(), opts.coordinates.min(params.len())).into_vec();
    coords.sort_unstable();
    let mut theta = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coordinate: coords[0], analytic: 0.0, numeric: 0.0, checked: coords.len() };
    for &i in &coords {
        let orig = theta[i];
        theta[i] = orig + opts.epsilon;
        let up = f(&theta)?;
        theta[i] = orig - opts.epsilon;
        let down = f(&theta)?;
        theta[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("loss is not finite around coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * opts.epsilon);
        let e = relative_error(analytic[i], numeric, opts.floor);
        if e > report.max_rel_error || !e.is_finite() {
            report = GradCheckReport { max_rel_error: e, worst_coordinate: i, analytic: analytic[i], numeric, ..report };
        }
    }
    Ok(report)
}
