//! Detection matching and the detection metrics: precision, recall, per-class
//! AP, mAP@0.5 and the confusion matrix.

mod plot;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use plot::{confusion_svg, pr_curve_svg};

use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::postprocess::{rank, Detection};

pub const EVAL_IOU: f64 = 0.5;
/// Confidence cut for the confusion matrix.
pub const CONFUSION_CONF: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: PixelBox,
    pub class_id: usize,
}

fn degenerate(b: &PixelBox) -> bool {
    !(b.w > 0.0 && b.h > 0.0 && b.cx.is_finite() && b.cy.is_finite() && b.w.is_finite() && b.h.is_finite())
}

pub fn iou(a: &PixelBox, b: &PixelBox) -> Result<f64> {
    if degenerate(a) || degenerate(b) {
        return Err(Error::Domain(format!("IoU of degenerate box {a:?} / {b:?}")));
    }
    Ok(a.iou(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// True positive flag per detection, in input order.
    pub tp: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
    pub unmatched_gts: usize,
}

/// Greedy per-class matching of confidence-sorted detections. Each detection
/// takes the highest-IoU unmatched same-class truth at or above `iou_thr`;
/// IoU ties go to the lower truth index.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut matched_gt = Vec::with_capacity(dets.len());
    for d in dets {
        let db = d.pixel_box();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let v = db.iou(&g.bbox);
            if v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        matched_gt.push(best.map(|(j, _)| j));
    }
    MatchResult {
        tp: matched_gt.iter().map(Option::is_some).collect(),
        unmatched_gts: taken.iter().filter(|t| !**t).count(),
        matched_gt,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per detection, confidence descending.
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
    /// Set when detections exist but there are no truths to recall.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Cumulative precision and recall over `(confidence, is_tp)` pairs, plus
/// the cut with the highest F1. With no detections, precision is 1 and
/// recall 0; with no truths, recall is 0 and the curve is flagged.
pub fn precision_recall(scored: &[(f64, bool)], n_gt: usize) -> (PrCurve, OperatingPoint) {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut points = Vec::with_capacity(scored.len());
    let mut op = OperatingPoint { confidence: 1.0, precision: 1.0, recall: 0.0, f1: 0.0, tp: 0, fp: 0, fn_: n_gt };
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in order {
        let (conf, hit) = scored[i];
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        points.push(PrPoint { confidence: conf, precision, recall });
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        if f1 > op.f1 {
            op = OperatingPoint { confidence: conf, precision, recall, f1, tp, fp, fn_: n_gt - tp.min(n_gt) };
        }
    }
    let recall_undefined = n_gt == 0 && !scored.is_empty();
    (PrCurve { points, n_gt, recall_undefined }, op)
}

/// All-point area under the non-increasing precision envelope.
pub fn average_precision(curve: &PrCurve) -> f64 {
    if curve.n_gt == 0 || curve.points.is_empty() {
        return 0.0;
    }
    let mut env: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut prev = 0.0;
    let mut ap = 0.0;
    for (p, e) in curve.points.iter().zip(&env) {
        ap += (p.recall - prev) * e;
        prev = p.recall;
    }
    ap
}

pub fn map_at_50(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::Domain("mAP needs at least one class".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Rows are truth classes with a final background row for spurious
/// detections; columns are predicted classes with a final background column
/// for missed truths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![vec![0; num_classes + 1]; num_classes + 1] }
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }
}

/// One image's confusion counts. Detections at or above `conf_thr` are
/// matched class-agnostically so that cross-class confusions are visible.
pub fn confusion_matrix(dets: &[Detection], gts: &[GroundTruth], iou_thr: f64, conf_thr: f64, num_classes: usize) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(num_classes);
    let bg = num_classes;
    let mut kept: Vec<Detection> = dets.iter().filter(|d| d.confidence >= conf_thr).copied().collect();
    kept.sort_by(rank);
    let mut taken = vec![false; gts.len()];
    for d in &kept {
        let db = d.pixel_box();
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let v = db.iou(&g.bbox);
            if !taken[j] && v >= iou_thr && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        match best {
            Some((j, _)) => {
                taken[j] = true;
                m.counts[gts[j].class_id.min(bg)][d.class_id.min(bg)] += 1;
            }
            None => m.counts[bg][d.class_id.min(bg)] += 1,
        }
    }
    for (g, t) in gts.iter().zip(&taken) {
        if !t {
            m.counts[g.class_id.min(bg)][bg] += 1;
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub n_gt: usize,
    pub ap: f64,
    pub operating_point: OperatingPoint,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub classes: Vec<ClassMetrics>,
    /// Mean AP over classes that have at least one truth.
    pub map50: f64,
    /// Means over the same classes of the max-F1 operating points.
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Writes `report.json`, `pr_curve.svg` and `confusion_matrix.svg`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        fs::write(dir.join("pr_curve.svg"), pr_curve_svg(self))?;
        fs::write(dir.join("confusion_matrix.svg"), confusion_svg(self))?;
        Ok(())
    }
}

/// Scores per-image detections against per-image truths.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_names: &[String], iou_thr: f64) -> Result<EvalReport> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!("{} detection lists for {} images", dets.len(), gts.len())));
    }
    if class_names.is_empty() {
        return Err(Error::Domain("evaluation needs at least one class".into()));
    }
    let nc = class_names.len();
    let mut scored = vec![Vec::new(); nc];
    let mut n_gt = vec![0usize; nc];
    let mut confusion = ConfusionMatrix::new(nc);
    for (d, g) in dets.iter().zip(gts) {
        if let Some(bad) = d.iter().map(|x| x.class_id).chain(g.iter().map(|x| x.class_id)).find(|&c| c >= nc) {
            return Err(Error::Domain(format!("class id {bad} with {nc} classes")));
        }
        let mut sorted = d.clone();
        sorted.sort_by(rank);
        let m = match_detections(&sorted, g, iou_thr);
        for (det, hit) in sorted.iter().zip(&m.tp) {
            scored[det.class_id].push((det.confidence, *hit));
        }
        for t in g {
            n_gt[t.class_id] += 1;
        }
        confusion.add(&confusion_matrix(d, g, iou_thr, CONFUSION_CONF, nc));
    }
    let classes: Vec<ClassMetrics> = (0..nc)
        .map(|c| {
            let (curve, operating_point) = precision_recall(&scored[c], n_gt[c]);
            ClassMetrics { name: class_names[c].clone(), n_gt: n_gt[c], ap: average_precision(&curve), operating_point, curve }
        })
        .collect();
    let present: Vec<&ClassMetrics> = classes.iter().filter(|c| c.n_gt > 0).collect();
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64| {
        if present.is_empty() { 0.0 } else { present.iter().map(|c| f(c)).sum::<f64>() / present.len() as f64 }
    };
    Ok(EvalReport {
        iou_threshold: iou_thr,
        map50: mean(&|c| c.ap),
        precision: mean(&|c| c.operating_point.precision),
        recall: mean(&|c| c.operating_point.recall),
        tp: classes.iter().map(|c| c.operating_point.tp).sum(),
        fp: classes.iter().map(|c| c.operating_point.fp).sum(),
        fn_: classes.iter().map(|c| c.operating_point.fn_).sum(),
        classes,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sq(x: f64, y: f64, s: f64) -> PixelBox {
        PixelBox::from_xyxy(x, y, x + s, y + s)
    }

    fn det(b: PixelBox, conf: f64, class_id: usize) -> Detection {
        let [x1, y1, x2, y2] = b.xyxy();
        Detection { x1, y1, x2, y2, confidence: conf, class_id }
    }

    fn gt(b: PixelBox, class_id: usize) -> GroundTruth {
        GroundTruth { bbox: b, class_id }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&sq(0.0, 0.0, 1.0), &sq(0.0, 0.0, 1.0)).unwrap(), 1.0);
        assert_eq!(iou(&sq(0.0, 0.0, 1.0), &sq(3.0, 0.0, 1.0)).unwrap(), 0.0);
        assert!((iou(&sq(0.0, 0.0, 1.0), &sq(0.5, 0.0, 1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(iou(&PixelBox::new(0.0, 0.0, 0.0, 1.0), &sq(0.0, 0.0, 1.0)), Err(Error::Domain(_))));
    }

    #[test]
    fn single_match_rule() {
        let g = [gt(sq(0.0, 0.0, 10.0), 0)];
        let one = match_detections(&[det(sq(0.0, 0.0, 10.0), 0.9, 0)], &g, 0.5);
        assert_eq!((one.tp.clone(), one.unmatched_gts), (vec![true], 0));
        let two = match_detections(&[det(sq(0.0, 0.0, 10.0), 0.9, 0), det(sq(0.5, 0.0, 10.0), 0.8, 0)], &g, 0.5);
        assert_eq!(two.tp, vec![true, false]);
        let wrong_class = match_detections(&[det(sq(0.0, 0.0, 10.0), 0.9, 1)], &g, 0.5);
        assert_eq!((wrong_class.tp, wrong_class.unmatched_gts), (vec![false], 1));
    }

    /// Greedy matching is the lexicographic maximum, in detection order, of
    /// the matched IoU (ties to the lower truth index) over every injective
    /// same-class assignment clearing the threshold.
    fn exhaustive(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<Option<usize>> {
        fn rec(i: usize, dets: &[Detection], gts: &[GroundTruth], thr: f64, used: &mut Vec<bool>, cur: &mut Vec<Option<usize>>, all: &mut Vec<Vec<Option<usize>>>) {
            if i == dets.len() {
                all.push(cur.clone());
                return;
            }
            cur.push(None);
            rec(i + 1, dets, gts, thr, used, cur, all);
            cur.pop();
            for j in 0..gts.len() {
                if !used[j] && gts[j].class_id == dets[i].class_id && dets[i].pixel_box().iou(&gts[j].bbox) >= thr {
                    used[j] = true;
                    cur.push(Some(j));
                    rec(i + 1, dets, gts, thr, used, cur, all);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut all = Vec::new();
        rec(0, dets, gts, thr, &mut vec![false; gts.len()], &mut Vec::new(), &mut all);
        let key = |a: &Vec<Option<usize>>| -> Vec<(f64, i64)> {
            a.iter()
                .enumerate()
                .map(|(i, m)| match m {
                    Some(j) => (dets[i].pixel_box().iou(&gts[*j].bbox), -(*j as i64)),
                    None => (-1.0, 0),
                })
                .collect()
        };
        all.into_iter()
            .max_by(|a, b| key(a).partial_cmp(&key(b)).unwrap())
            .unwrap()
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<Detection>, Vec<GroundTruth>)> {
        let b = (0.0..20.0f64, 0.0..20.0f64, 5.0..15.0f64, 0..2usize);
        (prop::collection::vec((b.clone(), 0.0..1.0f64), 0..=6), prop::collection::vec(b, 0..=4)).prop_map(|(d, g)| {
            let mut d: Vec<Detection> = d.into_iter().map(|((x, y, s, c), p)| det(sq(x, y, s), p, c)).collect();
            d.sort_by(rank);
            (d, g.into_iter().map(|(x, y, s, c)| gt(sq(x, y, s), c)).collect())
        })
    }

    #[test]
    fn hand_cumulative_sums() {
        let (c, op) = precision_recall(&[(0.9, true), (0.8, false), (0.7, true)], 2);
        let p: Vec<f64> = c.points.iter().map(|p| p.precision).collect();
        let r: Vec<f64> = c.points.iter().map(|p| p.recall).collect();
        assert_eq!(&p[..2], &[1.0, 0.5]);
        assert!((p[2] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r, vec![0.5, 0.5, 1.0]);
        assert!((average_precision(&c) - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!((op.tp, op.fp, op.fn_), (2, 1, 0));
        assert!((op.precision - op.tp as f64 / (op.tp + op.fp) as f64).abs() < 1e-12);
    }

    #[test]
    fn curve_conventions() {
        let (c, _) = precision_recall(&[(0.9, true), (0.5, true)], 2);
        assert!(c.points.iter().all(|p| p.precision == 1.0));
        assert_eq!(average_precision(&c), 1.0);
        let (c, op) = precision_recall(&[], 3);
        assert!(c.points.is_empty());
        assert_eq!((op.precision, op.recall), (1.0, 0.0));
        let (c, _) = precision_recall(&[(0.9, false), (0.2, false)], 3);
        assert_eq!(average_precision(&c), 0.0);
        let (c, op) = precision_recall(&[(0.9, false)], 0);
        assert!(c.recall_undefined);
        assert_eq!(op.recall, 0.0);
    }

    #[test]
    fn map_examples() {
        assert_eq!(map_at_50(&[1.0, 0.5]).unwrap(), 0.75);
        assert_eq!(map_at_50(&[0.3]).unwrap(), 0.3);
        let m = map_at_50(&[0.997, 0.996, 0.994, 0.995]).unwrap();
        assert!((m - 0.9955).abs() < 1e-12);
        assert_eq!((m * 1000.0).round() / 1000.0, 0.996);
        assert!(map_at_50(&[]).is_err());
    }

    #[test]
    fn confusion_examples() {
        let g = [gt(sq(0.0, 0.0, 10.0), 0), gt(sq(20.0, 0.0, 10.0), 1)];
        let perfect = confusion_matrix(&[det(sq(0.0, 0.0, 10.0), 0.9, 0), det(sq(20.0, 0.0, 10.0), 0.9, 1)], &g, 0.5, 0.25, 2);
        assert_eq!(perfect.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        let none = confusion_matrix(&[], &g, 0.5, 0.25, 2);
        assert_eq!(none.counts, vec![vec![0, 0, 1], vec![0, 0, 1], vec![0, 0, 0]]);
    }

    #[test]
    fn five_object_scene_matches_hand_count() {
        // truths: class 0 at A, class 1 at B, class 1 at C
        let g = [gt(sq(0.0, 0.0, 10.0), 0), gt(sq(20.0, 0.0, 10.0), 1), gt(sq(40.0, 0.0, 10.0), 1)];
        let d = [
            det(sq(0.0, 0.0, 10.0), 0.9, 0),   // A correct
            det(sq(20.5, 0.0, 10.0), 0.8, 0),  // B called class 0
            det(sq(80.0, 0.0, 10.0), 0.7, 1),  // spurious class 1
            det(sq(40.0, 0.0, 10.0), 0.1, 1),  // C, below confidence cut
            det(sq(0.0, 0.5, 10.0), 0.6, 0),   // duplicate on A
        ];
        let m = confusion_matrix(&d, &g, 0.5, 0.25, 2);
        assert_eq!(m.counts, vec![vec![1, 0, 0], vec![1, 0, 1], vec![1, 1, 0]]);
        for (c, row) in m.counts.iter().take(2).enumerate() {
            assert_eq!(row.iter().sum::<usize>(), g.iter().filter(|t| t.class_id == c).count());
        }
    }

    /// Exact integral of `r -> max{p_i : r_i >= r}` over `[0, max recall]`,
    /// evaluated on the union of recall breakpoints.
    fn envelope_integral(c: &PrCurve) -> f64 {
        let mut rs: Vec<f64> = c.points.iter().map(|p| p.recall).collect();
        rs.push(0.0);
        rs.sort_by(f64::total_cmp);
        rs.dedup();
        rs.windows(2)
            .map(|w| {
                let mid = 0.5 * (w[0] + w[1]);
                let env = c.points.iter().filter(|p| p.recall >= mid).map(|p| p.precision).fold(0.0, f64::max);
                (w[1] - w[0]) * env
            })
            .sum()
    }

    fn arb_scored() -> impl Strategy<Value = (Vec<(f64, bool)>, usize)> {
        prop::collection::vec((0.0..1.0f64, any::<bool>()), 0..40).prop_flat_map(|s| {
            let tps = s.iter().filter(|x| x.1).count();
            (Just(s), tps.max(1)..tps + 5)
        })
    }

    proptest! {
        #[test]
        fn matching_equals_exhaustive_oracle((d, g) in arb_scene()) {
            let m = match_detections(&d, &g, 0.5);
            prop_assert_eq!(m.matched_gt.clone(), exhaustive(&d, &g, 0.5));
            prop_assert_eq!(m.unmatched_gts, g.len() - m.tp.iter().filter(|t| **t).count());
        }

        #[test]
        fn ap_equals_envelope_integral((s, n) in arb_scored()) {
            let (c, _) = precision_recall(&s, n);
            prop_assert!((average_precision(&c) - envelope_integral(&c)).abs() < 1e-9);
            for w in c.points.windows(2) {
                prop_assert!(w[1].recall >= w[0].recall);
            }
            prop_assert!(c.points.iter().all(|p| (0.0..=1.0).contains(&p.precision) && (0.0..=1.0).contains(&p.recall)));
        }

        #[test]
        fn ap_responds_monotonically_to_extra_detections((s, n) in arb_scored()) {
            let (c, _) = precision_recall(&s, n);
            let base = average_precision(&c);
            let mut fp = s.clone();
            fp.push((0.0, false));
            prop_assert!(average_precision(&precision_recall(&fp, n).0) <= base + 1e-12);
            let mut tp = s.clone();
            tp.push((2.0, true));
            prop_assert!(average_precision(&precision_recall(&tp, n + 1).0) >= base - 1e-12);
        }

        #[test]
        fn map_ignores_class_order(mut aps in prop::collection::vec(0.0..1.0f64, 1..8), k in 0usize..8) {
            let a = map_at_50(&aps).unwrap();
            let len = aps.len();
            aps.rotate_left(k % len);
            prop_assert!((map_at_50(&aps).unwrap() - a).abs() < 1e-12);
        }
    }

    #[test]
    fn report_is_consistent_and_writes_artifacts() {
        let names = vec!["a".to_string(), "b".to_string()];
        let gts = vec![vec![gt(sq(0.0, 0.0, 10.0), 0)], vec![gt(sq(5.0, 5.0, 10.0), 1)]];
        let dets = vec![vec![det(sq(0.0, 0.0, 10.0), 0.9, 0), det(sq(30.0, 0.0, 10.0), 0.4, 1)], vec![det(sq(5.0, 5.0, 10.0), 0.8, 1)]];
        let r = evaluate(&dets, &gts, &names, EVAL_IOU).unwrap();
        assert_eq!(r.map50, 1.0);
        assert_eq!((r.tp, r.fp, r.fn_), (2, 0, 0));
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        for f in ["report.json", "pr_curve.svg", "confusion_matrix.svg"] {
            assert!(dir.path().join(f).exists());
        }
        let back: EvalReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.map50, r.map50);
    }
}
