//! Raw head outputs to final detections: confidence, thresholding and
//! per-class greedy NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, sigmoid, AnchorSet};
use crate::error::{shape_err, Result};
use crate::geometry::PixelBox;
use crate::model_graph::PredictionGrid;

pub const DEFAULT_NMS_IOU: f64 = 0.45;
/// Dense threshold used when building PR curves.
pub const EVAL_CONF_THRESHOLD: f64 = 0.001;
pub const DETECT_CONF_THRESHOLD: f64 = 0.25;

/// Smallest decoded side; keeps boxes non-degenerate when size logits saturate.
const MIN_SIDE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub confidence: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn pixel_box(&self) -> PixelBox {
        PixelBox::from_xyxy(self.x1, self.y1, self.x2, self.y2)
    }

    pub fn iou(&self, other: &Detection) -> f64 {
        self.pixel_box().iou(&other.pixel_box())
    }
}

/// Confidence descending, then `(class_id, x1, y1)`.
pub fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.x1.total_cmp(&b.x1))
        .then(a.y1.total_cmp(&b.y1))
}

/// Decodes every slot of every level; returns one list per image.
pub fn decode_predictions(grids: &[PredictionGrid], anchors: &AnchorSet, conf_threshold: f64) -> Result<Vec<Vec<Detection>>> {
    let Some(first) = grids.first() else {
        return Ok(Vec::new());
    };
    let batch = first.batch;
    let mut out = vec![Vec::new(); batch];
    for g in grids {
        if g.batch != batch || g.no < 6 || g.data.len() != g.num_slots() * g.no {
            return Err(shape_err(format!("grid at {:?} does not match the batch layout", g.level)));
        }
        let level_anchors = anchors.get(g.level);
        if level_anchors.len() != g.na {
            return Err(shape_err(format!("{} anchors for {} slots per cell at {:?}", level_anchors.len(), g.na, g.level)));
        }
        for (b, dets) in out.iter_mut().enumerate() {
            for y in 0..g.ny {
                for x in 0..g.nx {
                    for (a, &anchor) in level_anchors.iter().enumerate() {
                        let s = g.slot(b, y, x, a);
                        let (class_id, cls_logit) = s[5..]
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
                        let confidence = sigmoid(s[4]) * sigmoid(cls_logit);
                        if confidence < conf_threshold {
                            continue;
                        }
                        let pb = decode_box([s[0], s[1], s[2], s[3]], (x, y), anchor, g.stride as f64);
                        let (w, h) = (pb.w.max(MIN_SIDE), pb.h.max(MIN_SIDE));
                        dets.push(Detection {
                            x1: pb.cx - w / 2.0,
                            y1: pb.cy - h / 2.0,
                            x2: pb.cx + w / 2.0,
                            y2: pb.cy + h / 2.0,
                            confidence,
                            class_id,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-class greedy suppression of boxes overlapping a kept box by more than
/// `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if !kept.iter().any(|k| k.class_id == d.class_id && k.iou(&d) > iou_threshold) {
            kept.push(d);
        }
    }
    kept
}
