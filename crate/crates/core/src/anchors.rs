//! Anchor priors, box decoding and training target assignment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{BBox, PixelBox};
use crate::model_graph::Level;

pub const DEFAULT_RATIO_THRESHOLD: f64 = 4.0;

/// Anchor `(width, height)` pairs in input pixels, per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub levels: BTreeMap<Level, Vec<(f64, f64)>>,
}

fn stock(level: Level) -> Vec<(f64, f64)> {
    match level {
        Level::P2 => stock(Level::P3).into_iter().map(|(w, h)| (w / 2.0, h / 2.0)).collect(),
        Level::P3 => vec![(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
        Level::P4 => vec![(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
        Level::P5 => vec![(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
    }
}

pub fn default_anchors(levels: &[Level]) -> Result<AnchorSet> {
    if levels.is_empty() {
        return Err(config_err("anchor set needs at least one level"));
    }
    Ok(AnchorSet { levels: levels.iter().map(|&l| (l, stock(l))).collect() })
}

impl AnchorSet {
    pub fn get(&self, level: Level) -> &[(f64, f64)] {
        self.levels.get(&level).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn validate(&self, anchors_per_level: usize) -> Result<()> {
        for (level, anchors) in &self.levels {
            if anchors.len() != anchors_per_level {
                return Err(config_err(format!(
                    "{level} has {} anchors, expected {anchors_per_level}",
                    anchors.len()
                )));
            }
            if anchors.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
                return Err(config_err(format!("{level} anchors must be positive")));
            }
            if anchors.windows(2).any(|p| p[0].0 * p[0].1 > p[1].0 * p[1].1) {
                return Err(config_err(format!("{level} anchors must be sorted by area")));
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes `(tx, ty, tw, th)` at cell `(x, y)` into a pixel-space box.
pub fn decode_box(raw: [f64; 4], cell: (usize, usize), anchor: (f64, f64), stride: f64) -> PixelBox {
    let cx = (2.0 * sigmoid(raw[0]) - 0.5 + cell.0 as f64) * stride;
    let cy = (2.0 * sigmoid(raw[1]) - 0.5 + cell.1 as f64) * stride;
    let w = (2.0 * sigmoid(raw[2])).powi(2) * anchor.0;
    let h = (2.0 * sigmoid(raw[3])).powi(2) * anchor.1;
    PixelBox::new(cx, cy, w, h)
}

/// Largest side ratio between a box and an anchor, both in the same units.
pub fn shape_ratio(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    (w / aw).max(aw / w).max(h / ah).max(ah / h)
}

/// One ground truth placed on one prediction slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetAssignment {
    pub image: usize,
    pub level: Level,
    /// Column, row.
    pub cell: (usize, usize),
    pub anchor: usize,
    pub gt_index: usize,
    pub bbox: BBox,
    /// Center relative to the cell origin and size, in grid units.
    pub offsets: [f64; 4],
}

impl TargetAssignment {
    pub fn key(&self) -> (usize, Level, usize, usize, usize, usize) {
        (self.image, self.level, self.cell.1, self.cell.0, self.anchor, self.gt_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentSet {
    pub assignments: Vec<TargetAssignment>,
    /// Ground truths that matched no anchor on any level.
    pub unmatched: usize,
}

/// Shape-ratio matching with neighbour-cell replication for one image.
/// `grids` gives the square grid side per level.
pub fn assign_targets(
    gts: &[BBox],
    anchors: &AnchorSet,
    grids: &[(Level, usize)],
    ratio_threshold: f64,
) -> AssignmentSet {
    let mut out = AssignmentSet::default();
    let mut matched = vec![false; gts.len()];
    for &(level, side) in grids {
        let stride = level.stride() as f64;
        let n = side as f64;
        for (a, &(aw, ah)) in anchors.get(level).iter().enumerate() {
            let (aw, ah) = (aw / stride, ah / stride);
            for (gi, gt) in gts.iter().enumerate() {
                let (gw, gh) = (gt.w * n, gt.h * n);
                if shape_ratio(gw, gh, aw, ah) >= ratio_threshold {
                    continue;
                }
                matched[gi] = true;
                let (gx, gy) = (gt.cx * n, gt.cy * n);
                let home = ((gx.floor() as usize).min(side - 1), (gy.floor() as usize).min(side - 1));
                let mut cells = vec![home];
                let (fx, fy) = (gx.fract(), gy.fract());
                let (gxi, gyi) = (n - gx, n - gy);
                // the far-side tests are written on fx, fy so that an exact
                // integer coordinate does not map back onto the home cell
                if fx < 0.5 && gx > 1.0 {
                    cells.push((home.0 - 1, home.1));
                }
                if fy < 0.5 && gy > 1.0 {
                    cells.push((home.0, home.1 - 1));
                }
                if fx > 0.5 && gxi > 1.0 {
                    cells.push((home.0 + 1, home.1));
                }
                if fy > 0.5 && gyi > 1.0 {
                    cells.push((home.0, home.1 + 1));
                }
                for cell in cells {
                    out.assignments.push(TargetAssignment {
                        image: 0,
                        level,
                        cell,
                        anchor: a,
                        gt_index: gi,
                        bbox: *gt,
                        offsets: [gx - cell.0 as f64, gy - cell.1 as f64, gw, gh],
                    });
                }
            }
        }
    }
    out.unmatched = matched.iter().filter(|m| !**m).count();
    out
}

/// Assigns every image of a batch, tagging assignments with the image index.
pub fn assign_batch(
    batch: &[Vec<BBox>],
    anchors: &AnchorSet,
    grids: &[(Level, usize)],
    ratio_threshold: f64,
) -> AssignmentSet {
    let mut all = AssignmentSet::default();
    for (image, gts) in batch.iter().enumerate() {
        let s = assign_targets(gts, anchors, grids, ratio_threshold);
        all.unmatched += s.unmatched;
        all.assignments.extend(s.assignments.into_iter().map(|t| TargetAssignment { image, ..t }));
    }
    all
}
