//! Box types shared by assignment, augmentation, post-processing and scoring.

use serde::{Deserialize, Serialize};

/// Ground-truth box in fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h, class_id }
    }

    pub fn is_valid(&self, num_classes: usize) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        self.class_id < num_classes
            && unit(self.cx)
            && unit(self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
            && self.to_pixels(1.0, 1.0).clip(1.0, 1.0).is_some()
    }

    pub fn to_pixels(&self, width: f64, height: f64) -> PixelBox {
        PixelBox::new(self.cx * width, self.cy * height, self.w * width, self.h * height)
    }

    pub fn from_pixels(b: &PixelBox, width: f64, height: f64, class_id: usize) -> Self {
        Self::new(class_id, b.cx / width, b.cy / height, b.w / width, b.h / height)
    }
}

/// Axis-aligned box in pixels, center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_xyxy(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn xyxy(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection with `[0, width] × [0, height]`, or `None` if empty.
    pub fn clip(&self, width: f64, height: f64) -> Option<PixelBox> {
        let [x1, y1, x2, y2] = self.xyxy();
        let (x1, y1) = (x1.clamp(0.0, width), y1.clamp(0.0, height));
        let (x2, y2) = (x2.clamp(0.0, width), y2.clamp(0.0, height));
        (x2 > x1 && y2 > y1).then(|| PixelBox::from_xyxy(x1, y1, x2, y2))
    }

    pub fn intersection(&self, other: &PixelBox) -> f64 {
        let [a1, b1, a2, b2] = self.xyxy();
        let [c1, d1, c2, d2] = other.xyxy();
        let iw = (a2.min(c2) - a1.max(c1)).max(0.0);
        let ih = (b2.min(d2) - b1.max(d1)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &PixelBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_half_overlap() {
        let a = PixelBox::from_xyxy(0.0, 0.0, 2.0, 2.0);
        let b = PixelBox::from_xyxy(1.0, 0.0, 3.0, 2.0);
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(a.iou(&PixelBox::from_xyxy(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn clip_drops_outside_boxes() {
        assert!(PixelBox::new(-5.0, 5.0, 2.0, 2.0).clip(10.0, 10.0).is_none());
        let c = PixelBox::new(9.0, 5.0, 4.0, 2.0).clip(10.0, 10.0).unwrap();
        assert_eq!(c.xyxy(), [7.0, 4.0, 10.0, 6.0]);
    }

    #[test]
    fn validity_checks_class_and_extent() {
        assert!(BBox::new(1, 0.5, 0.5, 0.1, 0.1).is_valid(2));
        assert!(!BBox::new(2, 0.5, 0.5, 0.1, 0.1).is_valid(2));
        assert!(!BBox::new(0, 0.5, 0.5, 0.0, 0.1).is_valid(2));
        assert!(!BBox::new(0, 1.2, 0.5, 0.1, 0.1).is_valid(2));
    }
}
