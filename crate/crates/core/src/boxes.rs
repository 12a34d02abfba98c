//! Axis-aligned boxes in continuous image coordinates.
//!
//! Area and overlap use plain continuous geometry: no legacy "+1" pixel
//! convention anywhere, so `iou([0,0,10,10], [1,1,11,11])` is exactly 81/119.

use serde::{Deserialize, Serialize};

/// `(x1, y1)` is the top-left corner, `(x2, y2)` the bottom-right; a valid
/// box has strictly positive extent on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    /// Clip to `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }

    /// Mirror horizontally inside an image of width `w`.
    pub fn flip_h(&self, w: f64) -> Self {
        BBox { x1: w - self.x2, y1: self.y1, x2: w - self.x1, y2: self.y2 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; disjoint boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_iou_one() {
        let b = BBox::new(2.0, 3.0, 9.5, 12.0);
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_iou_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &b), 0.0);
        // Sharing only an edge is still zero overlap.
        let c = BBox::new(1.0, 0.0, 2.0, 1.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn unit_offset_overlap_is_81_over_119() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(1.0, 1.0, 11.0, 11.0);
        assert!((iou(&a, &b) - 81.0 / 119.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let a = BBox::new(0.0, 0.0, 4.0, 6.0);
        let b = BBox::new(2.0, 1.0, 7.0, 5.0);
        assert_eq!(iou(&a, &b), iou(&b, &a));
        let v = iou(&a, &b);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn clip_confines_to_image() {
        let b = BBox::new(-3.0, 5.0, 70.0, 80.0).clip(64.0, 64.0);
        assert_eq!(b, BBox::new(0.0, 5.0, 64.0, 64.0));
    }

    #[test]
    fn flip_is_an_involution() {
        let b = BBox::new(10.0, 4.0, 30.0, 24.0);
        assert_eq!(b.flip_h(64.0).flip_h(64.0), b);
        assert_eq!(b.flip_h(64.0), BBox::new(34.0, 4.0, 54.0, 24.0));
    }
}
