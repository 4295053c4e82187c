//! Box arithmetic, overlap and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in continuous pixel coordinates: `(x_t, y_t)` is the
/// left-top corner, `(x_b, y_b)` the right-bottom one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_t: f64,
    pub y_t: f64,
    pub x_b: f64,
    pub y_b: f64,
}

impl BBox {
    pub fn new(x_t: f64, y_t: f64, x_b: f64, y_b: f64) -> Self {
        Self { x_t, y_t, x_b, y_b }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x_t, self.y_t, self.x_b, self.y_b]
            .iter()
            .all(|v| v.is_finite())
            && self.x_t <= self.x_b
            && self.y_t <= self.y_b
    }

    pub fn width(&self) -> f64 {
        self.x_b - self.x_t
    }

    pub fn height(&self) -> f64 {
        self.y_b - self.y_t
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_t + self.x_b) / 2.0, (self.y_t + self.y_b) / 2.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x_b.min(other.x_b) - self.x_t.max(other.x_t)).max(0.0);
        let h = (self.y_b.min(other.y_b) - self.y_t.max(other.y_t)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x_t * s, self.y_t * s, self.x_b * s, self.y_b * s)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x_t + dx, self.y_t + dy, self.x_b + dx, self.y_b + dy)
    }

    /// Intersection with `[0, w] x [0, h]`, or `None` when nothing is left.
    pub fn clip(&self, w: f64, h: f64) -> Option<BBox> {
        let b = BBox::new(
            self.x_t.clamp(0.0, w),
            self.y_t.clamp(0.0, h),
            self.x_b.clamp(0.0, w),
            self.y_b.clamp(0.0, h),
        );
        (b.width() > 0.0 && b.height() > 0.0).then_some(b)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_t, self.y_t, self.x_b, self.y_b]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union; 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Raw network confidence, not a probability.
    pub score: f64,
    /// Pyramid scale the detection was decoded at.
    pub scale: f64,
}

/// Indices of detections kept by greedy NMS, in descending score order.
///
/// Ties on score go to the earlier index. A detection is suppressed when
/// its IoU with a kept one is strictly greater than `iou_threshold`.
pub fn nms_indices(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}
