//! Boxes, overlap measures, keypoints and patch-grid masks.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({cx}, {cy}, {w}, {h}): {reason}")]
    InvalidBox { cx: f64, cy: f64, w: f64, h: f64, reason: &'static str },
    #[error("mask must be non-empty and contain a 1-entry")]
    EmptyMask,
}

/// Width/height floor applied to degenerate predicted boxes.
pub const BOX_EPS: f64 = 1e-6;

/// Axis-aligned box in normalized center format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let err = |reason| GeometryError::InvalidBox { cx: self.cx, cy: self.cy, w: self.w, h: self.h, reason };
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(err("non-finite coordinate"));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(err("non-positive extent"));
        }
        let [x0, y0, x1, y1] = self.corners();
        if x1 <= 0.0 || y1 <= 0.0 || x0 >= 1.0 || y0 >= 1.0 {
            return Err(err("outside the unit square"));
        }
        Ok(())
    }

    /// Box from corner coordinates `x0 < x1`, `y0 < y1`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { cx: 0.5 * (x0 + x1), cy: 0.5 * (y0 + y1), w: x1 - x0, h: y1 - y0 }
    }

    /// `[x0, y0, x1, y1]`
    pub fn corners(&self) -> [f64; 4] {
        [self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h]
    }

    /// Area measured from the corner coordinates, so that an identical box
    /// overlaps itself exactly.
    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.corners();
        (x1 - x0) * (y1 - y0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }

    /// Extents floored at [`BOX_EPS`].
    pub fn clamped(&self) -> Self {
        Self { w: self.w.max(BOX_EPS), h: self.h.max(BOX_EPS), ..*self }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let [x0, y0, x1, y1] = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU in (−1, 1].
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.clamped(), b.clamped());
    let inter = intersection(&a, &b);
    let union = a.area() + b.area() - inter;
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let enclose = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    inter / union - (enclose - union) / enclose
}

/// `1 − GIoU(pred, gt)`; predicted extents are floored at [`BOX_EPS`].
pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    1.0 - giou(pred, gt)
}

/// `K` keypoints in normalized image coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<[f64; 2]>,
}

impl KeypointSet {
    /// Clamps every coordinate into `[0, 1]`.
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let points = points.into_iter().map(|[x, y]| [x.clamp(0.0, 1.0), y.clamp(0.0, 1.0)]).collect();
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `[x0, y0, x1, y1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Binary mask over the `rows × cols` patch grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub rows: usize,
    pub cols: usize,
    cells: Vec<bool>,
}

impl PatchMask {
    pub fn from_cells(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self, GeometryError> {
        if cells.len() != rows * cols || !cells.iter().any(|&c| c) {
            return Err(GeometryError::EmptyMask);
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, cells: vec![true; rows * cols] }
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.cols + c]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
    }
}

/// Center of patch `(r, c)` in normalized coordinates.
pub fn patch_center(r: usize, c: usize, rows: usize, cols: usize) -> (f64, f64) {
    ((c as f64 + 0.5) / cols as f64, (r as f64 + 0.5) / rows as f64)
}

/// Marks every patch whose center lies inside `bbox` (closed interval). When
/// no center falls inside, marks only the patch containing the box center.
pub fn rasterize_mask(bbox: &BBox, rows: usize, cols: usize) -> PatchMask {
    let mut cells = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = patch_center(r, c, rows, cols);
            cells[r * cols + c] = bbox.contains(x, y);
        }
    }
    if !cells.iter().any(|&c| c) {
        let c = ((bbox.cx * cols as f64).floor().max(0.0) as usize).min(cols - 1);
        let r = ((bbox.cy * rows as f64).floor().max(0.0) as usize).min(rows - 1);
        cells[r * cols + c] = true;
    }
    PatchMask { rows, cols, cells }
}
