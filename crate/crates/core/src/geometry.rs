//! Normalized center-format boxes, IoU / GIoU, and greedy NMS.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Result as TensorResult, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box width and height must be positive, got w={w}, h={h}")]
    Degenerate { w: f64, h: f64 },
    #[error("box center ({cx}, {cy}) outside the unit square")]
    Center { cx: f64, cy: f64 },
    #[error("non-finite box coordinate")]
    NonFinite,
}

/// Box in normalized image coordinates: center, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxCCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl TryFrom<[f64; 4]> for BoxCCWH {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoxCCWH::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxCCWH> for [f64; 4] {
    fn from(b: BoxCCWH) -> Self {
        b.to_array()
    }
}

impl BoxCCWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(GeometryError::Center { cx, cy });
        }
        Ok(BoxCCWH { cx, cy, w, h })
    }

    /// Builds a box from corner coordinates `(x0, y0)-(x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Sum of absolute coordinate differences.
    pub fn l1(&self, other: &BoxCCWH) -> f64 {
        (self.cx - other.cx).abs() + (self.cy - other.cy).abs() + (self.w - other.w).abs() + (self.h - other.h).abs()
    }
}

fn inter_union_hull(a: &BoxCCWH, b: &BoxCCWH) -> (f64, f64, f64) {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    (inter, union, hull)
}

pub fn iou(a: &BoxCCWH, b: &BoxCCWH) -> f64 {
    let (inter, union, _) = inter_union_hull(a, b);
    inter / union
}

/// Generalized IoU: `IoU - (hull - union) / hull`, in `[-1, 1]`.
pub fn giou(a: &BoxCCWH, b: &BoxCCWH) -> f64 {
    let (inter, union, hull) = inter_union_hull(a, b);
    // rounding can put the hull a few ulps below the union
    inter / union - (hull - union).max(0.0) / hull
}

/// Differentiable GIoU between matching rows of two `[n, 4]` ccwh tensors.
/// Returns an `[n]` tensor.
pub fn giou_var<'t>(a: Var<'t>, b: Var<'t>) -> TensorResult<Var<'t>> {
    let corners = |x: Var<'t>| -> TensorResult<[Var<'t>; 4]> {
        let cx = x.slice(1, 0, 1)?;
        let cy = x.slice(1, 1, 2)?;
        let hw = x.slice(1, 2, 3)?.scale(0.5);
        let hh = x.slice(1, 3, 4)?.scale(0.5);
        Ok([cx.sub(hw)?, cy.sub(hh)?, cx.add(hw)?, cy.add(hh)?])
    };
    let [ax0, ay0, ax1, ay1] = corners(a)?;
    let [bx0, by0, bx1, by1] = corners(b)?;
    let area_a = ax1.sub(ax0)?.mul(ay1.sub(ay0)?)?;
    let area_b = bx1.sub(bx0)?.mul(by1.sub(by0)?)?;

    let iw = ax1.minimum(bx1)?.sub(ax0.maximum(bx0)?)?.relu();
    let ih = ay1.minimum(by1)?.sub(ay0.maximum(by0)?)?.relu();
    let inter = iw.mul(ih)?;
    let union = area_a.add(area_b)?.sub(inter)?;
    let hw = ax1.maximum(bx1)?.sub(ax0.minimum(bx0)?)?;
    let hh = ay1.maximum(by1)?.sub(ay0.minimum(by0)?)?;
    let hull = hw.mul(hh)?;
    let iou = inter.div(union)?;
    let empty = hull.sub(union)?.relu().div(hull)?;
    let n = a.shape()[0];
    iou.sub(empty)?.reshape([n])
}

/// Greedy non-maximum suppression. Returns kept indices in selection order
/// (descending score, lower index first on ties). A candidate is suppressed
/// when its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(items: &[(BoxCCWH, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| items[j].1.total_cmp(&items[i].1).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&items[k].0, &items[i].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
