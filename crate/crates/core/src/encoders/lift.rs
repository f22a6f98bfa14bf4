//! Calibrated projection of LiDAR points into camera images.

use std::sync::Arc;

use crate::diffengine::{CornerIndex, Shape, Tensor};
use crate::error::Result;
use crate::synthscene::{CameraFrame, PointCloud};

/// Depth-buffer tolerance for the visibility test, metres.
pub const VISIBILITY_TOLERANCE: f64 = 0.01;

/// Bilinear corners and weights of subpixel `(u, v)`; pixel centres sit on integers.
pub fn bilinear_corners(frame: &CameraFrame, u: f64, v: f64) -> Option<([usize; 4], [f64; 4])> {
    let (w, h) = (frame.width, frame.height);
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let u0 = (u.floor() as usize).min(w.saturating_sub(2));
    let v0 = (v.floor() as usize).min(h.saturating_sub(2));
    let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    Some((
        [
            frame.pixel_index(u0, v0),
            frame.pixel_index(u1, v0),
            frame.pixel_index(u0, v1),
            frame.pixel_index(u1, v1),
        ],
        [
            (1.0 - fu) * (1.0 - fv),
            fu * (1.0 - fv),
            (1.0 - fu) * fv,
            fu * fv,
        ],
    ))
}

/// Depth-buffer value at a subpixel location. Inverse depth is interpolated
/// because it is affine in `(u, v)` across a planar surface; sky counts as
/// infinitely far.
pub fn buffer_depth(frame: &CameraFrame, corners: &[usize; 4], weights: &[f64; 4]) -> f64 {
    let inv: f64 = corners
        .iter()
        .zip(weights)
        .map(|(&c, &w)| {
            let d = frame.depth[c];
            if d.is_finite() && d > 0.0 {
                w / d
            } else {
                0.0
            }
        })
        .sum();
    if inv > 0.0 {
        1.0 / inv
    } else {
        f64::INFINITY
    }
}

/// Projects `p` and tests it against the depth buffer. Returns the subpixel
/// corners and weights when the point is in view and unoccluded.
pub fn visible_sample(frame: &CameraFrame, p: [f64; 3]) -> Option<([usize; 4], [f64; 4])> {
    let (u, v, z) = frame.project(p)?;
    let (corners, weights) = bilinear_corners(frame, u, v)?;
    (z <= buffer_depth(frame, &corners, &weights) + VISIBILITY_TOLERANCE).then_some((corners, weights))
}

/// Visible (point, camera) pairs of one camera in gather/scatter form.
#[derive(Clone, Debug)]
pub struct LiftPlan {
    /// `[pairs, 4]` pixel rows.
    pub pixels: Arc<CornerIndex>,
    /// `[pairs, 4]` bilinear weights.
    pub weights: Tensor,
    /// `[pairs, 1]` destination cell.
    pub cells: Arc<CornerIndex>,
    /// `[pairs, 1]` scatter weight, `1 / (pairs landing in the cell over all cameras)`.
    pub scatter: Tensor,
    pub points: Vec<usize>,
}

impl LiftPlan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Builds one plan per camera. Points outside the grid or in `excluded`
/// cells are skipped, as are points behind a camera or hidden in its depth buffer.
pub fn plan_lift(
    cloud: &PointCloud,
    point_cell: &[Option<usize>],
    frames: &[CameraFrame],
    cells: usize,
    excluded: Option<&[bool]>,
) -> Result<Vec<LiftPlan>> {
    let mut per_cam: Vec<Vec<(usize, usize, [usize; 4], [f64; 4])>> = vec![Vec::new(); frames.len()];
    let mut counts = vec![0usize; cells];
    for (i, cell) in point_cell.iter().enumerate() {
        let Some(cell) = *cell else { continue };
        if excluded.is_some_and(|m| m[cell]) {
            continue;
        }
        for (n, frame) in frames.iter().enumerate() {
            if let Some((c, w)) = visible_sample(frame, cloud.xyz[i]) {
                per_cam[n].push((i, cell, c, w));
                counts[cell] += 1;
            }
        }
    }
    per_cam
        .into_iter()
        .map(|pairs| {
            let n = pairs.len();
            let pixels = pairs.iter().flat_map(|p| p.2.map(|c| c as u32)).collect();
            let weights = pairs.iter().flat_map(|p| p.3).collect();
            let dest = pairs.iter().map(|p| p.1 as u32).collect();
            let scatter = pairs.iter().map(|p| 1.0 / counts[p.1] as f64).collect();
            Ok(LiftPlan {
                pixels: Arc::new(CornerIndex::new(n, 4, pixels)?),
                weights: Tensor::new(Shape::new(n, 4), weights)?,
                cells: Arc::new(CornerIndex::new(n, 1, dest)?),
                scatter: Tensor::new(Shape::new(n, 1), scatter)?,
                points: pairs.iter().map(|p| p.0).collect(),
            })
        })
        .collect()
}
