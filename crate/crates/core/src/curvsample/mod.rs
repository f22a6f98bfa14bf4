//! Curvature of an SDF's normal field and the samplers it drives.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{row_jacobians, DerivMode, Tape, Var};
use crate::encoders::{bilinear_corners, buffer_depth, VISIBILITY_TOLERANCE};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::neuralfield::{points_tensor, SdfField};
use crate::synthscene::{CameraFrame, PointCloud};

/// Gradients shorter than this give no usable normal.
pub const DEGENERATE_GRADIENT: f64 = 1e-8;
const CHUNK: usize = 512;

/// Unit normal `∇s/‖∇s‖`, or `None` where the gradient vanishes.
pub fn estimate_normals(field: &dyn SdfField, points: &[Vec3]) -> Result<Vec<Option<Vec3>>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(CHUNK) {
        let mut tape = Tape::new();
        let x = tape.leaf("p", points_tensor(chunk));
        let s = field.sdf_on_tape(&mut tape, x)?;
        let total = tape.sum(s)?;
        let g = tape.gradient(total, &[x])?.remove(0);
        for r in 0..chunk.len() {
            let n: Vec3 = std::array::from_fn(|i| g.get(r, i));
            let len = crate::geom::norm(n);
            out.push((len >= DEGENERATE_GRADIENT && len.is_finite()).then(|| crate::geom::scale(n, 1.0 / len)));
        }
    }
    Ok(out)
}

/// Records `ñ = ∇s / max(‖∇s‖, ε)` for `[n, 3]` points and returns it with the gradient norms.
fn unit_normal_on_tape(tape: &mut Tape, field: &dyn SdfField, x: Var) -> Result<(Var, Vec<f64>)> {
    let s = field.sdf_on_tape(tape, x)?;
    let total = tape.sum(s)?;
    let g = tape.grad(total, &[x])?.remove(0);
    let len = tape.row_norm(g)?;
    let norms = tape.value(len).data().to_vec();
    let safe = tape.max_const(len, DEGENERATE_GRADIENT)?;
    Ok((tape.div(g, safe)?, norms))
}

/// `‖∂ñ/∂p‖_F` (or `‖(∂ñ/∂p)ᵀ·1‖₂`) per point; degenerate normals give 0.
pub fn estimate_curvature(field: &dyn SdfField, points: &[Vec3], mode: DerivMode) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(CHUNK) {
        let mut tape = Tape::new();
        let x = tape.leaf("p", points_tensor(chunk));
        let (n, norms) = unit_normal_on_tape(&mut tape, field, x)?;
        let values: Vec<f64> = match mode {
            DerivMode::JacobianFrobenius => row_jacobians(&mut tape, n, x)?
                .iter()
                .map(|j| j.iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
            DerivMode::VjpOnes => {
                let total = tape.sum(n)?;
                let g = tape.gradient(total, &[x])?.remove(0);
                (0..chunk.len())
                    .map(|r| g.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect()
            }
        };
        for (v, len) in values.into_iter().zip(norms) {
            let ok = len >= DEGENERATE_GRADIENT && v.is_finite();
            out.push(if ok { v } else { 0.0 });
        }
    }
    Ok(out)
}

/// Clips weights above the `q`-quantile (nearest-rank) to that value.
pub fn clip_quantile(weights: &[f64], q: f64) -> Vec<f64> {
    if weights.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<f64> = weights.iter().copied().filter(|w| w.is_finite()).collect();
    if sorted.is_empty() {
        return vec![0.0; weights.len()];
    }
    sorted.sort_by(f64::total_cmp);
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let cap = sorted[rank - 1];
    weights
        .iter()
        .map(|&w| if w.is_finite() { w.min(cap).max(0.0) } else { 0.0 })
        .collect()
}

/// `n` indices drawn with replacement with probability `∝ ω`. All-zero
/// weights fall back to uniform draws.
pub fn sample_indices(weights: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if weights.is_empty() {
        return Err(Error::invalid("cannot sample from an empty set"));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("sampling weights must be finite and non-negative"));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        log::warn!("all sampling weights are zero; drawing uniformly");
        return Ok((0..n).map(|_| rng.random_range(0..weights.len())).collect());
    }
    let dist = WeightedIndex::new(weights).map_err(|e| Error::invalid(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Point sampler: clip at the 99.9th percentile, then multinomial draws.
pub fn sample_points(weights: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    sample_indices(&clip_quantile(weights, 0.999), n, rng)
}

/// Normalized `k×k` Gaussian kernel, row-major.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k % 2 == 0 || !(sigma > 0.0) {
        return Err(Error::invalid(format!("kernel size {k} must be odd and sigma {sigma} positive")));
    }
    let r = (k / 2) as f64;
    let mut w: Vec<f64> = (0..k * k)
        .map(|i| {
            let (y, x) = ((i / k) as f64 - r, (i % k) as f64 - r);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok(w)
}

/// Nearest pixel of `p` when it is in view and passes the depth-buffer test.
pub fn visible_pixel(frame: &CameraFrame, p: Vec3) -> Option<(usize, usize)> {
    let (u, v, z) = frame.project(p)?;
    let (corners, weights) = bilinear_corners(frame, u, v)?;
    if z > buffer_depth(frame, &corners, &weights) + VISIBILITY_TOLERANCE {
        return None;
    }
    frame.nearest_pixel(u, v)
}

/// Per-camera dense maps: each visible point's weight lands on its nearest
/// pixel, then a normalized Gaussian spreads it (mass past the border is lost).
pub fn project_pixel_weights(
    cloud: &PointCloud,
    weights: &[f64],
    frames: &[CameraFrame],
    k_gaus: usize,
    sigma: f64,
) -> Result<Vec<Vec<f64>>> {
    if weights.len() != cloud.len() {
        return Err(Error::invalid("one weight per point is required"));
    }
    let kernel = gaussian_kernel(k_gaus, sigma)?;
    let r = (k_gaus / 2) as i64;
    frames
        .iter()
        .map(|f| {
            let (w, h) = (f.width as i64, f.height as i64);
            let mut sparse = vec![0.0; f.width * f.height];
            for (p, &wt) in cloud.xyz.iter().zip(weights) {
                if wt == 0.0 {
                    continue;
                }
                if let Some((u, v)) = visible_pixel(f, *p) {
                    sparse[f.pixel_index(u, v)] += wt;
                }
            }
            let mut dense = vec![0.0; sparse.len()];
            for v in 0..h {
                for u in 0..w {
                    let m = sparse[(v * w + u) as usize];
                    if m == 0.0 {
                        continue;
                    }
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (x, y) = (u + dx, v + dy);
                            if x >= 0 && y >= 0 && x < w && y < h {
                                let k = ((dy + r) * (2 * r + 1) + dx + r) as usize;
                                dense[(y * w + x) as usize] += m * kernel[k];
                            }
                        }
                    }
                }
            }
            Ok(dense)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    Uniform,
    Curvature,
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMode::Uniform => "uniform",
            SamplingMode::Curvature => "curvature",
        })
    }
}

/// Uniform during the first `warmup` epochs, curvature-weighted afterwards.
pub fn sampling_schedule(epoch: usize, warmup: usize) -> SamplingMode {
    if epoch < warmup {
        SamplingMode::Uniform
    } else {
        SamplingMode::Curvature
    }
}

/// Cached per-epoch sampling weights of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureWeights {
    pub points: Vec<f64>,
    pub pixels: Vec<Vec<f64>>,
    pub mode: DerivMode,
    pub epoch: usize,
}

impl CurvatureWeights {
    pub fn compute(
        field: &dyn SdfField,
        cloud: &PointCloud,
        frames: &[CameraFrame],
        mode: DerivMode,
        epoch: usize,
        k_gaus: usize,
        sigma: f64,
    ) -> Result<Self> {
        let points = estimate_curvature(field, &cloud.xyz, mode)?;
        let points = clip_quantile(&points, 0.999);
        let pixels = project_pixel_weights(cloud, &points, frames, k_gaus, sigma)?;
        Ok(CurvatureWeights {
            points,
            pixels,
            mode,
            epoch,
        })
    }
}

#[cfg(test)]
mod tests;
