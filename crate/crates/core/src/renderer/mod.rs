//! Volume rendering of SDF fields along rays.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Bound, CornerIndex, ParamSet, Shape, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::{self, Aabb, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleStrategy {
    /// Bin midpoints.
    #[default]
    Uniform,
    /// One uniform draw inside each bin.
    Stratified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub ranges: Vec<f64>,
}

/// `n` sample ranges over `[near, far]` split into equal bins.
pub fn sample_ray(
    origin: Vec3,
    dir: Vec3,
    near: f64,
    far: f64,
    n: usize,
    strategy: SampleStrategy,
    rng: &mut impl Rng,
) -> Result<Ray> {
    if !(near >= 0.0 && near < far && far.is_finite()) {
        return Err(Error::invalid(format!("bad ray interval [{near}, {far}]")));
    }
    if n == 0 {
        return Err(Error::invalid("a ray needs at least one sample"));
    }
    let len = geom::norm(dir);
    if (len - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("ray direction has length {len}")));
    }
    let bin = (far - near) / n as f64;
    let ranges = (0..n)
        .map(|k| {
            let off = match strategy {
                SampleStrategy::Uniform => 0.5,
                SampleStrategy::Stratified => rng.random::<f64>(),
            };
            near + (k as f64 + off) * bin
        })
        .collect();
    Ok(Ray {
        origin,
        dir,
        ranges,
    })
}

pub const MIN_NEAR: f64 = 0.1;

/// Box-clipped sampling interval, limited to `[MIN_NEAR, box diagonal]`.
pub fn ray_bounds(bounds: &Aabb, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
    let (t0, t1) = bounds.ray_interval(origin, dir)?;
    let near = t0.max(MIN_NEAR);
    let far = t1.min(bounds.diagonal());
    (far > near).then_some((near, far))
}

/// Sample positions of a batch of rays, `R` rays × `N` samples.
#[derive(Clone, Debug)]
pub struct RayBatch {
    pub rays: Vec<Ray>,
    pub samples: usize,
}

impl RayBatch {
    pub fn new(rays: Vec<Ray>) -> Result<Self> {
        let samples = rays.first().map_or(0, |r| r.ranges.len());
        if rays.iter().any(|r| r.ranges.len() != samples) {
            return Err(Error::invalid("rays in a batch need equal sample counts"));
        }
        Ok(RayBatch { rays, samples })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    /// `[R·N, 3]` sample points, ray-major.
    pub fn points(&self) -> Tensor {
        let data = self
            .rays
            .iter()
            .flat_map(|r| {
                r.ranges
                    .iter()
                    .flat_map(move |&t| geom::add(r.origin, geom::scale(r.dir, t)))
            })
            .collect();
        Tensor::new(Shape::new(self.len() * self.samples, 3), data).expect("batch layout")
    }

    /// `[R, N]` sample ranges.
    pub fn ranges(&self) -> Tensor {
        let data = self.rays.iter().flat_map(|r| r.ranges.iter().copied()).collect();
        Tensor::new(Shape::new(self.len(), self.samples), data).expect("batch layout")
    }
}

/// `α_n = max((Φ_h(s_n) − Φ_h(s_{n+1})) / Φ_h(s_n), 0)`, `Φ_h(x) = sigmoid(h·x)`;
/// the last sample of each row gets `α = 0`. `sdf` is `[R, N]`, `h` a scalar.
pub fn occupancy_alpha(tape: &mut Tape, sdf: Var, h: Var) -> Result<Var> {
    let n = tape.shape(sdf).cols;
    if n < 2 {
        return Err(Error::invalid("occupancy needs at least two samples per ray"));
    }
    let hs = tape.mul(sdf, h)?;
    let phi = tape.sigmoid(hs)?;
    let cur = tape.slice_cols(phi, 0, n - 1)?;
    let next = tape.slice_cols(phi, 1, n - 1)?;
    let ratio = tape.div(next, cur)?;
    let one_minus = tape.affine(ratio, -1.0, 1.0)?;
    let alpha = tape.relu(one_minus)?;
    tape.pad_cols(alpha, 0, n)
}

/// `t_n = Π_{i<n} (1 − α_i)`, `t_1 = 1`.
pub fn transmittance(tape: &mut Tape, alpha: Var) -> Result<Var> {
    let s = tape.shape(alpha);
    let mut t = tape.constant(Tensor::filled(Shape::new(s.rows, 1), 1.0));
    let mut out = t;
    for k in 1..s.cols {
        let a = tape.slice_cols(alpha, k - 1, 1)?;
        let keep = tape.affine(a, -1.0, 1.0)?;
        t = tape.mul(t, keep)?;
        out = tape.concat(out, t)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct RenderWeights {
    pub alpha: Var,
    pub trans: Var,
    pub weights: Var,
}

pub fn render_weights(tape: &mut Tape, sdf: Var, h: Var) -> Result<RenderWeights> {
    let alpha = occupancy_alpha(tape, sdf, h)?;
    let trans = transmittance(tape, alpha)?;
    let weights = tape.mul(trans, alpha)?;
    Ok(RenderWeights {
        alpha,
        trans,
        weights,
    })
}

/// `Σ_n w_n v_n` per row for scalar samples `[R, N]`.
pub fn integrate(tape: &mut Tape, weights: Var, values: Var) -> Result<Var> {
    let (a, b) = (tape.shape(weights), tape.shape(values));
    if a != b {
        return Err(Error::ShapeMismatch {
            op: "integrate",
            node: values.id(),
            lhs: a.to_string(),
            rhs: b.to_string(),
        });
    }
    let wv = tape.mul(weights, values)?;
    tape.sum_rows(wv)
}

/// `Σ_n w_n c_n` per row for vector samples stored ray-major as `[R·N, C]`.
pub fn integrate_rows(tape: &mut Tape, weights: Var, values: Var) -> Result<Var> {
    let ws = tape.shape(weights);
    let vs = tape.shape(values);
    if vs.rows != ws.rows * ws.cols {
        return Err(Error::ShapeMismatch {
            op: "integrate_rows",
            node: values.id(),
            lhs: ws.to_string(),
            rhs: vs.to_string(),
        });
    }
    let idx = (0..vs.rows as u32).collect();
    let index = Arc::new(CornerIndex::new(ws.rows, ws.cols, idx)?);
    tape.weighted_gather(values, weights, index)
}

/// Loss terms recorded on the tape, plus their values.
#[derive(Clone, Copy, Debug)]
pub struct RenderLoss {
    pub total: Var,
    pub range_l1: f64,
    pub surface: f64,
    pub color_l1: f64,
}

/// `(1/N_L) Σ (|r − r̃| + ω_sur |s|) + ω_C/(3 N_C) Σ |c − c̃|`.
///
/// `pred_range` and `target_range` are `[N_L, 1]`, `surface_sdf` is `[N_L, 1]`
/// at the observed endpoints, colours are `[N_C, 3]`.
pub fn rendering_loss(
    tape: &mut Tape,
    pred_range: Var,
    target_range: &Tensor,
    surface_sdf: Var,
    colors: Option<(Var, &Tensor)>,
    w_sur: f64,
    w_c: f64,
) -> Result<RenderLoss> {
    let n_l = tape.shape(pred_range).rows;
    if n_l == 0 {
        return Err(Error::invalid("rendering loss needs at least one LiDAR ray"));
    }
    let tr = tape.constant(target_range.clone());
    let d = tape.sub(pred_range, tr)?;
    let ad = tape.abs(d)?;
    let range_sum = tape.sum(ad)?;
    let asd = tape.abs(surface_sdf)?;
    let sur_sum = tape.sum(asd)?;
    let ws = tape.scale(sur_sum, w_sur)?;
    let lidar = tape.add(range_sum, ws)?;
    let mut total = tape.scale(lidar, 1.0 / n_l as f64)?;
    let range_l1 = tape.value(range_sum).item() / n_l as f64;
    let surface = tape.value(sur_sum).item() / n_l as f64;
    let mut color_l1 = 0.0;
    if let Some((pred, target)) = colors {
        let n_c = tape.shape(pred).rows;
        if n_c > 0 {
            let tc = tape.constant(target.clone());
            let dc = tape.sub(pred, tc)?;
            let adc = tape.abs(dc)?;
            let cs = tape.sum(adc)?;
            color_l1 = tape.value(cs).item() / (3 * n_c) as f64;
            let term = tape.scale(cs, w_c / (3 * n_c) as f64)?;
            total = tape.add(total, term)?;
        }
    }
    Ok(RenderLoss {
        total,
        range_l1,
        surface,
        color_l1,
    })
}

/// Learnable log-sharpness `η`, with `h = exp(η)`.
pub const ETA_PARAM: &str = "render.eta";

pub fn init_render_params(params: &mut ParamSet, h0: f64) -> Result<()> {
    if !(h0 > 0.0) {
        return Err(Error::invalid("initial sharpness must be positive"));
    }
    params.insert(ETA_PARAM, Tensor::scalar(h0.ln()))
}

/// `h = exp(η)` on the tape.
pub fn sharpness(tape: &mut Tape, p: &Bound) -> Result<Var> {
    let eta = p.get(ETA_PARAM)?;
    tape.exp(eta)
}

mod debug;
pub use debug::{render_image, RenderedImage};
