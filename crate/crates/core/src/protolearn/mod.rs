//! Learnable prototypes shared by the point and image branches.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffengine::{Bound, ParamSet, Shape, Tape, Tensor, Var};
use crate::encoders::{dense, Act};
use crate::error::{Error, Result};

pub const PROTO_PARAM: &str = "proto.k";
/// Rows with a smaller norm are replaced by the first basis vector.
pub const ZERO_ROW: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtoConfig {
    pub n_k: usize,
    pub d_k: usize,
    pub n_sink: usize,
    pub epsilon: f64,
    pub tau: f64,
    pub w_swav: f64,
    pub w_em: f64,
    pub w_gmm: f64,
    /// Restrict the losses to occupied cells instead of the whole grid.
    pub occupied_only: bool,
}

impl Default for ProtoConfig {
    fn default() -> Self {
        ProtoConfig {
            n_k: 32,
            d_k: 32,
            n_sink: 3,
            epsilon: 0.05,
            tau: 1.0,
            w_swav: 1.0,
            w_em: 0.1,
            w_gmm: 0.1,
            occupied_only: true,
        }
    }
}

impl ProtoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_k < 2 {
            return Err(Error::invalid("need at least two prototypes"));
        }
        if self.d_k == 0 {
            return Err(Error::invalid("prototype dimension must be positive"));
        }
        if !(self.epsilon > 0.0 && self.tau > 0.0) {
            return Err(Error::invalid("epsilon and tau must be positive"));
        }
        if [self.w_swav, self.w_em, self.w_gmm].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("prototype loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Rows drawn uniformly on the unit sphere.
pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        data.extend(row.iter().map(|x| x / n));
    }
    Tensor::new(Shape::new(rows, cols), data).expect("sized")
}

pub fn init_proto_params(
    rng: &mut impl Rng,
    params: &mut ParamSet,
    d_p: usize,
    d_i: usize,
    cfg: &ProtoConfig,
) -> Result<()> {
    cfg.validate()?;
    params.init_linear(rng, "proj_p.l1", d_p, cfg.d_k)?;
    params.init_linear(rng, "proj_p.l2", cfg.d_k, cfg.d_k)?;
    params.init_linear(rng, "proj_i.l1", d_i, cfg.d_k)?;
    params.init_linear(rng, "proj_i.l2", cfg.d_k, cfg.d_k)?;
    params.insert(PROTO_PARAM, unit_rows(rng, cfg.n_k, cfg.d_k))
}

/// Projects every prototype row back onto the unit sphere.
pub fn renormalize_prototypes(params: &mut ParamSet) -> Result<()> {
    let d = params.get(PROTO_PARAM)?.cols();
    for row in params.data_mut(PROTO_PARAM)?.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < ZERO_ROW {
            row.fill(0.0);
            row[0] = 1.0;
        } else {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(())
}

/// Row-wise L2 normalization; near-zero rows become `e₀` and are reported.
pub fn normalize_rows(tape: &mut Tape, x: Var) -> Result<(Var, Vec<usize>)> {
    let n = tape.row_norm(x)?;
    let shape = tape.shape(x);
    let flagged: Vec<usize> = (0..shape.rows)
        .filter(|&r| tape.value(n).data()[r] < ZERO_ROW)
        .collect();
    if flagged.is_empty() {
        return Ok((tape.div(x, n)?, flagged));
    }
    let mut fix = Tensor::zeros(Shape::new(shape.rows, 1));
    let mut basis = Tensor::zeros(shape);
    for &r in &flagged {
        fix.set(r, 0, 1.0);
        basis.set(r, 0, 1.0);
    }
    // x / (‖x‖ + 1) + e₀ on flagged rows, where x ≈ 0
    let fix = tape.constant(fix);
    let denom = tape.add(n, fix)?;
    let y = tape.div(x, denom)?;
    let basis = tape.constant(basis);
    Ok((tape.add(y, basis)?, flagged))
}

#[derive(Clone, Debug)]
pub struct Projected {
    pub p: Var,
    pub i: Var,
    /// Rows (of the selected set) that hit the zero-norm fallback.
    pub flagged: Vec<usize>,
}

/// `Ṗ`, `İ`: per-cell two-layer heads, then unit rows. `rows` picks a subset
/// of cells (all cells when `None`).
pub fn project_embeddings(
    tape: &mut Tape,
    p: &Bound,
    p_feat: Var,
    i_feat: Var,
    rows: Option<&[u32]>,
) -> Result<Projected> {
    if tape.shape(p_feat).rows != tape.shape(i_feat).rows {
        return Err(Error::Shape(format!(
            "point features have {} rows, image features {}",
            tape.shape(p_feat).rows,
            tape.shape(i_feat).rows
        )));
    }
    let (pf, imf) = match rows {
        Some(r) => (tape.gather_rows(p_feat, r)?, tape.gather_rows(i_feat, r)?),
        None => (p_feat, i_feat),
    };
    let head = |tape: &mut Tape, name: &str, x: Var| -> Result<(Var, Vec<usize>)> {
        let h = dense(tape, p, &format!("{name}.l1"), x, Act::Relu)?;
        let z = dense(tape, p, &format!("{name}.l2"), h, Act::None)?;
        normalize_rows(tape, z)
    };
    let (ep, mut fp) = head(tape, "proj_p", pf)?;
    let (ei, fi) = head(tape, "proj_i", imf)?;
    fp.extend(fi);
    fp.sort_unstable();
    fp.dedup();
    if !fp.is_empty() {
        log::warn!("{} projected rows had zero norm", fp.len());
    }
    Ok(Projected {
        p: ep,
        i: ei,
        flagged: fp,
    })
}

/// `S = E·Kᵀ`.
pub fn similarity(tape: &mut Tape, emb: Var, protos: Var) -> Result<Var> {
    tape.matmul_t(emb, protos, false, true)
}

fn require_same(tape: &Tape, a: Var, b: Var, what: &str) -> Result<Shape> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(sa)
}

/// Row-wise `log softmax`, shifted by the (constant) row maximum so that
/// saturated rows stay finite.
pub fn log_softmax(tape: &mut Tape, z: Var) -> Result<Var> {
    let t = tape.value(z);
    let (r, c) = (t.rows(), t.cols());
    let m: Vec<f64> = (0..r)
        .map(|i| t.row_slice(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    if c == 0 || m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("log_softmax input".into()));
    }
    let m = tape.constant(Tensor::column(m));
    let shifted = tape.sub(z, m)?;
    let e = tape.exp(shifted)?;
    let lse = tape.sum_rows(e)?;
    let lse = tape.log(lse)?;
    tape.sub(shifted, lse)
}

/// Mean assignment entropy of both modalities, normalized by `N_3D·N_K`.
pub fn em_loss(tape: &mut Tape, s_p: Var, s_i: Var) -> Result<Var> {
    let shape = require_same(tape, s_p, s_i, "em_loss")?;
    let mut acc = None;
    for s in [s_p, s_i] {
        let lq = log_softmax(tape, s)?;
        let q = tape.exp(lq)?;
        let e = tape.mul(q, lq)?;
        let e = tape.sum(e)?;
        acc = Some(match acc {
            None => e,
            Some(a) => tape.add(a, e)?,
        });
    }
    tape.scale(acc.expect("two terms"), -1.0 / shape.len() as f64)
}

/// Balanced soft codes from a detached similarity matrix.
pub fn sinkhorn_codes(s: &Tensor, n_iter: usize, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("sinkhorn epsilon must be positive"));
    }
    if !s.all_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let (n, k) = (s.rows(), s.cols());
    if n == 0 || k == 0 {
        return Err(Error::Shape("empty similarity matrix".into()));
    }
    let mut q = s.clone();
    for r in 0..n {
        let row = q.row_slice_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|x| *x = ((*x - m) / epsilon).exp());
    }
    let col_target = n as f64 / k as f64;
    let normalize_rows = |q: &mut Tensor| {
        for r in 0..n {
            let row = q.row_slice_mut(r);
            let t: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= t);
        }
    };
    for _ in 0..n_iter {
        let mut col = vec![0.0; k];
        for r in 0..n {
            for (c, x) in q.row_slice(r).iter().enumerate() {
                col[c] += x;
            }
        }
        for r in 0..n {
            for (c, x) in q.row_slice_mut(r).iter_mut().enumerate() {
                if col[c] > 0.0 {
                    *x *= col_target / col[c];
                }
            }
        }
        normalize_rows(&mut q);
    }
    if n_iter == 0 {
        normalize_rows(&mut q);
    }
    Ok(q)
}

/// Largest deviation of the code column sums from `N_3D/N_K`.
pub fn column_marginal_error(q: &Tensor) -> f64 {
    let (n, k) = (q.rows(), q.cols());
    let target = n as f64 / k as f64;
    (0..k)
        .map(|c| ((0..n).map(|r| q.get(r, c)).sum::<f64>() - target).abs())
        .fold(0.0, f64::max)
}

/// Swapped prediction: each modality's scores predict the other's codes.
pub fn swav_loss(tape: &mut Tape, s_p: Var, s_i: Var, q_p: &Tensor, q_i: &Tensor, tau: f64) -> Result<Var> {
    let shape = require_same(tape, s_p, s_i, "swav_loss")?;
    if q_p.shape() != shape || q_i.shape() != shape {
        return Err(Error::Shape("codes and scores differ in shape".into()));
    }
    let mut acc = None;
    for (s, q) in [(s_p, q_i), (s_i, q_p)] {
        let z = tape.scale(s, 1.0 / tau)?;
        let ls = log_softmax(tape, z)?;
        let q = tape.constant(q.clone());
        let ce = tape.mul(q, ls)?;
        let ce = tape.sum(ce)?;
        acc = Some(match acc {
            None => ce,
            Some(a) => tape.add(a, ce)?,
        });
    }
    tape.scale(acc.expect("two terms"), -1.0 / shape.len() as f64)
}

/// Mean off-diagonal entry of `K·Kᵀ`.
pub fn gram_loss(tape: &mut Tape, protos: Var) -> Result<Var> {
    let n = tape.shape(protos).rows;
    if n < 2 {
        return Err(Error::invalid("gram loss needs at least two prototypes"));
    }
    let g = tape.matmul_t(protos, protos, false, true)?;
    let mut off = Tensor::filled(Shape::new(n, n), 1.0);
    for i in 0..n {
        off.set(i, i, 0.0);
    }
    let off = tape.constant(off);
    let g = tape.mul(g, off)?;
    let s = tape.sum(g)?;
    tape.scale(s, 1.0 / (n * (n - 1)) as f64)
}

#[derive(Clone, Debug)]
pub struct ProtoLoss {
    pub total: Var,
    pub swav: Var,
    pub em: Var,
    pub gmm: Var,
    pub s_p: Var,
    pub s_i: Var,
}

/// Detached Sinkhorn targets for both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct Codes {
    pub q_p: Tensor,
    pub q_i: Tensor,
}

/// `ω_SwAV·L_SwAV + ω_EM·L_EM + ω_GMM·L_GMM` from projected embeddings.
pub fn proto_loss(tape: &mut Tape, p: &Bound, emb: &Projected, cfg: &ProtoConfig) -> Result<(ProtoLoss, Codes)> {
    proto_loss_with_codes(tape, p, emb, cfg, None)
}

/// As [`proto_loss`], reusing `codes` when given (the targets are constants
/// either way, so a fixed set makes the loss a smooth function of the parameters).
pub fn proto_loss_with_codes(
    tape: &mut Tape,
    p: &Bound,
    emb: &Projected,
    cfg: &ProtoConfig,
    codes: Option<&Codes>,
) -> Result<(ProtoLoss, Codes)> {
    cfg.validate()?;
    let k = p.get(PROTO_PARAM)?;
    let s_p = similarity(tape, emb.p, k)?;
    let s_i = similarity(tape, emb.i, k)?;
    let codes = match codes {
        Some(c) => c.clone(),
        None => Codes {
            q_p: sinkhorn_codes(tape.value(s_p), cfg.n_sink, cfg.epsilon)?,
            q_i: sinkhorn_codes(tape.value(s_i), cfg.n_sink, cfg.epsilon)?,
        },
    };
    let swav = swav_loss(tape, s_p, s_i, &codes.q_p, &codes.q_i, cfg.tau)?;
    let em = em_loss(tape, s_p, s_i)?;
    let gmm = gram_loss(tape, k)?;
    let a = tape.scale(swav, cfg.w_swav)?;
    let b = tape.scale(em, cfg.w_em)?;
    let c = tape.scale(gmm, cfg.w_gmm)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let loss = ProtoLoss {
        total,
        swav,
        em,
        gmm,
        s_p,
        s_i,
    };
    Ok((loss, codes))
}

/// Cells entering the prototype losses.
pub fn proto_rows(occupancy: &[bool], cfg: &ProtoConfig) -> Option<Vec<u32>> {
    cfg.occupied_only.then(|| {
        occupancy
            .iter()
            .enumerate()
            .filter(|(_, o)| **o)
            .map(|(i, _)| i as u32)
            .collect()
    })
}

/// Argmax prototype per row of a similarity matrix.
pub fn assignments(s: &Tensor) -> Vec<usize> {
    (0..s.rows())
        .map(|r| {
            let row = s.row_slice(r);
            (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b })
        })
        .collect()
}

/// Mean off-diagonal cosine between prototype rows.
pub fn mean_prototype_cosine(k: &Tensor) -> f64 {
    let n = k.rows();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let row = k.row_slice(r);
            let nr = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(ZERO_ROW);
            row.iter().map(|x| x / nr).collect()
        })
        .collect();
    let mut acc = 0.0;
    for a in 0..n {
        for b in 0..n {
            if a != b {
                acc += unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    acc / (n * (n - 1)) as f64
}

#[cfg(test)]
mod tests;
