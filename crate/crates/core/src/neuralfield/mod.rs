//! Continuous SDF/RGB field: trilinear grid features plus two MLP heads.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use crate::diffengine::{Bound, CornerIndex, ParamSet, Shape, Tape, Tensor, Var};
use crate::encoders::{dense, Act, GridSpec};
use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::synthscene::Scene;

pub const HEAD_WIDTH: usize = 64;

pub fn init_field_params(rng: &mut impl Rng, params: &mut ParamSet, d_f: usize) -> Result<()> {
    for (head, out) in [("sdf", 1), ("rgb", 3)] {
        params.init_linear(rng, &format!("{head}.l1"), 3 + d_f, HEAD_WIDTH)?;
        params.init_linear(rng, &format!("{head}.l2"), HEAD_WIDTH, HEAD_WIDTH)?;
        params.init_linear(rng, &format!("{head}.l3"), HEAD_WIDTH, out)?;
    }
    Ok(())
}

/// Corner rows and weights of the trilinear blend at `p` (cell-centre lattice,
/// clamp-to-edge outside the box).
pub fn trilinear_weights(spec: &GridSpec, p: Vec3) -> ([usize; 8], [f64; 8]) {
    let axes: [(usize, usize, f64, bool); 3] = std::array::from_fn(|i| axis_coord(spec, i, p[i]));
    let mut rows = [0; 8];
    let mut w = [0.0; 8];
    for k in 0..8 {
        let mut c = [0; 3];
        let mut wk = 1.0;
        for i in 0..3 {
            let (lo, hi, f, _) = axes[i];
            let bit = (k >> (2 - i)) & 1;
            c[i] = if bit == 1 { hi } else { lo };
            wk *= if bit == 1 { f } else { 1.0 - f };
        }
        rows[k] = spec.index(c);
        w[k] = wk;
    }
    (rows, w)
}

/// `(lower, upper, fraction, in_range)` along one axis.
fn axis_coord(spec: &GridSpec, axis: usize, x: f64) -> (usize, usize, f64, bool) {
    let n = spec.dims[axis];
    let h = spec.voxel_size()[axis];
    let g = (x - spec.bounds.min[axis]) / h - 0.5;
    let top = (n - 1) as f64;
    let gc = g.clamp(0.0, top);
    let lo = (gc.floor() as usize).min(n.saturating_sub(2));
    let hi = (lo + 1).min(n - 1);
    let inside = g > 0.0 && g < top;
    (lo, hi, gc - lo as f64, inside)
}

/// `f^tri(p, grid)`: features `[n, C]` for points `[n, 3]`, differentiable
/// in both the points and the grid values.
pub fn query_feature(tape: &mut Tape, grid: Var, spec: &GridSpec, points: Var) -> Result<Var> {
    let sp = tape.shape(points);
    if sp.cols != 3 {
        return Err(Error::Shape(format!("query points must be [n,3], got {sp}")));
    }
    let n = sp.rows;
    if tape.shape(grid).rows != spec.cells() {
        return Err(Error::Shape(format!(
            "grid has {} rows for {} cells",
            tape.shape(grid).rows,
            spec.cells()
        )));
    }
    let h = spec.voxel_size();
    let pv = tape.value(points).clone();
    let mut lows = vec![[0usize; 3]; n];
    let mut highs = vec![[0usize; 3]; n];
    let mut fracs: Vec<Var> = Vec::with_capacity(3);
    for axis in 0..3 {
        let mut keep = vec![0.0; n];
        let mut shift = vec![0.0; n];
        for r in 0..n {
            let (lo, hi, f, inside) = axis_coord(spec, axis, pv.get(r, axis));
            lows[r][axis] = lo;
            highs[r][axis] = hi;
            if inside {
                keep[r] = 1.0;
                shift[r] = -(lo as f64);
            } else {
                shift[r] = f;
            }
        }
        let col = tape.slice_cols(points, axis, 1)?;
        let g = tape.affine(col, 1.0 / h[axis], -spec.bounds.min[axis] / h[axis] - 0.5)?;
        let k = tape.constant(Tensor::column(keep));
        let s = tape.constant(Tensor::column(shift));
        let gk = tape.mul(g, k)?;
        fracs.push(tape.add(gk, s)?);
    }
    let ones = tape.constant(Tensor::filled(Shape::new(n, 1), 1.0));
    let pairs: Vec<[Var; 2]> = fracs
        .iter()
        .map(|&f| Ok([tape.sub(ones, f)?, f]))
        .collect::<Result<_>>()?;
    let mut weights: Option<Var> = None;
    let mut idx = Vec::with_capacity(n * 8);
    for r in 0..n {
        for k in 0..8 {
            let c: [usize; 3] = std::array::from_fn(|i| {
                if (k >> (2 - i)) & 1 == 1 {
                    highs[r][i]
                } else {
                    lows[r][i]
                }
            });
            idx.push(spec.index(c) as u32);
        }
    }
    for k in 0..8 {
        let bx = pairs[0][(k >> 2) & 1];
        let by = pairs[1][(k >> 1) & 1];
        let bz = pairs[2][k & 1];
        let xy = tape.mul(bx, by)?;
        let w = tape.mul(xy, bz)?;
        weights = Some(match weights {
            None => w,
            Some(acc) => tape.concat(acc, w)?,
        });
    }
    let index = Arc::new(CornerIndex::new(n, 8, idx)?);
    tape.weighted_gather(grid, weights.expect("eight corners"), index)
}

/// Maps world points to `[-1, 1]³` over the grid box.
pub fn normalize_points(tape: &mut Tape, spec: &GridSpec, points: Var) -> Result<Var> {
    let b = spec.bounds;
    let centre: Vec<f64> = (0..3).map(|i| 0.5 * (b.min[i] + b.max[i])).collect();
    let inv: Vec<f64> = (0..3).map(|i| 2.0 / (b.max[i] - b.min[i])).collect();
    let c = tape.constant(Tensor::row(centre));
    let s = tape.constant(Tensor::row(inv));
    let d = tape.sub(points, c)?;
    tape.mul(d, s)
}

fn head_input(tape: &mut Tape, grid: Var, spec: &GridSpec, points: Var) -> Result<Var> {
    let f = query_feature(tape, grid, spec, points)?;
    let pn = normalize_points(tape, spec, points)?;
    tape.concat(pn, f)
}

fn head(tape: &mut Tape, p: &Bound, name: &str, x: Var, last: Act) -> Result<Var> {
    let h = dense(tape, p, &format!("{name}.l1"), x, Act::Tanh)?;
    let h = dense(tape, p, &format!("{name}.l2"), h, Act::Tanh)?;
    dense(tape, p, &format!("{name}.l3"), h, last)
}

/// `s = f^SDF([p, f_p])`, `[n, 1]`.
pub fn eval_sdf(tape: &mut Tape, p: &Bound, grid: Var, spec: &GridSpec, points: Var) -> Result<Var> {
    let x = head_input(tape, grid, spec, points)?;
    head(tape, p, "sdf", x, Act::None)
}

/// `c = f^RGB([p, f_p])`, `[n, 3]` in `(0, 1)`.
pub fn eval_rgb(tape: &mut Tape, p: &Bound, grid: Var, spec: &GridSpec, points: Var) -> Result<Var> {
    let x = head_input(tape, grid, spec, points)?;
    head(tape, p, "rgb", x, Act::Sigmoid)
}

/// Both heads on one shared feature query.
pub fn eval_field(tape: &mut Tape, p: &Bound, grid: Var, spec: &GridSpec, points: Var) -> Result<(Var, Var)> {
    let x = head_input(tape, grid, spec, points)?;
    let s = head(tape, p, "sdf", x, Act::None)?;
    let c = head(tape, p, "rgb", x, Act::Sigmoid)?;
    Ok((s, c))
}

/// Anything that can record a signed distance for `[n, 3]` points.
pub trait SdfField {
    fn sdf_on_tape(&self, tape: &mut Tape, points: Var) -> Result<Var>;
}

impl SdfField for Scene {
    fn sdf_on_tape(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        Scene::sdf_on_tape(self, tape, points)
    }
}

/// A learned field with frozen weights and grid values.
#[derive(Clone, Debug)]
pub struct FrozenField {
    pub heads: ParamSet,
    pub grid: Tensor,
    pub spec: GridSpec,
}

impl FrozenField {
    /// Keeps only the `sdf.*` and `rgb.*` tensors of `params`.
    pub fn new(params: &ParamSet, grid: Tensor, spec: GridSpec) -> Result<Self> {
        let mut heads = ParamSet::new();
        for (n, t) in params.iter() {
            if n.starts_with("sdf.") || n.starts_with("rgb.") {
                heads.insert(n, t.clone())?;
            }
        }
        Ok(FrozenField { heads, grid, spec })
    }

    fn bind_const(&self, tape: &mut Tape) -> (Bound, Var) {
        let bound = self.heads.bind_constants(tape);
        let grid = tape.constant(self.grid.clone());
        (bound, grid)
    }

    pub fn sdf_values(&self, points: &[Vec3]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(points_tensor(points));
        let s = self.sdf_on_tape(&mut tape, x)?;
        Ok(tape.value(s).data().to_vec())
    }

    pub fn rgb_values(&self, points: &[Vec3]) -> Result<Vec<Vec3>> {
        let mut tape = Tape::new();
        let (b, g) = self.bind_const(&mut tape);
        let x = tape.constant(points_tensor(points));
        let c = eval_rgb(&mut tape, &b, g, &self.spec, x)?;
        let v = tape.value(c);
        Ok((0..v.rows()).map(|r| [v.get(r, 0), v.get(r, 1), v.get(r, 2)]).collect())
    }

    /// SDF on a regular lattice, one `x,y,z,sdf` row per node.
    pub fn export_lattice(&self, path: &Path, resolution: [usize; 3]) -> Result<()> {
        let b = self.spec.bounds;
        let axis = |i: usize, k: usize| {
            let n = resolution[i].max(2);
            b.min[i] + (b.max[i] - b.min[i]) * k as f64 / (n - 1) as f64
        };
        let mut pts = Vec::new();
        for i in 0..resolution[0].max(2) {
            for j in 0..resolution[1].max(2) {
                for k in 0..resolution[2].max(2) {
                    pts.push([axis(0, i), axis(1, j), axis(2, k)]);
                }
            }
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "z", "sdf"])?;
        for chunk in pts.chunks(4096) {
            let s = self.sdf_values(chunk)?;
            for (p, v) in chunk.iter().zip(s) {
                w.write_record([p[0], p[1], p[2], v].map(|x| x.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl SdfField for FrozenField {
    fn sdf_on_tape(&self, tape: &mut Tape, points: Var) -> Result<Var> {
        let (b, g) = self.bind_const(tape);
        eval_sdf(tape, &b, g, &self.spec, points)
    }
}

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    Tensor::new(
        Shape::new(points.len(), 3),
        points.iter().flatten().copied().collect(),
    )
    .expect("n x 3")
}

#[cfg(test)]
mod tests;
