//! Recording tape for reverse-mode differentiation.
//!
//! Every op's backward rule is itself written in terms of tape ops, so a
//! gradient computed with [`Tape::grad`] is an ordinary node that can be
//! differentiated again. That is how second derivatives (the Jacobian of a
//! normalized gradient) are obtained.

use serde::Serialize;
use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::tensor::{matmul, Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a recorded value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Sentinel for a missing neighbour in a [`CornerIndex`]; contributes zero.
pub const NO_ROW: u32 = u32::MAX;

/// `rows × k` table of row indices used by the gather/scatter family.
#[derive(Clone, Debug, PartialEq)]
pub struct CornerIndex {
    rows: usize,
    k: usize,
    idx: Vec<u32>,
}

impl CornerIndex {
    pub fn new(rows: usize, k: usize, idx: Vec<u32>) -> Result<Self> {
        if idx.len() != rows * k {
            return Err(Error::Shape(format!(
                "corner index {rows}x{k} needs {} entries, got {}",
                rows * k,
                idx.len()
            )));
        }
        Ok(CornerIndex { rows, k, idx })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[u32] {
        &self.idx
    }

    fn max_target(&self) -> Option<u32> {
        self.idx.iter().copied().filter(|&i| i != NO_ROW).max()
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf(String),
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `scale * x + shift`
    Affine(Var, f64, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Reshape(Var, Shape),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    MaxConst(Var, f64),
    SumTo(Var, Shape),
    BroadcastTo(Var, Shape),
    RowNorm(Var),
    Softmax(Var),
    Concat(Var, Var),
    SliceCols {
        src: Var,
        start: usize,
        len: usize,
    },
    PadCols {
        src: Var,
        start: usize,
        total: usize,
    },
    /// `out[n] = Σ_k w[n,k] · table[idx[n,k]]`
    WeightedGather {
        table: Var,
        weights: Var,
        index: Arc<CornerIndex>,
    },
    /// `out[n,k] = ⟨table[idx[n,k]], query[n]⟩`
    GatherDot {
        table: Var,
        query: Var,
        index: Arc<CornerIndex>,
    },
    /// `out[n, k·C..(k+1)·C] = table[idx[n,k]]`
    GatherCols {
        table: Var,
        index: Arc<CornerIndex>,
    },
    /// `out[idx[n,k]] += src[n, k·C..(k+1)·C]`, the adjoint of `GatherCols`
    ScatterCols {
        src: Var,
        index: Arc<CornerIndex>,
        rows: usize,
    },
    /// `out[idx[n,k]] += w[n,k] · src[n]`
    WeightedScatter {
        src: Var,
        weights: Var,
        index: Arc<CornerIndex>,
        rows: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine(..) => "affine",
            Op::MatMul { .. } => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::MaxConst(..) => "max_const",
            Op::SumTo(..) => "sum_to",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::RowNorm(_) => "row_norm",
            Op::Softmax(_) => "softmax",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::WeightedGather { .. } => "weighted_gather",
            Op::GatherDot { .. } => "gather_dot",
            Op::GatherCols { .. } => "gather_cols",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::WeightedScatter { .. } => "weighted_scatter",
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf(_) | Op::Const => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Concat(a, b) => {
                vec![a, b]
            }
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Affine(a, ..)
            | Op::Reshape(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::MaxConst(a, _)
            | Op::SumTo(a, _)
            | Op::BroadcastTo(a, _)
            | Op::RowNorm(a)
            | Op::Softmax(a) => vec![a],
            Op::SliceCols { src, .. } | Op::PadCols { src, .. } => vec![src],
            Op::WeightedGather { table, weights, .. } => vec![table, weights],
            Op::GatherDot { table, query, .. } => vec![table, query],
            Op::GatherCols { table, .. } => vec![table],
            Op::ScatterCols { src, .. } => vec![src],
            Op::WeightedScatter { src, weights, .. } => vec![src, weights],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Serialize)]
struct DumpEntry<'a> {
    id: usize,
    op: &'a str,
    name: Option<&'a str>,
    parents: Vec<usize>,
    shape: [usize; 2],
    requires_grad: bool,
}

/// Ordered record of a computation. Parents always precede children.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input (parameter or free variable).
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf(name.into()),
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Const,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v`'s value with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        let value = {
            let nodes = &self.nodes;
            eval(&op, id, &|v: Var| &nodes[v.0].value)?
        };
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b))
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.push(Op::Affine(a, scale, shift))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        self.push(Op::Reshape(a, shape))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Abs(a))
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::MaxConst(a, c))
    }

    pub fn sum_to(&mut self, a: Var, shape: Shape) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::SumTo(a, shape))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: Shape) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        self.push(Op::BroadcastTo(a, shape))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.sum_to(a, Shape::SCALAR)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a).len();
        if n == 0 {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum, `[r,c] → [r,1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).rows;
        self.sum_to(a, Shape::new(r, 1))
    }

    /// Per-row L2 norm, `[r,c] → [r,1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::RowNorm(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    /// Column concatenation.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Concat(a, b))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceCols { src, start, len })
    }

    pub fn pad_cols(&mut self, src: Var, start: usize, total: usize) -> Result<Var> {
        self.push(Op::PadCols { src, start, total })
    }

    pub fn weighted_gather(
        &mut self,
        table: Var,
        weights: Var,
        index: Arc<CornerIndex>,
    ) -> Result<Var> {
        self.push(Op::WeightedGather {
            table,
            weights,
            index,
        })
    }

    pub fn gather_dot(&mut self, table: Var, query: Var, index: Arc<CornerIndex>) -> Result<Var> {
        self.push(Op::GatherDot {
            table,
            query,
            index,
        })
    }

    /// Row `n` holds the `k` indexed table rows side by side; missing rows are zero.
    pub fn gather_cols(&mut self, table: Var, index: Arc<CornerIndex>) -> Result<Var> {
        self.push(Op::GatherCols { table, index })
    }

    pub fn scatter_cols(&mut self, src: Var, index: Arc<CornerIndex>, rows: usize) -> Result<Var> {
        self.push(Op::ScatterCols { src, index, rows })
    }

    pub fn weighted_scatter(
        &mut self,
        src: Var,
        weights: Var,
        index: Arc<CornerIndex>,
        rows: usize,
    ) -> Result<Var> {
        self.push(Op::WeightedScatter {
            src,
            weights,
            index,
            rows,
        })
    }

    /// Plain row gather (`k = 1`, unit weights); missing rows are zero.
    pub fn gather_rows(&mut self, table: Var, rows: &[u32]) -> Result<Var> {
        let index = Arc::new(CornerIndex::new(rows.len(), 1, rows.to_vec())?);
        let ones = self.constant(Tensor::filled(Shape::new(rows.len(), 1), 1.0));
        self.weighted_gather(table, ones, index)
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Gradients of scalar `output` recorded as new tape nodes (differentiable again).
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.backward(output, wrt, true)
    }

    /// Gradient values of scalar `output`; the tape is restored to its prior length.
    pub fn gradient(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let base = self.nodes.len();
        let grads = self.backward(output, wrt, false)?;
        let values = grads.iter().map(|g| self.value(*g).clone()).collect();
        self.nodes.truncate(base);
        Ok(values)
    }

    /// Gradient values addressed by leaf name.
    pub fn gradient_by_name(&mut self, output: Var, names: &[&str]) -> Result<Vec<Tensor>> {
        let vars = names
            .iter()
            .map(|n| self.find_leaf(n).ok_or_else(|| Error::UnknownParam(n.to_string())))
            .collect::<Result<Vec<_>>>()?;
        self.gradient(output, &vars)
    }

    pub fn find_leaf(&self, name: &str) -> Option<Var> {
        self.nodes.iter().position(|n| matches!(&n.op, Op::Leaf(l) if l == name)).map(Var)
    }

    fn backward(&mut self, output: Var, wrt: &[Var], retain: bool) -> Result<Vec<Var>> {
        let out_shape = self.shape(output);
        if out_shape != Shape::SCALAR {
            return Err(Error::NonScalarOutput(format!("node {} {out_shape}", output.0)));
        }
        for &w in wrt {
            if matches!(self.nodes[w.0].op, Op::Const) {
                return Err(Error::NotDifferentiable(w.0));
            }
        }
        let base = self.nodes.len();
        let top = output.0;

        let mut needed = vec![false; top + 1];
        if self.nodes[top].requires_grad {
            needed[top] = true;
        }
        for i in (0..=top).rev() {
            if !needed[i] {
                continue;
            }
            for p in self.nodes[i].op.parents() {
                if self.nodes[p.0].requires_grad {
                    needed[p.0] = true;
                }
            }
        }

        let protected: HashSet<usize> = wrt.iter().map(|v| v.0).collect();
        let mut adj: Vec<Option<Var>> = vec![None; top + 1];
        // How many adjoint slots reference each backward-created node.
        let mut refs: HashMap<usize, usize> = HashMap::new();
        if needed[top] {
            let seed = self.scalar(1.0);
            adj[top] = Some(seed);
            refs.insert(seed.0, 1);
        }

        for i in (0..=top).rev() {
            let Some(g) = adj[i] else { continue };
            if !needed[i] || matches!(self.nodes[i].op, Op::Leaf(_) | Op::Const) {
                continue;
            }
            let mark = self.nodes.len();
            let contribs = self.vjp(Var(i), g)?;
            let mut dead = Vec::new();
            for (p, c) in contribs {
                if !needed[p.0] {
                    continue;
                }
                let merged = match adj[p.0] {
                    None => c,
                    Some(prev) => {
                        let sum = self.add(prev, c)?;
                        dead.push(prev.0);
                        if let Some(n) = refs.get_mut(&prev.0) {
                            *n -= 1;
                        }
                        sum
                    }
                };
                adj[p.0] = Some(merged);
                *refs.entry(merged.0).or_insert(0) += 1;
            }
            if !protected.contains(&i) {
                adj[i] = None;
                if let Some(n) = refs.get_mut(&g.0) {
                    *n -= 1;
                }
                dead.push(g.0);
            }
            if !retain {
                dead.extend(mark..self.nodes.len());
                for d in dead {
                    if d >= base && refs.get(&d).copied().unwrap_or(0) == 0 {
                        self.release(d);
                    }
                }
            }
        }

        wrt.iter()
            .map(|w| match adj[w.0] {
                Some(g) => Ok(g),
                None => Ok(self.constant(Tensor::zeros(self.shape(*w)))),
            })
            .collect()
    }

    fn release(&mut self, id: usize) {
        let node = &mut self.nodes[id];
        node.value = Tensor::from_parts(Shape::new(0, 0), Vec::new());
    }

    /// Contributions `(parent, ∂L/∂parent)` for node `y` given upstream `g`.
    fn vjp(&mut self, y: Var, g: Var) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[y.0].op.clone();
        let shape_of = |t: &Tape, v: Var| t.shape(v);
        Ok(match op {
            Op::Leaf(_) | Op::Const => vec![],
            Op::Add(a, b) => {
                let ga = self.sum_to(g, shape_of(self, a))?;
                let gb = self.sum_to(g, shape_of(self, b))?;
                vec![(a, ga), (b, gb)]
            }
            Op::Sub(a, b) => {
                let ga = self.sum_to(g, shape_of(self, a))?;
                let ng = self.neg(g)?;
                let gb = self.sum_to(ng, shape_of(self, b))?;
                vec![(a, ga), (b, gb)]
            }
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if self.requires_grad(a) {
                    let t = self.mul(g, b)?;
                    out.push((a, self.sum_to(t, shape_of(self, a))?));
                }
                if self.requires_grad(b) {
                    let t = self.mul(g, a)?;
                    out.push((b, self.sum_to(t, shape_of(self, b))?));
                }
                out
            }
            Op::Div(a, b) => {
                let mut out = Vec::new();
                if self.requires_grad(a) {
                    let t = self.div(g, b)?;
                    out.push((a, self.sum_to(t, shape_of(self, a))?));
                }
                if self.requires_grad(b) {
                    // ∂(a/b)/∂b = -y/b
                    let gy = self.mul(g, y)?;
                    let t = self.div(gy, b)?;
                    let t = self.neg(t)?;
                    out.push((b, self.sum_to(t, shape_of(self, b))?));
                }
                out
            }
            Op::Affine(a, s, _) => vec![(a, self.scale(g, s)?)],
            Op::MatMul { a, b, ta, tb } => {
                let mut out = Vec::new();
                if self.requires_grad(a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    out.push((a, ga));
                }
                if self.requires_grad(b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    out.push((b, gb));
                }
                out
            }
            Op::Reshape(a, _) => {
                let s = shape_of(self, a);
                vec![(a, self.reshape(g, s)?)]
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                vec![(a, self.mul(g, m)?)]
            }
            Op::MaxConst(a, c) => {
                let mask = self.value(a).map(|x| if x > c { 1.0 } else { 0.0 });
                let m = self.constant(mask);
                vec![(a, self.mul(g, m)?)]
            }
            Op::Abs(a) => {
                let sign = self.value(a).map(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let s = self.constant(sign);
                vec![(a, self.mul(g, s)?)]
            }
            Op::Tanh(a) => {
                // g (1 - y²)
                let gy = self.mul(g, y)?;
                let gyy = self.mul(gy, y)?;
                vec![(a, self.sub(g, gyy)?)]
            }
            Op::Sigmoid(a) => {
                // g y (1 - y)
                let gy = self.mul(g, y)?;
                let gyy = self.mul(gy, y)?;
                vec![(a, self.sub(gy, gyy)?)]
            }
            Op::Exp(a) => vec![(a, self.mul(g, y)?)],
            Op::Log(a) => vec![(a, self.div(g, a)?)],
            Op::SumTo(a, _) => {
                let s = shape_of(self, a);
                vec![(a, self.broadcast_to(g, s)?)]
            }
            Op::BroadcastTo(a, _) => {
                let s = shape_of(self, a);
                vec![(a, self.sum_to(g, s)?)]
            }
            Op::RowNorm(a) => {
                // g a / ‖a‖; zero rows get zero gradient instead of 0/0
                let safe = self.max_const(y, 1e-150)?;
                let q = self.div(g, safe)?;
                vec![(a, self.mul(a, q)?)]
            }
            Op::Softmax(a) => {
                // y ⊙ (g - Σ_row g⊙y)
                let gy = self.mul(g, y)?;
                let s = self.sum_rows(gy)?;
                let d = self.sub(g, s)?;
                vec![(a, self.mul(y, d)?)]
            }
            Op::Concat(a, b) => {
                let ca = shape_of(self, a).cols;
                let cb = shape_of(self, b).cols;
                let ga = self.slice_cols(g, 0, ca)?;
                let gb = self.slice_cols(g, ca, cb)?;
                vec![(a, ga), (b, gb)]
            }
            Op::SliceCols { src, start, .. } => {
                let total = shape_of(self, src).cols;
                vec![(src, self.pad_cols(g, start, total)?)]
            }
            Op::PadCols { src, start, .. } => {
                let len = shape_of(self, src).cols;
                vec![(src, self.slice_cols(g, start, len)?)]
            }
            Op::WeightedGather {
                table,
                weights,
                index,
            } => {
                let mut out = Vec::new();
                if self.requires_grad(table) {
                    let rows = shape_of(self, table).rows;
                    let gt = self.weighted_scatter(g, weights, index.clone(), rows)?;
                    out.push((table, gt));
                }
                if self.requires_grad(weights) {
                    out.push((weights, self.gather_dot(table, g, index)?));
                }
                out
            }
            Op::GatherDot {
                table,
                query,
                index,
            } => {
                let mut out = Vec::new();
                if self.requires_grad(table) {
                    let rows = shape_of(self, table).rows;
                    let gt = self.weighted_scatter(query, g, index.clone(), rows)?;
                    out.push((table, gt));
                }
                if self.requires_grad(query) {
                    out.push((query, self.weighted_gather(table, g, index)?));
                }
                out
            }
            Op::GatherCols { table, index } => {
                let rows = shape_of(self, table).rows;
                vec![(table, self.scatter_cols(g, index, rows)?)]
            }
            Op::ScatterCols { src, index, .. } => vec![(src, self.gather_cols(g, index)?)],
            Op::WeightedScatter {
                src,
                weights,
                index,
                ..
            } => {
                let mut out = Vec::new();
                if self.requires_grad(src) {
                    out.push((src, self.weighted_gather(g, weights, index.clone())?));
                }
                if self.requires_grad(weights) {
                    out.push((weights, self.gather_dot(g, src, index)?));
                }
                out
            }
        })
    }

    /// Recompute every derived node from its recorded op and compare bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match node.op {
                Op::Leaf(_) | Op::Const => node.value.clone(),
                ref op => eval(op, id, &|v: Var| &values[v.0])?,
            };
            if !v.bits_eq(&node.value) {
                return Ok(false);
            }
            values.push(v);
        }
        Ok(true)
    }

    /// Id and op name of the earliest node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|id| (id, self.nodes[id].op.name()))
    }

    /// JSON op-list of the tape, for inspection.
    pub fn dump_json(&self) -> Result<String> {
        let entries: Vec<DumpEntry> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, n)| DumpEntry {
                id,
                op: n.op.name(),
                name: match &n.op {
                    Op::Leaf(s) => Some(s.as_str()),
                    _ => None,
                },
                parents: n.op.parents().iter().map(|p| p.0).collect(),
                shape: [n.value.rows(), n.value.cols()],
                requires_grad: n.requires_grad,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&entries)?)
    }
}

fn mismatch(op: &'static str, node: usize, a: Shape, b: Shape) -> Error {
    Error::ShapeMismatch {
        op,
        node,
        lhs: a.to_string(),
        rhs: b.to_string(),
    }
}

fn zip_broadcast(
    name: &'static str,
    node: usize,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let out = Shape::broadcast(sa, sb).ok_or_else(|| mismatch(name, node, sa, sb))?;
    if sa == sb {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let mut data = Vec::with_capacity(out.len());
    let (ad, bd) = (a.data(), b.data());
    for r in 0..out.rows {
        let ra = if sa.rows == 1 { 0 } else { r };
        let rb = if sb.rows == 1 { 0 } else { r };
        for c in 0..out.cols {
            let x = ad[ra * sa.cols + if sa.cols == 1 { 0 } else { c }];
            let y = bd[rb * sb.cols + if sb.cols == 1 { 0 } else { c }];
            data.push(f(x, y));
        }
    }
    Ok(Tensor::from_parts(out, data))
}

fn check_index(
    name: &'static str,
    node: usize,
    index: &CornerIndex,
    weights: Shape,
    table_rows: usize,
) -> Result<()> {
    if weights != Shape::new(index.rows, index.k) {
        return Err(mismatch(name, node, weights, Shape::new(index.rows, index.k)));
    }
    if let Some(m) = index.max_target() {
        if m as usize >= table_rows {
            return Err(Error::Shape(format!(
                "{name} at node {node}: index {m} out of range for {table_rows} rows"
            )));
        }
    }
    Ok(())
}

fn eval<'a>(op: &Op, node: usize, val: &dyn Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    let unary = |a: Var, f: &dyn Fn(f64) -> f64| val(a).map(f);
    Ok(match *op {
        Op::Leaf(_) | Op::Const => unreachable!("leaves carry their own values"),
        Op::Add(a, b) => zip_broadcast("add", node, val(a), val(b), |x, y| x + y)?,
        Op::Sub(a, b) => zip_broadcast("sub", node, val(a), val(b), |x, y| x - y)?,
        Op::Mul(a, b) => zip_broadcast("mul", node, val(a), val(b), |x, y| x * y)?,
        Op::Div(a, b) => zip_broadcast("div", node, val(a), val(b), |x, y| x / y)?,
        Op::Affine(a, s, t) => unary(a, &|x| s * x + t),
        Op::MatMul { a, b, ta, tb } => matmul(val(a), val(b), ta, tb)
            .ok_or_else(|| mismatch("matmul", node, val(a).shape(), val(b).shape()))?,
        Op::Reshape(a, s) => val(a)
            .clone()
            .reshaped(s)
            .map_err(|_| mismatch("reshape", node, val(a).shape(), s))?,
        Op::Relu(a) => unary(a, &|x| x.max(0.0)),
        Op::Tanh(a) => unary(a, &f64::tanh),
        Op::Sigmoid(a) => unary(a, &|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }),
        Op::Exp(a) => unary(a, &f64::exp),
        Op::Log(a) => unary(a, &f64::ln),
        Op::Abs(a) => unary(a, &f64::abs),
        Op::MaxConst(a, c) => unary(a, &|x| x.max(c)),
        Op::SumTo(a, s) => {
            let t = val(a);
            let sa = t.shape();
            let ok = (s.rows == sa.rows || s.rows == 1) && (s.cols == sa.cols || s.cols == 1);
            if !ok {
                return Err(mismatch("sum_to", node, sa, s));
            }
            let mut out = vec![0.0; s.len()];
            for r in 0..sa.rows {
                let ro = if s.rows == 1 { 0 } else { r };
                let row = t.row_slice(r);
                if s.cols == 1 {
                    out[ro] += row.iter().sum::<f64>();
                } else {
                    for (o, x) in out[ro * s.cols..(ro + 1) * s.cols].iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
            Tensor::from_parts(s, out)
        }
        Op::BroadcastTo(a, s) => {
            let t = val(a);
            let sa = t.shape();
            if Shape::broadcast(sa, s) != Some(s) {
                return Err(mismatch("broadcast_to", node, sa, s));
            }
            let mut out = Vec::with_capacity(s.len());
            for r in 0..s.rows {
                let ra = if sa.rows == 1 { 0 } else { r };
                if sa.cols == 1 {
                    out.extend(std::iter::repeat_n(t.get(ra, 0), s.cols));
                } else {
                    out.extend_from_slice(t.row_slice(ra));
                }
            }
            Tensor::from_parts(s, out)
        }
        Op::RowNorm(a) => {
            let t = val(a);
            let data = (0..t.rows())
                .map(|r| t.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            Tensor::from_parts(Shape::new(t.rows(), 1), data)
        }
        Op::Softmax(a) => {
            let t = val(a);
            let mut out = t.clone();
            for r in 0..t.rows() {
                let row = out.row_slice_mut(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            out
        }
        Op::Concat(a, b) => {
            let (x, y) = (val(a), val(b));
            if x.rows() != y.rows() {
                return Err(mismatch("concat", node, x.shape(), y.shape()));
            }
            let cols = x.cols() + y.cols();
            let mut data = Vec::with_capacity(x.rows() * cols);
            for r in 0..x.rows() {
                data.extend_from_slice(x.row_slice(r));
                data.extend_from_slice(y.row_slice(r));
            }
            Tensor::from_parts(Shape::new(x.rows(), cols), data)
        }
        Op::SliceCols { src, start, len } => {
            let t = val(src);
            if start + len > t.cols() {
                return Err(mismatch("slice_cols", node, t.shape(), Shape::new(t.rows(), start + len)));
            }
            let mut data = Vec::with_capacity(t.rows() * len);
            for r in 0..t.rows() {
                data.extend_from_slice(&t.row_slice(r)[start..start + len]);
            }
            Tensor::from_parts(Shape::new(t.rows(), len), data)
        }
        Op::PadCols { src, start, total } => {
            let t = val(src);
            if start + t.cols() > total {
                return Err(mismatch("pad_cols", node, t.shape(), Shape::new(t.rows(), total)));
            }
            let mut out = Tensor::zeros(Shape::new(t.rows(), total));
            for r in 0..t.rows() {
                out.row_slice_mut(r)[start..start + t.cols()].copy_from_slice(t.row_slice(r));
            }
            out
        }
        Op::WeightedGather {
            table,
            weights,
            ref index,
        } => {
            let (t, w) = (val(table), val(weights));
            check_index("weighted_gather", node, index, w.shape(), t.rows())?;
            let c = t.cols();
            let mut out = vec![0.0; index.rows * c];
            for n in 0..index.rows {
                let dst = &mut out[n * c..(n + 1) * c];
                for k in 0..index.k {
                    let i = index.idx[n * index.k + k];
                    let wk = w.data()[n * index.k + k];
                    if i == NO_ROW || wk == 0.0 {
                        continue;
                    }
                    for (d, s) in dst.iter_mut().zip(t.row_slice(i as usize)) {
                        *d += wk * s;
                    }
                }
            }
            Tensor::from_parts(Shape::new(index.rows, c), out)
        }
        Op::GatherDot {
            table,
            query,
            ref index,
        } => {
            let (t, q) = (val(table), val(query));
            if q.rows() != index.rows || q.cols() != t.cols() {
                return Err(mismatch("gather_dot", node, t.shape(), q.shape()));
            }
            check_index("gather_dot", node, index, Shape::new(index.rows, index.k), t.rows())?;
            let mut out = vec![0.0; index.rows * index.k];
            for n in 0..index.rows {
                let qr = q.row_slice(n);
                for k in 0..index.k {
                    let i = index.idx[n * index.k + k];
                    if i == NO_ROW {
                        continue;
                    }
                    out[n * index.k + k] =
                        t.row_slice(i as usize).iter().zip(qr).map(|(a, b)| a * b).sum();
                }
            }
            Tensor::from_parts(Shape::new(index.rows, index.k), out)
        }
        Op::GatherCols { table, ref index } => {
            let t = val(table);
            let k = index.k;
            check_index("gather_cols", node, index, Shape::new(index.rows, k), t.rows())?;
            let c = t.cols();
            let mut out = vec![0.0; index.rows * k * c];
            for (dst, &i) in out.chunks_exact_mut(c.max(1)).zip(&index.idx) {
                if i != NO_ROW {
                    dst.copy_from_slice(t.row_slice(i as usize));
                }
            }
            Tensor::from_parts(Shape::new(index.rows, k * c), out)
        }
        Op::ScatterCols { src, ref index, rows } => {
            let s = val(src);
            let k = index.k;
            check_index("scatter_cols", node, index, Shape::new(index.rows, k), rows)?;
            if s.rows() != index.rows || s.cols() % k != 0 {
                return Err(mismatch("scatter_cols", node, s.shape(), Shape::new(index.rows, k)));
            }
            let c = s.cols() / k;
            let mut out = Tensor::zeros(Shape::new(rows, c));
            for (part, &i) in s.data().chunks_exact(c.max(1)).zip(&index.idx) {
                if i != NO_ROW {
                    for (d, x) in out.row_slice_mut(i as usize).iter_mut().zip(part) {
                        *d += x;
                    }
                }
            }
            out
        }
        Op::WeightedScatter {
            src,
            weights,
            ref index,
            rows,
        } => {
            let (s, w) = (val(src), val(weights));
            check_index("weighted_scatter", node, index, w.shape(), rows)?;
            if s.rows() != index.rows {
                return Err(mismatch("weighted_scatter", node, s.shape(), w.shape()));
            }
            let c = s.cols();
            let mut out = vec![0.0; rows * c];
            for n in 0..index.rows {
                let sr = s.row_slice(n);
                for k in 0..index.k {
                    let i = index.idx[n * index.k + k];
                    let wk = w.data()[n * index.k + k];
                    if i == NO_ROW || wk == 0.0 {
                        continue;
                    }
                    let i = i as usize;
                    for (d, x) in out[i * c..(i + 1) * c].iter_mut().zip(sr) {
                        *d += wk * x;
                    }
                }
            }
            Tensor::from_parts(Shape::new(rows, c), out)
        }
    })
}
