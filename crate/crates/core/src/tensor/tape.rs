use std::fmt;

use super::{ParamStore, Tensor};
use crate::error::{dim_err, Error, Result};

/// Variance floor inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Below this magnitude `sinhc` and its derivative use their power series.
const SINHC_SERIES: f64 = 1e-2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Relu,
    Softplus,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Cosh,
    Sinh,
    Sinhc,
    AcoshClamped,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
    LayerNorm(Var),
    LogSoftmax(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    /// Per-row inverse standard deviations for layer norm.
    aux: Vec<f64>,
}

/// Records a computation so it can be differentiated in reverse.
///
/// A tape is single-use: build the forward pass, call [`Tape::gradients`] or
/// [`Tape::backward`], then drop it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn sinhc(x: f64) -> f64 {
    if x.abs() < SINHC_SERIES {
        let x2 = x * x;
        1.0 + x2 / 6.0 * (1.0 + x2 / 20.0 * (1.0 + x2 / 42.0))
    } else {
        x.sinh() / x
    }
}

fn sinhc_deriv(x: f64) -> f64 {
    if x.abs() < SINHC_SERIES {
        let x2 = x * x;
        x / 3.0 + x * x2 / 30.0 + x * x2 * x2 / 840.0
    } else {
        (x * x.cosh() - x.sinh()) / (x * x)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Cosh => x.cosh(),
            Unary::Sinh => x.sinh(),
            Unary::Sinhc => sinhc(x),
            Unary::AcoshClamped => x.max(1.0).acosh(),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Cosh => x.sinh(),
            Unary::Sinh => x.cosh(),
            Unary::Sinhc => sinhc_deriv(x),
            // Zero in the clamped region; the boundary itself gets the one-sided zero.
            Unary::AcoshClamped => {
                if x > 1.0 {
                    1.0 / ((x - 1.0) * (x + 1.0)).sqrt()
                } else {
                    0.0
                }
            }
        }
    }
}

/// Output shape of a broadcasting binary op.
fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[inline]
fn bidx(dims: (usize, usize), i: usize, j: usize) -> usize {
    let r = if dims.0 == 1 { 0 } else { i };
    let c = if dims.1 == 1 { 0 } else { j };
    r * dims.1 + c
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Per-node gradients of a scalar output.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::Concat(vs) => vs.iter().any(|v| self.nodes[v.0].needs_grad),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Reshape(a)
            | Op::SumRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::LayerNorm(a)
            | Op::LogSoftmax(a) => self.nodes[a.0].needs_grad,
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_of(t: &Tensor) -> (usize, usize, Vec<f64>) {
        let (r, c) = t.matrix_dims();
        (r, c, t.data().to_vec())
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        let (r, c, v) = Self::matrix_of(t);
        self.push(r, c, v, Op::Constant)
    }

    pub fn constant_matrix(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() || rows == 0 || cols == 0 {
            return dim_err(format!(
                "constant_matrix: {rows}x{cols} with {} values",
                data.len()
            ));
        }
        Ok(self.push(rows, cols, data, Op::Constant))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(1, 1, vec![v], Op::Constant)
    }

    /// A differentiable input whose gradient can be read from [`Gradients`].
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (r, c, v) = Self::matrix_of(t);
        self.push(r, c, v, Op::Leaf)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))?;
        let (r, c, v) = Self::matrix_of(store.value_at(idx));
        Ok(self.push(r, c, v, Op::Param(idx)))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        match self.dims(v) {
            (1, 1) => Ok(self.nodes[v.0].value[0]),
            d => Err(Error::Contract(format!("expected a scalar, found {}x{}", d.0, d.1))),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node dims are consistent")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return dim_err(format!("matmul: {m}x{k} times {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        Ok(self.push(m, n, out, Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Vec<f64>)> {
        let da = self.dims(a);
        let db = self.dims(b);
        let Some((r, c)) = broadcast_dims(da, db) else {
            return dim_err(format!(
                "{name}: cannot broadcast {}x{} with {}x{}",
                da.0, da.1, db.0, db.1
            ));
        };
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(r * c);
        if da == db {
            out.extend(av.iter().zip(bv).map(|(x, y)| f(*x, *y)));
        } else {
            for i in 0..r {
                for j in 0..c {
                    out.push(f(av[bidx(da, i, j)], bv[bidx(db, i, j)]));
                }
            }
        }
        Ok((r, c, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(r, c, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(r, c, v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(r, c, v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c, v) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(r, c, v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| x * s).collect();
        self.push(r, c, v, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|x| x + s).collect();
        self.push(r, c, v, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: Unary) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a).iter().map(|&x| f.apply(x)).collect();
        self.push(r, c, v, Op::Unary(a, f))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn cosh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cosh)
    }

    pub fn sinh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sinh)
    }

    /// `sinh(x)/x`, equal to 1 at 0.
    pub fn sinhc(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sinhc)
    }

    /// `acosh(max(x, 1))`.
    pub fn acosh_clamped(&mut self, a: Var) -> Var {
        self.unary(a, Unary::AcoshClamped)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Column-wise concatenation of operands with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return dim_err("concat: no operands");
        };
        let rows = self.dims(*first).0;
        if parts.iter().any(|p| self.dims(*p).0 != rows) {
            return dim_err("concat: operands have different row counts");
        }
        let cols: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                let pc = self.dims(*p).1;
                out.extend_from_slice(&self.value(*p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(rows, cols, out, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start >= end || end > c {
            return dim_err(format!("slice_cols: {start}..{end} of {c} columns"));
        }
        let w = end - start;
        let av = self.value(a);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + end]);
        }
        Ok(self.push(r, w, out, Op::SliceCols(a, start)))
    }

    /// Row `idx[i]` of `a` becomes row `i` of the result.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        if idx.is_empty() {
            return dim_err("gather_rows: empty index");
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return dim_err(format!("gather_rows: index {bad} out of {r} rows"));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        Ok(self.push(idx.len(), c, out, Op::GatherRows(a, idx.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return dim_err(format!("reshape: {r}x{c} into {rows}x{cols}"));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(rows, cols, v, Op::Reshape(a)))
    }

    /// Sum over the columns of each row, giving `rows x 1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self
            .value(a)
            .chunks_exact(c)
            .map(|row| row.iter().sum())
            .collect();
        self.push(r, 1, v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().sum();
        self.push(1, 1, vec![s / n], Op::MeanAll(a))
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        let mut inv = Vec::with_capacity(r);
        for row in self.value(a).chunks_exact(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv.push(is);
            out.extend(row.iter().map(|x| (x - mean) * is));
        }
        let v = self.push(r, c, out, Op::LayerNorm(a));
        self.nodes[v.0].aux = inv;
        v
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks_exact(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        self.push(r, c, out, Op::LogSoftmax(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ls = self.log_softmax(a);
        self.exp(ls)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, found {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d loss / d param` into the store for every parameter on the tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(pidx) = node.op {
                if let Some(g) = grads.get(Var(i)) {
                    store.accumulate_grad(pidx, g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = nodes[b.0].cols;
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            ga[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let a_ik = av[i * k + kk];
                            if a_ik == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[kk * n..(kk + 1) * n];
                            for (o, x) in gbrow.iter_mut().zip(grow) {
                                *o += a_ik * x;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let da = (nodes[a.0].rows, nodes[a.0].cols);
                let db = (nodes[b.0].rows, nodes[b.0].cols);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let op = &node.op;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..rows {
                        for j in 0..cols {
                            let gij = g[i * cols + j];
                            let d = match op {
                                Op::Add(..) | Op::Sub(..) => gij,
                                Op::Mul(..) => gij * bv[bidx(db, i, j)],
                                _ => gij / bv[bidx(db, i, j)],
                            };
                            ga[bidx(da, i, j)] += d;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for i in 0..rows {
                        for j in 0..cols {
                            let gij = g[i * cols + j];
                            let d = match op {
                                Op::Add(..) => gij,
                                Op::Sub(..) => -gij,
                                Op::Mul(..) => gij * av[bidx(da, i, j)],
                                _ => {
                                    let y = bv[bidx(db, i, j)];
                                    -gij * av[bidx(da, i, j)] / (y * y)
                                }
                            };
                            gb[bidx(db, i, j)] += d;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += s * x;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (o, x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::Unary(a, f) => {
                let xv = &nodes[a.0].value;
                let yv = &node.value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.len() {
                        if g[i] != 0.0 {
                            ga[i] += g[i] * f.deriv(xv[i], yv[i]);
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].cols;
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for i in 0..rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let ac = nodes[a.0].cols;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..rows {
                        for j in 0..cols {
                            ga[i * ac + start + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[i * cols + j];
                        }
                    }
                }
            }
            Op::SumRows(a) => {
                let ac = nodes[a.0].cols;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..rows {
                        for j in 0..ac {
                            ga[i * ac + j] += g[i];
                        }
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let n = nodes[a.0].value.len();
                let s = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / n as f64
                } else {
                    g[0]
                };
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in ga.iter_mut() {
                        *o += s;
                    }
                }
            }
            Op::LayerNorm(a) => {
                let yv = &node.value;
                let inv = &node.aux;
                if let Some(ga) = slot(nodes, grads, *a) {
                    let c = cols as f64;
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let yr = &yv[i * cols..(i + 1) * cols];
                        let mg = gr.iter().sum::<f64>() / c;
                        let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / c;
                        for j in 0..cols {
                            ga[i * cols + j] += inv[i] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let yv = &node.value;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..rows {
                        let gr = &g[i * cols..(i + 1) * cols];
                        let s: f64 = gr.iter().sum();
                        for j in 0..cols {
                            ga[i * cols + j] += gr[j] - yv[i * cols + j].exp() * s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(&t(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let p = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let bad = tape.constant(&t(3, 1, &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.matmul(a, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(&t(1, 4, &[3.0; 4]));
        let y = tape.layer_norm(a);
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(2, 3, &[0.5, -1.0, 2.0, 3.0, 0.0, 1.5]));
        let s = tape.sum_all(p);
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let vals = [0.5, -1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let p = tape.leaf(&t(1, 4, &vals));
        let sq = tape.square(p).unwrap();
        let s = tape.sum_all(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.gradients(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &vals);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.leaf(&t(1, 2, &[1.0, 2.0]));
        assert!(matches!(tape.gradients(p), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcasting_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&t(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.leaf(&t(1, 3, &[10.0, 20.0, 30.0]));
        let col = tape.leaf(&t(2, 1, &[2.0, 3.0]));
        let s = tape.add(a, row).unwrap();
        assert_eq!(tape.value(s), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let m = tape.mul(s, col).unwrap();
        assert_eq!(tape.value(m)[3], 42.0);
        let bad = tape.leaf(&t(1, 2, &[1.0, 1.0]));
        assert!(tape.add(a, bad).is_err());
        let total = tape.sum_all(m);
        let g = tape.gradients(total).unwrap();
        assert_eq!(g.get(row).unwrap(), &[5.0, 5.0, 5.0]);
        assert_eq!(g.get(col).unwrap(), &[66.0, 75.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&t(1, 2, &[1.0, 2.0]));
        let p = tape.leaf(&t(1, 2, &[3.0, 4.0]));
        let m = tape.mul(c, p).unwrap();
        let s = tape.sum_all(m);
        let g = tape.gradients(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn sinhc_series_matches_direct_form() {
        for x in [1e-3, 5e-3, 9.99e-3, 1e-2, 2e-2] {
            assert!((sinhc(x) - x.sinh() / x).abs() < 1e-15);
            let direct = (x * x.cosh() - x.sinh()) / (x * x);
            assert!((sinhc_deriv(x) - direct).abs() < 1e-9 * direct.abs());
        }
        assert_eq!(sinhc(0.0), 1.0);
        assert_eq!(sinhc_deriv(0.0), 0.0);
    }

    #[test]
    fn acosh_clamped_is_zero_below_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(1, 3, &[0.5, 1.0, 2.0]));
        let y = tape.acosh_clamped(x);
        assert_eq!(&tape.value(y)[..2], &[0.0, 0.0]);
        let s = tape.sum_all(y);
        let g = tape.gradients(s).unwrap();
        assert_eq!(&g.get(x).unwrap()[..2], &[0.0, 0.0]);
    }
}
