//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node holding
//! its value and the indices of its inputs. Because nodes are only ever
//! appended, the node list is already in topological order and the backward
//! pass is a single reverse sweep. Gradients from multiple uses of a value
//! accumulate additively.
//!
//! A tape is built fresh for every forward evaluation. [`Tape::backward`]
//! borrows the tape immutably, so it can be called more than once.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::tensor::{binary_shape, gemm, gemm_strided, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifier of a trainable leaf tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Abs(usize),
    Square(usize),
    Clamp(usize, f64, f64),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Sum(usize),
    SumRows(usize),
    SliceCols(usize, usize),
    ConcatCols(usize, usize),
    Gather(usize, Arc<[usize]>),
    Reshape(usize),
    Householder(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar with respect to every parameter leaf on the tape.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sum of another gradient map into this one, key by key.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (id, g) in &other.map {
            match self.map.get_mut(id) {
                Some(mine) => {
                    if mine.shape() != g.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "accumulate",
                            left: mine.shape().to_vec(),
                            right: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in mine.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.map.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|t| t.check_finite().is_ok())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradient contribution of an operand that may have been scalar-expanded.
fn reduce_to(len: usize, g: Vec<f64>) -> Vec<f64> {
    if len == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    /// Current value of a variable. Panics on a foreign handle.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("variable belongs to another tape");
        &self.nodes[i].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf that receives a gradient under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.index].param = Some(id);
        v
    }

    fn unary(&mut self, a: Var, op: impl FnOnce(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes[i].value.map(f);
        Ok(self.push(value, op(i)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: impl FnOnce(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let shape = binary_shape(name, ta.shape(), tb.shape())?;
        let n = shape.iter().product::<usize>();
        let (da, db) = (ta.data(), tb.data());
        let data: Vec<f64> = match (da.len() == n, db.len() == n) {
            (true, true) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (true, false) => da.iter().map(|&x| f(x, db[0])).collect(),
            (false, true) => db.iter().map(|&y| f(da[0], y)).collect(),
            (false, false) => vec![f(da[0], db[0])],
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let ib = self.idx(b)?;
        if self.nodes[ib].value.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.binary("div", a, b, Op::Div, |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar, |x| x + c)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |i| Op::MulScalar(i, c), |x| x * c)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        if let Some(v) = self.nodes[i].value.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {v}"),
            });
        }
        self.unary(a, Op::Log, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh, f64::tanh)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs, f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square, |x| x * x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |i| Op::Clamp(i, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    /// `x[n, m] + bias[m]`, the bias repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let (_, m) = tx.dims2("add_bias")?;
        if tb.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: tx.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = tx
            .data()
            .chunks(m)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(ix, ib)))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[i].value.sum());
        Ok(self.push(value, Op::Sum(i)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.mul_scalar(s, 1.0 / n)
    }

    /// Row sums of a rank-2 tensor, shape `[n, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        let t = &self.nodes[i].value;
        let (n, m) = t.dims2("sum_rows")?;
        let data = t.data().chunks(m).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(vec![n, 1], data)?;
        Ok(self.push(value, Op::SumRows(i)))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let i = self.idx(a)?;
        let t = &self.nodes[i].value;
        let (n, m) = t.dims2("slice_cols")?;
        if start >= end || end > m {
            return Err(TensorError::Domain {
                op: "slice_cols",
                detail: format!("range {start}..{end} outside {m} columns"),
            });
        }
        let data = t
            .data()
            .chunks(m)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let value = Tensor::new(vec![n, end - start], data)?;
        Ok(self.push(value, Op::SliceCols(i, start)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (n, p) = ta.dims2("concat_cols")?;
        let (n2, q) = tb.dims2("concat_cols")?;
        if n != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for (ra, rb) in ta.data().chunks(p).zip(tb.data().chunks(q)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let value = Tensor::new(vec![n, p + q], data)?;
        Ok(self.push(value, Op::ConcatCols(ia, ib)))
    }

    /// `out[i] = a[index[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let i = self.idx(a)?;
        let src = self.nodes[i].value.data();
        if let Some(&bad) = index.iter().find(|&&j| j >= src.len()) {
            return Err(TensorError::Domain {
                op: "gather",
                detail: format!("index {bad} out of range {}", src.len()),
            });
        }
        let data = index.iter().map(|&j| src[j]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Gather(i, index)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes[i].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(i)))
    }

    /// Reflect every row of `x[n, m]` through the hyperplane orthogonal to
    /// `v[m]`: `y = x - 2 (x·v / v·v) v`.
    pub fn householder(&mut self, x: Var, v: Var) -> Result<Var> {
        let (ix, iv) = (self.idx(x)?, self.idx(v)?);
        let (tx, tv) = (&self.nodes[ix].value, &self.nodes[iv].value);
        let (_, m) = tx.dims2("householder")?;
        if tv.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "householder",
                left: tx.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let v = tv.data();
        let q: f64 = v.iter().map(|a| a * a).sum();
        if q == 0.0 || !q.is_finite() {
            return Err(TensorError::Domain {
                op: "householder",
                detail: "reflection generator has zero or non-finite norm".into(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(m) {
            let c = 2.0 * dot(row, v) / q;
            for (r, vi) in row.iter_mut().zip(v) {
                *r -= c * vi;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Householder(ix, iv)))
    }

    /// Gradients of a one-element `loss` with respect to every parameter
    /// leaf. Parameters the loss does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        let lv = &self.nodes[root].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(pid) = node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                out.accumulate(&Gradients {
                    map: BTreeMap::from([(pid, t)]),
                })?;
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for node in &self.nodes {
            if let Some(pid) = node.param {
                out.map
                    .entry(pid)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| self.nodes[j].value.data();
        let len = |j: usize| self.nodes[j].value.len();
        let mut acc = |j: usize, contrib: Vec<f64>| match &mut grads[j] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        };
        let y = self.nodes[i].value.data();
        // Elementwise operand access for a possibly scalar-expanded input.
        let at = |j: usize, k: usize| {
            let d = val(j);
            if d.len() == 1 {
                d[0]
            } else {
                d[k]
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                acc(a, reduce_to(len(a), g.to_vec()));
                acc(b, reduce_to(len(b), g.to_vec()));
            }
            &Op::Sub(a, b) => {
                acc(a, reduce_to(len(a), g.to_vec()));
                acc(b, reduce_to(len(b), g.iter().map(|x| -x).collect()));
            }
            &Op::Mul(a, b) => {
                let ga = (0..g.len()).map(|k| g[k] * at(b, k)).collect();
                let gb = (0..g.len()).map(|k| g[k] * at(a, k)).collect();
                acc(a, reduce_to(len(a), ga));
                acc(b, reduce_to(len(b), gb));
            }
            &Op::Div(a, b) => {
                let ga = (0..g.len()).map(|k| g[k] / at(b, k)).collect();
                let gb = (0..g.len())
                    .map(|k| {
                        let d = at(b, k);
                        -g[k] * at(a, k) / (d * d)
                    })
                    .collect();
                acc(a, reduce_to(len(a), ga));
                acc(b, reduce_to(len(b), gb));
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => acc(a, g.to_vec()),
            &Op::MulScalar(a, c) => acc(a, g.iter().map(|x| x * c).collect()),
            &Op::Exp(a) => acc(a, g.iter().zip(y).map(|(g, y)| g * y).collect()),
            &Op::Log(a) => acc(a, g.iter().zip(val(a)).map(|(g, x)| g / x).collect()),
            &Op::Tanh(a) => acc(a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()),
            &Op::Abs(a) => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if x == 0.0 { 0.0 } else { g * x.signum() })
                    .collect(),
            ),
            &Op::Square(a) => acc(a, g.iter().zip(val(a)).map(|(g, x)| 2.0 * g * x).collect()),
            &Op::Clamp(a, lo, hi) => acc(
                a,
                g.iter()
                    .zip(val(a))
                    .map(|(g, &x)| if (lo..=hi).contains(&x) { *g } else { 0.0 })
                    .collect(),
            ),
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].value.shape()[0], self.nodes[a].value.shape()[1]);
                let n = self.nodes[b].value.shape()[1];
                // dA = G · Bᵀ, dB = Aᵀ · G
                let mut ga = vec![0.0; m * k];
                gemm_strided(m, n, k, g, (n as isize, 1), val(b), (1, n as isize), &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm_strided(k, m, n, val(a), (1, k as isize), g, (n as isize, 1), &mut gb, 0.0);
                acc(a, ga);
                acc(b, gb);
            }
            &Op::AddBias(x, b) => {
                let m = len(b);
                let mut gb = vec![0.0; m];
                for row in g.chunks(m) {
                    add_into(&mut gb, row);
                }
                acc(x, g.to_vec());
                acc(b, gb);
            }
            &Op::Sum(a) => acc(a, vec![g[0]; len(a)]),
            &Op::SumRows(a) => {
                let m = self.nodes[a].value.shape()[1];
                acc(a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, m)).collect());
            }
            &Op::SliceCols(a, start) => {
                let m = self.nodes[a].value.shape()[1];
                let w = self.nodes[i].value.shape()[1];
                let mut ga = vec![0.0; len(a)];
                for (dst, src) in ga.chunks_mut(m).zip(g.chunks(w)) {
                    dst[start..start + w].copy_from_slice(src);
                }
                acc(a, ga);
            }
            &Op::ConcatCols(a, b) => {
                let p = self.nodes[a].value.shape()[1];
                let q = self.nodes[b].value.shape()[1];
                let mut ga = Vec::with_capacity(len(a));
                let mut gb = Vec::with_capacity(len(b));
                for row in g.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                acc(a, ga);
                acc(b, gb);
            }
            Op::Gather(a, index) => {
                let mut ga = vec![0.0; len(*a)];
                for (gi, &j) in g.iter().zip(index.iter()) {
                    ga[j] += gi;
                }
                acc(*a, ga);
            }
            &Op::Householder(x, v) => {
                let vd = val(v);
                let m = vd.len();
                let q: f64 = vd.iter().map(|a| a * a).sum();
                let mut gx = vec![0.0; len(x)];
                let mut gv = vec![0.0; m];
                for ((grow, xrow), gxrow) in g.chunks(m).zip(val(x).chunks(m)).zip(gx.chunks_mut(m)) {
                    let gdv = dot(grow, vd);
                    let xdv = dot(xrow, vd);
                    // H is symmetric, so dx = H g.
                    let c = 2.0 * gdv / q;
                    for ((o, gi), vi) in gxrow.iter_mut().zip(grow).zip(vd) {
                        *o = gi - c * vi;
                    }
                    let k = 4.0 * xdv * gdv / (q * q);
                    for j in 0..m {
                        gv[j] += -2.0 / q * (xrow[j] * gdv + xdv * grow[j]) + k * vd[j];
                    }
                }
                acc(x, gx);
                acc(v, gv);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
