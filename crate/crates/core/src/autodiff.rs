//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation whose result depends on a tensor that
//! requires a gradient. Operations on constants are evaluated eagerly and
//! leave no backward bookkeeping, so an inference pass over frozen parameters
//! records nothing. [`Tape::backward`] walks the recorded nodes once, in
//! reverse insertion order, and accumulates gradients by plain summation.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Const,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ColScale(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    MeanRows(Var, Vec<bool>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GradReverse(Var, f64),
    Sum(Var),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    inputs: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn input(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    trainable: Vec<bool>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    const_vars: HashMap<ParamId, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape without parameters; leaves come from [`Tape::input`] and
    /// [`Tape::constant`].
    pub fn new() -> Self {
        Self {
            params: None,
            trainable: Vec::new(),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            const_vars: HashMap::new(),
        }
    }

    /// Every parameter is read as a constant (inference).
    pub fn frozen(params: &'p ParamStore) -> Self {
        Self::with_trainable(params, vec![false; params.len()])
    }

    /// `trainable[i]` marks parameter `i` as requiring a gradient.
    pub fn with_trainable(params: &'p ParamStore, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), params.len(), "trainable mask length");
        Self {
            params: Some(params),
            trainable,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            const_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying backward bookkeeping.
    pub fn recorded_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without store").get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let rg = self.trainable[id.0];
        self.nodes.push(Node {
            value: Value::Param(id),
            op: if rg { Op::Param(id) } else { Op::Const },
            requires_grad: rg,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Reads a parameter as a constant regardless of the trainable mask.
    pub fn param_const(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.const_vars.get(&id) {
            return *v;
        }
        self.params.expect("param_const on a tape without parameters");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Const,
            requires_grad: false,
        });
        let v = Var(self.nodes.len() - 1);
        self.const_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        if k != bt.rows() {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let out = Tensor::from_parts(m, n, matmul_nn(at.data(), bt.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`, the natural form for `x W^T` with `W` stored `out x in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k, n) = (at.rows(), at.cols(), bt.rows());
        if k != bt.cols() {
            return Err(Error::shape("matmul_t", at.shape(), bt.shape()));
        }
        let out = Tensor::from_parts(m, n, matmul_nt(at.data(), bt.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if (at.rows(), at.cols()) != (bt.rows(), bt.cols()) {
            return Err(Error::shape(op, at.shape(), bt.shape()));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(at.rows(), at.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (at, rt) = (self.value(a), self.value(row));
        let c = at.cols();
        if rt.numel() != c {
            return Err(Error::shape("add_row", at.shape(), rt.shape()));
        }
        let data = at
            .data()
            .chunks(c)
            .flat_map(|r| r.iter().zip(rt.data()).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::from_parts(at.rows(), c, data);
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let at = self.value(a);
        let out = Tensor::from_parts(at.rows(), at.cols(), at.data().iter().map(|x| x * s).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Multiplies row `r` of `a` by `col[r]`, where `col` is `n x 1`.
    pub fn col_scale(&mut self, a: Var, col: Var) -> Result<Var> {
        let (at, ct) = (self.value(a), self.value(col));
        let (n, c) = (at.rows(), at.cols());
        if ct.numel() != n {
            return Err(Error::shape("col_scale", at.shape(), ct.shape()));
        }
        let data = at
            .data()
            .chunks(c)
            .zip(ct.data())
            .flat_map(|(r, s)| r.iter().map(move |x| x * s))
            .collect();
        let out = Tensor::from_parts(n, c, data);
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::ColScale(a, col), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let at = self.value(a);
        let c = at.cols();
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", at.shape(), &[start, width]));
        }
        let data = at
            .data()
            .chunks(c)
            .flat_map(|r| r[start..start + width].iter().copied())
            .collect();
        let out = Tensor::from_parts(at.rows(), width, data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        for p in parts {
            if self.value(*p).rows() != n {
                return Err(Error::shape("concat_cols", self.value(parts[0]).shape(), self.value(*p).shape()));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::from_parts(n, total, data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let out = Tensor::from_parts(at.rows(), at.cols(), at.data().iter().map(|x| x.max(0.0)).collect());
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let at = self.value(a);
        let data = at
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            .collect();
        let out = Tensor::from_parts(at.rows(), at.cols(), data);
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows_masked(self.value(a), None)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Row softmax restricted to columns where `allowed` is true; the rest get
    /// probability exactly zero.
    pub fn softmax_rows_masked(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let out = softmax_rows_masked(self.value(a), Some(allowed))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, c) = (xt.rows(), xt.cols());
        if gt.numel() != c || bt.numel() != c {
            return Err(Error::shape("layer_norm", xt.shape(), gt.shape()));
        }
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            let row = xt.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gt.data()[j] + bt.data()[j];
            }
        }
        let out = Tensor::from_parts(n, c, out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, c) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "gather row",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tt.row_slice(id));
        }
        let out = Tensor::from_parts(ids.len(), c, data);
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Mean over the rows where `keep` is true, giving a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let at = self.value(a);
        let (n, c) = (at.rows(), at.cols());
        if keep.len() != n {
            return Err(Error::shape("mean_rows", at.shape(), &[keep.len()]));
        }
        let count = keep.iter().filter(|k| **k).count();
        if count == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let mut out = vec![0.0; c];
        for r in (0..n).filter(|r| keep[*r]) {
            for (o, v) in out.iter_mut().zip(at.row_slice(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::row(out), Op::MeanRows(a, keep.to_vec()), rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        let (loss, probs) = cross_entropy_with_probs(lt, labels)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Identity forward; the backward pass multiplies the upstream gradient by
    /// `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let out = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(out, Op::GradReverse(a, lambda), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, i, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(cur) => cur.iter_mut().zip(&g).for_each(|(c, x)| *c += x),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.nodes[v.0].requires_grad {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        index: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let shape_of = |v: Var| self.value(v);
        match &node.op {
            Op::Const => {}
            Op::Input => {
                let t = self.value(Var(index));
                out.inputs
                    .insert(Var(index), Tensor::from_parts(t.rows(), t.cols(), g));
            }
            Op::Param(id) => {
                let t = self.value(Var(index));
                let grad = Tensor::new(t.shape().to_vec(), g).expect("grad shape");
                out.params.insert(*id, grad);
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (shape_of(*a), shape_of(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                self.acc_with(grads, *a, || matmul_nt(&g, bt.data(), m, n, k));
                self.acc_with(grads, *b, || matmul_tn(at.data(), &g, m, k, n));
            }
            Op::MatMulT(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                let (at, bt) = (shape_of(*a), shape_of(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.rows());
                self.acc_with(grads, *a, || matmul_nn(&g, bt.data(), m, n, k));
                self.acc_with(grads, *b, || matmul_tn(&g, at.data(), m, n, k));
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, *a, || g.clone());
                self.acc_with(grads, *b, || g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (at, bt) = (shape_of(*a), shape_of(*b));
                self.acc_with(grads, *a, || g.iter().zip(bt.data()).map(|(x, y)| x * y).collect());
                self.acc_with(grads, *b, || g.iter().zip(at.data()).map(|(x, y)| x * y).collect());
            }
            Op::AddRow(a, row) => {
                let c = shape_of(*a).cols();
                self.acc_with(grads, *row, || {
                    let mut s = vec![0.0; c];
                    for r in g.chunks(c) {
                        s.iter_mut().zip(r).for_each(|(o, x)| *o += x);
                    }
                    s
                });
                self.acc(grads, *a, g);
            }
            Op::Scale(a, s) => {
                self.acc_with(grads, *a, || g.iter().map(|x| x * s).collect());
            }
            Op::ColScale(a, col) => {
                let (at, ct) = (shape_of(*a), shape_of(*col));
                let c = at.cols();
                self.acc_with(grads, *a, || {
                    g.chunks(c)
                        .zip(ct.data())
                        .flat_map(|(r, s)| r.iter().map(move |x| x * s))
                        .collect()
                });
                self.acc_with(grads, *col, || {
                    g.chunks(c)
                        .zip(at.data().chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect()
                });
            }
            Op::SliceCols(a, start) => {
                let at = shape_of(*a);
                let c = at.cols();
                let w = self.value(Var(index)).cols();
                self.acc_with(grads, *a, || {
                    let mut full = vec![0.0; at.numel()];
                    for (r, gr) in g.chunks(w).enumerate() {
                        full[r * c + start..r * c + start + w].copy_from_slice(gr);
                    }
                    full
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.value(Var(index)).cols();
                let mut offset = 0;
                for p in parts {
                    let w = shape_of(*p).cols();
                    let off = offset;
                    self.acc_with(grads, *p, || {
                        g.chunks(total)
                            .flat_map(|r| r[off..off + w].iter().copied())
                            .collect()
                    });
                    offset += w;
                }
            }
            Op::Relu(a) => {
                let at = shape_of(*a);
                // subgradient 0 at exactly 0
                self.acc_with(grads, *a, || {
                    g.iter()
                        .zip(at.data())
                        .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                        .collect()
                });
            }
            Op::Gelu(a) => {
                let at = shape_of(*a);
                self.acc_with(grads, *a, || {
                    g.iter()
                        .zip(at.data())
                        .map(|(gx, &x)| {
                            let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            gx * d
                        })
                        .collect()
                });
            }
            Op::SoftmaxRows(a) => {
                let p = self.value(Var(index));
                let c = p.cols();
                self.acc_with(grads, *a, || {
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), pr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(p.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(pr).map(|(x, y)| x * y).sum();
                        for ((d, gx), px) in dr.iter_mut().zip(gr).zip(pr) {
                            *d = px * (gx - dot);
                        }
                    }
                    dx
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gt = shape_of(*gamma);
                let c = gt.numel();
                self.acc_with(grads, *gamma, || {
                    let mut s = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                    s
                });
                self.acc_with(grads, *beta, || {
                    let mut s = vec![0.0; c];
                    for gr in g.chunks(c) {
                        s.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                    s
                });
                self.acc_with(grads, *x, || {
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as f64;
                    for (r, ((dr, gr), hr)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gt.data()).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = inv_std[r] / cf * (cf * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    dx
                });
            }
            Op::Gather(table, ids) => {
                let tt = shape_of(*table);
                let c = tt.cols();
                self.acc_with(grads, *table, || {
                    let mut full = vec![0.0; tt.numel()];
                    for (gr, &id) in g.chunks(c).zip(ids) {
                        full[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(o, v)| *o += v);
                    }
                    full
                });
            }
            Op::MeanRows(a, keep) => {
                let at = shape_of(*a);
                let c = at.cols();
                let count = keep.iter().filter(|k| **k).count() as f64;
                self.acc_with(grads, *a, || {
                    let mut full = vec![0.0; at.numel()];
                    for (r, k) in keep.iter().enumerate() {
                        if *k {
                            for j in 0..c {
                                full[r * c + j] = g[j] / count;
                            }
                        }
                    }
                    full
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = shape_of(*logits).cols();
                let b = labels.len() as f64;
                let up = g[0];
                self.acc_with(grads, *logits, || {
                    let mut d: Vec<f64> = probs.iter().map(|p| p * up / b).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        d[r * c + l] -= up / b;
                    }
                    d
                });
            }
            Op::GradReverse(a, lambda) => {
                self.acc_with(grads, *a, || g.iter().map(|x| -lambda * x).collect());
            }
            Op::Sum(a) => {
                let n = shape_of(*a).numel();
                self.acc_with(grads, *a, || vec![g[0]; n]);
            }
        }
    }
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite input {v}")));
    }
    Ok(())
}

/// Row-wise softmax with max subtraction; masked columns get exactly zero.
pub fn softmax_rows_masked(x: &Tensor, allowed: Option<&[bool]>) -> Result<Tensor> {
    check_finite(x, "softmax")?;
    let c = x.cols();
    if let Some(m) = allowed {
        if m.len() != c {
            return Err(Error::shape("softmax mask", x.shape(), &[m.len()]));
        }
        if !m.iter().any(|v| *v) {
            return Err(Error::Contract("softmax with every column masked".into()));
        }
    }
    let keep = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut out = vec![0.0; x.numel()];
    for (orow, row) in out.chunks_mut(c).zip(x.data().chunks(c)) {
        let max = (0..c)
            .filter(|j| keep(*j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in (0..c).filter(|j| keep(*j)) {
            let e = (row[j] - max).exp();
            orow[j] = e;
            sum += e;
        }
        orow.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(Tensor::from_parts(x.rows(), c, out))
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax_rows_masked(x, None)
}

fn cross_entropy_with_probs(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (b, k) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index {
            what: "class label",
            index: bad,
            bound: k,
        });
    }
    check_finite(logits, "cross_entropy")?;
    let mut probs = vec![0.0; b * k];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row_slice(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        for j in 0..k {
            probs[r * k + j] = (row[j] - log_z).exp();
        }
        total += log_z - row[label];
    }
    Ok((total / b as f64, probs))
}

/// Mean cross-entropy of `logits` (`B x K`) against `labels`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy_with_probs(logits, labels).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i2 = t.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let b = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);

        let z = t.constant(Tensor::zeros(&[2, 3]));
        let any = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let c = t.matmul(z, any).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 2]);
        assert!(t.value(c).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Tensor::row(vec![0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax_rows(&Tensor::row(vec![1f64.ln(), 2f64.ln(), 3f64.ln()])).unwrap();
        for (got, want) in p.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
        let shifted = softmax_rows(&Tensor::row(vec![1f64.ln() + 7.5, 2f64.ln() + 7.5, 3f64.ln() + 7.5])).unwrap();
        for (a, b) in p.data().iter().zip(shifted.data()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        assert!(matches!(
            softmax_rows(&Tensor::row(vec![f64::NAN, 0.0])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let l = cross_entropy(&Tensor::row(vec![0.0, 0.0, 0.0]), &[2]).unwrap();
        assert_relative_eq!(l, 3f64.ln(), max_relative = 1e-12);
        let l = cross_entropy(&Tensor::row(vec![10.0, 0.0]), &[0]).unwrap();
        assert_relative_eq!(l, (1.0 + (-10f64).exp()).ln(), max_relative = 1e-9);
        assert!((l - 4.54e-5).abs() < 1e-7);
        let l = cross_entropy(&Tensor::row(vec![500.0, 0.0]), &[0]).unwrap();
        assert!((0.0..1e-200).contains(&l));
        assert!(matches!(
            cross_entropy(&Tensor::row(vec![0.0, 0.0]), &[2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn grad_reverse_forward_and_backward() {
        let x = Tensor::row(vec![1.5, -2.25, 1e-300, f64::MIN_POSITIVE]);
        for lambda in [0.0, 0.1, 1.0, 3.0] {
            let mut t = Tape::new();
            let xv = t.input(x.clone());
            let r = t.grad_reverse(xv, lambda);
            assert!(t.value(r).bit_eq(&x));
            let w = t.constant(Tensor::row(vec![1.0, 2.0, 3.0, 4.0]));
            let y = t.mul(r, w).unwrap();
            let s = t.sum(y);
            let g = t.backward(s).unwrap();
            let gx = g.input(xv).unwrap();
            for (got, up) in gx.data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
                assert_eq!(*got, -lambda * up);
            }
        }
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.input(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.input(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", crate::params::Group::Backbone, Tensor::row(vec![1.0, 2.0]));
        let b = store.insert("b", crate::params::Group::Backbone, Tensor::row(vec![3.0, 4.0]));
        let mut t = Tape::with_trainable(&store, vec![true, false]);
        let (av, bv) = (t.param(a), t.param(b));
        let p = t.mul(av, bv).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.param(a).unwrap().data(), &[3.0, 4.0]);
        assert!(g.param(b).is_none());
    }

    #[test]
    fn frozen_tape_records_nothing() {
        let mut store = ParamStore::new();
        let a = store.insert("a", crate::params::Group::Backbone, Tensor::row(vec![1.0, 2.0]));
        let mut t = Tape::frozen(&store);
        let av = t.param(a);
        let g = t.gelu(av);
        let _ = t.sum(g);
        assert_eq!(t.recorded_ops(), 0);
    }
}
