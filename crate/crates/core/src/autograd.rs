//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order. [`Graph::backward`] walks the list once in reverse and
//! accumulates gradients additively, so fan-out is handled by summation and
//! the accumulation order is fixed.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TksgError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Lower clamp for probabilities fed to binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var, usize),
    CausalSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    MeanRows(Var),
    ConcatRows(Var, Var),
    ConcatVec(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    GatherElems {
        x: Var,
        src: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Softmax(..) => "softmax",
            Op::CausalSoftmax(_) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MeanRows(_) => "mean_pool",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatVec(_) => "concat_vec",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "embedding_lookup",
            Op::GatherElems { .. } => "gather_elems",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dropout { .. } => "dropout",
            Op::Bce { .. } => "bce",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass. Parameters are borrowed from a
/// [`ParamStore`]; gradients come back as a separate [`Gradients`] value.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Result of a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Gradient with respect to a leaf created by [`Graph::leaf`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }
}

fn acc_into(slot: &mut Option<Vec<f64>>, n: usize) -> &mut [f64] {
    slot.get_or_insert_with(|| vec![0.0; n]).as_mut_slice()
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TksgError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::ConcatRows(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Softmax(x, _)
            | Op::CausalSoftmax(x)
            | Op::MeanRows(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SliceCols { x, .. }
            | Op::GatherElems { x, .. }
            | Op::Dropout { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatVec(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::Bce { p, .. } => vec![*p],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant).expect("constant must be finite")
    }

    /// A differentiable input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf).expect("leaf must be finite")
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = tensor::add_bias(self.value(a), self.value(bias))?;
        self.push(out, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = tensor::scale(self.value(a), c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = tensor::sigmoid(self.value(a));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = tensor::gelu(self.value(a));
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(a), axis)?;
        self.push(out, Op::Softmax(a, axis))
    }

    /// Row softmax with a lower-triangular (causal) mask.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let out = tensor::causal_softmax(self.value(a), 0)?;
        self.push(out, Op::CausalSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Column means, `N×d -> d`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var> {
        let out = tensor::mean_pool(self.value(x))?;
        self.push(out, Op::MeanRows(x))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::concat_rows(self.value(a), self.value(b))?;
        self.push(out, Op::ConcatRows(a, b))
    }

    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_vec(&ts)?;
        self.push(out, Op::ConcatVec(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = tensor::concat_cols(&ts)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = tensor::slice_cols(self.value(x), start, len)?;
        self.push(out, Op::SliceCols { x, start })
    }

    /// Row gather from an embedding table; backward scatters additively.
    pub fn embedding_lookup(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = tensor::gather_rows(self.value(table), idx)?;
        self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// `out.flat[i] = x.flat[src[i]]`, reshaped to `shape`.
    pub fn gather_elems(&mut self, x: Var, src: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = src.iter().find(|&&s| s >= xv.numel()) {
            return Err(TksgError::IndexOutOfRange {
                what: "gather_elems source",
                index: bad,
                size: xv.numel(),
            });
        }
        let data = src.iter().map(|&s| xv.data()[s]).collect();
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::GatherElems { x, src })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TksgError::Empty("mean"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Inverted dropout with a caller-supplied keep mask of 0/1 entries.
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.numel() {
            return Err(shape_err("dropout", "mask size differs from input"));
        }
        let s = 1.0 / (1.0 - p);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets, with
    /// probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != targets.len() || targets.is_empty() {
            return Err(shape_err(
                "bce",
                format!("{} probabilities vs {} targets", pv.numel(), targets.len()),
            ));
        }
        let loss = bce_value(pv.data(), targets);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean token negative log-likelihood of `targets` under row-wise
    /// `softmax(logits)`; one target per logits row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2()?;
        if r != targets.len() || r == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{r} rows vs {} targets", targets.len()),
            ));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TksgError::IndexOutOfRange {
                    what: "vocabulary",
                    index: t,
                    size: c,
                });
            }
            let row = lv.row(i);
            total += log_sum_exp(row) - row[t];
        }
        self.push(
            Tensor::scalar(total / r as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 || lv.ndim() > 1 {
            return Err(TksgError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            params: vec![None; self.store.len()],
            leaves: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let shape = self.value(Var(i)).shape().to_vec();
            self.backward_node(i, &node.op, &g, &shape, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn numel(&self, v: Var) -> usize {
        self.value(v).numel()
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_node(
        &self,
        i: usize,
        op: &Op,
        g: &[f64],
        shape: &[usize],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let y = self.value(Var(i));
        match op {
            Op::Constant => {}
            Op::Leaf => {
                let t = Tensor::new(shape.to_vec(), g.to_vec())?;
                out.leaves.insert(Var(i), t);
            }
            Op::Param(id) => {
                out.params[id.index()] = Some(Tensor::new(shape.to_vec(), g.to_vec())?);
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if self.needs(*a) {
                    let ga = acc_into(&mut grads[a.0], m * k);
                    // dA = dC · Bᵀ
                    tensor::gemm_nt_acc(g, bv.data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = acc_into(&mut grads[b.0], k * n);
                    // dB = Aᵀ · dC
                    tensor::gemm_tn_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (r, c) = (shape[0], shape[1]);
                    let ga = acc_into(&mut grads[a.0], r * c);
                    for p in 0..r {
                        for q in 0..c {
                            ga[q * r + p] += g[p * c + q];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let gv = acc_into(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs(*a) {
                    let ga = acc_into(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if self.needs(*b) {
                    let gb = acc_into(&mut grads[b.0], g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::AddBias(a, b) => {
                if self.needs(*a) {
                    let ga = acc_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.needs(*b) {
                    let d = self.numel(*b);
                    let gb = acc_into(&mut grads[b.0], d);
                    for row in g.chunks(d.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let ga = acc_into(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let ga = acc_into(&mut grads[a.0], g.len());
                    for (j, s) in y.data().iter().enumerate() {
                        ga[j] += g[j] * s * (1.0 - s);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xv = self.value(*a).data();
                    let ga = acc_into(&mut grads[a.0], g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * tensor::gelu_grad_scalar(xv[j]);
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if self.needs(*a) {
                    let (outer, len, inner) = tensor::axis_layout(shape, *axis)?;
                    let yv = y.data();
                    let ga = acc_into(&mut grads[a.0], g.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |k: usize| o * len * inner + k * inner + j;
                            let dot: f64 = (0..len).map(|k| g[idx(k)] * yv[idx(k)]).sum();
                            for k in 0..len {
                                ga[idx(k)] += yv[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmax(a) => {
                if self.needs(*a) {
                    let c = *shape.last().unwrap_or(&1);
                    let yv = y.data();
                    let ga = acc_into(&mut grads[a.0], g.len());
                    for r in 0..g.len() / c.max(1) {
                        let row = r * c..(r + 1) * c;
                        let dot: f64 = g[row.clone()].iter().zip(&yv[row.clone()]).map(|(p, q)| p * q).sum();
                        for k in row {
                            ga[k] += yv[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let rows = xv.len() / d.max(1);
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dx = vec![0.0; xv.len()];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = tensor::layer_norm_stats(xr, *eps);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gam[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                for (v, gv) in [(x, dx), (gamma, dgamma), (beta, dbeta)] {
                    if self.needs(*v) {
                        let slot = acc_into(&mut grads[v.0], gv.len());
                        slot.iter_mut().zip(&gv).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let (n, d) = self.value(*x).dims2()?;
                    let gx = acc_into(&mut grads[x.0], n * d);
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] += g[j] / n as f64;
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let na = self.numel(*a);
                if self.needs(*a) {
                    let ga = acc_into(&mut grads[a.0], na);
                    ga.iter_mut().zip(&g[..na]).for_each(|(p, q)| *p += q);
                }
                if self.needs(*b) {
                    let nb = self.numel(*b);
                    let gb = acc_into(&mut grads[b.0], nb);
                    gb.iter_mut().zip(&g[na..]).for_each(|(p, q)| *p += q);
                }
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for v in parts {
                    let n = self.numel(*v);
                    if self.needs(*v) {
                        let gv = acc_into(&mut grads[v.0], n);
                        gv.iter_mut().zip(&g[off..off + n]).for_each(|(p, q)| *p += q);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = *shape.last().unwrap_or(&0);
                let rows = shape.first().copied().unwrap_or(0);
                let mut off = 0;
                for v in parts {
                    let w = self.value(*v).cols();
                    if self.needs(*v) {
                        let gv = acc_into(&mut grads[v.0], rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                gv[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (rows, c) = self.value(*x).dims2()?;
                    let w = shape[1];
                    let gx = acc_into(&mut grads[x.0], rows * c);
                    for r in 0..rows {
                        for j in 0..w {
                            gx[r * c + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if self.needs(*table) {
                    let (v, d) = self.value(*table).dims2()?;
                    let gt = acc_into(&mut grads[table.0], v * d);
                    for (r, &k) in idx.iter().enumerate() {
                        for j in 0..d {
                            gt[k * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::GatherElems { x, src } => {
                if self.needs(*x) {
                    let n = self.numel(*x);
                    let gx = acc_into(&mut grads[x.0], n);
                    for (o, &s) in src.iter().enumerate() {
                        gx[s] += g[o];
                    }
                }
            }
            Op::Reshape(x) => {
                if self.needs(*x) {
                    let gx = acc_into(&mut grads[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.needs(*x) {
                    let n = self.numel(*x);
                    let s = if matches!(op, Op::Mean(_)) { g[0] / n as f64 } else { g[0] };
                    let gx = acc_into(&mut grads[x.0], n);
                    gx.iter_mut().for_each(|p| *p += s);
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    let gx = acc_into(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * mask[j];
                    }
                }
            }
            Op::Bce { p, targets } => {
                if self.needs(*p) {
                    let pv = self.value(*p).data();
                    let n = targets.len() as f64;
                    let gp = acc_into(&mut grads[p.0], pv.len());
                    for j in 0..pv.len() {
                        let q = pv[j];
                        // derivative of the clamp is zero outside the band
                        if q <= BCE_CLAMP || q >= 1.0 - BCE_CLAMP {
                            continue;
                        }
                        let t = targets[j];
                        gp[j] += g[0] * (-(t / q) + (1.0 - t) / (1.0 - q)) / n;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let c = lv.cols();
                    let scale = g[0] / targets.len() as f64;
                    let gl = acc_into(&mut grads[logits.0], lv.numel());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = lv.row(r);
                        let lse = log_sum_exp(row);
                        for j in 0..c {
                            let p = (row[j] - lse).exp();
                            gl[r * c + j] += scale * (p - if j == t { 1.0 } else { 0.0 });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// Mean clamped binary cross-entropy.
pub fn bce_value(p: &[f64], targets: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&q, &t) in p.iter().zip(targets) {
        let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        s -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
    }
    s / targets.len() as f64
}
