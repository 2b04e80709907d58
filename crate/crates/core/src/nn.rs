//! Parameterized building blocks: linear maps, layer norm, multi-head
//! attention and the position-wise feed-forward block. Each has a graph
//! forward for training and a plain-tensor path for cached inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::params::{embedding_init, xavier, ParamGroup, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Default layer norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Dropout settings for a training forward pass.
pub struct DropoutCtx {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

pub fn dropout(g: &mut Graph, x: Var, ctx: &mut Option<DropoutCtx>) -> Result<Var> {
    match ctx {
        Some(DropoutCtx { p, rng }) if *p > 0.0 => {
            let n = g.value(x).numel();
            let keep: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() >= *p).collect();
            g.dropout(x, &keep, *p)
        }
        _ => Ok(x),
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out), group);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group));
        Linear { w, b }
    }

    /// A linear map whose weight starts at zero.
    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[fan_in, fan_out]), group);
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), group));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = tensor::matmul(x, store.value(self.w))?;
        match self.b {
            Some(b) => tensor::add_bias(&y, store.value(b)),
            None => Ok(y),
        }
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.w).cols()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, group: ParamGroup) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0), group);
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]), group);
        LayerNorm {
            gamma,
            beta,
            eps: LN_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, self.eps)
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm(x, store.value(self.gamma), store.value(self.beta), self.eps)
    }
}

/// Output of a graph attention forward: the projected result plus the
/// attention probability matrix of every head.
pub struct AttentionOut {
    pub out: Var,
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(shape_err(
                "MultiHeadAttention",
                format!("d_model {d_model} not divisible by {heads} heads"),
            ));
        }
        let mut lin = |suffix: &str, rng: &mut ChaCha8Rng| {
            Linear::new(store, &format!("{name}.{suffix}"), d_model, d_model, true, group, rng)
        };
        Ok(MultiHeadAttention {
            q: lin("q", rng),
            k: lin("k", rng),
            v: lin("v", rng),
            o: lin("o", rng),
            heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Attention of `query_in` rows over `kv_in` rows. With `causal`, query
    /// row `i` only sees key rows `0..=i`.
    pub fn forward(&self, g: &mut Graph, query_in: Var, kv_in: Var, causal: bool) -> Result<AttentionOut> {
        let q = self.q.forward(g, query_in)?;
        let k = self.k.forward(g, kv_in)?;
        let v = self.v.forward(g, kv_in)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let p = if causal {
                g.causal_softmax(scores)?
            } else {
                g.softmax(scores, 1)?
            };
            outs.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let out = self.o.forward(g, merged)?;
        Ok(AttentionOut { out, probs })
    }

    /// Projects key/value source rows once for cached inference.
    pub fn project_kv(&self, store: &ParamStore, kv_in: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.k.infer(store, kv_in)?, self.v.infer(store, kv_in)?))
    }

    /// Attention of query rows over already-projected keys and values.
    /// Returns the output rows and the per-head probability matrices.
    pub fn attend(
        &self,
        store: &ParamStore,
        query_in: &Tensor,
        keys: &Tensor,
        values: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let q = self.q.infer(store, query_in)?;
        let hd = self.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tensor::slice_cols(&q, h * hd, hd)?;
            let kh = tensor::slice_cols(keys, h * hd, hd)?;
            let vh = tensor::slice_cols(values, h * hd, hd)?;
            let scores = tensor::scale(&tensor::matmul_nt(&qh, &kh)?, scale);
            let p = tensor::softmax(&scores, 1)?;
            outs.push(tensor::matmul(&p, &vh)?);
            probs.push(p);
        }
        let refs: Vec<&Tensor> = outs.iter().collect();
        let merged = tensor::concat_cols(&refs)?;
        Ok((self.o.infer(store, &merged)?, probs))
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        hidden: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d_model, hidden, true, group, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d_model, true, group, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, drop: &mut Option<DropoutCtx>) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = dropout(g, h, drop)?;
        self.down.forward(g, h)
    }

    pub fn infer(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = tensor::gelu(&self.up.infer(store, x)?);
        self.down.infer(store, &h)
    }
}

/// A trainable `rows × d` lookup table.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        d: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Embedding {
            table: store.add(name, embedding_init(rng, rows, d, 0.1), group),
        }
    }

    pub fn rows(&self, store: &ParamStore) -> usize {
        store.value(self.table).rows()
    }

    pub fn forward(&self, g: &mut Graph, idx: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embedding_lookup(t, idx)
    }

    pub fn infer(&self, store: &ParamStore, idx: &[usize]) -> Result<Tensor> {
        tensor::gather_rows(store.value(self.table), idx)
    }
}
