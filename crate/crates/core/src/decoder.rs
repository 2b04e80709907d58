//! The guided report decoder: topic-fused input embeddings, pre-norm
//! transformer layers whose cross-attention reads `[X; E]`, and the
//! vocabulary head. Training runs the whole sequence through the graph;
//! decoding uses [`DecoderState`], an incremental key/value cache over the
//! same parameters.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result, TksgError};
use crate::nn::{dropout, DropoutCtx, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{self, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_h: usize,
    pub t_max: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Layers whose cross-attention also sees keyword embeddings. `None`
    /// means every layer.
    #[serde(default)]
    pub sg_layers: Option<Vec<usize>>,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 || self.heads == 0 || !self.d_h.is_multiple_of(self.heads) {
            return Err(TksgError::Invalid(format!(
                "d_h = {} must be a positive multiple of heads = {}",
                self.d_h, self.heads
            )));
        }
        if self.t_max == 0 || self.layers == 0 {
            return Err(TksgError::Invalid("t_max and layers must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TksgError::Invalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln_ff: LayerNorm,
    ffn: FeedForward,
    semantic_guided: bool,
}

#[derive(Clone, Debug)]
pub struct ReportDecoder {
    pub config: DecoderConfig,
    pub vocab_size: usize,
    pub word: Embedding,
    pub pos: Embedding,
    pub emb_ln: LayerNorm,
    layers: Vec<DecoderLayer>,
    ln_final: LayerNorm,
    /// `W^cls`, zero at initialization.
    pub head: Linear,
}

/// Attention probability matrices collected during a graph forward, one
/// entry per (layer, head).
#[derive(Default)]
pub struct AttentionTrace {
    pub self_attn: Vec<Var>,
    pub cross_attn: Vec<Var>,
}

impl ReportDecoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if vocab_size < 5 {
            return Err(TksgError::Invalid(format!("vocabulary of size {vocab_size} is below 5")));
        }
        let g = ParamGroup::Rest;
        let d = config.d_h;
        let word = Embedding::new(store, "dec.word", vocab_size, d, g, rng);
        let pos = Embedding::new(store, "dec.pos", config.t_max, d, g, rng);
        let emb_ln = LayerNorm::new(store, "dec.emb_ln", d, g);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("dec.layer{i}");
            let semantic_guided = config.sg_layers.as_ref().is_none_or(|s| s.contains(&i));
            layers.push(DecoderLayer {
                ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d, g),
                self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, config.heads, g, rng)?,
                ln_cross: LayerNorm::new(store, &format!("{p}.ln_cross"), d, g),
                cross_attn: MultiHeadAttention::new(store, &format!("{p}.sg"), d, config.heads, g, rng)?,
                ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d, g),
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * config.ff_mult, g, rng),
                semantic_guided,
            });
        }
        let ln_final = LayerNorm::new(store, "dec.ln_final", d, g);
        let head = Linear::zeros(store, "dec.cls", d, vocab_size, false, g);
        Ok(ReportDecoder {
            config,
            vocab_size,
            word,
            pos,
            emb_ln,
            layers,
            ln_final,
            head,
        })
    }

    /// `e_t = LN(W^word[y_{t-1}] + W^pos[t] + l)` for positions `0..len`.
    /// The topic vector is added at every position when present.
    pub fn input_embedding(&self, g: &mut Graph, prev: &[usize], topic: Option<Var>) -> Result<Var> {
        if prev.len() > self.config.t_max {
            return Err(TksgError::Invalid(format!(
                "position {} exceeds T_max = {}",
                prev.len() - 1,
                self.config.t_max
            )));
        }
        if prev.is_empty() {
            return Err(TksgError::Empty("input_embedding"));
        }
        let w = self.word.forward(g, prev)?;
        let positions: Vec<usize> = (0..prev.len()).collect();
        let p = self.pos.forward(g, &positions)?;
        let mut e = g.add(w, p)?;
        if let Some(l) = topic {
            e = g.add_bias(e, l)?;
        }
        self.emb_ln.forward(g, e)
    }

    /// Runs all layers over embedded inputs. `memory_x` is `X`; `keywords`
    /// is `E` (absent or zero rows for variants without keyword guidance).
    pub fn forward(
        &self,
        g: &mut Graph,
        embedded: Var,
        memory_x: Var,
        keywords: Option<Var>,
        drop: &mut Option<DropoutCtx>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let guided_memory = match keywords {
            Some(e) => g.concat_rows(memory_x, e)?,
            None => memory_x,
        };
        let mut x = dropout(g, embedded, drop)?;
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, x)?;
            let sa = layer.self_attn.forward(g, h, h, true)?;
            let a = dropout(g, sa.out, drop)?;
            x = g.add(x, a)?;

            let h = layer.ln_cross.forward(g, x)?;
            let mem = if layer.semantic_guided { guided_memory } else { memory_x };
            let ca = layer.cross_attn.forward(g, h, mem, false)?;
            let a = dropout(g, ca.out, drop)?;
            x = g.add(x, a)?;

            let h = layer.ln_ff.forward(g, x)?;
            let f = layer.ffn.forward(g, h, drop)?;
            let f = dropout(g, f, drop)?;
            x = g.add(x, f)?;

            if let Some(t) = trace.as_deref_mut() {
                t.self_attn.extend(sa.probs);
                t.cross_attn.extend(ca.probs);
            }
        }
        self.ln_final.forward(g, x)
    }

    /// Unnormalized scores `h W^cls` for each row of `hidden`.
    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        self.head.forward(g, hidden)
    }

    /// `softmax(h W^cls)` row-wise.
    pub fn predict_token(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let z = self.logits(g, hidden)?;
        let axis = g.value(z).ndim() - 1;
        g.softmax(z, axis)
    }

    /// Teacher-forced logits for a gold sequence (ending in EOS). Inputs are
    /// the gold tokens shifted right behind BOS.
    #[allow(clippy::too_many_arguments)]
    pub fn teacher_forced_logits(
        &self,
        g: &mut Graph,
        gold: &[usize],
        memory_x: Var,
        keywords: Option<Var>,
        topic: Option<Var>,
        drop: &mut Option<DropoutCtx>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        if gold.is_empty() {
            return Err(TksgError::Empty("report_loss"));
        }
        let mut inputs = Vec::with_capacity(gold.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&gold[..gold.len() - 1]);
        let e = self.input_embedding(g, &inputs, topic)?;
        let h = self.forward(g, e, memory_x, keywords, drop, trace)?;
        self.logits(g, h)
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Prepares the incremental state for one sample.
    pub fn start(&self, store: &ParamStore, x: &Tensor, keywords: Option<&Tensor>, topic: Option<&Tensor>) -> Result<DecoderState> {
        let guided = match keywords {
            Some(e) => tensor::concat_rows(x, e)?,
            None => x.clone(),
        };
        let mut cross = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mem = if layer.semantic_guided { &guided } else { x };
            cross.push(layer.cross_attn.project_kv(store, mem)?);
        }
        if let Some(l) = topic {
            if l.shape() != [self.config.d_h] {
                return Err(shape_err("topic vector", format!("{:?}", l.shape())));
            }
        }
        Ok(DecoderState {
            cross,
            topic: topic.cloned(),
            self_k: vec![Vec::new(); self.layers.len()],
            self_v: vec![Vec::new(); self.layers.len()],
            len: 0,
        })
    }

    /// Feeds one token at the next position and returns the logits for the
    /// token after it.
    pub fn step(
        &self,
        store: &ParamStore,
        state: &mut DecoderState,
        token: usize,
        mut trace: Option<&mut StepTrace>,
    ) -> Result<Vec<f64>> {
        let pos = state.len;
        if pos >= self.config.t_max {
            return Err(TksgError::Invalid(format!("position {pos} exceeds T_max = {}", self.config.t_max)));
        }
        let d = self.config.d_h;
        let mut e = tensor::add(&self.word.infer(store, &[token])?, &self.pos.infer(store, &[pos])?)?;
        if let Some(l) = &state.topic {
            e = tensor::add_bias(&e, l)?;
            if let Some(t) = trace.as_deref_mut() {
                t.topic.push(l.data().to_vec());
            }
        }
        let mut x = self.emb_ln.infer(store, &e)?;
        for (li, layer) in self.layers.iter().enumerate() {
            let h = layer.ln_self.infer(store, &x)?;
            let (k, v) = layer.self_attn.project_kv(store, &h)?;
            state.self_k[li].extend_from_slice(k.data());
            state.self_v[li].extend_from_slice(v.data());
            let keys = Tensor::new(vec![pos + 1, d], state.self_k[li].clone())?;
            let values = Tensor::new(vec![pos + 1, d], state.self_v[li].clone())?;
            let (a, sp) = layer.self_attn.attend(store, &h, &keys, &values)?;
            x = tensor::add(&x, &a)?;

            let h = layer.ln_cross.infer(store, &x)?;
            let (ck, cv) = &state.cross[li];
            let (a, cp) = layer.cross_attn.attend(store, &h, ck, cv)?;
            x = tensor::add(&x, &a)?;

            let h = layer.ln_ff.infer(store, &x)?;
            x = tensor::add(&x, &layer.ffn.infer(store, &h)?)?;

            if let Some(t) = trace.as_deref_mut() {
                for p in sp.iter().chain(&cp) {
                    t.attention_row_sums.push(p.data().iter().sum());
                }
            }
        }
        state.len += 1;
        let h = self.ln_final.infer(store, &x)?;
        Ok(self.head.infer(store, &h)?.into_data())
    }
}

/// Per-sample incremental decoding state: projected cross-attention memory
/// (shared by all hypotheses) and the growing self-attention cache.
#[derive(Clone, Debug)]
pub struct DecoderState {
    cross: Vec<(Tensor, Tensor)>,
    topic: Option<Tensor>,
    self_k: Vec<Vec<f64>>,
    self_v: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn topic(&self) -> Option<&Tensor> {
        self.topic.as_ref()
    }
}

/// Instrumentation filled by [`ReportDecoder::step`].
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    /// The topic vector added to the input embedding at each step.
    pub topic: Vec<Vec<f64>>,
    /// Sum of every attention probability row seen.
    pub attention_row_sums: Vec<f64>,
}

/// Mean token negative log-likelihood of the gold tokens.
pub fn report_loss(g: &mut Graph, logits: Var, gold: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, gold)
}

/// `L_all = L_rep + L_kd + L_td`; absent terms contribute nothing.
pub fn total_loss(g: &mut Graph, rep: Var, kd: Option<Var>, td: Option<Var>) -> Result<Var> {
    let mut total = rep;
    for term in [kd, td].into_iter().flatten() {
        total = g.add(total, term)?;
    }
    Ok(total)
}

/// Softmax-based log probabilities of one logits row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = crate::autograd::log_sum_exp(logits);
    logits.iter().map(|v| v - lse).collect()
}
