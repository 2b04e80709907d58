//! Greedy and beam decoding over any next-token model.
//!
//! Hypotheses are ranked by log-probability divided by the number of
//! emitted tokens (EOS included). PAD and BOS are never emitted.

use std::cmp::Ordering;

use crate::decoder::{log_softmax, DecoderState, ReportDecoder, StepTrace, BOS, EOS, PAD};
use crate::error::{Result, TksgError};
use crate::params::ParamStore;

/// Anything that can score the next token given a prefix.
pub trait NextTokenModel {
    type State: Clone;

    fn initial_state(&self) -> Result<Self::State>;

    /// Feeds `token` and returns logits for the following position.
    fn next_logits(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;

    /// Maximum number of emitted tokens.
    fn t_max(&self) -> usize;
}

/// A finished decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, ending with EOS unless `T_max` was reached.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn score(&self) -> f64 {
        normalized(self.log_prob, self.tokens.len())
    }

    /// Tokens without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn normalized(log_prob: f64, len: usize) -> f64 {
    log_prob / len.max(1) as f64
}

fn emittable(tok: usize) -> bool {
    tok != PAD && tok != BOS
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode<M: NextTokenModel>(model: &M) -> Result<Hypothesis> {
    let mut state = model.initial_state()?;
    let mut logits = model.next_logits(&mut state, BOS)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < model.t_max() {
        let lp = log_softmax(&logits);
        let mut best: Option<usize> = None;
        for (tok, &v) in lp.iter().enumerate() {
            if emittable(tok) && best.is_none_or(|b| v > lp[b]) {
                best = Some(tok);
            }
        }
        let tok = best.ok_or_else(|| TksgError::Invalid("vocabulary has no emittable token".into()))?;
        tokens.push(tok);
        log_prob += lp[tok];
        if tok == EOS || tokens.len() == model.t_max() {
            break;
        }
        logits = model.next_logits(&mut state, tok)?;
    }
    Ok(Hypothesis { tokens, log_prob })
}

struct Active<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    logits: Vec<f64>,
}

enum Entry {
    Finished(usize),
    Candidate { parent: usize, token: usize },
}

struct Ranked {
    score: f64,
    tokens: Vec<usize>,
    log_prob: f64,
    entry: Entry,
}

fn rank_order(a: &Ranked, b: &Ranked) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search with length-normalized scores. Finished hypotheses keep
/// competing for beam slots; the best finished hypothesis ever seen wins.
pub fn beam_search<M: NextTokenModel>(model: &M, beam: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(TksgError::Invalid("beam size must be at least 1".into()));
    }
    let mut state = model.initial_state()?;
    let logits = model.next_logits(&mut state, BOS)?;
    let mut active = vec![Active {
        tokens: Vec::new(),
        log_prob: 0.0,
        state,
        logits,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    // indices into `finished` that still hold a beam slot
    let mut in_beam: Vec<usize> = Vec::new();

    for _ in 0..model.t_max() {
        let mut pool: Vec<Ranked> = Vec::new();
        for &f in &in_beam {
            let h = &finished[f];
            pool.push(Ranked {
                score: h.score(),
                tokens: h.tokens.clone(),
                log_prob: h.log_prob,
                entry: Entry::Finished(f),
            });
        }
        for (pi, a) in active.iter().enumerate() {
            let lp = log_softmax(&a.logits);
            for (tok, &v) in lp.iter().enumerate() {
                if !emittable(tok) {
                    continue;
                }
                let mut tokens = a.tokens.clone();
                tokens.push(tok);
                let log_prob = a.log_prob + v;
                pool.push(Ranked {
                    score: normalized(log_prob, tokens.len()),
                    tokens,
                    log_prob,
                    entry: Entry::Candidate { parent: pi, token: tok },
                });
            }
        }
        pool.sort_by(rank_order);
        pool.truncate(beam);

        let mut next_active = Vec::new();
        let mut next_in_beam = Vec::new();
        for r in pool {
            match r.entry {
                Entry::Finished(f) => next_in_beam.push(f),
                Entry::Candidate { parent, token } => {
                    if token == EOS || r.tokens.len() == model.t_max() {
                        finished.push(Hypothesis {
                            tokens: r.tokens,
                            log_prob: r.log_prob,
                        });
                        next_in_beam.push(finished.len() - 1);
                    } else {
                        let mut state = active[parent].state.clone();
                        let logits = model.next_logits(&mut state, token)?;
                        next_active.push(Active {
                            tokens: r.tokens,
                            log_prob: r.log_prob,
                            state,
                            logits,
                        });
                    }
                }
            }
        }
        active = next_active;
        in_beam = next_in_beam;
        if active.is_empty() {
            break;
        }
    }

    finished
        .into_iter()
        .min_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| a.tokens.cmp(&b.tokens)))
        .ok_or_else(|| TksgError::Invalid("beam search produced no hypothesis".into()))
}

/// Adapter running a [`ReportDecoder`] on one sample's prepared state.
pub struct GuidedDecoder<'a> {
    pub decoder: &'a ReportDecoder,
    pub store: &'a ParamStore,
    pub start: DecoderState,
    pub t_max: usize,
}

impl<'a> GuidedDecoder<'a> {
    pub fn new(decoder: &'a ReportDecoder, store: &'a ParamStore, start: DecoderState) -> Self {
        GuidedDecoder {
            decoder,
            store,
            start,
            t_max: decoder.config.t_max,
        }
    }

    /// Greedy decode that records the per-step trace.
    pub fn greedy_traced(&self, trace: &mut StepTrace) -> Result<Hypothesis> {
        let traced = Traced { inner: self, trace: std::cell::RefCell::new(std::mem::take(trace)) };
        let h = greedy_decode(&traced)?;
        *trace = traced.trace.into_inner();
        Ok(h)
    }
}

impl NextTokenModel for GuidedDecoder<'_> {
    type State = DecoderState;

    fn initial_state(&self) -> Result<DecoderState> {
        Ok(self.start.clone())
    }

    fn next_logits(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        self.decoder.step(self.store, state, token, None)
    }

    fn t_max(&self) -> usize {
        self.t_max
    }
}

struct Traced<'a, 'b> {
    inner: &'b GuidedDecoder<'a>,
    trace: std::cell::RefCell<StepTrace>,
}

impl NextTokenModel for Traced<'_, '_> {
    type State = DecoderState;

    fn initial_state(&self) -> Result<DecoderState> {
        self.inner.initial_state()
    }

    fn next_logits(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        let mut t = self.trace.borrow_mut();
        self.inner.decoder.step(self.inner.store, state, token, Some(&mut t))
    }

    fn t_max(&self) -> usize {
        self.inner.t_max
    }
}
