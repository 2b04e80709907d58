//! Topic guidance: fourteen disease-topic probabilities from pooled visual
//! features, folded into one global topic vector.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result, TksgError};
use crate::nn::Linear;
use crate::params::{ParamGroup, ParamStore};

/// Number of topic labels per report.
pub const N_TOPICS: usize = 14;

/// A binary topic label vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct TopicLabels(pub [u8; N_TOPICS]);

impl TopicLabels {
    pub fn from_slice(v: &[u8]) -> Result<Self> {
        if v.len() != N_TOPICS {
            return Err(TksgError::Invalid(format!(
                "topics must have exactly {N_TOPICS} entries, got {}",
                v.len()
            )));
        }
        if let Some(bad) = v.iter().find(|&&b| b > 1) {
            return Err(TksgError::Invalid(format!("topic entries must be 0 or 1, got {bad}")));
        }
        let mut out = [0u8; N_TOPICS];
        out.copy_from_slice(v);
        Ok(TopicLabels(out))
    }

    pub fn from_set(topics: &[usize]) -> Self {
        let mut out = [0u8; N_TOPICS];
        for &t in topics {
            out[t] = 1;
        }
        TopicLabels(out)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }

    pub fn active(&self) -> Vec<usize> {
        (0..N_TOPICS).filter(|&i| self.0[i] == 1).collect()
    }
}

/// Topic detector (`sigmoid(x W + b)`) and the bare linear aggregation layer.
#[derive(Clone, Debug)]
pub struct TopicGuidance {
    pub detector: Linear,
    pub aggregate: Linear,
    pub d_h: usize,
}

impl TopicGuidance {
    pub fn new(store: &mut ParamStore, d_h: usize, rng: &mut ChaCha8Rng) -> Self {
        TopicGuidance {
            detector: Linear::new(store, "topic.detector", d_h, N_TOPICS, true, ParamGroup::Rest, rng),
            aggregate: Linear::new(store, "topic.fc", N_TOPICS, d_h, true, ParamGroup::Rest, rng),
            d_h,
        }
    }

    /// `x` is the mean-pooled visual feature vector (length `d_h`).
    pub fn detect_topics(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape != [self.d_h] {
            return Err(shape_err("detect_topics", format!("expected [{}], got {shape:?}", self.d_h)));
        }
        let z = self.detector.forward(g, x)?;
        g.sigmoid(z)
    }

    /// Topic vector `l` from topic probabilities; no activation.
    pub fn aggregate_topic_vector(&self, g: &mut Graph, p: Var) -> Result<Var> {
        if g.value(p).shape() != [N_TOPICS] {
            return Err(shape_err("aggregate_topic_vector", "expected 14 probabilities"));
        }
        self.aggregate.forward(g, p)
    }
}

/// Mean binary cross-entropy over the fourteen topics.
pub fn topic_loss(g: &mut Graph, p: Var, labels: &TopicLabels) -> Result<Var> {
    g.bce(p, &labels.as_f64())
}
