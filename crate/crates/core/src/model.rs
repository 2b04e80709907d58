//! The assembled model: visual encoder, retrieval projection, topic and
//! keyword guidance, and the guided decoder, gated by the ablation variant.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decode::{beam_search, greedy_decode, GuidedDecoder, Hypothesis};
use crate::decoder::{report_loss, total_loss, DecoderConfig, DecoderState, ReportDecoder};
use crate::encoder::{EncoderConfig, VisualEncoder, VisualInput};
use crate::error::{shape_err, Result, TksgError};
use crate::keyword::{keyword_loss, select_topk, KeywordGuidance};
use crate::nn::DropoutCtx;
use crate::params::ParamStore;
use crate::retrieval::ReportProjector;
use crate::tensor::Tensor;
use crate::topic::{topic_loss, TopicGuidance, TopicLabels};

/// Which guidance signals reach the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Variant {
    /// Neither topic vector nor keywords.
    Base,
    /// Topic vector only.
    Tsg,
    /// Keywords only.
    Ksg,
    /// Both.
    Tksg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::Tsg, Variant::Ksg, Variant::Tksg];

    pub fn uses_topic(self) -> bool {
        matches!(self, Variant::Tsg | Variant::Tksg)
    }

    pub fn uses_keywords(self) -> bool {
        matches!(self, Variant::Ksg | Variant::Tksg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Base => "BASE",
            Variant::Tsg => "TSG",
            Variant::Ksg => "KSG",
            Variant::Tksg => "TKSG",
        })
    }
}

impl FromStr for Variant {
    type Err = TksgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BASE" => Ok(Variant::Base),
            "TSG" => Ok(Variant::Tsg),
            "KSG" => Ok(Variant::Ksg),
            "TKSG" => Ok(Variant::Tksg),
            _ => Err(TksgError::Invalid(format!("unknown variant {s:?} (BASE|TSG|KSG|TKSG)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Retrieval embedding width.
    pub d_e: usize,
    pub n_w: usize,
    pub n_k: usize,
    pub vocab_size: usize,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.d_h != self.decoder.d_h {
            return Err(TksgError::Invalid(format!(
                "encoder d_h {} differs from decoder d_h {}",
                self.encoder.d_h, self.decoder.d_h
            )));
        }
        if self.d_e == 0 || self.n_w == 0 {
            return Err(TksgError::Invalid("d_e and N_W must be positive".into()));
        }
        if self.n_k > self.n_w {
            return Err(TksgError::Invalid(format!("N_K = {} exceeds N_W = {}", self.n_k, self.n_w)));
        }
        self.decoder.validate()
    }
}

/// Model-side view of one sample.
#[derive(Clone, Debug)]
pub struct SampleInput<'a> {
    pub visual: &'a VisualInput,
    /// Raw retrieved report embeddings (`N_R × d_e`), needed by keyword
    /// variants.
    pub retrieved: Option<&'a Tensor>,
}

/// Supervision for one sample.
#[derive(Clone, Debug)]
pub struct Targets<'a> {
    /// Gold token ids ending in EOS.
    pub tokens: &'a [usize],
    pub topics: &'a TopicLabels,
    /// Multi-hot concept labels of length `N_W`.
    pub concepts: &'a [f64],
}

/// Graph nodes produced by the guidance stage.
#[derive(Clone, Debug)]
pub struct GuidanceVars {
    pub x: Var,
    pub topic_probs: Option<Var>,
    pub topic_vector: Option<Var>,
    pub keyword_probs: Option<Var>,
    pub selected: Vec<usize>,
    pub keywords: Option<Var>,
}

/// Scalar loss nodes of one teacher-forced forward.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub rep: Var,
    pub kd: Option<Var>,
    pub td: Option<Var>,
}

/// Guidance values computed once per sample for decoding.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub x: Tensor,
    pub topic_probs: Option<Vec<f64>>,
    pub topic_vector: Option<Tensor>,
    pub keyword_probs: Option<Vec<f64>>,
    pub selected: Vec<usize>,
    pub keywords: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TksgModel {
    pub config: ModelConfig,
    pub encoder: VisualEncoder,
    pub projector: ReportProjector,
    pub topic: TopicGuidance,
    pub keyword: KeywordGuidance,
    pub decoder: ReportDecoder,
}

impl TksgModel {
    /// Registers all parameters in `store` in a fixed order. Every variant
    /// owns the same parameter set; gating only decides which are used.
    pub fn new(store: &mut ParamStore, config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d_h = config.decoder.d_h;
        let encoder = VisualEncoder::new(store, config.encoder.clone(), rng)?;
        let projector = ReportProjector::new(store, config.d_e, d_h, rng);
        let topic = TopicGuidance::new(store, d_h, rng);
        let keyword = KeywordGuidance::new(store, d_h, config.n_w, config.n_k, rng)?;
        let decoder = ReportDecoder::new(store, config.decoder.clone(), config.vocab_size, rng)?;
        Ok(TksgModel {
            config,
            encoder,
            projector,
            topic,
            keyword,
            decoder,
        })
    }

    pub fn d_h(&self) -> usize {
        self.config.decoder.d_h
    }

    /// `X` for either input kind; precomputed features enter as constants.
    pub fn visual_features(&self, g: &mut Graph, visual: &VisualInput, drop: &mut Option<DropoutCtx>) -> Result<Var> {
        match visual {
            VisualInput::Image(img) => self.encoder.forward_image(g, img, drop),
            VisualInput::Features(f) => {
                if f.0.cols() != self.d_h() {
                    return Err(shape_err("visual features", format!("width {} vs d_h {}", f.0.cols(), self.d_h())));
                }
                Ok(g.constant(f.0.clone()))
            }
        }
    }

    /// Encoder, topic branch and keyword branch as gated by the variant.
    pub fn guidance(&self, g: &mut Graph, input: &SampleInput, drop: &mut Option<DropoutCtx>) -> Result<GuidanceVars> {
        let variant = self.config.variant;
        let x = self.visual_features(g, input.visual, drop)?;
        let fx = g.mean_pool(x)?;
        let (topic_probs, topic_vector) = if variant.uses_topic() {
            let p = self.topic.detect_topics(g, fx)?;
            let l = self.topic.aggregate_topic_vector(g, p)?;
            (Some(p), Some(l))
        } else {
            (None, None)
        };
        let (keyword_probs, selected, keywords) = if variant.uses_keywords() {
            let raw = input
                .retrieved
                .ok_or_else(|| TksgError::Invalid(format!("variant {variant} needs retrieved reports")))?;
            let raw = g.constant(raw.clone());
            let r = self.projector.forward(g, raw)?;
            let fr = g.mean_pool(r)?;
            let joined = g.concat_vec(&[fx, fr])?;
            let p = self.keyword.detect_keywords(g, joined)?;
            let selected = select_topk(g.value(p).data(), self.config.n_k)?;
            let e = if selected.is_empty() {
                None
            } else {
                Some(self.keyword.embed_keywords(g, &selected)?)
            };
            (Some(p), selected, e)
        } else {
            (None, Vec::new(), None)
        };
        Ok(GuidanceVars {
            x,
            topic_probs,
            topic_vector,
            keyword_probs,
            selected,
            keywords,
        })
    }

    /// Teacher-forced joint loss `L_rep + L_kd + L_td` (detector terms only
    /// for the branches the variant uses).
    pub fn loss(
        &self,
        g: &mut Graph,
        input: &SampleInput,
        targets: &Targets,
        drop: &mut Option<DropoutCtx>,
    ) -> Result<LossVars> {
        let gv = self.guidance(g, input, drop)?;
        let logits =
            self.decoder
                .teacher_forced_logits(g, targets.tokens, gv.x, gv.keywords, gv.topic_vector, drop, None)?;
        let rep = report_loss(g, logits, targets.tokens)?;
        let td = gv.topic_probs.map(|p| topic_loss(g, p, targets.topics)).transpose()?;
        let kd = gv.keyword_probs.map(|p| keyword_loss(g, p, targets.concepts)).transpose()?;
        let total = total_loss(g, rep, kd, td)?;
        Ok(LossVars { total, rep, kd, td })
    }

    /// Evaluates the guidance stage without dropout.
    pub fn prepare(&self, store: &ParamStore, input: &SampleInput) -> Result<Prepared> {
        let mut g = Graph::new(store);
        let gv = self.guidance(&mut g, input, &mut None)?;
        let val = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(Prepared {
            x: g.value(gv.x).clone(),
            topic_probs: val(gv.topic_probs).map(Tensor::into_data),
            topic_vector: val(gv.topic_vector),
            keyword_probs: val(gv.keyword_probs).map(Tensor::into_data),
            selected: gv.selected,
            keywords: val(gv.keywords),
        })
    }

    pub fn start_state(&self, store: &ParamStore, prepared: &Prepared) -> Result<DecoderState> {
        self.decoder
            .start(store, &prepared.x, prepared.keywords.as_ref(), prepared.topic_vector.as_ref())
    }

    /// Beam-decodes one prepared sample.
    pub fn generate(&self, store: &ParamStore, prepared: &Prepared, beam: usize) -> Result<Hypothesis> {
        let start = self.start_state(store, prepared)?;
        beam_search(&GuidedDecoder::new(&self.decoder, store, start), beam)
    }

    pub fn generate_greedy(&self, store: &ParamStore, prepared: &Prepared) -> Result<Hypothesis> {
        let start = self.start_state(store, prepared)?;
        greedy_decode(&GuidedDecoder::new(&self.decoder, store, start))
    }
}
