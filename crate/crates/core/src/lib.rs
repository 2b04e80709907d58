//! Topic/keyword semantic guidance for image-conditioned report generation.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autograd`], [`params`], [`optim`], [`nn`]: a small dense
//!   tensor engine with reverse-mode differentiation and Adam.
//! * [`encoder`]: patch transformer producing visual features.
//! * [`retrieval`]: exact cosine top-k over precomputed report embeddings.
//! * [`topic`], [`keyword`]: the two guidance signals.
//! * [`decoder`], [`decode`]: the guided transformer decoder with greedy and
//!   beam decoding.
//! * [`model`]: the assembled model and its ablation variants.
//! * [`metrics`], [`corpus`]: evaluation and data tooling.
//! * [`config`], [`train`], [`pipeline`]: the operational layer used by the CLI.

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod keyword;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod tensor;
pub mod topic;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Result, TksgError};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
