//! Corpus data model and tooling: tokenizer, report vocabulary, JSON-lines
//! loading, the synthetic planted-structure generator and its rule labeler.

mod labeler;
mod records;
mod synth;
mod tokenize;
mod vocab;

pub use labeler::rule_label;
pub use records::{load_corpus, write_corpus, SampleRecord, Split};
pub use synth::{
    generate_synthetic, hash_embedding, SynthCorpus, SyntheticSpec, TopicSpec, CORPUS_FILE, QUERY_EMB_FILE,
    REPORT_EMB_FILE, SPEC_FILE,
};
pub use tokenize::{detokenize, tokenize};
pub use vocab::Vocabulary;

/// Topic label order used by every corpus file (CheXbert categories).
pub const TOPIC_NAMES: [&str; crate::topic::N_TOPICS] = [
    "no_finding",
    "enlarged_cardiomediastinum",
    "cardiomegaly",
    "lung_opacity",
    "lung_lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural_effusion",
    "pleural_other",
    "fracture",
    "support_devices",
];
