//! Keyword guidance: the concept vocabulary, concept detection from fused
//! image and retrieval features, top-k keyword selection and keyword
//! embeddings with rank embeddings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{io_err, shape_err, Result, TksgError};
use crate::nn::{Embedding, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};

/// A set of tokens excluded from concept candidates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StopWords(HashSet<String>);

/// Stop-word list shipped with the crate (version 1).
pub const DEFAULT_STOPWORDS: &str = include_str!("stopwords.txt");

impl StopWords {
    pub fn parse(text: &str) -> Self {
        StopWords(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .collect(),
        )
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path).map_err(io_err(path))?))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The `N_W` most frequent non-stop-word report tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary {
    entries: Vec<(String, usize)>,
    index: HashMap<String, usize>,
}

fn is_candidate(token: &str, stop: &StopWords) -> bool {
    token.chars().any(char::is_alphabetic) && !stop.contains(token)
}

impl ConceptVocabulary {
    /// Counts candidate tokens over all reports and keeps the `n_w` most
    /// frequent, ties broken lexicographically.
    pub fn build<'a, I, R>(reports: I, n_w: usize, stop: &StopWords) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut any = false;
        for report in reports {
            any = true;
            for tok in report {
                if is_candidate(tok, stop) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        if !any {
            return Err(TksgError::Empty("build_concepts"));
        }
        if counts.len() < n_w {
            return Err(TksgError::Invalid(format!(
                "only {} distinct concept candidates, need {n_w}",
                counts.len()
            )));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(n_w);
        Self::from_entries(ranked)
    }

    pub fn from_entries(entries: Vec<(String, usize)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (t, _)) in entries.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(TksgError::Invalid(format!("duplicate concept {t:?}")));
            }
        }
        Ok(ConceptVocabulary { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(t, _)| t.as_str())
    }

    pub fn token(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn count(&self, i: usize) -> usize {
        self.entries[i].1
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Multi-hot membership labels for one report.
    pub fn label_keywords<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Vec<f64> {
        let mut c = vec![0.0; self.len()];
        for t in tokens {
            if let Some(i) = self.position(t) {
                c[i] = 1.0;
            }
        }
        c
    }

    /// `token<TAB>count` per line, frequency-descending.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.entries.iter().map(|(t, c)| format!("{t}\t{c}\n")).collect();
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let parse_err = |reason: &str| TksgError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: reason.to_string(),
            };
            let (tok, count) = line.split_once('\t').ok_or_else(|| parse_err("expected token<TAB>count"))?;
            let count = count.trim().parse().map_err(|_| parse_err("bad count"))?;
            entries.push((tok.to_string(), count));
        }
        Self::from_entries(entries)
    }
}

/// Indices of the `n_k` largest probabilities, highest first; equal
/// probabilities keep the lower index first.
pub fn select_topk(probs: &[f64], n_k: usize) -> Result<Vec<usize>> {
    if n_k > probs.len() {
        return Err(TksgError::Invalid(format!(
            "cannot select {n_k} keywords from {} concepts",
            probs.len()
        )));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(n_k);
    Ok(idx)
}

/// Keyword detector plus keyword/rank embedding tables.
#[derive(Clone, Debug)]
pub struct KeywordGuidance {
    pub detector: Linear,
    pub word_emb: Embedding,
    pub rank_emb: Embedding,
    pub ln: LayerNorm,
    pub d_h: usize,
    pub n_w: usize,
    pub n_k: usize,
}

impl KeywordGuidance {
    pub fn new(store: &mut ParamStore, d_h: usize, n_w: usize, n_k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_k > n_w {
            return Err(TksgError::Invalid(format!("N_K = {n_k} exceeds N_W = {n_w}")));
        }
        let g = ParamGroup::Rest;
        Ok(KeywordGuidance {
            detector: Linear::new(store, "kw.detector", 2 * d_h, n_w, true, g, rng),
            word_emb: Embedding::new(store, "kw.emb", n_w, d_h, g, rng),
            rank_emb: Embedding::new(store, "kw.rank", n_k.max(1), d_h, g, rng),
            ln: LayerNorm::new(store, "kw.ln", d_h, g),
            d_h,
            n_w,
            n_k,
        })
    }

    /// Concept probabilities from `x = [f(X); f(R)]` (length `2·d_h`).
    pub fn detect_keywords(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape != [2 * self.d_h] {
            return Err(shape_err(
                "detect_keywords",
                format!("expected [{}], got {shape:?}", 2 * self.d_h),
            ));
        }
        let z = self.detector.forward(g, x)?;
        g.sigmoid(z)
    }

    /// Keyword embeddings `E` for selected concept indices; row `i` adds the
    /// rank embedding of position `i`.
    pub fn embed_keywords(&self, g: &mut Graph, selected: &[usize]) -> Result<Var> {
        if selected.len() > self.rank_emb.rows(g.store()) {
            return Err(TksgError::IndexOutOfRange {
                what: "rank embedding",
                index: selected.len() - 1,
                size: self.rank_emb.rows(g.store()),
            });
        }
        let words = self.word_emb.forward(g, selected)?;
        let positions: Vec<usize> = (0..selected.len()).collect();
        let ranks = self.rank_emb.forward(g, &positions)?;
        let s = g.add(words, ranks)?;
        self.ln.forward(g, s)
    }
}

/// Mean binary cross-entropy over the concept vocabulary.
pub fn keyword_loss(g: &mut Graph, p: Var, labels: &[f64]) -> Result<Var> {
    g.bce(p, labels)
}
