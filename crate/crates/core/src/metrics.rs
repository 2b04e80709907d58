//! Report-quality metrics: corpus BLEU-1..4, ROUGE-L, METEOR-lite and
//! micro-averaged clinical-efficacy precision/recall/F1 over topic labels.
//!
//! All text metrics take pre-tokenized sequences (one reference per
//! candidate).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TksgError};
use crate::topic::TopicLabels;

/// ROUGE-L recall weight.
pub const ROUGE_BETA: f64 = 1.2;

fn check_pairs<T>(cands: &[T], refs: &[T], what: &'static str) -> Result<()> {
    if cands.is_empty() {
        return Err(TksgError::Empty(what));
    }
    if cands.len() != refs.len() {
        return Err(TksgError::Invalid(format!(
            "{what}: {} candidates but {} references",
            cands.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
fn clipped_matches<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(*r.get(g).unwrap_or(&0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Corpus-level BLEU-n with uniform weights and brevity penalty
/// `exp(min(0, 1 - r/c))`. Zero when any order has no matches.
pub fn bleu<S: AsRef<str>>(cands: &[Vec<S>], refs: &[Vec<S>], n: usize) -> Result<f64> {
    check_pairs(cands, refs, "bleu")?;
    if n == 0 {
        return Err(TksgError::Invalid("bleu order must be at least 1".into()));
    }
    let c_len: usize = cands.iter().map(Vec::len).sum();
    let r_len: usize = refs.iter().map(Vec::len).sum();
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut m, mut t) = (0, 0);
        for (c, r) in cands.iter().zip(refs) {
            let (a, b) = clipped_matches(c, r, order);
            m += a;
            t += b;
        }
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = (1.0 - r_len as f64 / c_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / n as f64).exp())
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_pair<S: AsRef<str>>(c: &[S], r: &[S]) -> f64 {
    let l = lcs_len(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean per-sample LCS F-measure with `beta = 1.2`.
pub fn rouge_l<S: AsRef<str>>(cands: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_pairs(cands, refs, "rouge_l")?;
    let total: f64 = cands.iter().zip(refs).map(|(c, r)| rouge_l_pair(c, r)).sum();
    Ok(total / cands.len() as f64)
}

/// Exact-match unigram alignment as `(candidate_pos, reference_pos)` pairs:
/// each candidate token, left to right, takes the earliest unused reference
/// position holding the same token.
pub fn align_exact<S: AsRef<str>>(cand: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut out = Vec::new();
    for (i, c) in cand.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j].as_ref() == c.as_ref()) {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Number of maximal runs of alignment pairs contiguous in both sequences.
pub fn count_chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

fn meteor_pair<S: AsRef<str>>(c: &[S], r: &[S]) -> f64 {
    let a = align_exact(c, r);
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    let frag = count_chunks(&a) as f64 / m as f64;
    f_mean * (1.0 - 0.5 * frag.powi(3))
}

/// METEOR restricted to exact unigram matches, averaged over samples.
pub fn meteor_lite<S: AsRef<str>>(cands: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_pairs(cands, refs, "meteor_lite")?;
    let total: f64 = cands.iter().zip(refs).map(|(c, r)| meteor_pair(c, r)).sum();
    Ok(total / cands.len() as f64)
}

/// Micro-averaged precision, recall and F1 over all (sample, label) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn ce_metrics(pred: &[TopicLabels], gold: &[TopicLabels]) -> Result<CeScores> {
    check_pairs(pred, gold, "ce_metrics")?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        for (&a, &b) in p.0.iter().zip(&g.0) {
            match (a, b) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(CeScores { precision, recall, f1 })
}

/// The full metric block for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_precision: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_f1: Option<f64>,
}

impl MetricReport {
    /// Computes every text metric, plus CE scores when labels are given as
    /// `(predicted, gold)`.
    pub fn compute<S: AsRef<str>>(
        cands: &[Vec<S>],
        refs: &[Vec<S>],
        labels: Option<(&[TopicLabels], &[TopicLabels])>,
    ) -> Result<Self> {
        let ce = labels.map(|(p, g)| ce_metrics(p, g)).transpose()?;
        Ok(MetricReport {
            bleu1: bleu(cands, refs, 1)?,
            bleu2: bleu(cands, refs, 2)?,
            bleu3: bleu(cands, refs, 3)?,
            bleu4: bleu(cands, refs, 4)?,
            meteor: meteor_lite(cands, refs)?,
            rouge_l: rouge_l(cands, refs)?,
            ce_precision: ce.map(|c| c.precision),
            ce_recall: ce.map(|c| c.recall),
            ce_f1: ce.map(|c| c.f1),
        })
    }

    pub const TSV_HEADER: &'static str = "bleu1\tbleu2\tbleu3\tbleu4\tmeteor\trouge_l\tce_precision\tce_recall\tce_f1";

    /// One tab-separated line in [`Self::TSV_HEADER`] order; missing CE
    /// values are written as `-`.
    pub fn tsv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.meteor,
            self.rouge_l,
            opt(self.ce_precision),
            opt(self.ce_recall),
            opt(self.ce_f1)
        )
    }
}
