//! End-to-end plumbing over files: vocabulary and index building, dataset
//! assembly with cached retrieval, training runs with checkpoints, report
//! generation and evaluation.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{detokenize, load_corpus, rule_label, tokenize, SampleRecord, Split, SyntheticSpec, Vocabulary};
use crate::encoder::load_visual;
use crate::error::{io_err, Result, TksgError};
use crate::keyword::{ConceptVocabulary, StopWords};
use crate::metrics::MetricReport;
use crate::retrieval::{EmbeddingTable, RetrievalIndex};
use crate::topic::TopicLabels;
use crate::train::{Schedule, TrainSample, Trainer};

pub const BEST_CHECKPOINT: &str = "best";
pub const LAST_CHECKPOINT: &str = "last";
pub const CONFIG_FILE: &str = "config.json";
pub const LOSS_LOG: &str = "loss.tsv";

pub fn load_stopwords(path: Option<&Path>) -> Result<StopWords> {
    path.map_or_else(|| Ok(StopWords::builtin()), StopWords::load)
}

fn train_tokens(records: &[SampleRecord]) -> Vec<Vec<String>> {
    records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| tokenize(&r.report))
        .collect()
}

/// Report vocabulary and concept vocabulary from the training split.
pub fn build_vocabularies(
    records: &[SampleRecord],
    min_count: usize,
    n_w: usize,
    stop: &StopWords,
) -> Result<(Vocabulary, ConceptVocabulary)> {
    let reports = train_tokens(records);
    if reports.is_empty() {
        return Err(TksgError::Empty("training split"));
    }
    let as_str = || reports.iter().map(|r| r.iter().map(String::as_str));
    let vocab = Vocabulary::build(as_str(), min_count)?;
    let concepts = ConceptVocabulary::build(as_str(), n_w, stop)?;
    Ok((vocab, concepts))
}

/// Retrieval index over the training split's report embeddings.
pub fn build_train_index(records: &[SampleRecord], reports: &EmbeddingTable) -> Result<RetrievalIndex> {
    let ids: Vec<String> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.id.clone())
        .collect();
    RetrievalIndex::from_table(&reports.subset(&ids)?)
}

/// Everything a run reads from disk.
pub struct DataBundle {
    pub records: Vec<SampleRecord>,
    pub corpus_dir: PathBuf,
    pub vocab: Vocabulary,
    pub concepts: ConceptVocabulary,
    pub index: RetrievalIndex,
    pub queries: EmbeddingTable,
}

impl DataBundle {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let records = load_corpus(&config.corpus)?;
        let corpus_dir = config.corpus.parent().map(Path::to_path_buf).unwrap_or_default();
        let vocab = Vocabulary::load(&config.vocab)?;
        let concepts = ConceptVocabulary::load(&config.concepts)?;
        if concepts.len() != config.n_w {
            return Err(TksgError::Invalid(format!(
                "concept file {} has {} entries but n_w = {}",
                config.concepts.display(),
                concepts.len(),
                config.n_w
            )));
        }
        let index = RetrievalIndex::load(&config.index)?;
        let queries = EmbeddingTable::load(&config.queries)?;
        if queries.dim() != index.dim() {
            return Err(TksgError::Invalid(format!(
                "query embeddings have width {} but the index has {}",
                queries.dim(),
                index.dim()
            )));
        }
        Ok(DataBundle {
            records,
            corpus_dir,
            vocab,
            concepts,
            index,
            queries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Loads visuals, runs retrieval (excluding the sample's own report) and
    /// encodes targets for every record of `split`.
    pub fn samples(&self, split: Split, config: &RunConfig) -> Result<Vec<TrainSample>> {
        self.split(split).map(|r| self.sample(r, config)).collect()
    }

    pub fn sample(&self, r: &SampleRecord, config: &RunConfig) -> Result<TrainSample> {
        let visual = load_visual(&self.corpus_dir.join(&r.image_ref), config.d_h)?;
        let query = self
            .queries
            .get(&r.id)
            .ok_or_else(|| TksgError::Invalid(format!("no query embedding for sample {}", r.id)))?;
        let hits = self.index.query_topk(query.data(), config.n_r, Some(&r.id))?;
        if hits.truncated {
            log::warn!("only {} reports retrievable for {}", hits.hits.len(), r.id);
        }
        let retrieved = self.index.gather(&hits.hits)?;
        let tokens = tokenize(&r.report);
        Ok(TrainSample {
            id: r.id.clone(),
            visual,
            retrieved: Some(retrieved),
            tokens: self.vocab.encode(&tokens, config.t_max),
            topics: r.topic_labels()?,
            concepts: self.concepts.label_keywords(tokens.iter().map(String::as_str)),
        })
    }
}

/// Outcome of [`train_run`].
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub trainer: Trainer,
}

/// Trains under `config.run_dir()`, resuming from the `last` checkpoint when
/// one exists. Writes `config.json`, `loss.tsv`, and the `best`/`last`
/// checkpoints.
pub fn train_run(config: &RunConfig, data: &DataBundle) -> Result<TrainOutcome> {
    config.validate()?;
    let run_dir = config.run_dir()?;
    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    config.save(&run_dir.join(CONFIG_FILE))?;
    let train = data.samples(Split::Train, config)?;
    if train.is_empty() {
        return Err(TksgError::Empty("training split"));
    }
    let val = data.samples(Split::Val, config)?;
    let fingerprint = data.vocab.fingerprint();
    let mut trainer = if run_dir.join(format!("{LAST_CHECKPOINT}.json")).exists() {
        let (t, meta) = Trainer::load_checkpoint(&run_dir, LAST_CHECKPOINT)?;
        check_fingerprint(&meta.vocab_fingerprint, &fingerprint)?;
        log::info!("resuming {} at epoch {}", run_dir.display(), t.epoch);
        t
    } else {
        let model_config = config.model_config(data.vocab.len(), data.index.dim());
        Trainer::new(model_config, Schedule::from_config(config)?)?
    };
    while !trainer.finished() {
        let rec = trainer.run_epoch(&train, &val)?;
        if rec.best {
            trainer.save_checkpoint(&run_dir, BEST_CHECKPOINT, &fingerprint)?;
        }
        trainer.save_checkpoint(&run_dir, LAST_CHECKPOINT, &fingerprint)?;
        write_loss_log(&run_dir.join(LOSS_LOG), &trainer)?;
    }
    Ok(TrainOutcome { run_dir, trainer })
}

fn write_loss_log(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut text = String::from(crate::train::EpochRecord::TSV_HEADER);
    text.push('\n');
    for r in &trainer.log {
        text.push_str(&r.tsv_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

fn check_fingerprint(found: &str, expected: &str) -> Result<()> {
    if found != expected {
        return Err(TksgError::Invalid(format!(
            "checkpoint was trained with vocabulary {found}, current vocabulary is {expected}"
        )));
    }
    Ok(())
}

/// Loads a checkpoint from a run directory, checking the vocabulary.
pub fn load_model(run_dir: &Path, name: &str, vocab: &Vocabulary) -> Result<Trainer> {
    let (t, meta) = Trainer::load_checkpoint(run_dir, name)?;
    check_fingerprint(&meta.vocab_fingerprint, &vocab.fingerprint())?;
    Ok(t)
}

/// Beam-decodes every sample and returns `(id, report)` pairs in order.
pub fn generate_reports(
    trainer: &Trainer,
    vocab: &Vocabulary,
    samples: &[TrainSample],
    beam: usize,
) -> Result<Vec<(String, String)>> {
    samples
        .iter()
        .map(|s| {
            let prepared = trainer.model.prepare(&trainer.store, &s.input())?;
            let hyp = trainer.model.generate(&trainer.store, &prepared, beam)?;
            Ok((s.id.clone(), detokenize(&vocab.decode(&hyp.tokens))))
        })
        .collect()
}

/// One `id<TAB>report` line per sample.
pub fn write_reports(path: &Path, reports: &[(String, String)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for (id, text) in reports {
        writeln!(f, "{id}\t{text}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (id, report) = l.split_once('\t').ok_or_else(|| TksgError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected id<TAB>report".into(),
            })?;
            Ok((id.to_string(), report.to_string()))
        })
        .collect()
}

/// Where CE labels for generated reports come from.
pub enum LabelSource<'a> {
    /// Rule labeler of a synthetic spec.
    Rules(&'a SyntheticSpec),
    /// Externally supplied labels by id.
    Given(&'a HashMap<String, TopicLabels>),
}

/// Reads `{"id": ..., "topics": [...]}` JSON lines.
pub fn read_labels(path: &Path) -> Result<HashMap<String, TopicLabels>> {
    #[derive(serde::Deserialize)]
    struct Row {
        id: String,
        topics: Vec<u8>,
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse = |reason: String| TksgError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let row: Row = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        let labels = TopicLabels::from_slice(&row.topics).map_err(|e| parse(e.to_string()))?;
        out.insert(row.id, labels);
    }
    Ok(out)
}

/// Scores generated reports against references aligned by id. Gold CE
/// labels come from the reference records.
pub fn evaluate_reports(
    generated: &[(String, String)],
    references: &[SampleRecord],
    labels: Option<LabelSource>,
) -> Result<MetricReport> {
    let by_id: HashMap<&str, &SampleRecord> = references.iter().map(|r| (r.id.as_str(), r)).collect();
    let gen_ids: HashMap<&str, ()> = generated.iter().map(|(id, _)| (id.as_str(), ())).collect();
    let missing_refs: Vec<&str> = generated
        .iter()
        .map(|(id, _)| id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let missing_gen: Vec<&str> = references
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !gen_ids.contains_key(id))
        .collect();
    if !missing_refs.is_empty() || !missing_gen.is_empty() {
        return Err(TksgError::Invalid(format!(
            "id mismatch: no reference for [{}]; no generation for [{}]",
            missing_refs.join(","),
            missing_gen.join(",")
        )));
    }
    let cands: Vec<Vec<String>> = generated.iter().map(|(_, t)| tokenize(t)).collect();
    let refs: Vec<Vec<String>> = generated.iter().map(|(id, _)| tokenize(&by_id[id.as_str()].report)).collect();
    let label_pair = match labels {
        None => None,
        Some(source) => {
            let mut pred = Vec::with_capacity(generated.len());
            let mut gold = Vec::with_capacity(generated.len());
            for ((id, _), toks) in generated.iter().zip(&cands) {
                pred.push(match source {
                    LabelSource::Rules(spec) => rule_label(toks, spec),
                    LabelSource::Given(map) => *map
                        .get(id)
                        .ok_or_else(|| TksgError::Invalid(format!("no predicted labels for {id}")))?,
                });
                gold.push(by_id[id.as_str()].topic_labels()?);
            }
            Some((pred, gold))
        }
    };
    MetricReport::compute(&cands, &refs, label_pair.as_ref().map(|(p, g)| (p.as_slice(), g.as_slice())))
}
