//! Subcommand implementations.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use tksg_core::config::RunConfig;
use tksg_core::corpus::{generate_synthetic, load_corpus, Split, SyntheticSpec, REPORT_EMB_FILE, SPEC_FILE};
use tksg_core::metrics::MetricReport;
use tksg_core::pipeline::{
    build_train_index, build_vocabularies, evaluate_reports, generate_reports, load_model, load_stopwords,
    read_labels, read_reports, train_run, write_reports, DataBundle, LabelSource, BEST_CHECKPOINT, CONFIG_FILE,
};
use tksg_core::retrieval::{EmbeddingTable, RetrievalIndex};
use tksg_core::tensor::read_tensor;

pub fn load_config(path: Option<&Path>, pairs: &[(String, String)]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?)
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic spec (JSON); the built-in 14-topic spec by default.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub noise_rate: Option<f64>,
    /// Topics drawn per sample, at most.
    #[arg(long)]
    pub max_topics: Option<usize>,
}

pub fn gen_synth(config: &RunConfig, a: GenSynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::load(p)?,
        None => SyntheticSpec::default(),
    };
    spec.train = a.train.unwrap_or(spec.train);
    spec.val = a.val.unwrap_or(spec.val);
    spec.test = a.test.unwrap_or(spec.test);
    spec.noise_rate = a.noise_rate.unwrap_or(spec.noise_rate);
    spec.max_topics = a.max_topics.unwrap_or(spec.max_topics);
    let corpus = generate_synthetic(&spec, config.seed()?)?;
    corpus.write(&a.out)?;
    log::info!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        corpus.records.len(),
        spec.train,
        spec.val,
        spec.test,
        a.out.display()
    );
    Ok(())
}

pub fn build_vocab(config: &RunConfig) -> Result<()> {
    let records = load_corpus(&config.corpus)?;
    let stop = load_stopwords(config.stopwords.as_deref())?;
    let (vocab, concepts) = build_vocabularies(&records, config.min_count, config.n_w, &stop)?;
    for p in [&config.vocab, &config.concepts] {
        ensure_parent(p)?;
    }
    vocab.save(&config.vocab)?;
    concepts.save(&config.concepts)?;
    log::info!(
        "vocabulary: {} tokens -> {}; concepts: {} -> {}",
        vocab.len(),
        config.vocab.display(),
        concepts.len(),
        config.concepts.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    /// Report embedding table (`.ids` sidecar); defaults to the one next to the corpus.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

fn corpus_dir(config: &RunConfig) -> PathBuf {
    config.corpus.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn build_index(config: &RunConfig, a: BuildIndexArgs) -> Result<()> {
    let records = load_corpus(&config.corpus)?;
    let path = a.embeddings.unwrap_or_else(|| corpus_dir(config).join(REPORT_EMB_FILE));
    let table = EmbeddingTable::load(&path)?;
    let index = build_train_index(&records, &table)?;
    ensure_parent(&config.index)?;
    index.save(&config.index)?;
    log::info!("index: {} reports of width {} -> {}", index.len(), index.dim(), config.index.display());
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let data = DataBundle::load(config)?;
    let out = train_run(config, &data)?;
    println!("{}", out.run_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Run directory; defaults to the one derived from the configuration.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Output file; defaults to `reports_<split>.txt` in the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Greedy argmax decoding instead of beam search.
    #[arg(long)]
    pub greedy: bool,
}

pub fn generate(config: &RunConfig, a: GenerateArgs) -> Result<()> {
    let run_dir = match &a.run {
        Some(d) => d.clone(),
        None => config.run_dir()?,
    };
    let saved = run_dir.join(CONFIG_FILE);
    let config = if a.run.is_some() && saved.exists() {
        let mut c = RunConfig::load(&saved)?;
        c.beam = config.beam;
        c
    } else {
        config.clone()
    };
    let data = DataBundle::load(&config)?;
    let trainer = load_model(&run_dir, BEST_CHECKPOINT, &data.vocab)
        .with_context(|| format!("loading checkpoint from {}", run_dir.display()))?;
    let samples = data.samples(a.split, &config)?;
    if samples.is_empty() {
        log::warn!("split {} is empty; writing an empty report file", a.split);
    }
    let beam = if a.greedy { 1 } else { config.beam };
    let reports = if a.greedy {
        samples
            .iter()
            .map(|s| {
                let prepared = trainer.model.prepare(&trainer.store, &s.input())?;
                let hyp = trainer.model.generate_greedy(&trainer.store, &prepared)?;
                Ok((s.id.clone(), tksg_core::corpus::detokenize(&data.vocab.decode(&hyp.tokens))))
            })
            .collect::<tksg_core::Result<Vec<_>>>()?
    } else {
        generate_reports(&trainer, &data.vocab, &samples, beam)?
    };
    let out = a.out.unwrap_or_else(|| run_dir.join(format!("reports_{}.txt", a.split)));
    write_reports(&out, &reports)?;
    println!("{}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    /// Query tensor file (`d_e` vector or `Q × d_e` matrix).
    #[arg(long, conflicts_with = "id")]
    pub query: Option<PathBuf>,
    /// Sample ids whose query embeddings are used.
    #[arg(long)]
    pub id: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Skip an indexed report whose id equals the query id.
    #[arg(long)]
    pub exclude_self: bool,
}

pub fn retrieve(config: &RunConfig, a: RetrieveArgs) -> Result<()> {
    let index = RetrievalIndex::load(&config.index)?;
    let queries: Vec<(String, Vec<f64>)> = if let Some(p) = &a.query {
        let t = read_tensor(p)?;
        match t.ndim() {
            1 => vec![("0".into(), t.into_data())],
            2 => (0..t.rows()).map(|i| (i.to_string(), t.row(i).to_vec())).collect(),
            _ => bail!("query tensor must be 1-D or 2-D, got shape {:?}", t.shape()),
        }
    } else {
        if a.id.is_empty() {
            bail!("pass --query FILE or at least one --id");
        }
        let table = EmbeddingTable::load(&config.queries)?;
        a.id.iter()
            .map(|id| {
                let v = table.get(id).with_context(|| format!("no query embedding for {id}"))?;
                Ok((id.clone(), v.into_data()))
            })
            .collect::<Result<_>>()?
    };
    if a.k > index.len() {
        log::warn!("k = {} exceeds the index size {}; returning {} rows", a.k, index.len(), index.len());
    }
    for (qid, q) in &queries {
        let exclude = a.exclude_self.then_some(qid.as_str());
        let set = index.query_topk(q, a.k, exclude)?;
        for (rank, h) in set.hits.iter().enumerate() {
            println!("{qid}\t{}\t{}\t{:.6}", rank + 1, h.id, h.similarity);
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Generated reports (`id<TAB>report` lines).
    #[arg(long)]
    pub generated: PathBuf,
    /// Split whose references are compared.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Synthetic spec for rule-labelling generated reports (CE metrics);
    /// `spec.json` next to the corpus is used when present.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Predicted labels (`{"id", "topics"}` JSON lines) instead of rules.
    #[arg(long, conflicts_with = "spec")]
    pub labels: Option<PathBuf>,
    /// Directory for `metrics.json` and `metrics.tsv`; defaults to the
    /// generated file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn default_spec(config: &RunConfig, explicit: Option<&Path>) -> Result<Option<SyntheticSpec>> {
    let path = explicit.map(Path::to_path_buf).or_else(|| {
        let p = corpus_dir(config).join(SPEC_FILE);
        p.exists().then_some(p)
    });
    Ok(path.map(|p| SyntheticSpec::load(&p)).transpose()?)
}

fn score(
    config: &RunConfig,
    split: Split,
    generated: &[(String, String)],
    spec: Option<&SyntheticSpec>,
    labels: Option<&std::collections::HashMap<String, tksg_core::topic::TopicLabels>>,
) -> Result<MetricReport> {
    let records: Vec<_> = load_corpus(&config.corpus)?.into_iter().filter(|r| r.split == split).collect();
    let source = match (labels, spec) {
        (Some(l), _) => Some(LabelSource::Given(l)),
        (None, Some(s)) => Some(LabelSource::Rules(s)),
        (None, None) => None,
    };
    if generated.is_empty() {
        bail!("no generated reports to evaluate");
    }
    Ok(evaluate_reports(generated, &records, source)?)
}

pub fn evaluate(config: &RunConfig, a: EvaluateArgs) -> Result<()> {
    let generated = read_reports(&a.generated)?;
    let labels = a.labels.as_deref().map(read_labels).transpose()?;
    let spec = if labels.is_some() { None } else { default_spec(config, a.spec.as_deref())? };
    let report = score(config, a.split, &generated, spec.as_ref(), labels.as_ref())?;
    let dir = a
        .out
        .unwrap_or_else(|| a.generated.parent().map(Path::to_path_buf).unwrap_or_default());
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(&dir)?;
    }
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(dir.join("metrics.json"), format!("{json}\n"))?;
    fs::write(dir.join("metrics.tsv"), format!("{}\n", report.tsv_line()))?;
    println!("{json}");
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Comma-separated N_R values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid_n_r: Vec<usize>,
    /// Comma-separated N_K values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid_n_k: Vec<usize>,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

pub fn sweep(config: &RunConfig, a: SweepArgs) -> Result<()> {
    config.validate()?;
    let spec = default_spec(config, a.spec.as_deref())?;
    let data = DataBundle::load(config)?;
    let mut rows: Vec<(usize, usize, std::result::Result<MetricReport, String>)> = Vec::new();
    let mut seen = HashSet::new();
    for &n_r in &a.grid_n_r {
        for &n_k in &a.grid_n_k {
            if !seen.insert((n_r, n_k)) {
                continue;
            }
            let mut cell = config.clone();
            cell.n_r = n_r;
            cell.n_k = n_k;
            log::info!("sweep cell n_r={n_r} n_k={n_k}");
            let outcome = (|| -> Result<MetricReport> {
                let out = train_run(&cell, &data)?;
                let trainer = load_model(&out.run_dir, BEST_CHECKPOINT, &data.vocab)?;
                let samples = data.samples(a.split, &cell)?;
                let reports = generate_reports(&trainer, &data.vocab, &samples, cell.beam)?;
                write_reports(&out.run_dir.join(format!("reports_{}.txt", a.split)), &reports)?;
                score(&cell, a.split, &reports, spec.as_ref(), None)
            })();
            if let Err(e) = &outcome {
                log::error!("sweep cell n_r={n_r} n_k={n_k} failed: {e:#}");
            }
            rows.push((n_r, n_k, outcome.map_err(|e| format!("{e:#}"))));
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.2.as_ref().ok().map(|m| (i, m.bleu4)))
        .fold(None, |acc: Option<(usize, f64)>, (i, b)| match acc {
            Some((_, bb)) if bb >= b => acc,
            _ => Some((i, b)),
        })
        .map(|(i, _)| i);
    let mut table = format!("n_r\tn_k\tstatus\t{}\tbest\n", MetricReport::TSV_HEADER);
    let blank = vec!["-"; MetricReport::TSV_HEADER.split('\t').count()].join("\t");
    for (i, (n_r, n_k, r)) in rows.iter().enumerate() {
        let (status, metrics) = match r {
            Ok(m) => ("ok".to_string(), m.tsv_line()),
            Err(e) => (format!("failed: {}", e.replace(['\t', '\n'], " ")), blank.clone()),
        };
        table.push_str(&format!("{n_r}\t{n_k}\t{status}\t{metrics}\t{}\n", (best == Some(i)) as u8));
    }
    fs::create_dir_all(&config.out_dir)?;
    let path = config.out_dir.join(format!("sweep-{}-s{}.tsv", config.hash(), config.seed()?));
    fs::write(&path, &table)?;
    print!("{table}");
    log::info!("sweep table -> {}", path.display());
    Ok(())
}
