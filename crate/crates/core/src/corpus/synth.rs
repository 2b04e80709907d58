//! Deterministic synthetic corpus with planted topic and keyword structure.
//!
//! Each sample draws 1..=`max_topics` topics and one keyword per topic. The
//! report instantiates each topic's template with its keyword (plus filler
//! sentences at rate `noise_rate`). The paired image lights up one patch per
//! topic at an intensity that encodes the keyword. Report and query
//! embeddings are sums of per-token pseudo-random vectors, so reports sharing
//! topics and keywords land close together.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::labeler::rule_label;
use super::records::{write_corpus, SampleRecord, Split};
use super::tokenize::{detokenize, tokenize};
use crate::error::{io_err, Result, TksgError};
use crate::keyword::StopWords;
use crate::retrieval::EmbeddingTable;
use crate::tensor::{write_tensor, Tensor};
use crate::topic::{TopicLabels, N_TOPICS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub name: String,
    /// Sentence with a `{kw}` slot.
    pub template: String,
    pub keywords: Vec<String>,
    /// Phrases whose presence marks the topic for the rule labeler.
    pub signatures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub topics: Vec<TopicSpec>,
    pub fillers: Vec<String>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub max_topics: usize,
    /// Probability of a filler sentence at each sentence boundary.
    pub noise_rate: f64,
    pub image_size: usize,
    pub patch_size: usize,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    pub embed_dim: usize,
    /// Standard deviation of per-coordinate embedding noise, relative to a
    /// unit-norm signal.
    pub embed_noise: f64,
    pub seed: u64,
}

fn topic(name: &str, template: &str, kws: [&str; 3], sig: &str) -> TopicSpec {
    TopicSpec {
        name: name.into(),
        template: template.into(),
        keywords: kws.iter().map(|s| s.to_string()).collect(),
        signatures: vec![sig.into()],
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let topics = vec![
            topic("no_finding", "the lungs are {kw} bilaterally .", ["clear", "expanded", "aerated"], "bilaterally"),
            topic(
                "enlarged_cardiomediastinum",
                "the mediastinal silhouette appears {kw} widened .",
                ["mildly", "moderately", "markedly"],
                "mediastinal silhouette",
            ),
            topic("cardiomegaly", "cardiac size is {kw} enlarged .", ["slightly", "substantially", "massively"], "cardiac size"),
            topic("lung_opacity", "there is {kw} opacity in the right lung base .", ["patchy", "hazy", "streaky"], "opacity"),
            topic("lung_lesion", "a {kw} nodule projects over the upper lobe .", ["solitary", "spiculated", "calcified"], "nodule"),
            topic("edema", "findings suggest {kw} pulmonary edema .", ["interstitial", "alveolar", "perihilar"], "edema"),
            topic("consolidation", "{kw} consolidation involves the left lower lobe .", ["dense", "lobar", "segmental"], "consolidation"),
            topic("pneumonia", "appearance is concerning for {kw} pneumonia .", ["early", "multifocal", "aspiration"], "pneumonia"),
            topic("atelectasis", "{kw} atelectasis is noted at both bases .", ["linear", "subsegmental", "discoid"], "atelectasis"),
            topic("pneumothorax", "a {kw} pneumothorax is present near the apex .", ["tiny", "apical", "tension"], "pneumothorax"),
            topic("pleural_effusion", "there is a {kw} pleural effusion .", ["small", "moderate", "large"], "effusion"),
            topic("pleural_other", "{kw} pleural thickening is demonstrated .", ["nodular", "smooth", "diffuse"], "thickening"),
            topic("fracture", "a {kw} rib fracture is identified .", ["healed", "displaced", "subtle"], "fracture"),
            topic("support_devices", "an {kw} tube terminates above the carina .", ["endotracheal", "enteric", "tracheostomy"], "tube"),
        ];
        let fillers = [
            "comparison is made with the prior study .",
            "the osseous structures are intact .",
            "visualized upper abdomen is unremarkable .",
            "patient rotation limits evaluation .",
            "soft tissues appear normal .",
            "portable technique reduces image quality .",
            "clinical correlation is recommended .",
            "no interval change since yesterday .",
        ];
        SyntheticSpec {
            topics,
            fillers: fillers.iter().map(|s| s.to_string()).collect(),
            train: 500,
            val: 50,
            test: 100,
            max_topics: 3,
            noise_rate: 0.1,
            image_size: 32,
            patch_size: 8,
            pixel_noise: 0.05,
            embed_dim: 32,
            embed_noise: 0.05,
            seed: 0,
        }
    }
}

fn contains_run(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

impl SyntheticSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn instantiate(&self, topic: usize, keyword: usize) -> String {
        let t = &self.topics[topic];
        t.template.replace("{kw}", &t.keywords[keyword])
    }

    /// Checks that the spec can produce a corpus the rule labeler reads back
    /// exactly.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TksgError::Invalid(format!("inconsistent synthetic spec: {m}")));
        let n = self.topics.len();
        if n == 0 || n > N_TOPICS {
            return bad(format!("topic count {n} must be in 1..={N_TOPICS}"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad(format!("noise rate {} not in [0, 1)", self.noise_rate));
        }
        if self.max_topics == 0 || self.max_topics > n {
            return bad(format!("max_topics {} must be in 1..={n}", self.max_topics));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad("image size must be a multiple of the patch size".into());
        }
        let patches = (self.image_size / self.patch_size).pow(2);
        if patches < n {
            return bad(format!("{patches} patches cannot host {n} topics"));
        }
        if self.embed_dim == 0 || self.train == 0 {
            return bad("embed_dim and train must be positive".into());
        }
        if self.noise_rate > 0.0 && self.fillers.is_empty() {
            return bad("noise needs at least one filler sentence".into());
        }
        let mut seen_kw = HashSet::new();
        for t in &self.topics {
            if !t.template.contains("{kw}") {
                return bad(format!("template of {} lacks {{kw}}", t.name));
            }
            if t.keywords.is_empty() || t.signatures.is_empty() {
                return bad(format!("topic {} needs keywords and signatures", t.name));
            }
            for k in &t.keywords {
                if !seen_kw.insert(k.clone()) {
                    return bad(format!("keyword {k:?} is shared between topics"));
                }
            }
        }
        // every instantiation must carry its own signatures and no other's
        let sigs: Vec<Vec<Vec<String>>> = self
            .topics
            .iter()
            .map(|t| t.signatures.iter().map(|s| tokenize(s)).collect())
            .collect();
        for (i, t) in self.topics.iter().enumerate() {
            for k in 0..t.keywords.len() {
                let toks = tokenize(&self.instantiate(i, k));
                if !sigs[i].iter().any(|s| contains_run(&toks, s)) {
                    return bad(format!("topic {} sentence lacks its signature", t.name));
                }
                for (j, other) in sigs.iter().enumerate() {
                    if j != i && other.iter().any(|s| contains_run(&toks, s)) {
                        return bad(format!("topic {} sentence contains a signature of topic {j}", t.name));
                    }
                }
            }
        }
        for f in &self.fillers {
            let toks = tokenize(f);
            if sigs.iter().flatten().any(|s| contains_run(&toks, s)) {
                return bad(format!("filler {f:?} contains a topic signature"));
            }
        }
        Ok(())
    }
}

/// Deterministic pseudo-random unit vector for a token.
pub fn hash_embedding(token: &str, dim: usize) -> Vec<f64> {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn embed_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>, dim: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for t in tokens {
        for (a, b) in v.iter_mut().zip(hash_embedding(t, dim)) {
            *a += b;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("noise");
    for x in &mut v {
        *x += normal.sample(rng);
    }
    v
}

/// A generated corpus held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spec: SyntheticSpec,
    pub records: Vec<SampleRecord>,
    /// `H×W×1` image per record, same order.
    pub images: Vec<Tensor>,
    /// Planted keyword index per active topic, per record.
    pub planted: Vec<Vec<(usize, usize)>>,
    pub report_embeddings: EmbeddingTable,
    pub query_embeddings: EmbeddingTable,
}

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const REPORT_EMB_FILE: &str = "report_emb.tksg";
pub const QUERY_EMB_FILE: &str = "query_emb.tksg";
pub const SPEC_FILE: &str = "spec.json";

impl SynthCorpus {
    /// Writes `corpus.jsonl`, `images/<id>.tksg`, the two embedding tables
    /// and `spec.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        for (r, img) in self.records.iter().zip(&self.images) {
            write_tensor(&dir.join(&r.image_ref), img)?;
        }
        write_corpus(&dir.join(CORPUS_FILE), &self.records)?;
        self.report_embeddings.save(&dir.join(REPORT_EMB_FILE))?;
        self.query_embeddings.save(&dir.join(QUERY_EMB_FILE))?;
        self.spec.save(&dir.join(SPEC_FILE))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Generates a corpus; identical `(spec, seed)` give bit-identical output.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stop = StopWords::builtin();
    let pixel = Normal::new(0.0, spec.pixel_noise.max(1e-12)).expect("pixel noise");
    let n_topics = spec.topics.len();
    let grid = spec.image_size / spec.patch_size;

    let total = spec.train + spec.val + spec.test;
    let mut records = Vec::with_capacity(total);
    let mut images = Vec::with_capacity(total);
    let mut planted_all = Vec::with_capacity(total);
    let mut report_vecs = Vec::with_capacity(total * spec.embed_dim);
    let mut query_vecs = Vec::with_capacity(total * spec.embed_dim);
    let mut ids = Vec::with_capacity(total);

    for i in 0..total {
        let split = if i < spec.train {
            Split::Train
        } else if i < spec.train + spec.val {
            Split::Val
        } else {
            Split::Test
        };
        let k = rng.gen_range(1..=spec.max_topics);
        let mut chosen: Vec<usize> = sample(&mut rng, n_topics, k).into_vec();
        chosen.sort_unstable();
        let planted: Vec<(usize, usize)> = chosen
            .iter()
            .map(|&t| (t, rng.gen_range(0..spec.topics[t].keywords.len())))
            .collect();

        let mut sentences = Vec::new();
        for (slot, &(t, kw)) in planted.iter().enumerate() {
            if spec.noise_rate > 0.0 && rng.gen::<f64>() < spec.noise_rate {
                sentences.push(spec.fillers[rng.gen_range(0..spec.fillers.len())].clone());
            }
            sentences.push(spec.instantiate(t, kw));
            if slot + 1 == planted.len() && spec.noise_rate > 0.0 && rng.gen::<f64>() < spec.noise_rate {
                sentences.push(spec.fillers[rng.gen_range(0..spec.fillers.len())].clone());
            }
        }
        let tokens = tokenize(&sentences.join(" "));
        let report = detokenize(&tokens);

        let size = spec.image_size;
        let mut img = vec![0.1; size * size];
        for &(t, kw) in &planted {
            let n_kw = spec.topics[t].keywords.len();
            let level = 0.4 + 0.5 * (kw + 1) as f64 / n_kw as f64;
            let (pr, pc) = (t / grid, t % grid);
            for r in 0..spec.patch_size {
                for c in 0..spec.patch_size {
                    img[(pr * spec.patch_size + r) * size + pc * spec.patch_size + c] = level;
                }
            }
        }
        for v in &mut img {
            *v = (*v + pixel.sample(&mut rng)).clamp(0.0, 1.0);
        }

        let content = tokens.iter().map(String::as_str).filter(|t| t.chars().any(char::is_alphabetic) && !stop.contains(t));
        report_vecs.extend(embed_tokens(content, spec.embed_dim, spec.embed_noise, &mut rng));
        let mut planted_tokens: Vec<String> = Vec::new();
        for &(t, kw) in &planted {
            planted_tokens.extend(spec.topics[t].signatures.iter().flat_map(|s| tokenize(s)));
            planted_tokens.push(spec.topics[t].keywords[kw].clone());
        }
        query_vecs.extend(embed_tokens(
            planted_tokens.iter().map(String::as_str),
            spec.embed_dim,
            spec.embed_noise,
            &mut rng,
        ));

        let id = format!("s{i:05}");
        records.push(SampleRecord {
            id: id.clone(),
            image_ref: format!("images/{id}.tksg"),
            report,
            topics: TopicLabels::from_set(&chosen).0.to_vec(),
            split,
        });
        images.push(Tensor::new(vec![size, size, 1], img)?);
        planted_all.push(planted);
        ids.push(id);
    }

    let d = spec.embed_dim;
    let report_embeddings = EmbeddingTable::new(ids.clone(), Tensor::new(vec![total, d], report_vecs)?)?;
    let query_embeddings = EmbeddingTable::new(ids, Tensor::new(vec![total, d], query_vecs)?)?;
    debug_assert!(records
        .iter()
        .all(|r| spec.noise_rate > 0.0 || rule_label(&tokenize(&r.report), &spec).0.to_vec() == r.topics));
    Ok(SynthCorpus {
        spec,
        records,
        images,
        planted: planted_all,
        report_embeddings,
        query_embeddings,
    })
}
