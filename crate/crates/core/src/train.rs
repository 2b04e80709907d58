//! Teacher-forced training: seeded shuffling, per-sample graphs with
//! gradient averaging over a batch, Adam with per-group learning rates
//! decayed every epoch, best-by-validation tracking, and checkpoints that
//! resume bit-for-bit.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::config::RunConfig;
use crate::encoder::VisualInput;
use crate::error::{io_err, Result, TksgError};
use crate::model::{ModelConfig, SampleInput, Targets, TksgModel};
use crate::nn::DropoutCtx;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{read_tensors, write_tensors, Tensor};
use crate::topic::TopicLabels;

/// One sample with cached retrieval and encoded targets.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub id: String,
    pub visual: VisualInput,
    /// Raw retrieved report embeddings (`N_R × d_e`).
    pub retrieved: Option<Tensor>,
    /// Gold token ids ending in EOS.
    pub tokens: Vec<usize>,
    pub topics: TopicLabels,
    pub concepts: Vec<f64>,
}

impl TrainSample {
    pub fn input(&self) -> SampleInput<'_> {
        SampleInput {
            visual: &self.visual,
            retrieved: self.retrieved.as_ref(),
        }
    }

    pub fn targets(&self) -> Targets<'_> {
        Targets {
            tokens: &self.tokens,
            topics: &self.topics,
            concepts: &self.concepts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_encoder: f64,
    pub lr_rest: f64,
    /// Multiplier applied to both learning rates after every epoch.
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
}

impl Schedule {
    pub fn from_config(c: &RunConfig) -> Result<Self> {
        Ok(Schedule {
            lr_encoder: c.lr_encoder,
            lr_rest: c.lr_rest,
            decay: c.decay,
            epochs: c.epochs,
            batch_size: c.batch_size,
            patience: c.patience,
            seed: c.seed()?,
        })
    }

    pub fn lr(&self, epoch: usize, group: ParamGroup) -> f64 {
        let base = match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Rest => self.lr_rest,
        };
        base * self.decay.powi(epoch as i32)
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub loss: f64,
    pub rep: f64,
    pub kd: f64,
    pub td: f64,
    pub val_rep: Option<f64>,
    pub best: bool,
}

impl EpochRecord {
    pub const TSV_HEADER: &'static str = "epoch\tlr_encoder\tlr_rest\tloss\trep\tkd\ttd\tval_rep\tbest";

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:e}\t{:e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.epoch,
            self.lr_encoder,
            self.lr_rest,
            self.loss,
            self.rep,
            self.kd,
            self.td,
            self.val_rep.map_or_else(|| "-".into(), |v| format!("{v:.6}")),
            self.best as u8
        )
    }
}

pub struct Trainer {
    pub model: TksgModel,
    pub store: ParamStore,
    pub adam: AdamState,
    pub schedule: Schedule,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_val: Option<f64>,
    pub stale: usize,
    pub log: Vec<EpochRecord>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn dropout_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d20f);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

impl Trainer {
    /// Fresh model with parameters initialized from the schedule seed.
    pub fn new(config: ModelConfig, schedule: Schedule) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
        let model = TksgModel::new(&mut store, config, &mut rng)?;
        store.round_to_f32();
        let adam = AdamState::new(&store, AdamConfig::default());
        Ok(Trainer {
            model,
            store,
            adam,
            schedule,
            epoch: 0,
            best_val: None,
            stale: 0,
            log: Vec::new(),
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.schedule.epochs || (self.schedule.patience > 0 && self.stale >= self.schedule.patience)
    }

    /// One pass over `train` followed by validation on `val` (or on `train`
    /// when `val` is empty).
    pub fn run_epoch(&mut self, train: &[TrainSample], val: &[TrainSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(TksgError::Empty("training split"));
        }
        let epoch = self.epoch;
        let seed = self.schedule.seed;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(seed, epoch));
        let p = self.model.config.decoder.dropout;
        let mut sums = [0.0f64; 4];
        for (step, batch) in order.chunks(self.schedule.batch_size.max(1)).enumerate() {
            self.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for (k, &i) in batch.iter().enumerate() {
                let s = &train[i];
                let position = step * self.schedule.batch_size + k;
                let mut dropout = (p > 0.0).then(|| DropoutCtx {
                    p,
                    rng: dropout_rng(seed, epoch, position),
                });
                let mut g = Graph::new(&self.store);
                let lv = self.model.loss(&mut g, &s.input(), &s.targets(), &mut dropout).map_err(|e| match e {
                    TksgError::NonFinite { op } => TksgError::Diverged {
                        epoch,
                        step,
                        detail: format!("non-finite value in {op} on sample {}", s.id),
                    },
                    other => other,
                })?;
                let total = g.value(lv.total).item();
                if !total.is_finite() {
                    return Err(TksgError::Diverged {
                        epoch,
                        step,
                        detail: format!("loss {total} on sample {}", s.id),
                    });
                }
                sums[0] += total;
                sums[1] += g.value(lv.rep).item();
                sums[2] += lv.kd.map_or(0.0, |v| g.value(v).item());
                sums[3] += lv.td.map_or(0.0, |v| g.value(v).item());
                let grads = g.backward(lv.total)?;
                drop(g);
                self.store.accumulate(&grads, scale);
            }
            let schedule = &self.schedule;
            self.adam.step(&mut self.store, |grp| schedule.lr(epoch, grp))?;
            self.store.round_to_f32();
            self.adam.round_to_f32();
        }
        let n = train.len() as f64;
        let val_rep = self.mean_report_loss(if val.is_empty() { train } else { val })?;
        let best = self.best_val.is_none_or(|b| val_rep < b);
        if best {
            self.best_val = Some(val_rep);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let record = EpochRecord {
            epoch,
            lr_encoder: self.schedule.lr(epoch, ParamGroup::Encoder),
            lr_rest: self.schedule.lr(epoch, ParamGroup::Rest),
            loss: sums[0] / n,
            rep: sums[1] / n,
            kd: sums[2] / n,
            td: sums[3] / n,
            val_rep: Some(val_rep),
            best,
        };
        log::info!("{}", record.tsv_line());
        self.log.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Mean teacher-forced report loss without dropout.
    pub fn mean_report_loss(&self, samples: &[TrainSample]) -> Result<f64> {
        mean_report_loss(&self.model, &self.store, samples)
    }

    /// Writes `<name>.json` (metadata) and `<name>.tksg` (parameters, then
    /// Adam moments) under `dir`.
    pub fn save_checkpoint(&self, dir: &Path, name: &str, vocab_fingerprint: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            schedule: self.schedule.clone(),
            vocab_fingerprint: vocab_fingerprint.to_string(),
            epoch: self.epoch,
            adam_step: self.adam.step,
            best_val: self.best_val,
            stale: self.stale,
            params: self.store.iter().map(|(_, p)| (p.name.clone(), p.value.shape().to_vec())).collect(),
            log: self.log.clone(),
        };
        let mut tensors: Vec<&Tensor> = self.store.iter().map(|(_, p)| &p.value).collect();
        tensors.extend(self.adam.m.iter());
        tensors.extend(self.adam.v.iter());
        write_tensors(&dir.join(format!("{name}.tksg")), &tensors)?;
        let path = dir.join(format!("{name}.json"));
        fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(io_err(&path))
    }

    /// Restores a trainer (model, parameters, optimizer, progress) from a
    /// checkpoint written by [`Trainer::save_checkpoint`].
    pub fn load_checkpoint(dir: &Path, name: &str) -> Result<(Self, CheckpointMeta)> {
        let path = dir.join(format!("{name}.json"));
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let mut t = Trainer::new(meta.model.clone(), meta.schedule.clone())?;
        let bundle = dir.join(format!("{name}.tksg"));
        let tensors = read_tensors(&bundle)?;
        let n = t.store.len();
        if tensors.len() != 3 * n || meta.params.len() != n {
            return Err(TksgError::TensorFile {
                path: bundle,
                reason: format!("expected {} tensors for {n} parameters, found {}", 3 * n, tensors.len()),
            });
        }
        let mut it = tensors.into_iter();
        let ids: Vec<_> = t.store.ids().collect();
        for (id, (name, shape)) in ids.iter().zip(&meta.params) {
            let p = t.store.get(*id);
            if &p.name != name || p.value.shape() != shape.as_slice() {
                return Err(TksgError::Invalid(format!(
                    "checkpoint parameter {name} {shape:?} does not match model parameter {} {:?}",
                    p.name,
                    p.value.shape()
                )));
            }
            t.store.set_value(*id, it.next().expect("counted"))?;
        }
        for i in 0..n {
            t.adam.m[i] = it.next().expect("counted");
        }
        for i in 0..n {
            t.adam.v[i] = it.next().expect("counted");
        }
        t.adam.step = meta.adam_step;
        t.epoch = meta.epoch;
        t.best_val = meta.best_val;
        t.stale = meta.stale;
        t.log = meta.log.clone();
        Ok((t, meta))
    }
}

/// Mean teacher-forced report loss without dropout.
pub fn mean_report_loss(model: &TksgModel, store: &ParamStore, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(TksgError::Empty("loss samples"));
    }
    let mut sum = 0.0;
    for s in samples {
        let mut g = Graph::new(store);
        let lv = model.loss(&mut g, &s.input(), &s.targets(), &mut None)?;
        sum += g.value(lv.rep).item();
    }
    Ok(sum / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub vocab_fingerprint: String,
    pub epoch: usize,
    pub adam_step: u64,
    pub best_val: Option<f64>,
    pub stale: usize,
    pub params: Vec<(String, Vec<usize>)>,
    pub log: Vec<EpochRecord>,
}
