//! Run configuration: data paths, model dimensions, guidance sizes, variant,
//! optimizer schedule and seed. Stored as JSON; the run directory is named
//! by a hash of everything except the output root and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{io_err, Result, TksgError};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub concepts: PathBuf,
    /// Report embedding tensor backing the retrieval index (`.ids` sidecar).
    pub index: PathBuf,
    /// Image-side query embeddings, one row per sample id.
    pub queries: PathBuf,
    pub stopwords: Option<PathBuf>,
    pub out_dir: PathBuf,

    // model
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub d_b: usize,
    pub d_h: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub t_max: usize,
    pub dropout: f64,
    pub sg_layers: Option<Vec<usize>>,

    // guidance
    pub n_r: usize,
    pub n_w: usize,
    pub n_k: usize,
    pub variant: Variant,
    pub min_count: usize,

    // optimization
    pub lr_encoder: f64,
    pub lr_rest: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub beam: usize,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    /// Desk-scale profile.
    fn default() -> Self {
        RunConfig {
            corpus: "data/corpus.jsonl".into(),
            vocab: "data/vocab.tsv".into(),
            concepts: "data/concepts.tsv".into(),
            index: "data/index.tksg".into(),
            queries: "data/query_emb.tksg".into(),
            stopwords: None,
            out_dir: "runs".into(),
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            d_b: 64,
            d_h: 64,
            enc_layers: 2,
            enc_heads: 4,
            dec_layers: 3,
            heads: 8,
            ff_mult: 2,
            t_max: 60,
            dropout: 0.1,
            sg_layers: None,
            n_r: 30,
            n_w: 100,
            n_k: 20,
            variant: Variant::Tksg,
            min_count: 1,
            lr_encoder: 1e-3,
            lr_rest: 1e-3,
            decay: 0.8,
            epochs: 30,
            batch_size: 8,
            patience: 5,
            beam: 3,
            seed: None,
        }
    }
}

impl RunConfig {
    /// Full-scale reference profile: 512-wide features, 3 decoder layers of
    /// 8 heads, learning rates 2e-4 (encoder) and 5e-4 (rest).
    pub fn reference() -> Self {
        RunConfig {
            image_height: 224,
            image_width: 224,
            patch_size: 16,
            d_b: 512,
            d_h: 512,
            enc_layers: 4,
            enc_heads: 8,
            ff_mult: 4,
            lr_encoder: 2e-4,
            lr_rest: 5e-4,
            ..RunConfig::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(io_err(path))
    }

    /// Overlays `key = value` pairs (values in JSON syntax, bare strings
    /// accepted) and re-validates field names and types.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        let map = v.as_object_mut().expect("config serializes to an object");
        for (k, raw) in pairs {
            if !map.contains_key(k) {
                return Err(TksgError::Invalid(format!("unknown config field {k:?}")));
            }
            let val = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            map.insert(k.to_string(), val);
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| TksgError::Invalid("a seed is mandatory (set \"seed\" or pass --seed)".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("patch_size", self.patch_size),
            ("d_b", self.d_b),
            ("d_h", self.d_h),
            ("dec_layers", self.dec_layers),
            ("heads", self.heads),
            ("enc_heads", self.enc_heads),
            ("ff_mult", self.ff_mult),
            ("t_max", self.t_max),
            ("n_r", self.n_r),
            ("n_w", self.n_w),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("beam", self.beam),
            ("min_count", self.min_count),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(TksgError::Invalid(format!("{name} must be positive")));
        }
        if self.n_k > self.n_w {
            return Err(TksgError::Invalid(format!("n_k = {} exceeds n_w = {}", self.n_k, self.n_w)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TksgError::Invalid(format!("decay {} not in (0, 1]", self.decay)));
        }
        if !self.d_b.is_multiple_of(self.enc_heads) {
            return Err(TksgError::Invalid(format!("d_b {} not divisible by enc_heads {}", self.d_b, self.enc_heads)));
        }
        Ok(())
    }

    /// Hex digest of the configuration without `out_dir` and `seed`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.seed = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<out_dir>/<hash>-s<seed>`.
    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir.join(format!("{}-s{}", self.hash(), self.seed()?)))
    }

    /// Model layout for a given vocabulary size and retrieval width.
    pub fn model_config(&self, vocab_size: usize, d_e: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                image_height: self.image_height,
                image_width: self.image_width,
                patch_size: self.patch_size,
                d_b: self.d_b,
                d_h: self.d_h,
                layers: self.enc_layers,
                heads: self.enc_heads,
                ff_mult: self.ff_mult,
            },
            decoder: DecoderConfig {
                layers: self.dec_layers,
                heads: self.heads,
                d_h: self.d_h,
                t_max: self.t_max,
                ff_mult: self.ff_mult,
                dropout: self.dropout,
                sg_layers: self.sg_layers.clone(),
            },
            d_e,
            n_w: self.n_w,
            n_k: self.n_k,
            vocab_size,
            variant: self.variant,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let c = RunConfig {
            seed: Some(3),
            ..RunConfig::default()
        };
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>("{\"bogus\": 1}").is_err());
    }

    #[test]
    fn overrides_and_hash() {
        let c = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        let d = c.with_overrides([("d_h", "32"), ("variant", "BASE"), ("out_dir", "elsewhere")]).unwrap();
        assert_eq!(d.d_h, 32);
        assert_eq!(d.variant, Variant::Base);
        assert_ne!(c.hash(), d.hash());
        let e = c.with_overrides([("out_dir", "x"), ("seed", "9")]).unwrap();
        assert_eq!(c.hash(), e.hash());
        assert!(e.run_dir().unwrap().ends_with(format!("{}-s9", c.hash())));
        assert!(c.with_overrides([("nope", "1")]).is_err());
        assert!(c.with_overrides([("d_h", "\"wide\"")]).is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(RunConfig::default().validate().is_err());
        let c = RunConfig {
            seed: Some(0),
            ..RunConfig::default()
        };
        c.validate().unwrap();
    }
}
