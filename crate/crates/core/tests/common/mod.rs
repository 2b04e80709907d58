//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tksg_core::decoder::DecoderConfig;
use tksg_core::encoder::{EncoderConfig, ImageTensor, VisualInput};
use tksg_core::model::{ModelConfig, TksgModel, Variant};
use tksg_core::tensor::Tensor;
use tksg_core::ParamStore;

pub fn tiny_config(variant: Variant, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            image_height: 8,
            image_width: 8,
            patch_size: 4,
            d_b: 8,
            d_h: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
        },
        decoder: DecoderConfig {
            layers: 2,
            heads: 2,
            d_h: 8,
            t_max: 6,
            ff_mult: 2,
            dropout: 0.0,
            sg_layers: None,
        },
        d_e: 6,
        n_w: 5,
        n_k: 2,
        vocab_size,
        variant,
    }
}

pub fn build(config: ModelConfig, seed: u64) -> (ParamStore, TksgModel) {
    let mut store = ParamStore::new();
    let model = TksgModel::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (store, model)
}

/// Redraws every parameter uniformly in `(-scale, scale)`.
pub fn randomize(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        store.set_value(id, Tensor::new(shape, data).unwrap()).unwrap();
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> VisualInput {
    let px = (0..h * w).map(|_| rng.gen::<f64>()).collect();
    VisualInput::Image(ImageTensor::new(Tensor::new(vec![h, w, 1], px).unwrap()).unwrap())
}

/// Writes a small synthetic dataset (corpus, vocabularies, index) under
/// `dir` and returns a matching tiny run configuration.
pub fn synthetic_run(dir: &std::path::Path, train: usize, val: usize, test: usize, seed: u64) -> tksg_core::config::RunConfig {
    use tksg_core::corpus::{generate_synthetic, SyntheticSpec, CORPUS_FILE, QUERY_EMB_FILE};
    use tksg_core::keyword::StopWords;
    use tksg_core::pipeline::{build_train_index, build_vocabularies};

    let spec = SyntheticSpec { train, val, test, ..SyntheticSpec::default() };
    let corpus = generate_synthetic(&spec, seed).unwrap();
    let data = dir.join("data");
    corpus.write(&data).unwrap();
    let n_w = 30;
    let (vocab, concepts) = build_vocabularies(&corpus.records, 1, n_w, &StopWords::builtin()).unwrap();
    vocab.save(&data.join("vocab.tsv")).unwrap();
    concepts.save(&data.join("concepts.tsv")).unwrap();
    build_train_index(&corpus.records, &corpus.report_embeddings)
        .unwrap()
        .save(&data.join("index.tksg"))
        .unwrap();
    tksg_core::config::RunConfig {
        corpus: data.join(CORPUS_FILE),
        vocab: data.join("vocab.tsv"),
        concepts: data.join("concepts.tsv"),
        index: data.join("index.tksg"),
        queries: data.join(QUERY_EMB_FILE),
        out_dir: dir.join("runs"),
        d_b: 16,
        d_h: 16,
        enc_layers: 1,
        enc_heads: 2,
        dec_layers: 1,
        heads: 2,
        n_r: 4,
        n_w,
        n_k: 5,
        epochs: 2,
        batch_size: 4,
        beam: 2,
        seed: Some(seed),
        ..tksg_core::config::RunConfig::default()
    }
}
