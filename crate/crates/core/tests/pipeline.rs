//! End-to-end library pipeline: train run, generation, evaluation.

mod common;

use std::fs;

use tksg_core::corpus::{Split, SyntheticSpec, SPEC_FILE};
use tksg_core::pipeline::{
    evaluate_reports, generate_reports, load_model, read_reports, train_run, write_reports, DataBundle, LabelSource,
    BEST_CHECKPOINT, CONFIG_FILE, LOSS_LOG,
};

#[test]
fn train_generate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::synthetic_run(dir.path(), 20, 4, 6, 21);
    let data = DataBundle::load(&config).unwrap();
    let out = train_run(&config, &data).unwrap();
    assert!(out.run_dir.ends_with(format!("{}-s21", config.hash())));
    for f in [CONFIG_FILE, LOSS_LOG, "best.json", "best.tksg", "last.json", "last.tksg"] {
        assert!(out.run_dir.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(out.run_dir.join(LOSS_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);

    // rerunning a finished run resumes and does nothing
    let again = train_run(&config, &data).unwrap();
    assert_eq!(again.trainer.epoch, 2);
    assert_eq!(again.trainer.log, out.trainer.log);

    let trainer = load_model(&out.run_dir, BEST_CHECKPOINT, &data.vocab).unwrap();
    let test = data.samples(Split::Test, &config).unwrap();
    let beam1 = generate_reports(&trainer, &data.vocab, &test, 1).unwrap();
    for (s, (id, text)) in test.iter().zip(&beam1) {
        let prepared = trainer.model.prepare(&trainer.store, &s.input()).unwrap();
        let greedy = trainer.model.generate_greedy(&trainer.store, &prepared).unwrap();
        let want = tksg_core::corpus::detokenize(&data.vocab.decode(&greedy.tokens));
        assert_eq!((id, text), (&s.id, &want));
    }

    let reports = generate_reports(&trainer, &data.vocab, &test, 3).unwrap();
    let path = dir.path().join("reports.txt");
    write_reports(&path, &reports).unwrap();
    assert_eq!(read_reports(&path).unwrap(), reports);
    let refs: Vec<_> = data.split(Split::Test).cloned().collect();
    let spec = SyntheticSpec::load(&data.corpus_dir.join(SPEC_FILE)).unwrap();
    let m = evaluate_reports(&reports, &refs, Some(LabelSource::Rules(&spec))).unwrap();
    assert!(m.ce_f1.is_some());
    for v in [m.bleu1, m.bleu4, m.meteor, m.rouge_l] {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn identity_evaluation_and_id_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::synthetic_run(dir.path(), 10, 0, 8, 22);
    let data = DataBundle::load(&config).unwrap();
    let refs: Vec<_> = data.split(Split::Test).cloned().collect();
    let perfect: Vec<(String, String)> = refs.iter().map(|r| (r.id.clone(), r.report.clone())).collect();
    let spec = SyntheticSpec::load(&data.corpus_dir.join(SPEC_FILE)).unwrap();
    let m = evaluate_reports(&perfect, &refs, Some(LabelSource::Rules(&spec))).unwrap();
    assert_eq!((m.bleu1, m.bleu4, m.rouge_l), (1.0, 1.0, 1.0));
    assert_eq!((m.ce_precision, m.ce_recall, m.ce_f1), (Some(1.0), Some(1.0), Some(1.0)));

    let mut wrong = perfect.clone();
    wrong[0].0 = "nope".into();
    let err = evaluate_reports(&wrong, &refs, None).unwrap_err().to_string();
    assert!(err.contains("nope") && err.contains(&refs[0].id), "{err}");
}

#[test]
fn runs_are_deterministic_and_vocab_checked() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::synthetic_run(dir.path(), 12, 2, 0, 23);
    let data = DataBundle::load(&config).unwrap();
    let a = train_run(&config, &data).unwrap();
    config.out_dir = dir.path().join("runs2");
    let b = train_run(&config, &data).unwrap();
    for f in ["best.tksg", "last.tksg", LOSS_LOG] {
        assert_eq!(fs::read(a.run_dir.join(f)).unwrap(), fs::read(b.run_dir.join(f)).unwrap(), "{f}");
    }
    let other = tksg_core::corpus::Vocabulary::build([["x", "y"]], 1).unwrap();
    let err = load_model(&a.run_dir, BEST_CHECKPOINT, &other).err().unwrap().to_string();
    assert!(err.contains("vocabulary"), "{err}");
}

#[test]
fn mismatched_concept_count_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = common::synthetic_run(dir.path(), 10, 0, 2, 24);
    config.n_w = 31;
    let err = DataBundle::load(&config).err().unwrap().to_string();
    assert!(err.contains("n_w"), "{err}");
}
