//! Guided decoder: attention cases, causality, cached-step consistency,
//! structural invariants and losses.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tksg_core::decode::GuidedDecoder;
use tksg_core::decoder::{report_loss, total_loss, AttentionTrace, StepTrace, BOS, EOS};
use tksg_core::gradcheck::{check_input, check_params};
use tksg_core::model::{SampleInput, Variant};
use tksg_core::nn::MultiHeadAttention;
use tksg_core::tensor::{self, Tensor};
use tksg_core::{Graph, ParamGroup, ParamStore};

use common::{build, random_image, random_tensor, randomize, tiny_config};

/// Attention block with `q = 0`, identity `v` and `o`, zero biases.
fn identity_attention(d: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "att", d, heads, ParamGroup::Rest, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    store.set_value(mha.q.w, Tensor::zeros(&[d, d])).unwrap();
    store.set_value(mha.v.w, Tensor::eye(d)).unwrap();
    store.set_value(mha.o.w, Tensor::eye(d)).unwrap();
    for b in [mha.q.b, mha.k.b, mha.v.b, mha.o.b] {
        store.set_value(b.unwrap(), Tensor::zeros(&[d])).unwrap();
    }
    (store, mha)
}

#[test]
fn zero_scores_average_all_memory_rows() {
    let (store, mha) = identity_attention(4, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&mut rng, &[5, 4]);
    let e = random_tensor(&mut rng, &[3, 4]);
    let q = random_tensor(&mut rng, &[2, 4]);
    let mem = tensor::concat_rows(&x, &e).unwrap();
    let mean = tensor::mean_pool(&mem).unwrap();
    let mut g = Graph::new(&store);
    let (qv, mv) = (g.constant(q), g.constant(mem));
    let out = mha.forward(&mut g, qv, mv, false).unwrap().out;
    for r in 0..2 {
        for (a, b) in g.value(out).row(r).iter().zip(mean.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn single_memory_row_is_returned_for_any_query() {
    let (mut store, mha) = identity_attention(4, 2);
    randomize_q(&mut store, &mha);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let row = random_tensor(&mut rng, &[1, 4]);
    for _ in 0..5 {
        let q = random_tensor(&mut rng, &[3, 4]);
        let mut g = Graph::new(&store);
        let (qv, mv) = (g.constant(q), g.constant(row.clone()));
        let out = mha.forward(&mut g, qv, mv, false).unwrap().out;
        for r in 0..3 {
            for (a, b) in g.value(out).row(r).iter().zip(row.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

fn randomize_q(store: &mut ParamStore, mha: &MultiHeadAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = mha.d_model;
    store.set_value(mha.q.w, random_tensor(&mut rng, &[d, d])).unwrap();
    store.set_value(mha.k.w, random_tensor(&mut rng, &[d, d])).unwrap();
}

struct Fixture {
    store: ParamStore,
    model: tksg_core::model::TksgModel,
    x: Tensor,
    e: Tensor,
    l: Tensor,
}

fn fixture(seed: u64, vocab: usize) -> Fixture {
    let (mut store, model) = build(tiny_config(Variant::Tksg, vocab), seed);
    randomize(&mut store, seed + 100, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    Fixture {
        store,
        model,
        x: random_tensor(&mut rng, &[4, 8]),
        e: random_tensor(&mut rng, &[2, 8]),
        l: random_tensor(&mut rng, &[8]),
    }
}

fn hidden(f: &Fixture, inputs: &[usize], keywords: Option<&Tensor>) -> Tensor {
    let mut g = Graph::new(&f.store);
    let x = g.constant(f.x.clone());
    let e = keywords.map(|k| g.constant(k.clone()));
    let l = g.constant(f.l.clone());
    let emb = f.model.decoder.input_embedding(&mut g, inputs, Some(l)).unwrap();
    let h = f.model.decoder.forward(&mut g, emb, x, e, &mut None, None).unwrap();
    g.value(h).clone()
}

#[test]
fn empty_keyword_set_reduces_to_plain_cross_attention() {
    let f = fixture(1, 11);
    let inputs = [BOS, 5, 6];
    let none = hidden(&f, &inputs, None);
    let empty = hidden(&f, &inputs, Some(&Tensor::zeros(&[0, 8])));
    assert_eq!(none, empty);
    assert_ne!(none, hidden(&f, &inputs, Some(&f.e)));
}

#[test]
fn changing_a_later_input_leaves_earlier_outputs_bitwise_equal() {
    for seed in 0..5 {
        let f = fixture(seed, 11);
        let a = hidden(&f, &[BOS, 5, 6, 7], Some(&f.e));
        let b = hidden(&f, &[BOS, 5, 6, 9], Some(&f.e));
        assert_eq!(a.shape(), &[4, 8]);
        for r in 0..3 {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_ne!(a.row(3), b.row(3));
    }
}

#[test]
fn cached_steps_match_full_forward() {
    for seed in 0..10 {
        let f = fixture(seed, 11);
        let gold = [5, 8, 4, 9, EOS];
        let full = {
            let mut g = Graph::new(&f.store);
            let x = g.constant(f.x.clone());
            let e = g.constant(f.e.clone());
            let l = g.constant(f.l.clone());
            let z = f
                .model
                .decoder
                .teacher_forced_logits(&mut g, &gold, x, Some(e), Some(l), &mut None, None)
                .unwrap();
            g.value(z).clone()
        };
        let mut state = f.model.decoder.start(&f.store, &f.x, Some(&f.e), Some(&f.l)).unwrap();
        let mut prev = BOS;
        for (t, &tok) in gold.iter().enumerate() {
            let step = f.model.decoder.step(&f.store, &mut state, prev, None).unwrap();
            for (a, b) in step.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-10, "seed {seed} position {t}");
            }
            prev = tok;
        }
    }
}

#[test]
fn stack_gradient_on_two_tokens() {
    for seed in 0..3 {
        let f = fixture(seed, 11);
        let gold = [6, EOS];
        let dec_ids: Vec<_> = f.store.iter().filter(|(_, p)| p.name.starts_with("dec.")).map(|(id, _)| id).collect();
        let r = check_params(&f.store, Some(&dec_ids), 8, 1e-4, |g| {
            let x = g.constant(f.x.clone());
            let e = g.constant(f.e.clone());
            let l = g.constant(f.l.clone());
            let z = f.model.decoder.teacher_forced_logits(g, &gold, x, Some(e), Some(l), &mut None, None)?;
            report_loss(g, z, &gold)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-5, "{}", r.worst);
        // gradient with respect to the topic vector
        let r = check_input(&f.store, &f.l, 1e-4, |g, l| {
            let x = g.constant(f.x.clone());
            let z = f.model.decoder.teacher_forced_logits(g, &gold, x, None, Some(l), &mut None, None)?;
            report_loss(g, z, &gold)
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-5, "{}", r.worst);
    }
}

#[test]
fn zero_head_gives_uniform_predictions_and_ln_v_loss() {
    for vocab in [5, 11, 40] {
        let (store, model) = build(tiny_config(Variant::Tksg, vocab), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let visual = random_image(&mut rng, 8, 8);
        let retrieved = random_tensor(&mut rng, &[3, 6]);
        let input = SampleInput { visual: &visual, retrieved: Some(&retrieved) };
        let mut g = Graph::new(&store);
        let gv = model.guidance(&mut g, &input, &mut None).unwrap();
        let gold = [4, 4, EOS];
        let z = model
            .decoder
            .teacher_forced_logits(&mut g, &gold, gv.x, gv.keywords, gv.topic_vector, &mut None, None)
            .unwrap();
        let l = report_loss(&mut g, z, &gold).unwrap();
        assert!((g.value(l).item() - (vocab as f64).ln()).abs() <= 1e-4);
        let probs = tensor::softmax(g.value(z), 1).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 1.0 / vocab as f64).abs() < 1e-12));
    }
}

#[test]
fn report_loss_matches_loop_oracle_and_total_loss_sums() {
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..30 {
        let t = rng.gen_range(1..6);
        let logits = random_tensor(&mut rng, &[t, 7]).map(|v| 4.0 * v);
        let gold: Vec<usize> = (0..t).map(|_| rng.gen_range(0..7)).collect();
        let mut want = 0.0;
        for (i, &y) in gold.iter().enumerate() {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want -= (row[y].exp() / z).ln();
        }
        want /= t as f64;
        let mut g = Graph::new(&store);
        let z = g.constant(logits);
        let l = report_loss(&mut g, z, &gold).unwrap();
        assert!((g.value(l).item() - want).abs() <= 1e-6);
    }
    let mut g = Graph::new(&store);
    let (a, b, c) = (g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(2.0)), g.constant(Tensor::scalar(3.0)));
    let all = total_loss(&mut g, a, Some(b), Some(c)).unwrap();
    assert_eq!(g.value(all).item(), 6.0);
    let no_kd = total_loss(&mut g, a, None, Some(c)).unwrap();
    assert_eq!(g.value(all).item() - g.value(no_kd).item(), 2.0);
}

#[test]
fn attention_rows_sum_to_one_in_training_and_decoding() {
    for seed in 0..5 {
        let f = fixture(seed, 11);
        let mut trace = AttentionTrace::default();
        let mut g = Graph::new(&f.store);
        let x = g.constant(f.x.clone());
        let e = g.constant(f.e.clone());
        let l = g.constant(f.l.clone());
        f.model
            .decoder
            .teacher_forced_logits(&mut g, &[5, 6, 7, EOS], x, Some(e), Some(l), &mut None, Some(&mut trace))
            .unwrap();
        assert_eq!(trace.self_attn.len(), 4);
        for p in trace.self_attn.iter().chain(&trace.cross_attn) {
            let p = g.value(*p);
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
        let start = f.model.decoder.start(&f.store, &f.x, Some(&f.e), Some(&f.l)).unwrap();
        let mut st = StepTrace::default();
        GuidedDecoder::new(&f.model.decoder, &f.store, start).greedy_traced(&mut st).unwrap();
        assert!(!st.attention_row_sums.is_empty());
        assert!(st.attention_row_sums.iter().all(|s| (s - 1.0).abs() <= 1e-6));
        assert!(!st.topic.is_empty());
        assert!(st.topic.iter().all(|t| t == f.l.data()));
    }
}

#[test]
fn topic_vector_shifts_every_position_before_layer_norm() {
    let f = fixture(3, 11);
    let mut g = Graph::new(&f.store);
    let zero = g.constant(Tensor::zeros(&[8]));
    let with_zero = f.model.decoder.input_embedding(&mut g, &[BOS, 5], Some(zero)).unwrap();
    let without = f.model.decoder.input_embedding(&mut g, &[BOS, 5], None).unwrap();
    assert_eq!(g.value(with_zero), g.value(without));
    let same = f.model.decoder.input_embedding(&mut g, &[5, 5], None).unwrap();
    assert_ne!(g.value(same).row(0), g.value(same).row(1));
    assert!(f.model.decoder.input_embedding(&mut g, &[BOS; 7], None).is_err());
}
