mod common;

use cmlm::corpus::{MaskedPairBatch, TokenBatch};
use cmlm::encoder::{init_params, Encoder, EncoderConfig, Representation, TOKEN_EMBEDDINGS};
use cmlm::numerics::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState, ParamSet, Tape, Tensor};
use cmlm::objectives::{
    bitext_directions, bitext_loss, cmlm_loss, combined_loss, masked_lm_loss, nli_features, nli_loss, CmlmVariant,
};
use proptest::prelude::*;
use rand::Rng;

fn rows(r: &mut impl Rng, b: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| (0..d).map(|_| r.random_range(-scale..scale)).collect())
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_f64(&[rows.len(), rows[0].len()], &rows.concat()).unwrap()
}

/// Both directions of the loss for explicit sentence vectors.
fn directions(s: &[Vec<f64>], t: &[Vec<f64>], margin: f64) -> (f64, f64) {
    let tape = Tape::new();
    let scores = tape.constant(tensor(s)).matmul_t(tape.constant(tensor(t))).unwrap();
    let (a, b) = bitext_directions(scores, margin).unwrap();
    (a.item(), b.item())
}

fn score_directions(scores: &[f64], b: usize, margin: f64) -> (f64, f64) {
    let tape = Tape::new();
    let (a, c) = bitext_directions(tape.constant(Tensor::from_f64(&[b, b], scores).unwrap()), margin).unwrap();
    (a.item(), c.item())
}

proptest! {
    #[test]
    fn bitext_matches_scalar_oracle(seed in any::<u64>(), b in 2usize..10, d in 1usize..8, margin in 0.0f64..1.0) {
        let mut r = common::rng(seed);
        let (s, t) = (rows(&mut r, b, d, 2.0), rows(&mut r, b, d, 2.0));
        let (ls, lt) = directions(&s, &t, margin);
        let (os, ot) = common::bitext_oracle(&s, &t, margin);
        prop_assert!((ls - os).abs() < 1e-9 && (lt - ot).abs() < 1e-9);
        prop_assert!(ls >= 0.0 && lt >= 0.0);
        let tape = Tape::new();
        let total = bitext_loss(tape.constant(tensor(&s)), tape.constant(tensor(&t)), margin).unwrap().item();
        prop_assert!((total - os - ot).abs() < 1e-9);
    }

    #[test]
    fn swapping_sides_swaps_directions(seed in any::<u64>(), b in 2usize..8, margin in 0.0f64..1.0) {
        let mut r = common::rng(seed);
        let (s, t) = (rows(&mut r, b, 4, 1.5), rows(&mut r, b, 4, 1.5));
        let (ls, lt) = directions(&s, &t, margin);
        let (ls2, lt2) = directions(&t, &s, margin);
        prop_assert!((ls - lt2).abs() < 1e-12 && (lt - ls2).abs() < 1e-12);
    }

    #[test]
    fn raising_a_positive_lowers_both_directions(seed in any::<u64>(), b in 2usize..8, bump in 0.01f64..3.0) {
        let mut r = common::rng(seed);
        let scores: Vec<f64> = (0..b * b).map(|_| r.random_range(-2.0..2.0)).collect();
        let i = r.random_range(0..b);
        let mut raised = scores.clone();
        raised[i * b + i] += bump;
        let (a0, b0) = score_directions(&scores, b, 0.3);
        let (a1, b1) = score_directions(&raised, b, 0.3);
        prop_assert!(a1 < a0 && b1 < b0);
    }
}

#[test]
fn reference_values() {
    let (a, b) = score_directions(&[0.7; 9], 3, 0.0);
    assert!((a + b - 2.0 * 3f64.ln()).abs() < 1e-12);
    let (a, b) = score_directions(&[0.4; 4], 2, 0.0);
    assert!((a + b - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let identity = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let (a, b) = directions(&identity, &identity, 0.3);
    assert!((a + b - 0.806_372_1).abs() < 1e-6, "{}", a + b);
}

fn config(n_proj: usize) -> EncoderConfig {
    EncoderConfig {
        max_len: 12,
        vocab_size: 24,
        ..common::tiny_config(n_proj)
    }
}

fn pair_batch(cfg: &EncoderConfig, seed: u64) -> MaskedPairBatch {
    let mut r = common::rng(seed);
    let mut seq = || -> Vec<u32> { (0..r.random_range(3..9)).map(|_| r.random_range(5..24)).collect() };
    let pairs: Vec<_> = (0..3)
        .map(|_| cmlm::corpus::SentencePair {
            s1: seq(),
            s2: seq(),
            swapped: false,
            language: "la".into(),
        })
        .collect();
    let options = cmlm::corpus::BatchOptions {
        num_mask: 3,
        vocab_size: cfg.vocab_size,
        max_len: cfg.max_len,
        prepend_cls: false,
    };
    cmlm::corpus::make_batch(&pairs, options, &mut common::rng(seed ^ 0xff)).unwrap()
}

fn loss_value(cfg: &EncoderConfig, p: &ParamSet<f64>, batch: &MaskedPairBatch, variant: CmlmVariant) -> f64 {
    let tape = Tape::new();
    let bound = p.bind_frozen(&tape);
    let mut enc = Encoder::new(cfg, &bound);
    let loss = cmlm_loss(&mut enc, batch, variant).unwrap().loss.item();
    loss
}

#[test]
fn unconditioned_ignores_the_first_sentence() {
    let cfg = config(3);
    let p: ParamSet<f64> = init_params(&cfg, &mut common::rng(1)).unwrap();
    let batch = pair_batch(&cfg, 1);
    let mut other = batch.clone();
    other.s1 = TokenBatch::from_sequences(&[vec![7u32, 8], vec![9, 10, 11], vec![12]], false, 12).unwrap();
    let u = loss_value(&cfg, &p, &batch, CmlmVariant::Unconditioned);
    assert_eq!(u, loss_value(&cfg, &p, &other, CmlmVariant::Unconditioned));
    assert_ne!(
        loss_value(&cfg, &p, &batch, CmlmVariant::Standard),
        loss_value(&cfg, &p, &other, CmlmVariant::Standard)
    );
    // An all-zero prefix through the general entry point is the same loss.
    let tape = Tape::new();
    let bound = p.bind_frozen(&tape);
    let mut enc = Encoder::new(&cfg, &bound);
    let zeros = tape.constant(Tensor::zeros(&[3, 3, 8]));
    assert_eq!(masked_lm_loss(&mut enc, &batch, zeros, None).unwrap().loss.item(), u);
}

#[test]
fn combined_gradient_is_linear() {
    let cfg = config(3);
    let p: ParamSet<f64> = init_params(&cfg, &mut common::rng(2)).unwrap();
    let batch = pair_batch(&cfg, 2);
    let src = TokenBatch::from_sequences(&[vec![5u32, 6, 7], vec![8, 9], vec![10, 11, 12, 13]], false, 12).unwrap();
    let tgt = TokenBatch::from_sequences(&[vec![14u32, 15], vec![16, 17, 18], vec![19]], false, 12).unwrap();
    let alpha = 0.2;
    let grads = |which: u8| -> ParamSet<f64> {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let mut enc = Encoder::new(&cfg, &bound);
        let c = cmlm_loss(&mut enc, &batch, CmlmVariant::Standard).unwrap().loss;
        let s = enc.sentence_vectors(&src, Representation::Pooled).unwrap();
        let t = enc.sentence_vectors(&tgt, Representation::Pooled).unwrap();
        let b = bitext_loss(s, t, 0.3).unwrap();
        let out = match which {
            0 => c,
            1 => b,
            _ => combined_loss(c, b, alpha).unwrap(),
        };
        bound.collect(&mut tape.backward(out).unwrap())
    };
    let (gc, gb, gj) = (grads(0), grads(1), grads(2));
    for (name, g) in gj.iter() {
        let (a, b) = (gc.get(name).unwrap(), gb.get(name).unwrap());
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(g.data()) {
            assert!((x + alpha * y - z).abs() < 1e-10, "{name}");
        }
    }
}

/// Multiclass perceptron; returns training accuracy after `epochs`.
fn perceptron(features: &[Vec<f64>], labels: &[usize], epochs: usize) -> f64 {
    let d = features[0].len();
    let mut w = vec![vec![0.0; d + 1]; 3];
    let score = |w: &[f64], x: &[f64]| w[d] + common::dot(&w[..d], x);
    let predict = |w: &[Vec<f64>], x: &[f64]| {
        (0..3)
            .max_by(|&a, &b| score(&w[a], x).total_cmp(&score(&w[b], x)))
            .unwrap()
    };
    for _ in 0..epochs {
        let mut mistakes = 0;
        for (x, &y) in features.iter().zip(labels) {
            let p = predict(&w, x);
            if p != y {
                mistakes += 1;
                for k in 0..d {
                    w[y][k] += x[k];
                    w[p][k] -= x[k];
                }
                w[y][d] += 1.0;
                w[p][d] -= 1.0;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| predict(&w, x) == y)
        .count() as f64
        / labels.len() as f64
}

#[test]
fn nli_head_fits_separable_data() {
    let (n, d) = (200, 4);
    let mut r = common::rng(12);
    let truth: Vec<Vec<f64>> = rows(&mut r, 3, 4 * d, 1.0);
    let (mut us, mut vs, mut feats, mut labels) = (vec![], vec![], vec![], vec![]);
    while labels.len() < n {
        let (u, v) = (rows(&mut r, 1, d, 1.0).remove(0), rows(&mut r, 1, d, 1.0).remove(0));
        let tape = Tape::new();
        let f = nli_features(
            tape.constant(tensor(std::slice::from_ref(&u))),
            tape.constant(tensor(std::slice::from_ref(&v))),
        )
        .unwrap()
        .value()
        .data()
        .to_vec();
        let mut s: Vec<(f64, usize)> = truth.iter().map(|w| common::dot(w, &f)).zip(0..).collect();
        s.sort_by(|a, b| b.0.total_cmp(&a.0));
        if s[0].0 - s[1].0 < 0.2 {
            continue;
        }
        us.push(u);
        vs.push(v);
        feats.push(f);
        labels.push(s[0].1);
    }
    assert_eq!(perceptron(&feats, &labels, 2000), 1.0, "data should be separable");

    let mut params = ParamSet::new();
    params.insert(TOKEN_EMBEDDINGS, Tensor::<f64>::zeros(&[1, d]));
    params.insert("nli.w", Tensor::zeros(&[4 * d, 3]));
    params.insert("nli.b", Tensor::zeros(&[3]));
    let cfg = EncoderConfig { hidden: d, ..config(1) };
    let opt = OptimizerConfig {
        kind: OptimizerKind::Adam,
        lr: 0.05,
        ..OptimizerConfig::default()
    };
    let mut state = OptimizerState::new(opt, &params);
    let mut acc = 0.0;
    for _ in 0..1500 {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let enc = Encoder::new(&cfg, &bound);
        let out = nli_loss(&enc, tape.constant(tensor(&us)), tape.constant(tensor(&vs)), &labels).unwrap();
        acc = out.accuracy;
        let grads = bound.collect(&mut tape.backward(out.loss).unwrap());
        optimizer_step(&mut params, &grads, &mut state).unwrap();
    }
    assert!(acc >= 0.99, "training accuracy {acc}");
}
