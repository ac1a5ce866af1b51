mod common;

use cmlm::corpus::{make_batch, BatchOptions, SentencePair, TokenBatch, Vocab};
use cmlm::encoder::{embed_sentences, init_params, Encoder, EncoderConfig, Pooling, Representation, TOKEN_EMBEDDINGS};
use cmlm::numerics::{ParamSet, Real, Tape, Tensor};
use cmlm::objectives::{cmlm_loss, masked_lm_loss, CmlmVariant};
use proptest::prelude::*;
use rand::Rng;

fn config(n_proj: usize, pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        max_len: 16,
        vocab_size: 30,
        pooling,
        ..common::tiny_config(n_proj)
    }
}

fn params<T: Real>(config: &EncoderConfig, seed: u64) -> ParamSet<T> {
    init_params(config, &mut common::rng(seed)).unwrap()
}

fn pooled<T: Real>(config: &EncoderConfig, params: &ParamSet<T>, seqs: &[Vec<u32>]) -> Vec<Vec<f64>> {
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let mut enc = Encoder::new(config, &bound);
    let batch = TokenBatch::from_sequences(seqs, config.pooling == Pooling::Cls, config.max_len).unwrap();
    let v = enc.sentence_vectors(&batch, Representation::Pooled).unwrap().value();
    (0..v.rows())
        .map(|i| v.row(i).iter().map(|x| x.f64()).collect())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn padding_does_not_change_sentence_vectors(
        short in prop::collection::vec(5u32..30, 1..6),
        long in prop::collection::vec(5u32..30, 6..15),
        pooling in prop_oneof![Just(Pooling::Mean), Just(Pooling::Max), Just(Pooling::Cls)],
        seed in 0u64..1000,
    ) {
        let cfg = config(1, pooling);
        let p = params::<f32>(&cfg, seed);
        let alone = pooled(&cfg, &p, std::slice::from_ref(&short));
        let padded = pooled(&cfg, &p, &[short, long]);
        for (a, b) in alone[0].iter().zip(&padded[0]) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn slot_zero_is_the_sentence_vector() {
    for n in [1, 5, 10, 15, 20] {
        let cfg = config(n, Pooling::Mean);
        let p = params::<f32>(&cfg, n as u64);
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let mut enc = Encoder::new(&cfg, &bound);
        let batch = TokenBatch::from_sequences(&[vec![5u32, 6, 7], vec![9, 10, 11, 12, 13]], false, 16).unwrap();
        let encoded = enc.encode(&batch, None).unwrap();
        let v = enc.pool(&encoded).unwrap();
        let projected = enc.project(v).unwrap().value();
        let v = v.value();
        assert_eq!(projected.shape(), [2, n, 8]);
        for b in 0..2 {
            let slot0 = &projected.data()[b * n * 8..b * n * 8 + 8];
            assert!(
                slot0.iter().zip(v.row(b)).all(|(x, y)| x.to_bits() == y.to_bits()),
                "N={n}"
            );
        }
    }
}

#[test]
fn single_slot_projection_mean_is_pooled() {
    let cfg = config(1, Pooling::Mean);
    let p = params::<f64>(&cfg, 2);
    let vocab = Vocab::build(["alpha beta gamma delta"], 30).unwrap();
    let texts = ["alpha beta", "gamma delta alpha"];
    let a = embed_sentences(&cfg, &p, &vocab, &texts, Representation::Pooled).unwrap();
    let b = embed_sentences(&cfg, &p, &vocab, &texts, Representation::ProjMean).unwrap();
    assert_eq!(a, b);
}

#[test]
fn embedding_is_deterministic_and_batch_independent() {
    let cfg = config(4, Pooling::Mean);
    let p = params::<f32>(&cfg, 9);
    let words = "one two three four five six seven";
    let vocab = Vocab::build([words], 30).unwrap();
    let mut r = common::rng(1);
    let list: Vec<Vec<&str>> = (0..150)
        .map(|_| words.split(' ').filter(|_| r.random_bool(0.6)).collect())
        .collect();
    let texts: Vec<String> = list.iter().filter(|w| !w.is_empty()).map(|w| w.join(" ")).collect();
    for repr in [Representation::Pooled, Representation::ProjMean] {
        let all = embed_sentences(&cfg, &p, &vocab, &texts, repr).unwrap();
        assert_eq!(all, embed_sentences(&cfg, &p, &vocab, &texts, repr).unwrap());
        let one = embed_sentences(&cfg, &p, &vocab, &texts[100..101], repr).unwrap();
        for (a, b) in one[0].iter().zip(&all[100]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn output_layer_is_tied_to_token_embeddings() {
    let cfg = config(3, Pooling::Mean);
    let (v, d) = (cfg.vocab_size, cfg.hidden);
    for (name, shape) in cfg.parameter_shapes() {
        if name != TOKEN_EMBEDDINGS {
            assert!(
                shape != [v, d] && shape != [d, v],
                "{name} looks like a second output matrix"
            );
        }
    }
    // The output logits move when the token embedding table moves.
    let batch = masked_batch(&cfg, 4);
    let loss = |p: &ParamSet<f64>| {
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let mut enc = Encoder::new(&cfg, &bound);
        let zeros = tape.constant(Tensor::zeros(&[2, 3, d]));
        let loss = masked_lm_loss(&mut enc, &batch, zeros, None)
            .unwrap()
            .loss
            .value()
            .data()[0];
        loss
    };
    let p = params::<f64>(&cfg, 4);
    let tape = Tape::new();
    let bound = p.bind(&tape);
    let mut enc = Encoder::new(&cfg, &bound);
    let zeros = tape.constant(Tensor::zeros(&[2, 3, d]));
    let out = masked_lm_loss(&mut enc, &batch, zeros, None).unwrap();
    let grads = bound.collect(&mut tape.backward(out.loss).unwrap());
    assert!(grads
        .get(TOKEN_EMBEDDINGS)
        .unwrap()
        .data()
        .iter()
        .any(|g| g.abs() > 1e-8));
    let mut q = p.clone();
    q.get_mut(TOKEN_EMBEDDINGS).unwrap().data_mut()[7 * d] += 0.1;
    assert_ne!(loss(&p), loss(&q));
}

fn masked_batch(cfg: &EncoderConfig, seed: u64) -> cmlm::corpus::MaskedPairBatch {
    let mut r = common::rng(seed);
    let mut seq = || -> Vec<u32> { (0..r.random_range(3..8)).map(|_| r.random_range(5..30)).collect() };
    let pairs = vec![
        SentencePair {
            s1: seq(),
            s2: seq(),
            swapped: false,
            language: "la".into(),
        },
        SentencePair {
            s1: seq(),
            s2: seq(),
            swapped: true,
            language: "la".into(),
        },
    ];
    let options = BatchOptions {
        num_mask: 2,
        vocab_size: cfg.vocab_size,
        max_len: cfg.max_len,
        prepend_cls: false,
    };
    make_batch(&pairs, options, &mut common::rng(seed + 100)).unwrap()
}

#[test]
fn projection_network_receives_gradient() {
    let cfg = config(5, Pooling::Mean);
    let p = params::<f64>(&cfg, 6);
    let batch = masked_batch(&cfg, 6);
    for variant in [CmlmVariant::Standard, CmlmVariant::Skip] {
        let tape = Tape::new();
        let bound = p.bind(&tape);
        let mut enc = Encoder::new(&cfg, &bound);
        let out = cmlm_loss(&mut enc, &batch, variant).unwrap();
        let grads = bound.collect(&mut tape.backward(out.loss).unwrap());
        for name in ["proj.w1", "proj.w2", "proj.w3", "proj.b3"] {
            let g = grads.get(name).unwrap();
            assert!(
                g.data().iter().any(|x| x.abs() > 1e-10),
                "{variant:?}: {name} has no gradient"
            );
        }
    }
}

#[test]
fn every_prefix_slot_reaches_the_output() {
    let cfg = config(4, Pooling::Mean);
    let p = params::<f64>(&cfg, 8);
    let batch = masked_batch(&cfg, 8);
    let loss_with = |slot: Option<usize>| {
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        let mut enc = Encoder::new(&cfg, &bound);
        let mut prefix = Tensor::zeros(&[2, 4, 8]);
        if let Some(s) = slot {
            // Not a constant vector: layer norm would cancel a uniform shift.
            for b in 0..2 {
                for (k, x) in prefix.data_mut()[b * 32 + s * 8..b * 32 + s * 8 + 8]
                    .iter_mut()
                    .enumerate()
                {
                    *x = 0.3 * k as f64 - 1.0;
                }
            }
        }
        let loss = masked_lm_loss(&mut enc, &batch, tape.constant(prefix), None)
            .unwrap()
            .loss
            .value()
            .data()[0];
        loss
    };
    let base = loss_with(None);
    for slot in 0..4 {
        assert!((loss_with(Some(slot)) - base).abs() > 1e-9, "slot {slot}");
    }
}
