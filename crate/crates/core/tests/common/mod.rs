//! Fixtures and independent reference implementations shared by the
//! integration tests and the acceptance suite.
#![allow(dead_code)]

use std::rc::Rc;

use cmlm::corpus::{generate, make_batch, BatchOptions, SentencePair, SynthConfig, TokenBatch};
use cmlm::encoder::{init_params_with_std, Encoder, EncoderConfig, Pooling, Representation};
use cmlm::evalkit::{EmbeddingRow, EmbeddingSet};
use cmlm::numerics::{check_gradients, check_gradients_at, BoundParams, OptimizerConfig, ParamSet, Tape, Tensor, Var};
use cmlm::objectives::{bitext_loss, cmlm_loss, nli_loss, CmlmVariant};
use cmlm::trainer::{build_vocab, Strategy, TrainData, TrainPlan};
use cmlm::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Values of magnitude in [0.1, 1] with random sign, away from kinks at 0.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Distinct values spaced 0.1 apart in random order, so maxima are unique
/// and stay put under a finite-difference nudge.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    data.shuffle(rng);
    Tensor::from_f64(shape, &data).unwrap()
}

fn keep_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<bool> {
    let mut keep: Vec<bool> = (0..rows * cols).map(|_| rng.random_bool(0.7)).collect();
    for r in 0..rows {
        let c = rng.random_range(0..cols);
        keep[r * cols + c] = true;
    }
    keep
}

type OpFn<'a> = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;
type LossFn = dyn for<'t> Fn(&BoundParams<'t, f64>) -> Result<Var<'t, f64>>;

/// `Σ w ⊙ out` with weights fixed by `seed`, so every output element
/// contributes a distinct amount to the checked scalar.
fn weighted_sum<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = uniform(&mut rng(seed ^ 0x5eed), &out.shape());
    out.mul(tape.constant(w))?.sum()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

/// Maximum relative gradient error of every differentiable op for one seed,
/// on random shapes up to 8×8.
pub fn op_gradient_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let (m, k, n) = (dim(&mut r), dim(&mut r), dim(&mut r));
    let g = r.random_range(1..=3);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor<f64>>, f: &OpFn<'_>| {
        let reports = check_gradients(|tape, v| weighted_sum(tape, f(tape, v)?, seed), &inputs, FD_STEP)
            .unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name, reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)));
    };

    check(
        "matmul",
        vec![uniform(&mut r, &[m, k]), uniform(&mut r, &[k, n])],
        &|_, v| v[0].matmul(v[1]),
    );
    check(
        "matmul_t",
        vec![uniform(&mut r, &[m, k]), uniform(&mut r, &[n, k])],
        &|_, v| v[0].matmul_t(v[1]),
    );
    check(
        "bmm",
        vec![uniform(&mut r, &[g, m, k]), uniform(&mut r, &[g, k, n])],
        &|_, v| v[0].bmm(v[1], false),
    );
    check(
        "bmm_t",
        vec![uniform(&mut r, &[g, m, k]), uniform(&mut r, &[g, n, k])],
        &|_, v| v[0].bmm(v[1], true),
    );
    check(
        "add",
        vec![uniform(&mut r, &[m, n]), uniform(&mut r, &[m, n])],
        &|_, v| v[0].add(v[1]),
    );
    check(
        "sub",
        vec![uniform(&mut r, &[m, n]), uniform(&mut r, &[m, n])],
        &|_, v| v[0].sub(v[1]),
    );
    check(
        "mul",
        vec![uniform(&mut r, &[m, n]), uniform(&mut r, &[m, n])],
        &|_, v| v[0].mul(v[1]),
    );
    check(
        "add_bias",
        vec![uniform(&mut r, &[g, m, n]), uniform(&mut r, &[n])],
        &|_, v| v[0].add_bias(v[1]),
    );
    check("scale", vec![uniform(&mut r, &[m, n])], &|_, v| v[0].scale(-1.7));
    check("gelu", vec![uniform(&mut r, &[m, n]).map(|x| 3.0 * x)], &|_, v| {
        v[0].gelu()
    });
    check("relu", vec![off_zero(&mut r, &[m, n])], &|_, v| v[0].relu());
    check("abs", vec![off_zero(&mut r, &[m, n])], &|_, v| v[0].abs());
    check(
        "softmax_rows",
        vec![uniform(&mut r, &[m, n]).map(|x| 4.0 * x)],
        &|_, v| v[0].softmax_rows(),
    );
    let keep = Rc::new(keep_mask(&mut r, m, n));
    check("masked_softmax_rows", vec![uniform(&mut r, &[m, n])], &move |_, v| {
        v[0].masked_softmax_rows(keep.clone())
    });
    // Two-wide rows normalize to ±1 whatever the input, leaving only rounding noise.
    let ln_width = n.max(3);
    check(
        "layer_norm",
        vec![
            uniform(&mut r, &[m, ln_width]),
            uniform(&mut r, &[ln_width]),
            uniform(&mut r, &[ln_width]),
        ],
        &|_, v| v[0].layer_norm(v[1], v[2]),
    );
    let indices = Rc::new((0..m).map(|_| r.random_range(0..k)).collect::<Vec<_>>());
    check("gather_rows", vec![uniform(&mut r, &[k, n])], &move |_, v| {
        v[0].gather_rows(indices.clone())
    });
    check("reshape", vec![uniform(&mut r, &[m, n])], &|_, v| v[0].reshape(&[n, m]));
    check("transpose", vec![uniform(&mut r, &[m, n])], &|_, v| v[0].transpose());
    check(
        "concat_cols",
        vec![uniform(&mut r, &[m, k]), uniform(&mut r, &[m, n])],
        &|_, v| Var::concat_cols(&[v[0], v[1]]),
    );
    check(
        "concat_seq",
        vec![uniform(&mut r, &[g, m, n]), uniform(&mut r, &[g, k, n])],
        &|_, v| v[0].concat_seq(v[1]),
    );
    let (start, len) = (r.random_range(0..m), 1);
    check("slice_seq", vec![uniform(&mut r, &[g, m, n])], &move |_, v| {
        v[0].slice_seq(start, len)
    });
    check("swap_middle_axes", vec![uniform(&mut r, &[g, 2, 3, n])], &|_, v| {
        v[0].swap_middle_axes()
    });
    check("sum", vec![uniform(&mut r, &[m, n])], &|_, v| v[0].sum());
    check("mean", vec![uniform(&mut r, &[m, n])], &|_, v| v[0].mean());
    let pool_mask = keep_mask(&mut r, g, m);
    let pm = pool_mask.clone();
    check("masked_mean_pool", vec![uniform(&mut r, &[g, m, n])], &move |_, v| {
        v[0].masked_mean_pool(&pm)
    });
    check("masked_max_pool", vec![spaced(&mut r, &[g, m, n])], &move |_, v| {
        v[0].masked_max_pool(&pool_mask)
    });
    let classes = n.max(2);
    let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..classes)).collect();
    check(
        "cross_entropy",
        vec![uniform(&mut r, &[m, classes]).map(|x| 3.0 * x)],
        &move |_, v| v[0].cross_entropy(&labels),
    );
    check("dropout", vec![uniform(&mut r, &[m, n])], &move |_, v| {
        v[0].dropout(0.3, &mut rng(seed))
    });
    out
}

pub fn tiny_config(n_proj: usize) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        hidden: 8,
        ff: 16,
        max_len: 8,
        vocab_size: 16,
        n_proj,
        pooling: Pooling::Mean,
        dropout: 0.0,
    }
}

fn sentence(rng: &mut ChaCha8Rng, vocab: u32) -> Vec<u32> {
    let len = rng.random_range(2..=5);
    (0..len).map(|_| rng.random_range(5..vocab)).collect()
}

/// Key biases shift every score of an attention row by the same amount,
/// which softmax cancels, so their gradient is identically zero and the
/// central difference there is pure rounding noise.
fn shift_invariant(name: &str) -> bool {
    name.ends_with("attn.bk")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndToEnd {
    Cmlm(CmlmVariant),
    Bitext,
    Nli,
}

pub const END_TO_END: [EndToEnd; 5] = [
    EndToEnd::Cmlm(CmlmVariant::Standard),
    EndToEnd::Cmlm(CmlmVariant::Skip),
    EndToEnd::Cmlm(CmlmVariant::Unconditioned),
    EndToEnd::Bitext,
    EndToEnd::Nli,
];

/// Largest relative error of the loss gradient over the parameters of a
/// 2-layer, d=8 encoder initialized from `seed`. With `per_tensor`, only
/// that many random coordinates of each parameter tensor are probed.
/// Shift-invariant parameters must instead have a vanishing analytic
/// gradient (asserted).
pub fn end_to_end_error(loss: EndToEnd, seed: u64, per_tensor: Option<usize>) -> f64 {
    let config = tiny_config(if loss == EndToEnd::Nli { 1 } else { 3 });
    let mut rng = rng(seed);
    let params: ParamSet<f64> = init_params_with_std(&config, 0.3, &mut rng).unwrap();
    let seqs = |rng: &mut ChaCha8Rng, b: usize| -> TokenBatch {
        let s: Vec<Vec<u32>> = (0..b).map(|_| sentence(rng, 16)).collect();
        TokenBatch::from_sequences(&s, false, 8).unwrap()
    };
    let eval: Box<LossFn> = match loss {
        EndToEnd::Cmlm(variant) => {
            let pairs: Vec<SentencePair> = (0..2)
                .map(|_| SentencePair {
                    s1: sentence(&mut rng, 16),
                    s2: sentence(&mut rng, 16),
                    swapped: false,
                    language: "la".into(),
                })
                .collect();
            let options = BatchOptions {
                num_mask: 2,
                vocab_size: 16,
                max_len: 8,
                prepend_cls: false,
            };
            let batch = make_batch(&pairs, options, &mut rng).unwrap();
            let config = config.clone();
            Box::new(move |bound| {
                let mut enc = Encoder::new(&config, bound);
                Ok(cmlm_loss(&mut enc, &batch, variant)?.loss)
            })
        }
        EndToEnd::Bitext => {
            let (src, tgt) = (seqs(&mut rng, 3), seqs(&mut rng, 3));
            let config = config.clone();
            Box::new(move |bound| {
                let mut enc = Encoder::new(&config, bound);
                let s = enc.sentence_vectors(&src, Representation::Pooled)?;
                let t = enc.sentence_vectors(&tgt, Representation::Pooled)?;
                bitext_loss(s, t, 0.3)
            })
        }
        EndToEnd::Nli => {
            let (a, b) = (seqs(&mut rng, 3), seqs(&mut rng, 3));
            let config = config.clone();
            Box::new(move |bound| {
                let mut enc = Encoder::new(&config, bound);
                let u = enc.sentence_vectors(&a, Representation::Pooled)?;
                let v = enc.sentence_vectors(&b, Representation::Pooled)?;
                Ok(nli_loss(&enc, u, v, &[0, 1, 2])?.loss)
            })
        }
    };

    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = eval(&bound).unwrap();
    let grads = bound.collect(&mut tape.backward(out).unwrap());
    for (name, g) in grads.iter().filter(|(n, _)| shift_invariant(n)) {
        assert!(
            g.data().iter().all(|x| x.abs() < 1e-10),
            "{name} gradient {:?}",
            g.data()
        );
    }

    let names: Vec<String> = params.names().cloned().collect();
    let checked: Vec<String> = names.iter().filter(|n| !shift_invariant(n)).cloned().collect();
    let inputs: Vec<Tensor<f64>> = checked.iter().map(|n| params.get(n).unwrap().clone()).collect();
    let fixed: Vec<(String, Tensor<f64>)> = names
        .iter()
        .filter(|n| shift_invariant(n))
        .map(|n| (n.clone(), params.get(n).unwrap().clone()))
        .collect();
    let elements: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| match per_tensor {
            None => (0..t.len()).collect(),
            Some(k) => rand::seq::index::sample(&mut rng, t.len(), k.min(t.len())).into_vec(),
        })
        .collect();
    let reports = check_gradients_at(
        |tape: &Tape<f64>, vars: &[Var<'_, f64>]| {
            let constants = fixed.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone())));
            let bound = BoundParams::from_vars(checked.iter().cloned().zip(vars.iter().copied()).chain(constants));
            eval(&bound)
        },
        &inputs,
        FD_STEP,
        &elements,
    )
    .unwrap();
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

/// Bidirectional additive-margin loss written out with scalar loops:
/// `φ = S·Tᵀ`, the margin taken off each positive, and each direction the
/// mean of `−log softmax` at the positive.
pub fn bitext_oracle(s: &[Vec<f64>], t: &[Vec<f64>], margin: f64) -> (f64, f64) {
    let b = s.len();
    let phi = |i: usize, j: usize| -> f64 {
        let dot: f64 = s[i].iter().zip(&t[j]).map(|(x, y)| x * y).sum();
        if i == j {
            dot - margin
        } else {
            dot
        }
    };
    let direction = |score: &dyn Fn(usize, usize) -> f64| -> f64 {
        let mut total = 0.0;
        for i in 0..b {
            let row: Vec<f64> = (0..b).map(|j| score(i, j)).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[i];
        }
        total / b as f64
    };
    (direction(&|i, j| phi(i, j)), direction(&|i, j| phi(j, i)))
}

/// Spearman's ρ computed the long way: each rank counts the strictly
/// smaller values plus half of the other equal ones, then the textbook
/// Pearson formula on those ranks.
pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&a| {
                let less = v.iter().filter(|&&b| b < a).count() as f64;
                let equal = v.iter().filter(|&&b| b == a).count() as f64;
                1.0 + less + (equal - 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

pub fn set_from(rows: Vec<(Vec<f64>, &str, u32, Option<u32>)>) -> EmbeddingSet {
    EmbeddingSet::from_rows(
        rows.into_iter()
            .map(|(vector, language, id, label)| EmbeddingRow {
                vector,
                language: language.to_string(),
                id,
                label,
            })
            .collect(),
    )
    .unwrap()
}

/// Two "languages" sharing base vectors `b_i` (id `i`), each shifted by
/// its own offset `o_l` with `‖o_l‖ = offset` far larger than `‖b_i‖ ≈ 1`.
/// With `antipodal`, the second offset is `−o_a` instead of an independent
/// direction.
pub fn offset_pair(n: usize, d: usize, offset: f64, seed: u64, antipodal: bool) -> EmbeddingSet {
    let mut r = rng(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let direction = |r: &mut ChaCha8Rng| -> Vec<f64> {
        let mut o: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        o.iter_mut().for_each(|x| *x *= offset / norm);
        o
    };
    let oa = direction(&mut r);
    let ob = if antipodal {
        oa.iter().map(|x| -x).collect()
    } else {
        direction(&mut r)
    };
    let bases: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| r.random_range(-1.0..1.0) * scale * 3f64.sqrt())
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(2 * n);
    for (o, language) in [(&oa, "la"), (&ob, "lb")] {
        for (i, b) in bases.iter().enumerate() {
            let v = b.iter().zip(o).map(|(x, y)| x + y).collect();
            rows.push((v, language, i as u32, None));
        }
    }
    set_from(rows)
}

/// [`offset_pair`] with independent offsets.
pub fn offset_construction(n: usize, d: usize, offset: f64, seed: u64) -> EmbeddingSet {
    offset_pair(n, d, offset, seed, false)
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A tiny synthetic corpus with an encoder and plan sized to train in well
/// under a second per few dozen steps.
pub struct SmallRun {
    pub encoder: EncoderConfig,
    pub plan: TrainPlan,
    pub data: TrainData,
}

pub fn small_run(strategy: Strategy) -> SmallRun {
    let synth = SynthConfig {
        documents: 40,
        copy_documents: 0,
        bitext_pairs: 200,
        heldout_pairs: 0,
        nli_examples: 100,
        probe_train: 0,
        probe_test: 0,
        eval_sentences: 0,
        sts_pairs: 0,
        ..SynthConfig::default()
    };
    let corpus = generate(&synth).unwrap();
    let encoder = EncoderConfig {
        layers: 1,
        heads: 2,
        hidden: 16,
        ff: 32,
        max_len: 12,
        vocab_size: 256,
        n_proj: 3,
        pooling: Pooling::Mean,
        dropout: 0.1,
    };
    let vocab = build_vocab(&corpus.documents, &corpus.bitext, &corpus.nli, encoder.vocab_size).unwrap();
    let data = TrainData::new(vocab, &encoder, &corpus.documents, &corpus.bitext, &corpus.nli).unwrap();
    let plan = TrainPlan {
        strategy,
        stage1_steps: 6,
        stage2_steps: 6,
        nli_steps: 3,
        batch_size: 4,
        num_mask: Some(3),
        seed: 5,
        optimizer: OptimizerConfig {
            lr: 1e-2,
            warmup_steps: 2,
            ..TrainPlan::default().optimizer
        },
        log_every: 2,
        checkpoint_every: 4,
        ..TrainPlan::default()
    };
    SmallRun { encoder, plan, data }
}
