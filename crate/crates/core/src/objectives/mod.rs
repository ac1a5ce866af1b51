//! Training losses: conditional MLM, additive-margin bitext retrieval, NLI,
//! and their weighted sum.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::corpus::{MaskedPairBatch, TokenBatch};
use crate::encoder::{Encoder, Representation, MLM_BIAS, NLI_CLASSES, TOKEN_EMBEDDINGS};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};

/// Default weight of the bitext loss in a joint stage.
pub const DEFAULT_ALPHA: f64 = 0.2;
/// Default additive margin on the positive pair's score.
pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmlmVariant {
    /// Masked `s2` is prefixed with the projections of `s1`'s vector.
    Standard,
    /// As standard, and each masked position's output is also concatenated
    /// with the mean projected vector before the output head.
    Skip,
    /// The prefix is all zeros and `s1` is never encoded.
    Unconditioned,
}

impl std::str::FromStr for CmlmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "skip" => Ok(Self::Skip),
            "unconditioned" => Ok(Self::Unconditioned),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (standard|skip|unconditioned)"
            ))),
        }
    }
}

impl std::fmt::Display for CmlmVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Skip => "skip",
            Self::Unconditioned => "unconditioned",
        })
    }
}

/// A scalar loss with the accuracy of the predictions behind it.
#[derive(Debug, Clone, Copy)]
pub struct LossOutput<'t, T> {
    pub loss: Var<'t, T>,
    /// Fraction of correct predictions.
    pub accuracy: f64,
    /// Number of predictions.
    pub count: usize,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose maximum (first on ties) sits at `labels[i]`.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Conditional MLM loss: mean cross-entropy over every masked position of
/// the batch.
pub fn cmlm_loss<'t, T: Real>(
    enc: &mut Encoder<'_, 't, T>,
    batch: &MaskedPairBatch,
    variant: CmlmVariant,
) -> Result<LossOutput<'t, T>> {
    if batch.num_masked() == 0 {
        return Err(Error::Contract("batch has no masked positions".into()));
    }
    match variant {
        CmlmVariant::Unconditioned => {
            let (b, n, d) = (batch.batch_size(), enc.config().n_proj, enc.config().hidden);
            let zeros = enc.tape().constant(Tensor::zeros(&[b, n, d]));
            masked_lm_loss(enc, batch, zeros, None)
        }
        CmlmVariant::Standard | CmlmVariant::Skip => {
            let encoded = enc.encode(&batch.s1, None)?;
            let v = enc.pool(&encoded)?;
            let projected = enc.project(v)?;
            let skip = match variant {
                CmlmVariant::Skip => Some(enc.projection_mean(projected)?),
                _ => None,
            };
            masked_lm_loss(enc, batch, projected, skip)
        }
    }
}

/// MLM loss on the corrupted `s2` of `batch` given an explicit
/// `[b × n × d]` prefix and, for the skip head, per-example `[b × d]`
/// vectors joined to each masked output.
pub fn masked_lm_loss<'t, T: Real>(
    enc: &mut Encoder<'_, 't, T>,
    batch: &MaskedPairBatch,
    prefix: Var<'t, T>,
    skip: Option<Var<'t, T>>,
) -> Result<LossOutput<'t, T>> {
    let d = enc.config().hidden;
    let out = enc.encode(&batch.s2, Some(prefix))?;
    let (s, n) = (out.len, out.prefix_len);
    let mut rows = Vec::with_capacity(batch.num_masked());
    let mut owners = Vec::with_capacity(batch.num_masked());
    let mut labels = Vec::with_capacity(batch.num_masked());
    for (i, (positions, ids)) in batch.mask_positions.iter().zip(&batch.mask_labels).enumerate() {
        let real = batch.s2.real_len(i);
        for (&p, &id) in positions.iter().zip(ids) {
            if p >= real {
                return Err(Error::Contract(format!("mask position {p} of example {i} is padding")));
            }
            rows.push(i * s + n + p);
            owners.push(i);
            labels.push(id as usize);
        }
    }
    if rows.is_empty() {
        return Err(Error::Contract("batch has no masked positions".into()));
    }
    let mut h = out
        .seq
        .reshape(&[batch.batch_size() * s, d])?
        .gather_rows(Rc::new(rows))?;
    if let Some(m) = skip {
        let joined = m.gather_rows(Rc::new(owners))?;
        h = Var::concat_cols(&[h, joined])?
            .matmul(enc.param("mlm.skip.w"))?
            .add_bias(enc.param("mlm.skip.b"))?;
    }
    let logits = h.matmul_t(enc.param(TOKEN_EMBEDDINGS))?.add_bias(enc.param(MLM_BIAS))?;
    let accuracy = accuracy(&logits.value(), &labels);
    Ok(LossOutput {
        loss: logits.cross_entropy(&labels)?,
        accuracy,
        count: labels.len(),
    })
}

fn margin_logits<'t, T: Real>(scores: Var<'t, T>, margin: f64) -> Result<Var<'t, T>> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::dim("bitext scores", &shape, &[2]));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::Contract("bitext loss needs a batch of at least 2".into()));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Config(format!(
            "margin {margin} must be finite and non-negative"
        )));
    }
    let mut shift = vec![T::zero(); b * b];
    for i in 0..b {
        shift[i * b + i] = T::of(-margin);
    }
    scores.add(scores.tape().constant(Tensor::new(&[b, b], shift)?))
}

/// Source and target directions of the bitext loss for a `[B × B]` score
/// matrix whose diagonal holds the translation pairs.
pub fn bitext_directions<'t, T: Real>(scores: Var<'t, T>, margin: f64) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let logits = margin_logits(scores, margin)?;
    let labels: Vec<usize> = (0..logits.shape()[0]).collect();
    let source = logits.cross_entropy(&labels)?;
    let target = logits.transpose()?.cross_entropy(&labels)?;
    Ok((source, target))
}

/// Bidirectional additive-margin softmax loss over in-batch negatives.
/// Scores are raw inner products `S·Tᵀ`; the margin is subtracted from the
/// positive pair only.
pub fn bitext_loss<'t, T: Real>(source: Var<'t, T>, target: Var<'t, T>, margin: f64) -> Result<Var<'t, T>> {
    if source.shape() != target.shape() || source.shape().len() != 2 {
        return Err(Error::dim("bitext_loss", &source.shape(), &target.shape()));
    }
    let (ls, lt) = bitext_directions(source.matmul_t(target)?, margin)?;
    ls.add(lt)
}

/// Source-side and target-side token batches; row `i` of each are
/// translations.
#[derive(Debug, Clone, PartialEq)]
pub struct BitextBatch {
    pub source: TokenBatch,
    pub target: TokenBatch,
}

/// Encodes both sides and returns the bitext loss with the in-batch
/// retrieval accuracy (source → target, raw inner product).
pub fn bitext_step<'t, T: Real>(
    enc: &mut Encoder<'_, 't, T>,
    batch: &BitextBatch,
    margin: f64,
) -> Result<LossOutput<'t, T>> {
    let s = enc.sentence_vectors(&batch.source, Representation::Pooled)?;
    let t = enc.sentence_vectors(&batch.target, Representation::Pooled)?;
    let scores = s.matmul_t(t)?;
    let labels: Vec<usize> = (0..batch.source.batch).collect();
    let accuracy = accuracy(&scores.value(), &labels);
    let (ls, lt) = bitext_directions(scores, margin)?;
    Ok(LossOutput {
        loss: ls.add(lt)?,
        accuracy,
        count: labels.len(),
    })
}

/// `[u, v, |u − v|, u ⊙ v]` per row.
pub fn nli_features<'t, T: Real>(u: Var<'t, T>, v: Var<'t, T>) -> Result<Var<'t, T>> {
    if u.shape() != v.shape() || u.shape().len() != 2 {
        return Err(Error::dim("nli_features", &u.shape(), &v.shape()));
    }
    let diff = u.sub(v)?.abs()?;
    let prod = u.mul(v)?;
    Var::concat_cols(&[u, v, diff, prod])
}

/// Three-way classifier loss on premise vectors `u` and hypothesis vectors
/// `v` (labels in `0..3`).
pub fn nli_loss<'t, T: Real>(
    enc: &Encoder<'_, 't, T>,
    u: Var<'t, T>,
    v: Var<'t, T>,
    labels: &[usize],
) -> Result<LossOutput<'t, T>> {
    if let Some(&l) = labels.iter().find(|&&l| l >= NLI_CLASSES) {
        return Err(Error::Contract(format!("NLI label {l} outside 0..{NLI_CLASSES}")));
    }
    let logits = nli_features(u, v)?
        .matmul(enc.param("nli.w"))?
        .add_bias(enc.param("nli.b"))?;
    let accuracy = accuracy(&logits.value(), labels);
    Ok(LossOutput {
        loss: logits.cross_entropy(labels)?,
        accuracy,
        count: labels.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NliBatch {
    pub premise: TokenBatch,
    pub hypothesis: TokenBatch,
    pub labels: Vec<usize>,
}

/// Encodes both sides with the shared encoder and applies [`nli_loss`];
/// gradients reach the encoder.
pub fn nli_step<'t, T: Real>(enc: &mut Encoder<'_, 't, T>, batch: &NliBatch) -> Result<LossOutput<'t, T>> {
    let u = enc.sentence_vectors(&batch.premise, Representation::Pooled)?;
    let v = enc.sentence_vectors(&batch.hypothesis, Representation::Pooled)?;
    nli_loss(enc, u, v, &batch.labels)
}

/// `L_cmlm + α·L_br`.
pub fn combined_loss<'t, T: Real>(cmlm: Var<'t, T>, bitext: Var<'t, T>, alpha: f64) -> Result<Var<'t, T>> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Config(format!("alpha {alpha} must be finite and non-negative")));
    }
    cmlm.add(bitext.scale(alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    fn scores<'t>(tape: &'t Tape<f64>, data: &[f64]) -> Var<'t, f64> {
        let b = (data.len() as f64).sqrt() as usize;
        tape.constant(Tensor::from_f64(&[b, b], data).unwrap())
    }

    #[test]
    fn equal_scores_give_two_ln_two() {
        let tape = Tape::new();
        let (ls, lt) = bitext_directions(scores(&tape, &[0.4; 4]), 0.0).unwrap();
        let total = ls.item() + lt.item();
        assert!((total - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn margin_example() {
        let tape = Tape::new();
        let (ls, lt) = bitext_directions(scores(&tape, &[1., 0., 0., 1.]), 0.3).unwrap();
        let p = 0.7f64.exp() / (0.7f64.exp() + 1.0);
        assert!((ls.item() + lt.item() - 2.0 * -p.ln()).abs() < 1e-12);
        assert!((ls.item() + lt.item() - 0.806_372_1).abs() < 1e-6);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let tape = Tape::new();
        assert!(bitext_directions(scores(&tape, &[1.0]), 0.3).is_err());
    }

    #[test]
    fn nli_feature_layout() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::<f64>::from_f64(&[1, 2], &[1., 2.]).unwrap());
        let v = tape.constant(Tensor::<f64>::from_f64(&[1, 2], &[3., 1.]).unwrap());
        assert_eq!(
            nli_features(u, v).unwrap().value().data(),
            [1., 2., 3., 1., 2., 1., 3., 2.]
        );
    }

    #[test]
    fn combined_is_weighted_sum() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(0.5));
        assert!((combined_loss(a, b, 0.2).unwrap().item() - 1.1).abs() < 1e-15);
        assert_eq!(combined_loss(a, b, 0.0).unwrap().item(), 1.0);
        assert!(combined_loss(a, b, -1.0).is_err());
    }
}
