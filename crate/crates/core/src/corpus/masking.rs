//! Consecutive-sentence pairs, BERT-style corruption and padded batches.

use rand::seq::index::sample;
use rand::Rng;

use super::vocab::{CLS, MASK, NUM_RESERVED, PAD};
use crate::error::{Error, Result};

/// Fraction of a block that is masked.
pub const MASK_RATIO: f64 = 0.3125;
/// Among masked positions: probability of `[MASK]` and of a random token;
/// the remainder keep their original id.
pub const MASK_TOKEN_PROB: f64 = 0.8;
pub const RANDOM_TOKEN_PROB: f64 = 0.1;

/// Default number of masked positions for blocks of `max_len` tokens.
pub fn default_mask_count(max_len: usize) -> usize {
    ((MASK_RATIO * max_len as f64).round() as usize).max(1)
}

/// Two adjacent sentences of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    /// The conditioning sentence.
    pub s1: Vec<u32>,
    /// The sentence whose masked tokens are predicted.
    pub s2: Vec<u32>,
    /// Whether the document order was reversed.
    pub swapped: bool,
    pub language: String,
}

/// One pair per adjacent couple `(A,B), (B,C), …`, each independently
/// swapped with probability ½ and truncated to `max_len` tokens per side.
/// Couples with an empty side are skipped.
pub fn make_pairs<R: Rng + ?Sized>(
    document: &[Vec<u32>],
    language: &str,
    max_len: usize,
    rng: &mut R,
) -> Vec<SentencePair> {
    document
        .windows(2)
        .filter(|w| !w[0].is_empty() && !w[1].is_empty())
        .map(|w| {
            let swapped = rng.random_bool(0.5);
            let (a, b) = if swapped { (&w[1], &w[0]) } else { (&w[0], &w[1]) };
            SentencePair {
                s1: a[..a.len().min(max_len)].to_vec(),
                s2: b[..b.len().min(max_len)].to_vec(),
                swapped,
                language: language.to_string(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub corrupted: Vec<u32>,
    /// Sorted, distinct positions selected for prediction.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub labels: Vec<u32>,
    pub actions: Vec<MaskAction>,
    /// The requested count exceeded the sequence length and was clamped.
    pub clamped: bool,
}

/// Picks `min(num_mask, len)` distinct positions uniformly and corrupts them
/// 80/10/10 (`[MASK]` / random non-reserved id / unchanged).
pub fn mask_tokens<R: Rng + ?Sized>(
    s2: &[u32],
    num_mask: usize,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if s2.is_empty() {
        return Err(Error::Contract("cannot mask an empty sequence".into()));
    }
    if num_mask == 0 {
        return Err(Error::Contract("mask count must be at least 1".into()));
    }
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Contract("vocabulary has no non-reserved tokens".into()));
    }
    let clamped = num_mask > s2.len();
    let count = num_mask.min(s2.len());
    let mut positions = sample(rng, s2.len(), count).into_vec();
    positions.sort_unstable();

    let mut corrupted = s2.to_vec();
    let mut labels = Vec::with_capacity(count);
    let mut actions = Vec::with_capacity(count);
    for &p in &positions {
        labels.push(s2[p]);
        let u: f64 = rng.random();
        let action = if u < MASK_TOKEN_PROB {
            corrupted[p] = MASK;
            MaskAction::Mask
        } else if u < MASK_TOKEN_PROB + RANDOM_TOKEN_PROB {
            corrupted[p] = rng.random_range(NUM_RESERVED as u32..vocab_size as u32);
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        actions.push(action);
    }
    Ok(MaskedSequence {
        corrupted,
        positions,
        labels,
        actions,
        clamped,
    })
}

/// Right-padded token ids with an attention mask, `[batch × len]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    /// Pads sequences to the longest one. With `prepend_cls`, `[CLS]` is
    /// put in front of every sequence (after truncating it to leave room
    /// within `max_len`).
    pub fn from_sequences<S: AsRef<[u32]>>(seqs: &[S], prepend_cls: bool, max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Contract("cannot batch zero sequences".into()));
        }
        let prepared: Vec<Vec<u32>> = seqs
            .iter()
            .map(|s| {
                let s = s.as_ref();
                if prepend_cls {
                    let keep = s.len().min(max_len.saturating_sub(1));
                    std::iter::once(CLS).chain(s[..keep].iter().copied()).collect()
                } else {
                    s.to_vec()
                }
            })
            .collect();
        if let Some(i) = prepared.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("sequence {i} is empty")));
        }
        let len = prepared.iter().map(Vec::len).max().expect("non-empty");
        let mut ids = vec![PAD; prepared.len() * len];
        let mut mask = vec![false; prepared.len() * len];
        for (i, s) in prepared.iter().enumerate() {
            ids[i * len..i * len + s.len()].copy_from_slice(s);
            mask[i * len..i * len + s.len()].iter_mut().for_each(|m| *m = true);
        }
        Ok(Self {
            ids,
            mask,
            batch: prepared.len(),
            len,
        })
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        &self.mask[i * self.len..(i + 1) * self.len]
    }

    /// Number of real (unpadded) tokens in row `i`.
    pub fn real_len(&self, i: usize) -> usize {
        self.row_mask(i).iter().filter(|&&m| m).count()
    }
}

/// A batch of `(s1, corrupted s2)` pairs with the prediction targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPairBatch {
    pub s1: TokenBatch,
    /// Corrupted `s2` ids.
    pub s2: TokenBatch,
    /// Per example: indices into the unpadded `s2` row.
    pub mask_positions: Vec<Vec<usize>>,
    /// Per example: original ids at `mask_positions`.
    pub mask_labels: Vec<Vec<u32>>,
    pub swapped: Vec<bool>,
    /// How many examples had their mask count clamped to their length.
    pub clamped: usize,
}

impl MaskedPairBatch {
    pub fn batch_size(&self) -> usize {
        self.s1.batch
    }

    pub fn num_masked(&self) -> usize {
        self.mask_positions.iter().map(Vec::len).sum()
    }
}

/// Settings shared by every call to [`make_batch`].
#[derive(Debug, Clone, Copy)]
pub struct BatchOptions {
    pub num_mask: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Put `[CLS]` in front of `s1` (used with CLS pooling).
    pub prepend_cls: bool,
}

/// Masks every `s2` and pads both sides.
pub fn make_batch<R: Rng + ?Sized>(
    pairs: &[SentencePair],
    options: BatchOptions,
    rng: &mut R,
) -> Result<MaskedPairBatch> {
    if pairs.is_empty() {
        return Err(Error::Contract("cannot build a batch from zero pairs".into()));
    }
    let mut corrupted = Vec::with_capacity(pairs.len());
    let mut mask_positions = Vec::with_capacity(pairs.len());
    let mut mask_labels = Vec::with_capacity(pairs.len());
    let mut clamped = 0;
    for pair in pairs {
        let m = mask_tokens(&pair.s2, options.num_mask, options.vocab_size, rng)?;
        clamped += usize::from(m.clamped);
        corrupted.push(m.corrupted);
        mask_positions.push(m.positions);
        mask_labels.push(m.labels);
    }
    if clamped > 0 {
        log::debug!("mask count clamped to sequence length for {clamped} examples");
    }
    let s1: Vec<&[u32]> = pairs.iter().map(|p| p.s1.as_slice()).collect();
    Ok(MaskedPairBatch {
        s1: TokenBatch::from_sequences(&s1, options.prepend_cls, options.max_len)?,
        s2: TokenBatch::from_sequences(&corrupted, false, options.max_len)?,
        mask_positions,
        mask_labels,
        swapped: pairs.iter().map(|p| p.swapped).collect(),
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Always yields zero bits, so every Bernoulli draw comes up true.
    struct Heads;

    impl rand::RngCore for Heads {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0)
        }
    }

    #[test]
    fn paper_block_length_masks_eighty() {
        assert_eq!(default_mask_count(256), 80);
        assert_eq!(default_mask_count(64), 20);
    }

    #[test]
    fn pairs_are_adjacent_couples() {
        let doc = vec![vec![10], vec![11], vec![12]];
        let pairs = make_pairs(&doc, "la", 8, &mut Heads);
        assert_eq!(pairs.len(), 2);
        // forced heads → both swapped
        assert!(pairs.iter().all(|p| p.swapped));
        assert_eq!((pairs[0].s1.clone(), pairs[0].s2.clone()), (vec![11], vec![10]));
        assert_eq!((pairs[1].s1.clone(), pairs[1].s2.clone()), (vec![12], vec![11]));
        assert!(make_pairs(&doc[..1], "la", 8, &mut Heads).is_empty());
    }

    #[test]
    fn pairs_truncate_to_max_len() {
        let doc = vec![vec![5; 10], vec![6; 3]];
        let pairs = make_pairs(&doc, "la", 4, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(pairs[0].s1.len() <= 4 && pairs[0].s2.len() <= 4);
    }

    #[test]
    fn masking_everything_labels_the_whole_sequence() {
        let s = vec![7, 8, 9, 10];
        let m = mask_tokens(&s, 4, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(m.positions, vec![0, 1, 2, 3]);
        assert_eq!(m.labels, s);
        assert!(!m.clamped);
        let m = mask_tokens(&s, 9, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(m.clamped);
        assert_eq!(m.positions.len(), 4);
    }

    #[test]
    fn batch_padding_and_attention_masks() {
        let pairs = vec![
            SentencePair {
                s1: vec![5, 6, 7],
                s2: vec![5, 6, 7],
                swapped: false,
                language: "la".into(),
            },
            SentencePair {
                s1: vec![5, 6, 7, 8, 9],
                s2: vec![9, 8, 7, 6, 5],
                swapped: true,
                language: "la".into(),
            },
        ];
        let opts = BatchOptions {
            num_mask: 1,
            vocab_size: 12,
            max_len: 8,
            prepend_cls: false,
        };
        let b = make_batch(&pairs, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.s1.len, 5);
        assert_eq!(b.s1.row_mask(0), &[true, true, true, false, false]);
        assert_eq!(b.s1.row_mask(1), &[true; 5]);
        assert_eq!(b.s1.row(0), &[5, 6, 7, PAD, PAD]);
        let again = make_batch(&pairs, opts, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b, again);
        assert!(make_batch(&[], opts, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn cls_is_prepended_within_max_len() {
        let b = TokenBatch::from_sequences(&[vec![5u32, 6, 7, 8]], true, 4).unwrap();
        assert_eq!(b.row(0), &[CLS, 5, 6, 7]);
    }
}
