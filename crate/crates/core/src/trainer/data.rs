//! Tokenized training data and per-step batch sampling.

use rand::seq::index::sample;
use rand::Rng;

use crate::corpus::{make_batch, make_pairs, BatchOptions, BitextPair, Document, MaskedPairBatch, NliExample, Vocab};
use crate::encoder::{sentence_batch, sentence_ids, EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::objectives::{BitextBatch, NliBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDocument {
    pub language: String,
    pub sentences: Vec<Vec<u32>>,
}

/// Everything a training run reads, already tokenized.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub vocab: Vocab,
    pub documents: Vec<TokenDocument>,
    pub bitext: Vec<(Vec<u32>, Vec<u32>)>,
    pub nli: Vec<(Vec<u32>, Vec<u32>, usize)>,
    /// `(document, sentence)` of every adjacent sentence couple.
    adjacent: Vec<(usize, usize)>,
}

/// Builds a vocabulary over every sentence of the given sources.
pub fn build_vocab(docs: &[Document], bitext: &[BitextPair], nli: &[NliExample], target: usize) -> Result<Vocab> {
    let lines = docs
        .iter()
        .flat_map(|d| d.sentences.iter().map(String::as_str))
        .chain(bitext.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]))
        .chain(nli.iter().flat_map(|e| [e.premise.as_str(), e.hypothesis.as_str()]));
    Vocab::build(lines, target)
}

impl TrainData {
    pub fn new(
        vocab: Vocab,
        config: &EncoderConfig,
        docs: &[Document],
        bitext: &[BitextPair],
        nli: &[NliExample],
    ) -> Result<Self> {
        if vocab.len() > config.vocab_size {
            return Err(Error::ConfigMismatch(format!(
                "vocabulary has {} entries but the encoder holds {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let ids = |t: &str| sentence_ids(config, &vocab, t);
        let documents: Vec<TokenDocument> = docs
            .iter()
            .map(|d| {
                Ok(TokenDocument {
                    language: d.language.clone(),
                    sentences: d.sentences.iter().map(|s| ids(s)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        let bitext = bitext
            .iter()
            .map(|p| Ok((ids(&p.source)?, ids(&p.target)?)))
            .collect::<Result<_>>()?;
        let nli = nli
            .iter()
            .map(|e| Ok((ids(&e.premise)?, ids(&e.hypothesis)?, e.label.index())))
            .collect::<Result<_>>()?;
        let adjacent = documents
            .iter()
            .enumerate()
            .flat_map(|(d, doc)| (0..doc.sentences.len().saturating_sub(1)).map(move |s| (d, s)))
            .collect();
        Ok(Self {
            vocab,
            documents,
            bitext,
            nli,
            adjacent,
        })
    }

    pub fn pair_count(&self) -> usize {
        self.adjacent.len()
    }

    /// `b` adjacent-sentence pairs drawn with replacement, each swapped
    /// with probability ½, then masked.
    pub fn mono_batch<R: Rng + ?Sized>(
        &self,
        config: &EncoderConfig,
        b: usize,
        num_mask: usize,
        rng: &mut R,
    ) -> Result<MaskedPairBatch> {
        if self.adjacent.is_empty() {
            return Err(Error::Data(
                "monolingual corpus has no document with two sentences".into(),
            ));
        }
        let mut pairs = Vec::with_capacity(b);
        for _ in 0..b {
            let (d, s) = self.adjacent[rng.random_range(0..self.adjacent.len())];
            let doc = &self.documents[d];
            pairs.extend(make_pairs(&doc.sentences[s..s + 2], &doc.language, config.max_len, rng));
        }
        let options = BatchOptions {
            num_mask,
            vocab_size: self.vocab.len(),
            max_len: config.max_len,
            prepend_cls: config.pooling == Pooling::Cls,
        };
        make_batch(&pairs, options, rng)
    }

    /// `b` distinct translation pairs.
    pub fn bitext_batch<R: Rng + ?Sized>(&self, config: &EncoderConfig, b: usize, rng: &mut R) -> Result<BitextBatch> {
        if self.bitext.len() < b {
            return Err(Error::Data(format!(
                "bitext has {} pairs, fewer than the batch size {b}",
                self.bitext.len()
            )));
        }
        let picks = sample(rng, self.bitext.len(), b);
        let source: Vec<&[u32]> = picks.iter().map(|i| self.bitext[i].0.as_slice()).collect();
        let target: Vec<&[u32]> = picks.iter().map(|i| self.bitext[i].1.as_slice()).collect();
        Ok(BitextBatch {
            source: sentence_batch(config, &source)?,
            target: sentence_batch(config, &target)?,
        })
    }

    /// `b` NLI examples drawn with replacement.
    pub fn nli_batch<R: Rng + ?Sized>(&self, config: &EncoderConfig, b: usize, rng: &mut R) -> Result<NliBatch> {
        if self.nli.is_empty() {
            return Err(Error::Data("NLI data is empty".into()));
        }
        let picks: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.nli.len())).collect();
        let premise: Vec<&[u32]> = picks.iter().map(|&i| self.nli[i].0.as_slice()).collect();
        let hypothesis: Vec<&[u32]> = picks.iter().map(|&i| self.nli[i].1.as_slice()).collect();
        Ok(NliBatch {
            premise: sentence_batch(config, &premise)?,
            hypothesis: sentence_batch(config, &hypothesis)?,
            labels: picks.iter().map(|&i| self.nli[i].2).collect(),
        })
    }
}
