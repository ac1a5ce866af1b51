//! Vocabulary, tokenization, sentence pairs, masking and data files.

pub mod io;
pub mod masking;
pub mod synth;
pub mod vocab;

pub use io::{BitextPair, Document, NliExample, NliLabel, ScoredPair, TaggedSentence};
pub use masking::{
    default_mask_count, make_batch, make_pairs, mask_tokens, BatchOptions, MaskAction, MaskedPairBatch, MaskedSequence,
    SentencePair, TokenBatch,
};
pub use synth::{generate, language_tag, Lexicon, SynthConfig, SynthCorpus, SYNTH_FILES};
pub use vocab::Vocab;
