//! Conditional masked language modeling (CMLM) for sentence embeddings.
//!
//! A sentence `s1` is encoded and mean-pooled into a single vector, which is
//! projected into `N` pseudo-token vectors and prepended to the masked
//! adjacent sentence `s2`. The same transformer then has to recover the
//! masked tokens of `s2`, so everything it needs from `s1` must pass through
//! the sentence vector. On top of that objective the crate provides
//! additive-margin bitext retrieval and cross-lingual NLI losses, staged
//! training schedules, and an evaluation kit (cosine retrieval, principal
//! component removal, language-bias histograms, linear probes, Spearman
//! correlation, 2-D export).

mod binio;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
