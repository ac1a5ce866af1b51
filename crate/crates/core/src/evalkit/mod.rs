//! Evaluation of frozen sentence vectors: retrieval, language-bias
//! analysis and removal, probes, rank correlation and 2-D views.

mod embeddings;
mod pcr;
mod plot;
mod probe;
mod retrieval;
mod stats;

pub use embeddings::{EmbeddingRow, EmbeddingSet, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use pcr::{language_directions, pcr_debias};
pub use plot::{export_2d, project_2d, render_csv, render_svg};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};
pub use retrieval::{
    cosine_similarity, gold_by_id, in_batch_retrieval, language_bias_histogram, retrieval_accuracy, BiasHistogram,
};
pub use stats::{fractional_ranks, pearson, spearman_correlation};
