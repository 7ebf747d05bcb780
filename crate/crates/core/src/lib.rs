//! Two-stage customer feedback mining.
//!
//! Stage one routes each feedback record to main product topics with a
//! softmax classifier over sentence embeddings. Stage two runs hybrid
//! sub-topic inference per main-topic group: an LDA doc-topic vector is
//! concatenated with the (globally min-max normalized) embedding, compressed
//! through an autoencoder, clustered with k-means, and the resulting
//! sub-topics are labeled against a self-help issue catalog. Quality is
//! tracked with UCI coherence and silhouette scores.
//!
//! The [`pipeline`] module wires the pieces into resumable stages; everything
//! else is usable as a standalone library.

pub mod classifier;
pub mod corpus;
pub mod embeddings;
pub mod eval;
pub mod knowledge;
pub mod lda;
pub mod pipeline;
pub mod pshti;
pub mod synthetic;

pub use classifier::{SoftmaxClassifier, TrainConfig};
pub use corpus::{CorpusStats, FeedbackRecord, PreprocessConfig, TokenizedDoc, Vocabulary};
pub use embeddings::{EmbeddingStore, EmbeddingVector, NormalizationSummary};
pub use eval::SilhouetteReport;
pub use knowledge::{IssueEntry, SubTopicLabel};
pub use lda::{DocTopicDistribution, LdaModel};
pub use pshti::{HybridVector, KmeansResult, SubTopicCluster};

/// Derives a stream-specific RNG seed from the run-wide seed and a label
/// such as `"classifier"` or `"lda:Calendar"`. Stable across platforms, so
/// two runs with the same config produce bit-identical artifacts.
pub fn derive_seed(global_seed: u64, label: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(global_seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}
