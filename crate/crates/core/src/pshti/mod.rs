//! Hybrid sub-topic inference for one main-topic group.
//!
//! For each document the group-level LDA mixture (lexical view) is scaled by
//! gamma and concatenated with the min-max normalized sentence embedding
//! (semantic view). The concatenation is compressed through an autoencoder
//! and clustered with k-means; each cluster then gets descriptive top words.

pub mod kmeans;
pub mod vae;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{kmeans, KmeansResult};
pub use vae::{gradient_check, kl_divergence, train_autoencoder, Activation, AutoencoderModel, VaeConfig};

use crate::corpus::{TokenizedDoc, Vocabulary};
use crate::embeddings::{minmax_normalize_group, EmbeddingVector, NormalizationSummary};
use crate::lda::{DocTopicDistribution, LdaConfig, LdaError, LdaModel};

#[derive(Debug, Error)]
pub enum PshtiError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("cannot form {k} clusters from {points} points")]
    TooFewPoints { points: usize, k: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("gradient check epsilon must be in (0, 1e-2], got {0}")]
    InvalidEpsilon(f64),
    #[error("embedding value {value} at position {index} is outside [0, 1]; normalize the group first")]
    UnnormalizedEmbedding { index: usize, value: f64 },
    #[error("cluster {index} has no documents")]
    EmptyCluster { index: usize },
    #[error(transparent)]
    Lda(#[from] LdaError),
}

/// The concatenated per-document vector: gamma-scaled topic mixture followed
/// by the normalized embedding. Length is k_sub + embedding dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridVector {
    pub doc_id: String,
    pub values: Vec<f64>,
}

/// Builds one hybrid vector. The embedding must already be group-normalized
/// (every value in [0, 1]); gamma must be positive and scales only the topic
/// block, steering how much the lexical view matters downstream.
pub fn build_hybrid(
    topics: &DocTopicDistribution,
    embedding: &EmbeddingVector,
    gamma: f64,
) -> Result<HybridVector, PshtiError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(PshtiError::InvalidConfig(format!(
            "gamma must be finite and > 0, got {gamma}"
        )));
    }
    for (index, &value) in embedding.values.iter().enumerate() {
        if !(-1e-12..=1.0 + 1e-12).contains(&value) {
            return Err(PshtiError::UnnormalizedEmbedding { index, value });
        }
    }
    let mut values = Vec::with_capacity(topics.probabilities.len() + embedding.values.len());
    values.extend(topics.probabilities.iter().map(|p| gamma * p));
    values.extend_from_slice(&embedding.values);
    Ok(HybridVector {
        doc_id: topics.doc_id.clone(),
        values,
    })
}

/// Sub-topic count rule: groups with more than `threshold` documents get
/// `large` clusters, the rest get `small`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KSubRule {
    pub threshold: usize,
    pub large: usize,
    pub small: usize,
}

impl Default for KSubRule {
    fn default() -> Self {
        KSubRule {
            threshold: 500,
            large: 8,
            small: 2,
        }
    }
}

/// Applies the rule (strictly-greater threshold) and clamps to the group
/// size so tiny groups stay clusterable.
pub fn choose_k_sub(group_size: usize, rule: &KSubRule) -> usize {
    let k = if group_size > rule.threshold {
        rule.large
    } else {
        rule.small
    };
    k.min(group_size).max(1)
}

/// How clusters get their descriptive words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopWordMethod {
    /// Term frequency within the cluster, weighted by ln(1 + C / df) where
    /// df counts the clusters containing the term.
    ClassTfIdf,
    /// Top words of the LDA topic that dominates the cluster.
    LdaTopicMass,
}

/// Top `n` words for one cluster of the partition, scored by within-cluster
/// term frequency times a cluster-level idf. Score ties break alphabetically.
/// The indexed cluster must be nonempty; a cluster whose documents carry no
/// tokens yields an empty list.
pub fn extract_top_words(
    cluster: usize,
    clusters: &[Vec<&TokenizedDoc>],
    n: usize,
) -> Result<Vec<String>, PshtiError> {
    let target = clusters
        .get(cluster)
        .ok_or(PshtiError::EmptyCluster { index: cluster })?;
    if target.is_empty() {
        return Err(PshtiError::EmptyCluster { index: cluster });
    }
    let total_clusters = clusters.len() as f64;
    // Cluster-level document frequency per term.
    let mut cluster_df: HashMap<&str, usize> = HashMap::new();
    for docs in clusters {
        let mut seen: Vec<&str> = docs
            .iter()
            .flat_map(|d| d.tokens.iter().map(String::as_str))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        for t in seen {
            *cluster_df.entry(t).or_insert(0) += 1;
        }
    }
    let mut tf: HashMap<&str, usize> = HashMap::new();
    for doc in target {
        for t in &doc.tokens {
            *tf.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    let mut scored: Vec<(&str, f64)> = tf
        .into_iter()
        .map(|(t, count)| {
            let df = cluster_df[t] as f64;
            (t, count as f64 * (1.0 + total_clusters / df).ln())
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("scores are finite")
            .then_with(|| a.0.cmp(b.0))
    });
    Ok(scored.into_iter().take(n).map(|(t, _)| t.to_string()).collect())
}

/// One discovered sub-topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTopicCluster {
    pub index: usize,
    /// Member document ids, in group input order.
    pub members: Vec<String>,
    pub top_words: Vec<String>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Scale on the topic block of the hybrid vector.
    pub gamma: f64,
    /// Min-max normalize embeddings before concatenation. Off only for
    /// ablation comparisons.
    pub normalize_embeddings: bool,
    pub k_sub_rule: KSubRule,
    /// Fixed k_sub, bypassing the rule.
    pub k_sub_override: Option<usize>,
    /// Per-group LDA settings; `k` and `seed` are overwritten by the driver.
    pub lda: LdaConfig,
    /// Autoencoder settings; `seed` is overwritten by the driver.
    pub vae: VaeConfig,
    pub kmeans_max_iterations: usize,
    /// Words kept per cluster.
    pub top_words: usize,
    pub top_word_method: TopWordMethod,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            gamma: 1.0,
            normalize_embeddings: true,
            k_sub_rule: KSubRule::default(),
            k_sub_override: None,
            lda: LdaConfig::default(),
            vae: VaeConfig::default(),
            kmeans_max_iterations: 100,
            top_words: 10,
            top_word_method: TopWordMethod::ClassTfIdf,
            seed: 42,
        }
    }
}

/// Everything stage one produces for a group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Output {
    pub group: String,
    pub k_sub: usize,
    pub gamma: f64,
    pub normalized: bool,
    pub normalization: Option<NormalizationSummary>,
    pub clusters: Vec<SubTopicCluster>,
    /// Cluster index per document, aligned with `doc_ids`.
    pub assignments: Vec<usize>,
    pub doc_ids: Vec<String>,
    /// Autoencoder latent per document, aligned with `doc_ids`.
    pub latents: Vec<Vec<f64>>,
    pub vae_final_loss: f64,
    pub kmeans_inertia: f64,
    #[serde(skip)]
    pub lda_model: Option<LdaModel>,
}

/// Runs the full stage-one chain for one group: LDA mixtures, embedding
/// normalization, hybrid concatenation, autoencoder compression, k-means,
/// top words. `docs` and `embeddings` must be aligned index by index.
pub fn run_stage1(
    group: &str,
    docs: &[TokenizedDoc],
    embeddings: &[EmbeddingVector],
    vocab: &Vocabulary,
    cfg: &Stage1Config,
) -> Result<Stage1Output, PshtiError> {
    if docs.is_empty() {
        return Err(PshtiError::InvalidConfig("group has no documents".into()));
    }
    if docs.len() != embeddings.len() {
        return Err(PshtiError::InvalidConfig(format!(
            "{} docs but {} embeddings",
            docs.len(),
            embeddings.len()
        )));
    }
    let k_sub = cfg
        .k_sub_override
        .unwrap_or_else(|| choose_k_sub(docs.len(), &cfg.k_sub_rule))
        .min(docs.len())
        .max(1);

    let lda_cfg = LdaConfig {
        k: k_sub,
        seed: crate::derive_seed(cfg.seed, &format!("lda:{group}")),
        ..cfg.lda.clone()
    };
    let lda_model = crate::lda::fit(docs, vocab, &lda_cfg)?;
    let mixtures = lda_model.train_doc_topics();

    let (embeddings_used, normalization) = if cfg.normalize_embeddings {
        let (normalized, summary) = minmax_normalize_group(embeddings);
        (normalized, Some(summary))
    } else {
        (embeddings.to_vec(), None)
    };

    let hybrids: Vec<Vec<f64>> = if cfg.normalize_embeddings {
        mixtures
            .iter()
            .zip(&embeddings_used)
            .map(|(a, b)| build_hybrid(a, b, cfg.gamma).map(|h| h.values))
            .collect::<Result<_, _>>()?
    } else {
        // Ablation path: same concatenation without the unit-range guard.
        if !(cfg.gamma.is_finite() && cfg.gamma > 0.0) {
            return Err(PshtiError::InvalidConfig(format!(
                "gamma must be finite and > 0, got {}",
                cfg.gamma
            )));
        }
        mixtures
            .iter()
            .zip(&embeddings_used)
            .map(|(a, b)| {
                let mut v: Vec<f64> =
                    a.probabilities.iter().map(|p| cfg.gamma * p).collect();
                v.extend_from_slice(&b.values);
                v
            })
            .collect()
    };

    let vae_cfg = VaeConfig {
        seed: crate::derive_seed(cfg.seed, &format!("vae:{group}")),
        ..cfg.vae.clone()
    };
    let (vae_model, vae_trace) = train_autoencoder(&hybrids, &vae_cfg)?;
    let latents: Vec<Vec<f64>> = hybrids
        .iter()
        .map(|h| vae_model.encode(h))
        .collect::<Result<_, _>>()?;

    let km = kmeans(
        &latents,
        k_sub,
        crate::derive_seed(cfg.seed, &format!("kmeans:{group}")),
        cfg.kmeans_max_iterations,
    )?;

    let mut cluster_docs: Vec<Vec<&TokenizedDoc>> = vec![Vec::new(); k_sub];
    for (doc, &assignment) in docs.iter().zip(&km.assignments) {
        cluster_docs[assignment].push(doc);
    }

    let mut clusters = Vec::with_capacity(k_sub);
    for index in 0..k_sub {
        let members: Vec<String> = cluster_docs[index].iter().map(|d| d.id.clone()).collect();
        let top_words = match cfg.top_word_method {
            TopWordMethod::ClassTfIdf => {
                let has_tokens = cluster_docs[index].iter().any(|d| !d.tokens.is_empty());
                if has_tokens {
                    extract_top_words(index, &cluster_docs, cfg.top_words)?
                } else {
                    log::warn!("cluster {index} of group {group:?} has no tokens; no top words");
                    Vec::new()
                }
            }
            TopWordMethod::LdaTopicMass => {
                // Dominant LDA topic over the cluster's members.
                let mut mass = vec![0.0; k_sub];
                for (mixture, &assignment) in mixtures.iter().zip(&km.assignments) {
                    if assignment == index {
                        for (m, p) in mass.iter_mut().zip(&mixture.probabilities) {
                            *m += p;
                        }
                    }
                }
                let dominant = mass
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite mass"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                lda_model.top_words(dominant, cfg.top_words)?
            }
        };
        clusters.push(SubTopicCluster {
            index,
            members,
            top_words,
            centroid: km.centroids[index].clone(),
        });
    }

    Ok(Stage1Output {
        group: group.to_string(),
        k_sub,
        gamma: cfg.gamma,
        normalized: cfg.normalize_embeddings,
        normalization,
        clusters,
        assignments: km.assignments,
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        latents,
        vae_final_loss: *vae_trace.last().expect("epochs >= 1"),
        kmeans_inertia: km.inertia,
        lda_model: Some(lda_model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::provider::{EmbeddingProvider, HashEmbeddingProvider};

    fn doc(id: &str, tokens: &[&str]) -> TokenizedDoc {
        TokenizedDoc {
            id: id.to_string(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            truncated: false,
        }
    }

    fn dist(id: &str, probs: &[f64]) -> DocTopicDistribution {
        DocTopicDistribution {
            doc_id: id.to_string(),
            probabilities: probs.to_vec(),
        }
    }

    fn unit_vec(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector {
            values: values.to_vec(),
        }
    }

    #[test]
    fn hybrid_concatenates_topic_head_and_embedding_tail() {
        let topics = dist("d1", &[0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.1, 0.1]);
        let embedding = unit_vec(&vec![0.5; 768]);
        let hybrid = build_hybrid(&topics, &embedding, 1.0).unwrap();
        assert_eq!(hybrid.values.len(), 776);
        assert_eq!(&hybrid.values[..8], &[0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.1, 0.1]);
        assert!(hybrid.values[8..].iter().all(|&v| v == 0.5));
        assert_eq!(hybrid.doc_id, "d1");
    }

    #[test]
    fn hybrid_gamma_scales_only_the_topic_block() {
        let topics = dist("d1", &[0.5, 0.5]);
        let embedding = unit_vec(&[0.0, 1.0, 0.25]);
        let hybrid = build_hybrid(&topics, &embedding, 2.0).unwrap();
        assert_eq!(hybrid.values, vec![1.0, 1.0, 0.0, 1.0, 0.25]);
    }

    #[test]
    fn hybrid_rejects_unnormalized_embedding() {
        let topics = dist("d1", &[1.0]);
        let embedding = unit_vec(&[0.2, 1.5]);
        match build_hybrid(&topics, &embedding, 1.0) {
            Err(PshtiError::UnnormalizedEmbedding { index: 1, value }) => {
                assert_eq!(value, 1.5);
            }
            other => panic!("expected unnormalized error, got {other:?}"),
        }
    }

    #[test]
    fn hybrid_rejects_non_positive_gamma() {
        let topics = dist("d1", &[1.0]);
        let embedding = unit_vec(&[0.5]);
        assert!(matches!(
            build_hybrid(&topics, &embedding, 0.0),
            Err(PshtiError::InvalidConfig(_))
        ));
        assert!(matches!(
            build_hybrid(&topics, &embedding, -1.0),
            Err(PshtiError::InvalidConfig(_))
        ));
    }

    #[test]
    fn k_sub_rule_boundary_is_strict() {
        let rule = KSubRule::default();
        assert_eq!(choose_k_sub(501, &rule), 8);
        assert_eq!(choose_k_sub(500, &rule), 2);
        assert_eq!(choose_k_sub(5000, &rule), 8);
        assert_eq!(choose_k_sub(3, &rule), 2);
        // Clamped to the group size.
        assert_eq!(choose_k_sub(1, &rule), 1);
    }

    #[test]
    fn top_words_prefer_frequent_and_distinctive_terms() {
        let c0 = [
            doc("a", &["apple", "apple", "banana"]),
            doc("b", &["apple", "cherry"]),
        ];
        let c1 = [doc("c", &["dog", "dog", "cat"])];
        let c0_refs: Vec<&TokenizedDoc> = c0.iter().collect();
        let c1_refs: Vec<&TokenizedDoc> = c1.iter().collect();
        let clusters = vec![c0_refs, c1_refs];
        // Scores in cluster 0: apple 3*ln3, banana/cherry 1*ln3 each; the tie
        // breaks alphabetically.
        let words = extract_top_words(0, &clusters, 3).unwrap();
        assert_eq!(words, vec!["apple", "banana", "cherry"]);
        let top2 = extract_top_words(0, &clusters, 2).unwrap();
        assert_eq!(top2, vec!["apple", "banana"]);
    }

    #[test]
    fn top_words_downweight_terms_shared_across_clusters() {
        let c0 = [doc("a", &["sync", "sync", "shared"])];
        let c1 = [doc("b", &["shared", "attach"])];
        let c0_refs: Vec<&TokenizedDoc> = c0.iter().collect();
        let c1_refs: Vec<&TokenizedDoc> = c1.iter().collect();
        let clusters = vec![c0_refs, c1_refs];
        // sync: 2*ln(3) > shared: 1*ln(2).
        let words = extract_top_words(0, &clusters, 2).unwrap();
        assert_eq!(words, vec!["sync", "shared"]);
    }

    #[test]
    fn top_words_empty_cluster_is_an_error() {
        let c0 = [doc("a", &["x"])];
        let c0_refs: Vec<&TokenizedDoc> = c0.iter().collect();
        let clusters = vec![c0_refs, Vec::new()];
        assert!(matches!(
            extract_top_words(1, &clusters, 3),
            Err(PshtiError::EmptyCluster { index: 1 })
        ));
    }

    /// Group with two planted sub-topics in both vocabulary and embedding
    /// space: texts reuse their sub-topic's word bank, and the hash provider
    /// turns that overlap into embedding proximity.
    fn planted_group() -> (Vec<TokenizedDoc>, Vec<EmbeddingVector>, Vocabulary, Vec<usize>) {
        let banks = [
            ["meet", "invite", "send", "option", "calendar", "room"],
            ["attach", "file", "upload", "size", "limit", "drag"],
        ];
        let provider = HashEmbeddingProvider::new(32, 99);
        let mut docs = Vec::new();
        let mut embeddings = Vec::new();
        let mut truth = Vec::new();
        for sub in 0..2usize {
            for i in 0..15 {
                let bank = &banks[sub];
                let tokens: Vec<&str> = (0..8).map(|j| bank[(i + j * (1 + sub)) % bank.len()]).collect();
                let text = tokens.join(" ");
                docs.push(doc(&format!("g{sub}-{i}"), &tokens));
                embeddings.push(provider.embed(&text).unwrap());
                truth.push(sub);
            }
        }
        let vocab = crate::corpus::build_vocabulary(&docs, 1, 1.0).unwrap();
        (docs, embeddings, vocab, truth)
    }

    fn planted_cfg() -> Stage1Config {
        Stage1Config {
            k_sub_override: Some(2),
            lda: LdaConfig {
                alpha: Some(0.1),
                iterations: 200,
                ..LdaConfig::default()
            },
            vae: VaeConfig {
                hidden_dim: 24,
                latent_dim: 4,
                kl_weight: 0.01,
                learning_rate: 0.01,
                epochs: 60,
                batch_size: 30,
                ..VaeConfig::default()
            },
            seed: 5,
            ..Stage1Config::default()
        }
    }

    #[test]
    fn stage1_recovers_planted_subtopics() {
        let (docs, embeddings, vocab, truth) = planted_group();
        let out = run_stage1("Calendar", &docs, &embeddings, &vocab, &planted_cfg()).unwrap();
        assert_eq!(out.k_sub, 2);
        assert_eq!(out.assignments.len(), docs.len());
        assert_eq!(out.latents.len(), docs.len());
        assert_eq!(out.latents[0].len(), 4);
        assert!(out.normalization.is_some());
        // Cluster agreement with the planted split, up to label swap.
        let direct = out
            .assignments
            .iter()
            .zip(&truth)
            .filter(|(a, b)| a == b)
            .count();
        let agreement = direct.max(docs.len() - direct) as f64 / docs.len() as f64;
        assert!(agreement >= 0.9, "agreement {agreement}");
        // Top words come from the right bank.
        for cluster in &out.clusters {
            assert!(!cluster.members.is_empty());
            assert!(!cluster.top_words.is_empty());
        }
    }

    #[test]
    fn stage1_is_deterministic() {
        let (docs, embeddings, vocab, _) = planted_group();
        let a = run_stage1("g", &docs, &embeddings, &vocab, &planted_cfg()).unwrap();
        let b = run_stage1("g", &docs, &embeddings, &vocab, &planted_cfg()).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.latents, b.latents);
        assert_eq!(a.clusters, b.clusters);
    }

    #[test]
    fn stage1_unnormalized_ablation_skips_the_range_guard() {
        let (docs, embeddings, vocab, _) = planted_group();
        let cfg = Stage1Config {
            normalize_embeddings: false,
            ..planted_cfg()
        };
        // Raw hash embeddings are not in [0, 1]; the ablation path must
        // accept them anyway.
        let out = run_stage1("g", &docs, &embeddings, &vocab, &cfg).unwrap();
        assert!(out.normalization.is_none());
        assert!(!out.normalized);
    }

    #[test]
    fn stage1_rejects_misaligned_inputs() {
        let (docs, embeddings, vocab, _) = planted_group();
        let result = run_stage1("g", &docs[..5], &embeddings, &vocab, &planted_cfg());
        assert!(matches!(result, Err(PshtiError::InvalidConfig(_))));
    }

    #[test]
    fn stage1_lda_word_labels_use_topic_words() {
        let (docs, embeddings, vocab, _) = planted_group();
        let cfg = Stage1Config {
            top_word_method: TopWordMethod::LdaTopicMass,
            ..planted_cfg()
        };
        let out = run_stage1("g", &docs, &embeddings, &vocab, &cfg).unwrap();
        for cluster in &out.clusters {
            assert!(!cluster.top_words.is_empty());
        }
    }
}
