//! Cluster-quality metrics: UCI topic coherence and silhouette score.
//!
//! Coherence scores a sub-topic's top-word list by average pairwise PMI,
//! with word probabilities estimated from sliding windows over the same
//! feedback group the sub-topics were mined from. Silhouette scores a
//! clustering geometrically from within- and between-cluster distances.
//! Both metrics are fully deterministic.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenizedDoc;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fewer than 2 top words with nonzero corpus probability ({usable} usable)")]
    TooFewWords { usable: usize },
    #[error("silhouette is undefined for a single cluster")]
    SingleCluster,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoherenceConfig {
    /// Sliding-window width in tokens; documents shorter than this form one
    /// window.
    pub window_size: usize,
    /// Smoothing constant added to the joint probability inside the PMI log.
    pub epsilon: f64,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        CoherenceConfig {
            window_size: 10,
            epsilon: 1e-12,
        }
    }
}

impl CoherenceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.window_size < 2 {
            return Err(format!(
                "window_size must be at least 2, got {}",
                self.window_size
            ));
        }
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(format!("epsilon must be positive, got {}", self.epsilon));
        }
        Ok(())
    }
}

/// Window-frequency tables backing the PMI estimates. Probabilities are
/// fractions of all windows containing a word (or both words of a pair);
/// a window counts each distinct word once regardless of repeats.
#[derive(Debug, Clone, Default)]
pub struct WindowProbs {
    total_windows: u64,
    word_counts: HashMap<String, u64>,
    pair_counts: HashMap<(String, String), u64>,
}

impl WindowProbs {
    pub fn total_windows(&self) -> u64 {
        self.total_windows
    }

    pub fn p_word(&self, word: &str) -> f64 {
        if self.total_windows == 0 {
            return 0.0;
        }
        *self.word_counts.get(word).unwrap_or(&0) as f64 / self.total_windows as f64
    }

    /// Joint probability; symmetric in its arguments.
    pub fn p_pair(&self, a: &str, b: &str) -> f64 {
        if self.total_windows == 0 {
            return 0.0;
        }
        let key = ordered_pair(a, b);
        *self.pair_counts.get(&key).unwrap_or(&0) as f64 / self.total_windows as f64
    }
}

fn ordered_pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// Counts word and word-pair occurrences over all contiguous windows of
/// length `min(window_size, doc length)`, slid one token at a time within
/// each document.
pub fn count_window_probs(docs: &[TokenizedDoc], window_size: usize) -> WindowProbs {
    assert!(!docs.is_empty(), "window counting needs at least one document");
    assert!(window_size >= 2, "window_size must be at least 2");
    let mut probs = WindowProbs::default();
    let mut distinct: Vec<&str> = Vec::with_capacity(window_size);
    for doc in docs {
        if doc.tokens.is_empty() {
            continue;
        }
        let width = window_size.min(doc.tokens.len());
        for window in doc.tokens.windows(width) {
            probs.total_windows += 1;
            distinct.clear();
            distinct.extend(window.iter().map(String::as_str));
            distinct.sort_unstable();
            distinct.dedup();
            for (i, &a) in distinct.iter().enumerate() {
                *probs.word_counts.entry(a.to_string()).or_insert(0) += 1;
                for &b in &distinct[i + 1..] {
                    // `distinct` is sorted, so (a, b) is already ordered.
                    *probs
                        .pair_counts
                        .entry((a.to_string(), b.to_string()))
                        .or_insert(0) += 1;
                }
            }
        }
    }
    probs
}

/// Normalizing coefficient for the pairwise sum: 2 / (N·(N−1)).
pub fn pair_coefficient(n: usize) -> f64 {
    assert!(n >= 2);
    2.0 / (n as f64 * (n as f64 - 1.0))
}

/// UCI coherence of a top-word list: the mean over unordered word pairs of
/// `ln((P(wi, wj) + epsilon) / (P(wi) · P(wj)))`. Words that never occur in
/// the reference corpus are dropped with a warning before pairing.
pub fn uci_coherence(
    top_words: &[String],
    probs: &WindowProbs,
    epsilon: f64,
) -> Result<f64, EvalError> {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let usable: Vec<&String> = top_words
        .iter()
        .filter(|w| {
            let keep = probs.p_word(w) > 0.0;
            if !keep {
                log::warn!("dropping top word {w:?} absent from the reference corpus");
            }
            keep
        })
        .collect();
    if usable.len() < 2 {
        return Err(EvalError::TooFewWords {
            usable: usable.len(),
        });
    }
    let mut sum = 0.0;
    for (i, a) in usable.iter().enumerate() {
        let pa = probs.p_word(a);
        for b in &usable[i + 1..] {
            let pb = probs.p_word(b);
            let joint = probs.p_pair(a, b);
            sum += ((joint + epsilon) / (pa * pb)).ln();
        }
    }
    Ok(pair_coefficient(usable.len()) * sum)
}

/// Per-point and aggregate silhouette values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SilhouetteReport {
    pub per_point: Vec<f64>,
    pub mean: f64,
    pub per_cluster: BTreeMap<usize, f64>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Silhouette score with Euclidean distance. For each point, `a` is the mean
/// distance to the rest of its own cluster, `b` the smallest mean distance
/// to any other cluster, and `s = (b − a) / max(a, b)`. Singleton-cluster
/// points score 0, as do coincident clusters where `a = b = 0`.
pub fn silhouette(
    points: &[Vec<f64>],
    assignments: &[usize],
) -> Result<SilhouetteReport, EvalError> {
    assert_eq!(
        points.len(),
        assignments.len(),
        "one assignment per point required"
    );
    assert!(!points.is_empty(), "silhouette needs at least one point");
    let dim = points[0].len();
    assert!(
        points.iter().all(|p| p.len() == dim),
        "all points must share one dimension"
    );

    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, &cluster) in assignments.iter().enumerate() {
        members.entry(cluster).or_default().push(idx);
    }
    if members.len() < 2 {
        return Err(EvalError::SingleCluster);
    }

    let mut per_point = vec![0.0; points.len()];
    for (i, point) in points.iter().enumerate() {
        let own = assignments[i];
        let own_members = &members[&own];
        if own_members.len() == 1 {
            per_point[i] = 0.0;
            continue;
        }
        let a: f64 = own_members
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| euclidean(point, &points[j]))
            .sum::<f64>()
            / (own_members.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(&cluster, _)| cluster != own)
            .map(|(_, idxs)| {
                idxs.iter()
                    .map(|&j| euclidean(point, &points[j]))
                    .sum::<f64>()
                    / idxs.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        per_point[i] = if denom == 0.0 { 0.0 } else { (b - a) / denom };
        debug_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&per_point[i]));
    }

    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    let per_cluster = members
        .iter()
        .map(|(&cluster, idxs)| {
            let m = idxs.iter().map(|&j| per_point[j]).sum::<f64>() / idxs.len() as f64;
            (cluster, m)
        })
        .collect();
    Ok(SilhouetteReport {
        per_point,
        mean,
        per_cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn doc(id: &str, tokens: &[&str]) -> TokenizedDoc {
        TokenizedDoc {
            id: id.to_string(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            truncated: false,
        }
    }

    fn w(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_short_doc_is_one_window() {
        let probs = count_window_probs(&[doc("d1", &["a", "b"])], 10);
        assert_eq!(probs.total_windows(), 1);
        assert_eq!(probs.p_word("a"), 1.0);
        assert_eq!(probs.p_word("b"), 1.0);
        assert_eq!(probs.p_pair("a", "b"), 1.0);
        assert_eq!(probs.p_pair("b", "a"), 1.0);
        assert_eq!(probs.p_word("missing"), 0.0);
    }

    #[test]
    fn two_docs_share_one_word() {
        let probs = count_window_probs(&[doc("d1", &["a", "b"]), doc("d2", &["a", "c"])], 10);
        assert_eq!(probs.total_windows(), 2);
        assert_eq!(probs.p_word("a"), 1.0);
        assert_eq!(probs.p_word("b"), 0.5);
        assert_eq!(probs.p_word("c"), 0.5);
        assert_eq!(probs.p_pair("b", "c"), 0.0);
        assert_eq!(probs.p_pair("a", "b"), 0.5);
    }

    #[test]
    fn long_doc_slides_by_one() {
        // 5 tokens, window 3 -> 3 windows: [a b c], [b c a], [c a d].
        let probs = count_window_probs(&[doc("d1", &["a", "b", "c", "a", "d"])], 3);
        assert_eq!(probs.total_windows(), 3);
        assert_eq!(probs.p_word("a"), 1.0);
        assert_eq!(probs.p_word("b"), 2.0 / 3.0);
        assert_eq!(probs.p_word("d"), 1.0 / 3.0);
        // Repeats inside a window count once: window 2 contains `a` once.
        assert_eq!(probs.p_pair("a", "b"), 2.0 / 3.0);
        assert_eq!(probs.p_pair("a", "d"), 1.0 / 3.0);
        assert_eq!(probs.p_pair("b", "d"), 0.0);
    }

    #[test]
    fn coherence_of_always_cooccurring_pair_is_near_zero() {
        let probs = count_window_probs(&[doc("d1", &["a", "b"])], 10);
        let c = uci_coherence(&w(&["a", "b"]), &probs, 1e-12).unwrap();
        // ln((1 + eps) / 1) is approximately eps.
        assert!(c > 0.0 && c < 1e-11, "got {c}");
    }

    #[test]
    fn coherence_of_never_cooccurring_pair_matches_hand_value() {
        let probs = count_window_probs(&[doc("d1", &["a", "b"]), doc("d2", &["a", "c"])], 10);
        let c = uci_coherence(&w(&["b", "c"]), &probs, 1e-12).unwrap();
        // ln((0 + 1e-12) / (0.5 * 0.5)) = ln(4e-12) = -26.2447267548...
        let expected = (4e-12f64).ln();
        assert!((expected - (-26.244726754808662)).abs() < 1e-9);
        assert!((c - expected).abs() < 1e-9, "got {c}");
    }

    #[test]
    fn coefficient_for_ten_words_is_one_forty_fifth() {
        assert_eq!(pair_coefficient(10), 1.0 / 45.0);
        assert_eq!(pair_coefficient(2), 1.0);
    }

    #[test]
    fn absent_words_are_dropped_before_pairing() {
        let probs = count_window_probs(&[doc("d1", &["a", "b"])], 10);
        let with_ghost = uci_coherence(&w(&["a", "b", "ghost"]), &probs, 1e-12).unwrap();
        let without = uci_coherence(&w(&["a", "b"]), &probs, 1e-12).unwrap();
        assert_eq!(with_ghost, without);
        assert!(matches!(
            uci_coherence(&w(&["a", "ghost"]), &probs, 1e-12),
            Err(EvalError::TooFewWords { usable: 1 })
        ));
        assert!(matches!(
            uci_coherence(&w(&["x", "ghost"]), &probs, 1e-12),
            Err(EvalError::TooFewWords { usable: 0 })
        ));
    }

    #[test]
    fn coherence_is_permutation_invariant() {
        let docs = vec![
            doc("d1", &["a", "b", "c", "d", "e"]),
            doc("d2", &["a", "c", "e", "f"]),
            doc("d3", &["b", "d", "f", "a"]),
        ];
        let probs = count_window_probs(&docs, 3);
        let forward = uci_coherence(&w(&["a", "b", "c", "f"]), &probs, 1e-12).unwrap();
        let shuffled = uci_coherence(&w(&["f", "c", "a", "b"]), &probs, 1e-12).unwrap();
        assert!((forward - shuffled).abs() < 1e-12);
    }

    #[test]
    fn pair_probability_bounded_by_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let vocab = ["a", "b", "c", "d", "e", "f", "g"];
        let docs: Vec<TokenizedDoc> = (0..20)
            .map(|i| {
                let len = rng.random_range(2..15);
                let tokens: Vec<&str> = (0..len)
                    .map(|_| vocab[rng.random_range(0..vocab.len())])
                    .collect();
                doc(&format!("d{i}"), &tokens)
            })
            .collect();
        let probs = count_window_probs(&docs, 5);
        for (i, a) in vocab.iter().enumerate() {
            for b in &vocab[i + 1..] {
                let joint = probs.p_pair(a, b);
                assert!(joint <= probs.p_word(a) + 1e-15);
                assert!(joint <= probs.p_word(b) + 1e-15);
            }
        }
    }

    #[test]
    fn silhouette_two_tight_far_clusters() {
        let points = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let report = silhouette(&points, &[0, 0, 1, 1]).unwrap();
        // Hand-computed: s(0) = (10.05 - 0.1) / 10.05, s(1) = (9.95 - 0.1) / 9.95,
        // and the outer pair mirrors the inner by symmetry.
        let s0 = 9.95 / 10.05;
        let s1 = 9.85 / 9.95;
        assert!((report.per_point[0] - s0).abs() < 1e-12);
        assert!((report.per_point[1] - s1).abs() < 1e-12);
        assert!((report.per_point[2] - s1).abs() < 1e-12);
        assert!((report.per_point[3] - s0).abs() < 1e-12);
        assert!((report.mean - (s0 + s1) / 2.0).abs() < 1e-12);
        assert!((report.per_point[0] - 0.99005).abs() < 1e-5);
        assert_eq!(report.per_cluster.len(), 2);
        assert!((report.per_cluster[&0] - (s0 + s1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_clusters_score_zero() {
        let points = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]];
        let report = silhouette(&points, &[0, 1, 0, 1]).unwrap();
        assert!(report.per_point.iter().all(|&s| s == 0.0));
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn singleton_cluster_scores_zero() {
        let points = vec![vec![0.0], vec![0.2], vec![5.0]];
        let report = silhouette(&points, &[0, 0, 1]).unwrap();
        assert_eq!(report.per_point[2], 0.0);
        assert_eq!(report.per_cluster[&1], 0.0);
        assert!(report.per_point[0] > 0.9);
    }

    #[test]
    fn single_cluster_is_an_error() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            silhouette(&points, &[3, 3]),
            Err(EvalError::SingleCluster)
        ));
    }

    #[test]
    fn silhouette_matches_distance_matrix_oracle() {
        // Independent recomputation from a full distance matrix, across 100
        // random instances.
        fn oracle(points: &[Vec<f64>], assignments: &[usize]) -> Vec<f64> {
            let n = points.len();
            let mut dist = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    dist[i][j] = points[i]
                        .iter()
                        .zip(&points[j])
                        .map(|(x, y)| (x - y).powi(2))
                        .sum::<f64>()
                        .sqrt();
                }
            }
            let clusters: std::collections::BTreeSet<usize> =
                assignments.iter().copied().collect();
            (0..n)
                .map(|i| {
                    let own: Vec<usize> = (0..n)
                        .filter(|&j| assignments[j] == assignments[i] && j != i)
                        .collect();
                    if own.is_empty() {
                        return 0.0;
                    }
                    let a = own.iter().map(|&j| dist[i][j]).sum::<f64>() / own.len() as f64;
                    let b = clusters
                        .iter()
                        .filter(|&&c| c != assignments[i])
                        .map(|&c| {
                            let other: Vec<usize> =
                                (0..n).filter(|&j| assignments[j] == c).collect();
                            other.iter().map(|&j| dist[i][j]).sum::<f64>()
                                / other.len() as f64
                        })
                        .fold(f64::INFINITY, f64::min);
                    if a.max(b) == 0.0 {
                        0.0
                    } else {
                        (b - a) / a.max(b)
                    }
                })
                .collect()
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let n = rng.random_range(5..30);
            let d = rng.random_range(1..4);
            let k = rng.random_range(2..5.min(n));
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
                .collect();
            // Force at least one point per cluster so all k ids appear.
            let assignments: Vec<usize> =
                (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
            let report = silhouette(&points, &assignments).unwrap();
            let expected = oracle(&points, &assignments);
            for (got, want) in report.per_point.iter().zip(&expected) {
                assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
            }
            let mean = expected.iter().sum::<f64>() / expected.len() as f64;
            assert!((report.mean - mean).abs() < 1e-9);
            assert!(report.mean >= -1.0 - 1e-12 && report.mean <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn silhouette_invariant_under_rigid_motion_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let points: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let center = if i < 10 { 0.0 } else { 6.0 };
                vec![
                    center + rng.random_range(-1.0..1.0),
                    center + rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let assignments: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let base = silhouette(&points, &assignments).unwrap();

        let (sin, cos) = 0.7f64.sin_cos();
        let rotated: Vec<Vec<f64>> = points
            .iter()
            .map(|p| vec![cos * p[0] - sin * p[1] + 3.5, sin * p[0] + cos * p[1] - 1.25])
            .collect();
        let rot = silhouette(&rotated, &assignments).unwrap();
        assert!((base.mean - rot.mean).abs() < 1e-9);

        let scaled: Vec<Vec<f64>> =
            points.iter().map(|p| vec![7.0 * p[0], 7.0 * p[1]]).collect();
        let sc = silhouette(&scaled, &assignments).unwrap();
        assert!((base.mean - sc.mean).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(CoherenceConfig::default().validate().is_ok());
        assert!(CoherenceConfig {
            window_size: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(CoherenceConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
