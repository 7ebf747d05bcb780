//! Latent Dirichlet Allocation via collapsed Gibbs sampling.
//!
//! One model is fit per main-topic group; its per-document topic mixtures
//! become the lexical half of the hybrid sub-topic vectors. Sampling uses
//! integer count matrices and a seeded ChaCha stream, so a fit is
//! reproducible bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenizedDoc, Vocabulary};

#[derive(Debug, Error)]
pub enum LdaError {
    #[error("invalid LDA config: {0}")]
    InvalidConfig(String),
    #[error("no documents with in-vocabulary tokens")]
    EmptyCorpus,
    #[error("topic index {topic} out of range for k = {k}")]
    TopicIndexOutOfRange { topic: usize, k: usize },
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad LDA artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaConfig {
    /// Number of topics.
    pub k: usize,
    /// Document-topic prior; `None` uses the 50/k heuristic.
    pub alpha: Option<f64>,
    /// Topic-word prior.
    pub beta: f64,
    /// Gibbs sweeps over the corpus.
    pub iterations: usize,
    /// Sweeps when folding in an unseen document.
    pub fold_in_iterations: usize,
    pub seed: u64,
    /// When > 0, report document-topic mixtures averaged over the final N
    /// sweeps instead of reading them off the last state only.
    pub average_last_sweeps: usize,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            k: 8,
            alpha: None,
            beta: 0.01,
            iterations: 1000,
            fold_in_iterations: 100,
            seed: 42,
            average_last_sweeps: 0,
        }
    }
}

impl LdaConfig {
    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.k as f64)
    }

    fn validate(&self) -> Result<(), LdaError> {
        if self.k == 0 {
            return Err(LdaError::InvalidConfig("k must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(LdaError::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.fold_in_iterations == 0 {
            return Err(LdaError::InvalidConfig(
                "fold_in_iterations must be >= 1".into(),
            ));
        }
        let alpha = self.effective_alpha();
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(LdaError::InvalidConfig("alpha must be > 0".into()));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(LdaError::InvalidConfig("beta must be > 0".into()));
        }
        if self.average_last_sweeps > self.iterations {
            return Err(LdaError::InvalidConfig(
                "average_last_sweeps cannot exceed iterations".into(),
            ));
        }
        Ok(())
    }
}

/// Topic mixture for one document; probabilities sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocTopicDistribution {
    pub doc_id: String,
    pub probabilities: Vec<f64>,
}

/// A fitted model: frozen topic-word counts plus the doc-topic counts of the
/// training documents. Carries its own term list so top words and fold-in
/// work after reload without the original vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaModel {
    k: usize,
    alpha: f64,
    beta: f64,
    iterations: usize,
    fold_in_iterations: usize,
    seed: u64,
    vocab_hash: String,
    terms: Vec<String>,
    /// k x V, row-major.
    topic_word: Vec<u32>,
    topic_totals: Vec<u32>,
    doc_ids: Vec<String>,
    /// docs x k, row-major.
    doc_topic: Vec<u32>,
    doc_lengths: Vec<u32>,
    /// docs x k smoothed mixtures averaged over the tail sweeps, when enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    averaged_doc_topic: Option<Vec<f64>>,
    #[serde(skip)]
    term_index: HashMap<String, usize>,
}

struct GibbsState {
    k: usize,
    v: usize,
    alpha: f64,
    beta: f64,
    doc_tokens: Vec<Vec<usize>>,
    assignments: Vec<Vec<usize>>,
    doc_topic: Vec<u32>,
    topic_word: Vec<u32>,
    topic_totals: Vec<u32>,
}

impl GibbsState {
    fn init(doc_tokens: Vec<Vec<usize>>, k: usize, v: usize, alpha: f64, beta: f64, rng: &mut ChaCha8Rng) -> Self {
        let n_docs = doc_tokens.len();
        let mut state = GibbsState {
            k,
            v,
            alpha,
            beta,
            assignments: doc_tokens.iter().map(|d| Vec::with_capacity(d.len())).collect(),
            doc_tokens,
            doc_topic: vec![0; n_docs * k],
            topic_word: vec![0; k * v],
            topic_totals: vec![0; k],
        };
        for d in 0..state.doc_tokens.len() {
            for pos in 0..state.doc_tokens[d].len() {
                let topic = rng.random_range(0..k);
                state.assignments[d].push(topic);
                let w = state.doc_tokens[d][pos];
                state.doc_topic[d * k + topic] += 1;
                state.topic_word[topic * v + w] += 1;
                state.topic_totals[topic] += 1;
            }
        }
        state
    }

    fn sweep(&mut self, rng: &mut ChaCha8Rng, weights: &mut Vec<f64>) {
        let beta_sum = self.beta * self.v as f64;
        for d in 0..self.doc_tokens.len() {
            for pos in 0..self.doc_tokens[d].len() {
                let w = self.doc_tokens[d][pos];
                let old = self.assignments[d][pos];
                self.doc_topic[d * self.k + old] -= 1;
                self.topic_word[old * self.v + w] -= 1;
                self.topic_totals[old] -= 1;

                weights.clear();
                let mut total = 0.0;
                for t in 0..self.k {
                    let p = (self.doc_topic[d * self.k + t] as f64 + self.alpha)
                        * (self.topic_word[t * self.v + w] as f64 + self.beta)
                        / (self.topic_totals[t] as f64 + beta_sum);
                    total += p;
                    weights.push(total);
                }
                let u = rng.random::<f64>() * total;
                let new = weights.iter().position(|&c| u < c).unwrap_or(self.k - 1);

                self.assignments[d][pos] = new;
                self.doc_topic[d * self.k + new] += 1;
                self.topic_word[new * self.v + w] += 1;
                self.topic_totals[new] += 1;
            }
        }
    }
}

fn smoothed_row(counts: &[u32], alpha: f64, k: usize) -> Vec<f64> {
    let n: u32 = counts.iter().sum();
    let denom = n as f64 + k as f64 * alpha;
    counts.iter().map(|&c| (c as f64 + alpha) / denom).collect()
}

/// Fits a model on tokenized docs. Out-of-vocabulary tokens are skipped; the
/// corpus must keep at least one in-vocabulary token overall.
pub fn fit(docs: &[TokenizedDoc], vocab: &Vocabulary, cfg: &LdaConfig) -> Result<LdaModel, LdaError> {
    cfg.validate()?;
    let alpha = cfg.effective_alpha();
    let v = vocab.len();
    let doc_tokens: Vec<Vec<usize>> = docs
        .iter()
        .map(|doc| doc.tokens.iter().filter_map(|t| vocab.index_of(t)).collect())
        .collect();
    if doc_tokens.iter().all(|d: &Vec<usize>| d.is_empty()) {
        return Err(LdaError::EmptyCorpus);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = GibbsState::init(doc_tokens, cfg.k, v, alpha, cfg.beta, &mut rng);
    let mut weights = Vec::with_capacity(cfg.k);
    let mut averaged: Option<Vec<f64>> = None;
    for sweep_idx in 0..cfg.iterations {
        state.sweep(&mut rng, &mut weights);
        if cfg.average_last_sweeps > 0 && sweep_idx + cfg.average_last_sweeps >= cfg.iterations {
            let acc = averaged.get_or_insert_with(|| vec![0.0; docs.len() * cfg.k]);
            for d in 0..docs.len() {
                let row = smoothed_row(&state.doc_topic[d * cfg.k..(d + 1) * cfg.k], alpha, cfg.k);
                for (a, p) in acc[d * cfg.k..(d + 1) * cfg.k].iter_mut().zip(row) {
                    *a += p;
                }
            }
        }
    }
    if let Some(acc) = &mut averaged {
        for a in acc.iter_mut() {
            *a /= cfg.average_last_sweeps as f64;
        }
    }

    debug_assert_eq!(
        state.topic_totals.iter().map(|&c| c as u64).sum::<u64>(),
        state.doc_tokens.iter().map(|d| d.len() as u64).sum::<u64>(),
    );

    let mut model = LdaModel {
        k: cfg.k,
        alpha,
        beta: cfg.beta,
        iterations: cfg.iterations,
        fold_in_iterations: cfg.fold_in_iterations,
        seed: cfg.seed,
        vocab_hash: vocab.content_hash(),
        terms: vocab.terms().to_vec(),
        topic_word: state.topic_word,
        topic_totals: state.topic_totals,
        doc_ids: docs.iter().map(|d| d.id.clone()).collect(),
        doc_topic: state.doc_topic,
        doc_lengths: state.doc_tokens.iter().map(|d| d.len() as u32).collect(),
        averaged_doc_topic: averaged,
        term_index: HashMap::new(),
    };
    model.rebuild_index();
    Ok(model)
}

impl LdaModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    fn rebuild_index(&mut self) {
        self.term_index = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Topic mixtures of the training documents, from the final counts (or
    /// the tail-sweep average when that was enabled).
    pub fn train_doc_topics(&self) -> Vec<DocTopicDistribution> {
        self.doc_ids
            .iter()
            .enumerate()
            .map(|(d, id)| {
                let probabilities = match &self.averaged_doc_topic {
                    Some(avg) => avg[d * self.k..(d + 1) * self.k].to_vec(),
                    None => smoothed_row(&self.doc_topic[d * self.k..(d + 1) * self.k], self.alpha, self.k),
                };
                DocTopicDistribution {
                    doc_id: id.clone(),
                    probabilities,
                }
            })
            .collect()
    }

    /// Folds an unseen document into the frozen topic-word counts. A document
    /// with no in-vocabulary tokens gets the uniform mixture (with a
    /// warning). The fold-in chain is seeded from the model seed and the doc
    /// id, so repeated calls agree.
    #[allow(clippy::needless_range_loop)]
    pub fn doc_topics(&self, doc: &TokenizedDoc) -> DocTopicDistribution {
        let tokens: Vec<usize> = doc
            .tokens
            .iter()
            .filter_map(|t| self.term_index.get(t).copied())
            .collect();
        if tokens.is_empty() {
            log::warn!(
                "doc {:?} has no in-vocabulary tokens; using uniform topic mixture",
                doc.id
            );
            return DocTopicDistribution {
                doc_id: doc.id.clone(),
                probabilities: vec![1.0 / self.k as f64; self.k],
            };
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::derive_seed(self.seed, &format!("fold-in:{}", doc.id)));
        let v = self.terms.len();
        let beta_sum = self.beta * v as f64;
        let mut local_counts = vec![0u32; self.k];
        let mut assignments = Vec::with_capacity(tokens.len());
        for _ in &tokens {
            let t = rng.random_range(0..self.k);
            assignments.push(t);
            local_counts[t] += 1;
        }
        let mut weights = Vec::with_capacity(self.k);
        for _ in 0..self.fold_in_iterations {
            for (pos, &w) in tokens.iter().enumerate() {
                let old = assignments[pos];
                local_counts[old] -= 1;
                weights.clear();
                let mut total = 0.0;
                for t in 0..self.k {
                    let p = (local_counts[t] as f64 + self.alpha)
                        * (self.topic_word[t * v + w] as f64 + self.beta)
                        / (self.topic_totals[t] as f64 + beta_sum);
                    total += p;
                    weights.push(total);
                }
                let u = rng.random::<f64>() * total;
                let new = weights.iter().position(|&c| u < c).unwrap_or(self.k - 1);
                assignments[pos] = new;
                local_counts[new] += 1;
            }
        }
        DocTopicDistribution {
            doc_id: doc.id.clone(),
            probabilities: smoothed_row(&local_counts, self.alpha, self.k),
        }
    }

    /// The `n` highest-count words of a topic, count descending with ties in
    /// term order. Asking for more words than the vocabulary has returns the
    /// whole vocabulary.
    pub fn top_words(&self, topic: usize, n: usize) -> Result<Vec<String>, LdaError> {
        if topic >= self.k {
            return Err(LdaError::TopicIndexOutOfRange { topic, k: self.k });
        }
        let v = self.terms.len();
        let row = &self.topic_word[topic * v..(topic + 1) * v];
        let mut order: Vec<usize> = (0..v).collect();
        order.sort_by(|&a, &b| row[b].cmp(&row[a]).then_with(|| a.cmp(&b)));
        Ok(order
            .into_iter()
            .take(n.min(v))
            .map(|i| self.terms[i].clone())
            .collect())
    }

    /// Per-topic word masses, useful for diagnostics.
    pub fn topic_totals(&self) -> &[u32] {
        &self.topic_totals
    }

    pub fn save(&self, path: &Path) -> Result<(), LdaError> {
        let file = File::create(path).map_err(|source| LdaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| LdaError::Artifact(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LdaError> {
        let file = File::open(path).map_err(|source| LdaError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut model: LdaModel = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| LdaError::Artifact(e.to_string()))?;
        let v = model.terms.len();
        if model.k == 0
            || model.topic_word.len() != model.k * v
            || model.topic_totals.len() != model.k
            || model.doc_topic.len() != model.doc_ids.len() * model.k
            || model.doc_lengths.len() != model.doc_ids.len()
        {
            return Err(LdaError::Artifact("count matrix shape mismatch".into()));
        }
        for t in 0..model.k {
            let row_sum: u64 = model.topic_word[t * v..(t + 1) * v]
                .iter()
                .map(|&c| c as u64)
                .sum();
            if row_sum != model.topic_totals[t] as u64 {
                return Err(LdaError::Artifact(format!(
                    "topic {t} total {} does not match row sum {row_sum}",
                    model.topic_totals[t]
                )));
            }
        }
        model.rebuild_index();
        Ok(model)
    }
}
