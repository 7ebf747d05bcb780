//! Pipeline configuration: a single TOML document covering paths, the
//! embedding provider, and every stage's parameters. Relative paths are
//! resolved against the config file's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainConfig;
use crate::corpus::PreprocessConfig;
use crate::embeddings::{
    EmbeddingProvider, EmbeddingStore, HashEmbeddingProvider, RemoteConfig,
    RemoteEmbeddingProvider, StoredEmbeddingProvider,
};
use crate::eval::CoherenceConfig;
use crate::knowledge::MatchConfig;
use crate::lda::LdaConfig;
use crate::pshti::{KSubRule, Stage1Config, TopWordMethod, VaeConfig};

use super::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for per-group parallel stages; 0 picks the default.
    pub workers: usize,
    pub paths: PathsSection,
    pub provider: ProviderSection,
    pub preprocess: PreprocessSection,
    pub vocabulary: VocabularySection,
    pub classifier: ClassifierSection,
    pub lda: LdaSection,
    pub pshti: PshtiSection,
    pub knowledge: KnowledgeSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 42,
            workers: 0,
            paths: PathsSection::default(),
            provider: ProviderSection::default(),
            preprocess: PreprocessSection::default(),
            vocabulary: VocabularySection::default(),
            classifier: ClassifierSection::default(),
            lda: LdaSection::default(),
            pshti: PshtiSection::default(),
            knowledge: KnowledgeSection::default(),
            eval: EvalSection::default(),
            compare: CompareSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: PathBuf,
    /// Optional issue catalog; absent means every sub-topic keeps its
    /// word-fallback label.
    pub catalog: Option<PathBuf>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Deterministic hash-based embeddings; no external dependencies.
    Mock,
    /// Pre-computed embeddings keyed by exact text.
    Store,
    /// HTTP embedding service.
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Embedding width for mock and remote; the store dictates its own.
    pub dimension: usize,
    pub mock_seed: u64,
    pub store_path: Option<PathBuf>,
    pub base_url: Option<String>,
    pub batch_size: usize,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
}

impl Default for ProviderSection {
    fn default() -> Self {
        let remote = RemoteConfig::default();
        ProviderSection {
            kind: ProviderKind::Mock,
            dimension: 64,
            mock_seed: 7,
            store_path: None,
            base_url: None,
            batch_size: remote.batch_size,
            max_retries: remote.max_retries,
            initial_backoff_ms: remote.initial_backoff_ms,
            max_in_flight: remote.max_in_flight,
            timeout_ms: remote.timeout_ms,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub max_length: usize,
    pub min_tokens: usize,
    pub strip_markup: bool,
    /// Newline-separated stopword file replacing the built-in list.
    pub stopwords_path: Option<PathBuf>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        let d = PreprocessConfig::default();
        PreprocessSection {
            max_length: d.max_length,
            min_tokens: d.min_tokens,
            strip_markup: d.strip_markup,
            stopwords_path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabularySection {
    pub min_df: usize,
    pub max_df_ratio: f64,
}

impl Default for VocabularySection {
    fn default() -> Self {
        VocabularySection {
            min_df: 2,
            max_df_ratio: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2_penalty: f64,
    pub hidden_width: Option<usize>,
    pub init_scale: f64,
    /// Held-out fraction for top-k accuracy, selected by a stable per-id
    /// hash so the split survives corpus reordering.
    pub test_fraction: f64,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        ClassifierSection {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            l2_penalty: d.l2_penalty,
            hidden_width: d.hidden_width,
            init_scale: d.init_scale,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaSection {
    /// Document-topic prior; omitted means the 50/k heuristic.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub iterations: usize,
    pub fold_in_iterations: usize,
    pub average_last_sweeps: usize,
}

impl Default for LdaSection {
    fn default() -> Self {
        let d = LdaConfig::default();
        LdaSection {
            alpha: d.alpha,
            beta: d.beta,
            iterations: d.iterations,
            fold_in_iterations: d.fold_in_iterations,
            average_last_sweeps: d.average_last_sweeps,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PshtiSection {
    pub gamma: f64,
    pub normalize_embeddings: bool,
    pub kmeans_max_iterations: usize,
    pub top_words: usize,
    pub top_word_method: TopWordMethod,
    pub k_sub_threshold: usize,
    pub k_sub_large: usize,
    pub k_sub_small: usize,
    pub k_sub_override: Option<usize>,
    /// Routed groups smaller than this are skipped with a recorded reason.
    pub min_group_size: usize,
    pub vae: VaeSection,
}

impl Default for PshtiSection {
    fn default() -> Self {
        let d = Stage1Config::default();
        PshtiSection {
            gamma: d.gamma,
            normalize_embeddings: d.normalize_embeddings,
            kmeans_max_iterations: d.kmeans_max_iterations,
            top_words: d.top_words,
            top_word_method: d.top_word_method,
            k_sub_threshold: d.k_sub_rule.threshold,
            k_sub_large: d.k_sub_rule.large,
            k_sub_small: d.k_sub_rule.small,
            k_sub_override: d.k_sub_override,
            min_group_size: 5,
            vae: VaeSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub activation: crate::pshti::Activation,
    pub sample_latent: bool,
}

impl Default for VaeSection {
    fn default() -> Self {
        let d = VaeConfig::default();
        VaeSection {
            hidden_dim: d.hidden_dim,
            latent_dim: d.latent_dim,
            kl_weight: d.kl_weight,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
            activation: d.activation,
            sample_latent: d.sample_latent,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSection {
    pub candidate_threshold: f64,
    pub accept_threshold: f64,
    pub max_candidates: usize,
}

impl Default for KnowledgeSection {
    fn default() -> Self {
        let d = MatchConfig::default();
        KnowledgeSection {
            candidate_threshold: d.candidate_threshold,
            accept_threshold: d.accept_threshold,
            max_candidates: d.max_candidates,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub window_size: usize,
    pub epsilon: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = CoherenceConfig::default();
        EvalSection {
            window_size: d.window_size,
            epsilon: d.epsilon,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    /// Method names for the comparison run; see `CompareMethod`.
    pub methods: Vec<String>,
    /// Optional gamma sweep: each value adds extra rows for the two hybrid
    /// methods.
    pub gammas: Vec<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            methods: vec![
                "pshti_norm".to_string(),
                "pshti_unnorm".to_string(),
                "lda_only".to_string(),
                "embed_only".to_string(),
            ],
            gammas: Vec::new(),
        }
    }
}

impl PipelineConfig {
    /// Parses and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let raw = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: PipelineConfig = toml::from_str(&raw)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        fn resolve(base: &Path, p: &mut PathBuf) {
            if p.is_relative() {
                *p = base.join(&p);
            }
        }
        resolve(base, &mut self.paths.corpus);
        if let Some(catalog) = &mut self.paths.catalog {
            resolve(base, catalog);
        }
        resolve(base, &mut self.paths.output_dir);
        if let Some(store) = &mut self.provider.store_path {
            resolve(base, store);
        }
        if let Some(stopwords) = &mut self.preprocess.stopwords_path {
            resolve(base, stopwords);
        }
    }

    /// Field-level validation; messages name the offending config path.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, message: String| {
            if !ok {
                errors.push(message);
            }
        };

        check(
            !self.paths.corpus.as_os_str().is_empty(),
            "paths.corpus must be set".into(),
        );
        check(
            !self.paths.output_dir.as_os_str().is_empty(),
            "paths.output_dir must be set".into(),
        );

        match self.provider.kind {
            ProviderKind::Mock | ProviderKind::Remote => check(
                self.provider.dimension > 0,
                format!(
                    "provider.dimension must be positive, got {}",
                    self.provider.dimension
                ),
            ),
            ProviderKind::Store => check(
                self.provider.store_path.is_some(),
                "provider.store_path is required when provider.kind = \"store\"".into(),
            ),
        }
        if self.provider.kind == ProviderKind::Remote {
            check(
                self.provider.base_url.is_some(),
                "provider.base_url is required when provider.kind = \"remote\"".into(),
            );
            check(
                self.provider.batch_size > 0,
                "provider.batch_size must be positive".into(),
            );
            check(
                self.provider.max_in_flight > 0,
                "provider.max_in_flight must be positive".into(),
            );
        }

        check(
            self.preprocess.max_length > 0,
            "preprocess.max_length must be positive".into(),
        );
        check(
            self.vocabulary.min_df >= 1,
            "vocabulary.min_df must be at least 1".into(),
        );
        check(
            self.vocabulary.max_df_ratio > 0.0 && self.vocabulary.max_df_ratio <= 1.0,
            format!(
                "vocabulary.max_df_ratio must be in (0, 1], got {}",
                self.vocabulary.max_df_ratio
            ),
        );

        let c = &self.classifier;
        check(
            c.learning_rate.is_finite() && c.learning_rate >= 0.0,
            format!(
                "classifier.learning_rate must be finite and >= 0, got {}",
                c.learning_rate
            ),
        );
        check(c.epochs > 0, "classifier.epochs must be positive".into());
        check(
            c.batch_size > 0,
            "classifier.batch_size must be positive".into(),
        );
        check(
            c.l2_penalty.is_finite() && c.l2_penalty >= 0.0,
            format!(
                "classifier.l2_penalty must be finite and >= 0, got {}",
                c.l2_penalty
            ),
        );
        check(
            c.init_scale.is_finite() && c.init_scale >= 0.0,
            format!(
                "classifier.init_scale must be finite and >= 0, got {}",
                c.init_scale
            ),
        );
        check(
            (0.0..1.0).contains(&c.test_fraction),
            format!(
                "classifier.test_fraction must be in [0, 1), got {}",
                c.test_fraction
            ),
        );
        if let Some(w) = c.hidden_width {
            check(w > 0, "classifier.hidden_width must be positive".into());
        }

        if let Some(alpha) = self.lda.alpha {
            check(
                alpha.is_finite() && alpha > 0.0,
                format!("lda.alpha must be positive, got {alpha}"),
            );
        }
        check(
            self.lda.beta.is_finite() && self.lda.beta > 0.0,
            format!("lda.beta must be positive, got {}", self.lda.beta),
        );
        check(
            self.lda.iterations > 0,
            "lda.iterations must be positive".into(),
        );
        check(
            self.lda.fold_in_iterations > 0,
            "lda.fold_in_iterations must be positive".into(),
        );

        let p = &self.pshti;
        check(
            p.gamma.is_finite() && p.gamma > 0.0,
            format!("pshti.gamma must be positive, got {}", p.gamma),
        );
        check(
            p.kmeans_max_iterations > 0,
            "pshti.kmeans_max_iterations must be positive".into(),
        );
        check(p.top_words > 0, "pshti.top_words must be positive".into());
        check(
            p.k_sub_large >= 1 && p.k_sub_small >= 1,
            "pshti.k_sub_large and pshti.k_sub_small must be at least 1".into(),
        );
        if let Some(k) = p.k_sub_override {
            check(k >= 1, "pshti.k_sub_override must be at least 1".into());
        }
        check(
            p.min_group_size >= 2,
            "pshti.min_group_size must be at least 2".into(),
        );
        let v = &p.vae;
        check(
            v.hidden_dim > 0 && v.latent_dim > 0,
            "pshti.vae.hidden_dim and pshti.vae.latent_dim must be positive".into(),
        );
        check(
            v.kl_weight.is_finite() && v.kl_weight >= 0.0,
            format!("pshti.vae.kl_weight must be >= 0, got {}", v.kl_weight),
        );
        check(
            v.learning_rate.is_finite() && v.learning_rate > 0.0,
            format!(
                "pshti.vae.learning_rate must be positive, got {}",
                v.learning_rate
            ),
        );
        check(v.epochs > 0, "pshti.vae.epochs must be positive".into());
        check(
            v.batch_size > 0,
            "pshti.vae.batch_size must be positive".into(),
        );

        let k = &self.knowledge;
        check(
            k.candidate_threshold.is_finite(),
            "knowledge.candidate_threshold must be finite".into(),
        );
        check(
            k.accept_threshold.is_finite(),
            "knowledge.accept_threshold must be finite".into(),
        );
        check(
            k.max_candidates > 0,
            "knowledge.max_candidates must be positive".into(),
        );

        check(
            self.eval.window_size >= 2,
            format!(
                "eval.window_size must be at least 2, got {}",
                self.eval.window_size
            ),
        );
        check(
            self.eval.epsilon.is_finite() && self.eval.epsilon > 0.0,
            format!("eval.epsilon must be positive, got {}", self.eval.epsilon),
        );

        for method in &self.compare.methods {
            check(
                super::CompareMethod::parse(method).is_some(),
                format!("compare.methods contains unknown method {method:?}"),
            );
        }
        for gamma in &self.compare.gammas {
            check(
                gamma.is_finite() && *gamma > 0.0,
                format!("compare.gammas values must be positive, got {gamma}"),
            );
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(errors.join("; ")))
        }
    }

    /// Builds the configured embedding provider.
    pub fn build_provider(&self) -> Result<Box<dyn EmbeddingProvider>, PipelineError> {
        match self.provider.kind {
            ProviderKind::Mock => Ok(Box::new(HashEmbeddingProvider::new(
                self.provider.dimension,
                self.provider.mock_seed,
            ))),
            ProviderKind::Store => {
                let path = self.provider.store_path.as_ref().expect("validated");
                let store = EmbeddingStore::load(path).map_err(|e| {
                    PipelineError::Input(format!(
                        "embedding store {}: {e}",
                        path.display()
                    ))
                })?;
                Ok(Box::new(StoredEmbeddingProvider::new(store)))
            }
            ProviderKind::Remote => Ok(Box::new(RemoteEmbeddingProvider::new(RemoteConfig {
                base_url: self.provider.base_url.clone().expect("validated"),
                dimension: self.provider.dimension,
                batch_size: self.provider.batch_size,
                max_retries: self.provider.max_retries,
                initial_backoff_ms: self.provider.initial_backoff_ms,
                max_in_flight: self.provider.max_in_flight,
                timeout_ms: self.provider.timeout_ms,
            }))),
        }
    }

    pub fn preprocess_config(&self) -> Result<PreprocessConfig, PipelineError> {
        let stopwords: HashSet<String> = match &self.preprocess.stopwords_path {
            Some(path) => std::fs::read_to_string(path)
                .map_err(|e| {
                    PipelineError::Input(format!("stopword file {}: {e}", path.display()))
                })?
                .lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
            None => PreprocessConfig::default().stopwords,
        };
        Ok(PreprocessConfig {
            max_length: self.preprocess.max_length,
            stopwords,
            strip_markup: self.preprocess.strip_markup,
            min_tokens: self.preprocess.min_tokens,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.classifier.learning_rate,
            epochs: self.classifier.epochs,
            batch_size: self.classifier.batch_size,
            seed: crate::derive_seed(self.seed, "classifier"),
            l2_penalty: self.classifier.l2_penalty,
            hidden_width: self.classifier.hidden_width,
            init_scale: self.classifier.init_scale,
        }
    }

    /// Stage-one config template; `run_stage1` fills per-group LDA k and
    /// derives per-group seeds from the embedded global seed.
    pub fn stage1_config(&self) -> Stage1Config {
        Stage1Config {
            gamma: self.pshti.gamma,
            normalize_embeddings: self.pshti.normalize_embeddings,
            k_sub_rule: KSubRule {
                threshold: self.pshti.k_sub_threshold,
                large: self.pshti.k_sub_large,
                small: self.pshti.k_sub_small,
            },
            k_sub_override: self.pshti.k_sub_override,
            lda: LdaConfig {
                k: self.pshti.k_sub_small,
                alpha: self.lda.alpha,
                beta: self.lda.beta,
                iterations: self.lda.iterations,
                fold_in_iterations: self.lda.fold_in_iterations,
                seed: 0,
                average_last_sweeps: self.lda.average_last_sweeps,
            },
            vae: VaeConfig {
                hidden_dim: self.pshti.vae.hidden_dim,
                latent_dim: self.pshti.vae.latent_dim,
                kl_weight: self.pshti.vae.kl_weight,
                learning_rate: self.pshti.vae.learning_rate,
                epochs: self.pshti.vae.epochs,
                batch_size: self.pshti.vae.batch_size,
                seed: 0,
                activation: self.pshti.vae.activation,
                sample_latent: self.pshti.vae.sample_latent,
            },
            kmeans_max_iterations: self.pshti.kmeans_max_iterations,
            top_words: self.pshti.top_words,
            top_word_method: self.pshti.top_word_method,
            seed: self.seed,
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            candidate_threshold: self.knowledge.candidate_threshold,
            accept_threshold: self.knowledge.accept_threshold,
            max_candidates: self.knowledge.max_candidates,
        }
    }

    pub fn coherence_config(&self) -> CoherenceConfig {
        CoherenceConfig {
            window_size: self.eval.window_size,
            epsilon: self.eval.epsilon,
        }
    }
}
