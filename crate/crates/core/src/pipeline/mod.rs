//! End-to-end pipeline orchestration: ingest, embed, classify, per-group
//! sub-topic mining, catalog labeling, metrics, and reporting.
//!
//! Every stage writes fixed-name artifacts under the configured output
//! directory and records a fingerprint in `manifest.json` covering its
//! inputs (config sections, input files, upstream fingerprints). Rerunning
//! a single stage first verifies the recorded upstream fingerprints against
//! the current config and inputs, refusing to build on stale artifacts, then
//! invalidates everything downstream. Timings live in `timings.json` only,
//! so two runs with identical inputs produce byte-identical artifacts
//! everywhere else.

pub mod config;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::PipelineConfig;
pub use stages::{ArtifactPaths, ClassifyMetrics, GroupMetrics, RunReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Invalid configuration or unknown stage/method name (exit code 1).
    #[error("config error: {0}")]
    Config(String),
    /// Missing or malformed input data / upstream artifacts (exit code 2).
    #[error("input error: {0}")]
    Input(String),
    /// A stage computation failed (exit code 3).
    #[error("stage {stage} failed: {message}")]
    Stage { stage: StageName, message: String },
}

impl PipelineError {
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Input(_) => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Ingest,
    Embed,
    Classify,
    Pshti,
    Label,
    Eval,
    Report,
}

impl StageName {
    pub const ALL: [StageName; 7] = [
        StageName::Ingest,
        StageName::Embed,
        StageName::Classify,
        StageName::Pshti,
        StageName::Label,
        StageName::Eval,
        StageName::Report,
    ];

    pub fn parse(name: &str) -> Option<StageName> {
        Self::ALL.iter().copied().find(|s| s.as_str() == name)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Ingest => "ingest",
            StageName::Embed => "embed",
            StageName::Classify => "classify",
            StageName::Pshti => "pshti",
            StageName::Label => "label",
            StageName::Eval => "eval",
            StageName::Report => "report",
        }
    }

    /// Direct prerequisites.
    fn upstream(self) -> &'static [StageName] {
        match self {
            StageName::Ingest => &[],
            StageName::Embed => &[StageName::Ingest],
            StageName::Classify => &[StageName::Embed],
            StageName::Pshti => &[StageName::Classify],
            StageName::Label | StageName::Eval => &[StageName::Pshti],
            StageName::Report => &[StageName::Label, StageName::Eval],
        }
    }

    /// All transitive prerequisites, in pipeline order.
    fn ancestors(self) -> Vec<StageName> {
        StageName::ALL
            .iter()
            .copied()
            .filter(|&candidate| candidate != self && reaches(candidate, self))
            .collect()
    }

    /// All stages that depend on this one, in pipeline order.
    fn descendants(self) -> Vec<StageName> {
        StageName::ALL
            .iter()
            .copied()
            .filter(|&candidate| candidate != self && reaches(self, candidate))
            .collect()
    }
}

fn reaches(from: StageName, to: StageName) -> bool {
    to.upstream()
        .iter()
        .any(|&dep| dep == from || reaches(from, dep))
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ablation methods for the comparison run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareMethod {
    /// Full hybrid path with min-max embedding normalization.
    PshtiNorm,
    /// Full hybrid path on raw embeddings.
    PshtiUnnorm,
    /// Cluster LDA topic mixtures alone.
    LdaOnly,
    /// Cluster raw embeddings alone.
    EmbedOnly,
}

impl CompareMethod {
    pub const ALL: [CompareMethod; 4] = [
        CompareMethod::PshtiNorm,
        CompareMethod::PshtiUnnorm,
        CompareMethod::LdaOnly,
        CompareMethod::EmbedOnly,
    ];

    pub fn parse(name: &str) -> Option<CompareMethod> {
        Self::ALL.iter().copied().find(|m| m.as_str() == name)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CompareMethod::PshtiNorm => "pshti_norm",
            CompareMethod::PshtiUnnorm => "pshti_unnorm",
            CompareMethod::LdaOnly => "lda_only",
            CompareMethod::EmbedOnly => "embed_only",
        }
    }
}

impl fmt::Display for CompareMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    /// Stage name to input fingerprint of the run that produced its
    /// artifacts.
    stages: BTreeMap<String, String>,
}

impl Manifest {
    fn load(path: &Path) -> Result<Manifest, PipelineError> {
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let raw = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Input(format!("manifest {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| PipelineError::Input(format!("manifest {}: {e}", path.display())))
    }

    fn save(&self, path: &Path) -> Result<(), PipelineError> {
        stages::write_json_pretty(path, self)
    }

    fn get(&self, stage: StageName) -> Option<&str> {
        self.stages.get(stage.as_str()).map(String::as_str)
    }

    fn set(&mut self, stage: StageName, fingerprint: String) {
        self.stages.insert(stage.as_str().to_string(), fingerprint);
    }

    fn remove(&mut self, stage: StageName) {
        self.stages.remove(stage.as_str());
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn hash_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex_digest(hasher))
}

fn section_json<T: Serialize>(section: &T) -> String {
    serde_json::to_string(section).expect("config sections serialize")
}

/// Input fingerprints for every stage under the current config and input
/// files: a chained hash over the stage's config sections, its input file
/// contents, and its upstream fingerprints.
fn expected_fingerprints(
    cfg: &PipelineConfig,
) -> Result<BTreeMap<StageName, String>, PipelineError> {
    let mut fps: BTreeMap<StageName, String> = BTreeMap::new();
    for stage in StageName::ALL {
        let mut hasher = Sha256::new();
        hasher.update(stage.as_str().as_bytes());
        for &dep in stage.upstream() {
            hasher.update(fps[&dep].as_bytes());
        }
        match stage {
            StageName::Ingest => {
                hasher.update(hash_file(&cfg.paths.corpus)?.as_bytes());
                hasher.update(section_json(&cfg.preprocess).as_bytes());
                if let Some(stopwords) = &cfg.preprocess.stopwords_path {
                    hasher.update(hash_file(stopwords)?.as_bytes());
                }
            }
            StageName::Embed => {
                hasher.update(section_json(&cfg.provider).as_bytes());
                if let Some(store) = &cfg.provider.store_path {
                    hasher.update(hash_file(store)?.as_bytes());
                }
            }
            StageName::Classify => {
                hasher.update(section_json(&cfg.classifier).as_bytes());
                hasher.update(cfg.seed.to_le_bytes());
            }
            StageName::Pshti => {
                hasher.update(section_json(&cfg.vocabulary).as_bytes());
                hasher.update(section_json(&cfg.lda).as_bytes());
                hasher.update(section_json(&cfg.pshti).as_bytes());
                hasher.update(cfg.seed.to_le_bytes());
            }
            StageName::Label => {
                hasher.update(section_json(&cfg.knowledge).as_bytes());
                hasher.update(section_json(&cfg.provider).as_bytes());
                match &cfg.paths.catalog {
                    Some(catalog) => hasher.update(hash_file(catalog)?.as_bytes()),
                    None => hasher.update(b"no-catalog"),
                }
            }
            StageName::Eval => {
                hasher.update(section_json(&cfg.eval).as_bytes());
            }
            StageName::Report => {
                hasher.update(env!("CARGO_PKG_VERSION").as_bytes());
            }
        }
        fps.insert(stage, hex_digest(hasher));
    }
    Ok(fps)
}

fn record_timing(
    paths: &ArtifactPaths,
    timings: &mut BTreeMap<String, f64>,
    stage: StageName,
    started: Instant,
) -> Result<(), PipelineError> {
    timings.insert(
        stage.as_str().to_string(),
        started.elapsed().as_secs_f64(),
    );
    stages::write_json_pretty(&paths.timings(), timings)
}

/// Runs all stages in order, rewriting every artifact, the manifest, and the
/// timing file.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let paths = ArtifactPaths::new(cfg);
    paths.ensure_output_dir()?;
    let fps = expected_fingerprints(cfg)?;
    let mut manifest = Manifest::default();
    let mut timings = BTreeMap::new();
    for stage in StageName::ALL {
        let started = Instant::now();
        stages::execute(stage, cfg, &paths)?;
        manifest.set(stage, fps[&stage].clone());
        manifest.save(&paths.manifest())?;
        record_timing(&paths, &mut timings, stage, started)?;
        log::info!("stage {stage} finished in {:.2}s", started.elapsed().as_secs_f64());
    }
    Ok(())
}

/// Reruns one stage on top of existing artifacts. Upstream artifacts must
/// carry fingerprints matching the current config and inputs; downstream
/// artifacts are deleted.
pub fn run_stage(cfg: &PipelineConfig, stage: StageName) -> Result<(), PipelineError> {
    let paths = ArtifactPaths::new(cfg);
    paths.ensure_output_dir()?;
    let fps = expected_fingerprints(cfg)?;
    let mut manifest = Manifest::load(&paths.manifest())?;
    for dep in stage.ancestors() {
        match manifest.get(dep) {
            None => {
                return Err(PipelineError::Input(format!(
                    "stage {stage} needs artifacts from stage {dep}, which has not run; \
                     run the full pipeline first"
                )))
            }
            Some(recorded) if recorded != fps[&dep] => {
                return Err(PipelineError::Input(format!(
                    "artifacts of stage {dep} are stale (config or inputs changed); \
                     rerun from {dep} or run the full pipeline"
                )))
            }
            Some(_) => {}
        }
    }

    let mut timings: BTreeMap<String, f64> = if paths.timings().exists() {
        stages::read_json(&paths.timings())?
    } else {
        BTreeMap::new()
    };

    let started = Instant::now();
    stages::execute(stage, cfg, &paths)?;
    manifest.set(stage, fps[&stage].clone());
    for downstream in stage.descendants() {
        manifest.remove(downstream);
        stages::remove_artifacts(downstream, &paths)?;
        timings.remove(downstream.as_str());
    }
    manifest.save(&paths.manifest())?;
    record_timing(&paths, &mut timings, stage, started)?;
    Ok(())
}

/// Runs the ablation comparison. Prerequisite stages (ingest → classify) are
/// reused when their fingerprints are current and recomputed otherwise.
pub fn compare_methods(
    cfg: &PipelineConfig,
    methods: &[CompareMethod],
) -> Result<(), PipelineError> {
    if methods.is_empty() {
        return Err(PipelineError::Config(
            "no comparison methods requested".into(),
        ));
    }
    let paths = ArtifactPaths::new(cfg);
    paths.ensure_output_dir()?;
    let fps = expected_fingerprints(cfg)?;
    let mut manifest = Manifest::load(&paths.manifest())?;
    let mut timings: BTreeMap<String, f64> = if paths.timings().exists() {
        stages::read_json(&paths.timings())?
    } else {
        BTreeMap::new()
    };
    for stage in [StageName::Ingest, StageName::Embed, StageName::Classify] {
        if manifest.get(stage) == Some(fps[&stage].as_str()) {
            log::info!("reusing artifacts of stage {stage}");
            continue;
        }
        let started = Instant::now();
        stages::execute(stage, cfg, &paths)?;
        manifest.set(stage, fps[&stage].clone());
        manifest.save(&paths.manifest())?;
        record_timing(&paths, &mut timings, stage, started)?;
    }
    stages::run_compare(cfg, &paths, methods)
}
