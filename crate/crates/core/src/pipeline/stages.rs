//! Stage implementations and the artifact file formats they exchange.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate_topk, train};
use crate::corpus::{
    build_vocabulary, corpus_stats, load_corpus, preprocess, CorpusError, CorpusStats,
    FeedbackRecord, Preprocessed, RejectReason, TokenizedDoc,
};
use crate::derive_seed;
use crate::embeddings::{embed_corpus, EmbeddingStore, EmbeddingVector};
use crate::eval::{count_window_probs, silhouette, uci_coherence, EvalError, WindowProbs};
use crate::knowledge::{label_cluster, load_catalog, CatalogIndex, LabelKind};
use crate::lda::{self, LdaConfig};
use crate::pshti::{
    choose_k_sub, extract_top_words, kmeans, run_stage1, Stage1Config, Stage1Output,
};

use super::config::PipelineConfig;
use super::{CompareMethod, PipelineError, StageName};

/// Locations of every artifact under the output directory.
pub struct ArtifactPaths {
    out: PathBuf,
}

impl ArtifactPaths {
    pub fn new(cfg: &PipelineConfig) -> Self {
        ArtifactPaths {
            out: cfg.paths.output_dir.clone(),
        }
    }

    pub(super) fn ensure_output_dir(&self) -> Result<(), PipelineError> {
        fs::create_dir_all(&self.out).map_err(|e| {
            PipelineError::Input(format!(
                "cannot create output directory {}: {e}",
                self.out.display()
            ))
        })
    }

    pub fn manifest(&self) -> PathBuf {
        self.out.join("manifest.json")
    }
    pub fn timings(&self) -> PathBuf {
        self.out.join("timings.json")
    }
    pub fn corpus_stats(&self) -> PathBuf {
        self.out.join("corpus_stats.json")
    }
    pub fn tokenized(&self) -> PathBuf {
        self.out.join("tokenized.jsonl")
    }
    pub fn rejected(&self) -> PathBuf {
        self.out.join("rejected.jsonl")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.out.join("embeddings.jsonl")
    }
    pub fn classifier(&self) -> PathBuf {
        self.out.join("classifier.json")
    }
    pub fn classify_metrics(&self) -> PathBuf {
        self.out.join("classify_metrics.json")
    }
    pub fn routing(&self) -> PathBuf {
        self.out.join("routing.json")
    }
    pub fn groups(&self) -> PathBuf {
        self.out.join("groups.json")
    }
    pub fn lda_dir(&self) -> PathBuf {
        self.out.join("lda")
    }
    pub fn lda_model(&self, stem: &str) -> PathBuf {
        self.lda_dir().join(format!("{stem}.json"))
    }
    pub fn pshti_dir(&self) -> PathBuf {
        self.out.join("pshti")
    }
    pub fn stage1_public(&self, stem: &str) -> PathBuf {
        self.pshti_dir().join(format!("{stem}.json"))
    }
    pub fn stage1_state(&self, stem: &str) -> PathBuf {
        self.pshti_dir().join(format!("{stem}.state.json"))
    }
    pub fn labels_dir(&self) -> PathBuf {
        self.out.join("labels")
    }
    pub fn labels(&self, stem: &str) -> PathBuf {
        self.labels_dir().join(format!("{stem}.json"))
    }
    pub fn metrics_dir(&self) -> PathBuf {
        self.out.join("metrics")
    }
    pub fn metrics(&self, stem: &str) -> PathBuf {
        self.metrics_dir().join(format!("{stem}.json"))
    }
    pub fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }
    pub fn report_md(&self) -> PathBuf {
        self.out.join("report.md")
    }
    pub fn compare_json(&self) -> PathBuf {
        self.out.join("compare.json")
    }
    pub fn compare_md(&self) -> PathBuf {
        self.out.join("compare.md")
    }
}

/// Deletes a stage's artifacts (used when invalidating downstream stages).
pub(super) fn remove_artifacts(
    stage: StageName,
    paths: &ArtifactPaths,
) -> Result<(), PipelineError> {
    let files: Vec<PathBuf> = match stage {
        StageName::Ingest => vec![
            paths.corpus_stats(),
            paths.tokenized(),
            paths.rejected(),
        ],
        StageName::Embed => vec![paths.embeddings()],
        StageName::Classify => vec![
            paths.classifier(),
            paths.classify_metrics(),
            paths.routing(),
        ],
        StageName::Pshti => vec![paths.groups()],
        StageName::Label => Vec::new(),
        StageName::Eval => Vec::new(),
        StageName::Report => vec![paths.report_json(), paths.report_md()],
    };
    let dirs: Vec<PathBuf> = match stage {
        StageName::Pshti => vec![paths.lda_dir(), paths.pshti_dir()],
        StageName::Label => vec![paths.labels_dir()],
        StageName::Eval => vec![paths.metrics_dir()],
        _ => Vec::new(),
    };
    for file in files {
        if file.exists() {
            fs::remove_file(&file).map_err(|e| {
                PipelineError::Input(format!("cannot remove {}: {e}", file.display()))
            })?;
        }
    }
    for dir in dirs {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| {
                PipelineError::Input(format!("cannot remove {}: {e}", dir.display()))
            })?;
        }
    }
    Ok(())
}

pub(super) fn write_json_pretty<T: Serialize>(
    path: &Path,
    value: &T,
) -> Result<(), PipelineError> {
    let file = File::create(path)
        .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)
        .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))?;
    writer
        .write_all(b"\n")
        .and_then(|_| writer.flush())
        .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))
}

pub(super) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let file = File::open(path)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| PipelineError::Input(format!("cannot parse {}: {e}", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let file = File::create(path)
        .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))?;
    let mut writer = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut writer, row)
            .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))?;
        writer.write_all(b"\n").map_err(|e| {
            PipelineError::Input(format!("cannot write {}: {e}", path.display()))
        })?;
    }
    writer
        .flush()
        .map_err(|e| PipelineError::Input(format!("cannot write {}: {e}", path.display())))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line
            .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| {
            PipelineError::Input(format!(
                "cannot parse {} line {}: {e}",
                path.display(),
                idx + 1
            ))
        })?);
    }
    Ok(rows)
}

fn stage_err(stage: StageName, error: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: error.to_string(),
    }
}

/// File-system-safe stem for a group name.
fn safe_stem(name: &str) -> String {
    let stem: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    if stem.is_empty() {
        "_".to_string()
    } else {
        stem
    }
}

fn with_workers<T: Send>(
    workers: usize,
    f: impl FnOnce() -> T + Send,
) -> Result<T, PipelineError> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(format!("workers: {e}")))?;
    Ok(pool.install(f))
}

pub(super) fn execute(
    stage: StageName,
    cfg: &PipelineConfig,
    paths: &ArtifactPaths,
) -> Result<(), PipelineError> {
    match stage {
        StageName::Ingest => stage_ingest(cfg, paths),
        StageName::Embed => stage_embed(cfg, paths),
        StageName::Classify => stage_classify(cfg, paths),
        StageName::Pshti => stage_pshti(cfg, paths),
        StageName::Label => stage_label(cfg, paths),
        StageName::Eval => stage_eval(cfg, paths),
        StageName::Report => stage_report(cfg, paths),
    }
}

// ---------------------------------------------------------------------------
// Artifact schemas
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct RejectedRow {
    id: String,
    reason: RejectReason,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifyMetrics {
    pub classes: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of held-out feedback whose label set intersects the top-k
    /// predictions; absent when the test split is empty.
    pub accuracy_top1: Option<f64>,
    pub accuracy_top2: Option<f64>,
    pub accuracy_top3: Option<f64>,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupsFile {
    groups: Vec<GroupEntry>,
    skipped: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupEntry {
    name: String,
    file_stem: String,
    size: usize,
    k_sub: usize,
}

/// The stage-one summary published per group.
#[derive(Debug, Serialize, Deserialize)]
struct Stage1Public {
    main_topic: String,
    k_sub: usize,
    gamma: f64,
    clusters: Vec<PublicCluster>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PublicCluster {
    index: usize,
    members: Vec<String>,
    top_words: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GroupLabels {
    main_topic: String,
    subtopics: Vec<LabelRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    top_words: Vec<String>,
    label_kind: LabelKind,
    issue_id: Option<String>,
    issue_title: Option<String>,
    confidence: Option<f64>,
    candidates: Vec<CandidateRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CandidateRow {
    issue_id: String,
    stage1_score: f64,
    stage2_score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub method: String,
    pub silhouette: f64,
    /// One entry per sub-topic cluster, in index order; null where fewer
    /// than two top words occur in the group corpus.
    pub coherence_per_subtopic: Vec<Option<f64>>,
    pub coherence_mean: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub corpus: CorpusStats,
    pub classifier: ClassifyMetrics,
    pub groups: Vec<GroupReport>,
    pub skipped_groups: BTreeMap<String, String>,
    pub config: PipelineConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub size: usize,
    pub k_sub: usize,
    pub silhouette: f64,
    pub coherence_mean: Option<f64>,
    pub subtopics: Vec<SubTopicReport>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubTopicReport {
    pub index: usize,
    pub size: usize,
    pub label_kind: LabelKind,
    pub issue_id: Option<String>,
    pub issue_title: Option<String>,
    pub confidence: Option<f64>,
    pub top_words: Vec<String>,
    pub coherence: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompareReport {
    rows: Vec<CompareRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompareRow {
    method: String,
    gamma: Option<f64>,
    silhouette_mean: f64,
    coherence_mean: Option<f64>,
    groups: BTreeMap<String, CompareGroup>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompareGroup {
    silhouette: f64,
    coherence_mean: Option<f64>,
    coherence_per_subtopic: Vec<Option<f64>>,
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

fn stage_ingest(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<(), PipelineError> {
    let records = load_corpus(&cfg.paths.corpus).map_err(|e| {
        PipelineError::Input(format!("corpus {}: {e}", cfg.paths.corpus.display()))
    })?;
    if records.is_empty() {
        return Err(PipelineError::Input(format!(
            "corpus {} contains no records",
            cfg.paths.corpus.display()
        )));
    }
    let stats = corpus_stats(&records, 20);
    write_json_pretty(&paths.corpus_stats(), &stats)?;

    let pp = cfg.preprocess_config()?;
    let mut tokenized = Vec::new();
    let mut rejected = Vec::new();
    for record in &records {
        match preprocess(record, &pp) {
            Preprocessed::Doc(doc) => tokenized.push(doc),
            Preprocessed::Rejected { id, reason } => rejected.push(RejectedRow { id, reason }),
        }
    }
    if tokenized.is_empty() {
        return Err(PipelineError::Input(
            "every record was rejected during preprocessing; \
             check preprocess.min_tokens and the stopword list"
                .into(),
        ));
    }
    log::info!(
        "ingest: {} docs kept, {} rejected",
        tokenized.len(),
        rejected.len()
    );
    write_jsonl(&paths.tokenized(), &tokenized)?;
    write_jsonl(&paths.rejected(), &rejected)
}

fn stage_embed(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<(), PipelineError> {
    let records = load_corpus(&cfg.paths.corpus).map_err(|e| {
        PipelineError::Input(format!("corpus {}: {e}", cfg.paths.corpus.display()))
    })?;
    let tokenized: Vec<TokenizedDoc> = read_jsonl(&paths.tokenized())?;
    let keep: BTreeSet<&str> = tokenized.iter().map(|d| d.id.as_str()).collect();
    let surviving: Vec<FeedbackRecord> = records
        .into_iter()
        .filter(|r| keep.contains(r.id.as_str()))
        .collect();
    let provider = cfg.build_provider()?;
    let store = embed_corpus(
        provider.as_ref(),
        &surviving,
        cfg.provider.batch_size.max(1),
    )
    .map_err(|e| stage_err(StageName::Embed, e))?;
    store
        .save(&paths.embeddings())
        .map_err(|e| stage_err(StageName::Embed, e))
}

fn stage_classify(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<(), PipelineError> {
    let records = load_corpus(&cfg.paths.corpus).map_err(|e| {
        PipelineError::Input(format!("corpus {}: {e}", cfg.paths.corpus.display()))
    })?;
    let store = EmbeddingStore::load(&paths.embeddings())
        .map_err(|e| PipelineError::Input(format!("embeddings artifact: {e}")))?;

    let eligible: Vec<&FeedbackRecord> = records
        .iter()
        .filter(|r| store.get(&r.id).is_some())
        .collect();
    let labeled: Vec<&&FeedbackRecord> =
        eligible.iter().filter(|r| !r.labels.is_empty()).collect();
    if labeled.is_empty() {
        return Err(stage_err(
            StageName::Classify,
            "no labeled feedback with embeddings; cannot train the classifier",
        ));
    }

    let classes: Vec<String> = labeled
        .iter()
        .flat_map(|r| r.labels.iter().cloned())
        .collect::<BTreeSet<String>>()
        .into_iter()
        .collect();

    // Stable hash-based split: reordering the corpus file does not move
    // records between train and test.
    let threshold = (cfg.classifier.test_fraction * 10_000.0).round() as u64;
    let is_test =
        |id: &str| derive_seed(cfg.seed, &format!("split:{id}")) % 10_000 < threshold;

    let mut train_pairs: Vec<(EmbeddingVector, String)> = Vec::new();
    let mut test_pairs: Vec<(EmbeddingVector, BTreeSet<String>)> = Vec::new();
    for record in labeled.iter() {
        let embedding = store.get(&record.id).expect("filtered above").clone();
        if is_test(&record.id) {
            test_pairs.push((embedding, record.labels.clone()));
        } else {
            for label in &record.labels {
                train_pairs.push((embedding.clone(), label.clone()));
            }
        }
    }
    if train_pairs.is_empty() {
        return Err(stage_err(
            StageName::Classify,
            "the test split consumed every labeled record; lower classifier.test_fraction",
        ));
    }

    let (model, loss_trace) = train(&train_pairs, &classes, &cfg.train_config())
        .map_err(|e| stage_err(StageName::Classify, e))?;
    model
        .save(&paths.classifier())
        .map_err(|e| stage_err(StageName::Classify, e))?;

    let mut accuracies = [None, None, None];
    if test_pairs.is_empty() {
        log::warn!("empty test split; skipping top-k accuracy");
    } else {
        for (slot, k) in accuracies.iter_mut().zip(1..=3) {
            *slot = Some(
                evaluate_topk(&model, &test_pairs, k)
                    .map_err(|e| stage_err(StageName::Classify, e))?,
            );
        }
    }

    let k_route = 3.min(classes.len());
    let mut routing: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for record in &eligible {
        let embedding = store.get(&record.id).expect("filtered above");
        let top = model
            .predict_topk(embedding, k_route)
            .map_err(|e| stage_err(StageName::Classify, e))?;
        routing.insert(
            record.id.clone(),
            top.into_iter().map(|(name, _)| name).collect(),
        );
    }

    let metrics = ClassifyMetrics {
        classes,
        n_train: train_pairs.len(),
        n_test: test_pairs.len(),
        accuracy_top1: accuracies[0],
        accuracy_top2: accuracies[1],
        accuracy_top3: accuracies[2],
        final_loss: loss_trace.last().copied().unwrap_or(f64::NAN),
        loss_trace,
    };
    write_json_pretty(&paths.classify_metrics(), &metrics)?;
    write_json_pretty(&paths.routing(), &routing)
}

/// One routed main-topic group with its aligned documents and embeddings.
struct GroupData {
    name: String,
    stem: String,
    docs: Vec<TokenizedDoc>,
    embeddings: Vec<EmbeddingVector>,
}

/// Groups feedback by routed main topic, dropping groups below the size
/// floor (with a recorded reason). Document order within a group is sorted
/// by id, making downstream work independent of corpus file order.
fn collect_groups(
    cfg: &PipelineConfig,
    paths: &ArtifactPaths,
) -> Result<(Vec<GroupData>, BTreeMap<String, String>), PipelineError> {
    let tokenized: Vec<TokenizedDoc> = read_jsonl(&paths.tokenized())?;
    let by_id: BTreeMap<&str, &TokenizedDoc> =
        tokenized.iter().map(|d| (d.id.as_str(), d)).collect();
    let store = EmbeddingStore::load(&paths.embeddings())
        .map_err(|e| PipelineError::Input(format!("embeddings artifact: {e}")))?;
    let routing: BTreeMap<String, Vec<String>> = read_json(&paths.routing())?;

    let mut members: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (doc_id, topics) in &routing {
        for topic in topics {
            members
                .entry(topic.clone())
                .or_default()
                .push(doc_id.clone());
        }
    }

    let mut groups = Vec::new();
    let mut skipped = BTreeMap::new();
    let mut stems = BTreeSet::new();
    for (name, ids) in members {
        if ids.len() < cfg.pshti.min_group_size {
            skipped.insert(
                name,
                format!(
                    "group has {} feedback, below pshti.min_group_size {}",
                    ids.len(),
                    cfg.pshti.min_group_size
                ),
            );
            continue;
        }
        let stem = safe_stem(&name);
        if !stems.insert(stem.clone()) {
            return Err(PipelineError::Input(format!(
                "group names collide after sanitization ({name:?} -> {stem:?}); \
                 rename the conflicting main topics"
            )));
        }
        let mut docs = Vec::with_capacity(ids.len());
        let mut embeddings = Vec::with_capacity(ids.len());
        for id in &ids {
            let doc = by_id.get(id.as_str()).ok_or_else(|| {
                PipelineError::Input(format!(
                    "routing references doc {id} missing from tokenized artifact; rerun ingest"
                ))
            })?;
            let embedding = store.get(id).ok_or_else(|| {
                PipelineError::Input(format!(
                    "routing references doc {id} missing from embeddings artifact; rerun embed"
                ))
            })?;
            docs.push((*doc).clone());
            embeddings.push(embedding.clone());
        }
        groups.push(GroupData {
            name,
            stem,
            docs,
            embeddings,
        });
    }
    Ok((groups, skipped))
}

enum GroupOutcome {
    Done(Box<Stage1Output>),
    Skip(String),
}

fn stage_pshti(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<(), PipelineError> {
    let (groups, mut skipped) = collect_groups(cfg, paths)?;
    let template = cfg.stage1_config();
    let vocab_cfg = cfg.vocabulary.clone();

    let run_one = |group: &GroupData| -> Result<GroupOutcome, PipelineError> {
        let vocab = match build_vocabulary(&group.docs, vocab_cfg.min_df, vocab_cfg.max_df_ratio)
        {
            Ok(v) => v,
            Err(CorpusError::EmptyVocabulary) => {
                return Ok(GroupOutcome::Skip(
                    "vocabulary empty after document-frequency filtering".into(),
                ))
            }
            Err(e) => return Err(stage_err(StageName::Pshti, e)),
        };
        let output = run_stage1(&group.name, &group.docs, &group.embeddings, &vocab, &template)
            .map_err(|e| stage_err(StageName::Pshti, format!("group {}: {e}", group.name)))?;
        Ok(GroupOutcome::Done(Box::new(output)))
    };
    let outcomes: Vec<Result<GroupOutcome, PipelineError>> =
        with_workers(cfg.workers, || groups.par_iter().map(run_one).collect())?;

    fs::create_dir_all(paths.lda_dir())
        .and_then(|_| fs::create_dir_all(paths.pshti_dir()))
        .map_err(|e| PipelineError::Input(format!("cannot create output subdirectory: {e}")))?;

    let mut entries = Vec::new();
    for (group, outcome) in groups.iter().zip(outcomes) {
        match outcome? {
            GroupOutcome::Skip(reason) => {
                log::warn!("skipping group {}: {reason}", group.name);
                skipped.insert(group.name.clone(), reason);
            }
            GroupOutcome::Done(output) => {
                output
                    .lda_model
                    .as_ref()
                    .expect("stage one always returns its topic model")
                    .save(&paths.lda_model(&group.stem))
                    .map_err(|e| stage_err(StageName::Pshti, e))?;
                let public = Stage1Public {
                    main_topic: output.group.clone(),
                    k_sub: output.k_sub,
                    gamma: output.gamma,
                    clusters: output
                        .clusters
                        .iter()
                        .map(|c| PublicCluster {
                            index: c.index,
                            members: c.members.clone(),
                            top_words: c.top_words.clone(),
                        })
                        .collect(),
                };
                write_json_pretty(&paths.stage1_public(&group.stem), &public)?;
                write_json_pretty(&paths.stage1_state(&group.stem), output.as_ref())?;
                entries.push(GroupEntry {
                    name: group.name.clone(),
                    file_stem: group.stem.clone(),
                    size: group.docs.len(),
                    k_sub: output.k_sub,
                });
            }
        }
    }
    write_json_pretty(
        &paths.groups(),
        &GroupsFile {
            groups: entries,
            skipped,
        },
    )
}

fn stage_label(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<(), PipelineError> {
    let groups: GroupsFile = read_json(&paths.groups())?;
    let store = EmbeddingStore::load(&paths.embeddings())
        .map_err(|e| PipelineError::Input(format!("embeddings artifact: {e}")))?;
    let provider = cfg.build_provider()?;
    let entries = match &cfg.paths.catalog {
        Some(path) => load_catalog(path)
            .map_err(|e| PipelineError::Input(format!("catalog {}: {e}", path.display())))?,
        None => {
            log::warn!("no issue catalog configured; all sub-topics keep word labels");
            Vec::new()
        }
    };
    let index = CatalogIndex::build(entries, provider.as_ref())
        .map_err(|e| stage_err(StageName::Label, e))?;
    let match_cfg = cfg.match_config();

    fs::create_dir_all(paths.labels_dir())
        .map_err(|e| PipelineError::Input(format!("cannot create output subdirectory: {e}")))?;
    for entry in &groups.groups {
        let state: Stage1Output = read_json(&paths.stage1_state(&entry.file_stem))?;
        let mut rows = Vec::with_capacity(state.clusters.len());
        for cluster in &state.clusters {
            let member_embeddings: Vec<EmbeddingVector> = cluster
                .members
                .iter()
                .map(|id| {
                    store.get(id).cloned().ok_or_else(|| {
                        PipelineError::Input(format!(
                            "cluster member {id} missing from embeddings artifact"
                        ))
                    })
                })
                .collect::<Result<_, _>>()?;
            let label = label_cluster(
                &cluster.top_words,
                &member_embeddings,
                &index,
                provider.as_ref(),
                &match_cfg,
            )
            .map_err(|e| stage_err(StageName::Label, e))?;
            rows.push(LabelRow {
                index: cluster.index,
                top_words: label.top_words,
                label_kind: label.kind,
                issue_id: label.issue_id,
                issue_title: label.issue_title,
                confidence: label.confidence,
                candidates: label
                    .candidates
                    .into_iter()
                    .map(|c| CandidateRow {
                        issue_id: c.issue_id,
                        stage1_score: c.stage1_score,
                        stage2_score: c.stage2_score,
                    })
                    .collect(),
            });
        }
        write_json_pretty(
            &paths.labels(&entry.file_stem),
            &GroupLabels {
                main_topic: entry.name.clone(),
                subtopics: rows,
            },
        )?;
    }
    Ok(())
}

/// Coherence per cluster against the group's own window statistics; clusters
/// with fewer than two corpus-attested top words get null with a warning.
fn cluster_coherences(
    group: &str,
    top_word_lists: &[Vec<String>],
    probs: &WindowProbs,
    epsilon: f64,
) -> Vec<Option<f64>> {
    top_word_lists
        .iter()
        .enumerate()
        .map(|(idx, words)| match uci_coherence(words, probs, epsilon) {
            Ok(v) => Some(v),
            Err(EvalError::TooFewWords { usable }) => {
                log::warn!(
                    "group {group} cluster {idx}: only {usable} top words occur in the \
                     group corpus; coherence undefined"
                );
                None
            }
            Err(EvalError::SingleCluster) => unreachable!("not raised by coherence"),
        })
        .collect()
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

fn stage_eval(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<(), PipelineError> {
    let groups: GroupsFile = read_json(&paths.groups())?;
    let tokenized: Vec<TokenizedDoc> = read_jsonl(&paths.tokenized())?;
    let by_id: BTreeMap<&str, &TokenizedDoc> =
        tokenized.iter().map(|d| (d.id.as_str(), d)).collect();
    let coherence_cfg = cfg.coherence_config();
    let method = if cfg.pshti.normalize_embeddings {
        "pshti_norm"
    } else {
        "pshti_unnorm"
    };

    fs::create_dir_all(paths.metrics_dir())
        .map_err(|e| PipelineError::Input(format!("cannot create output subdirectory: {e}")))?;
    for entry in &groups.groups {
        let state: Stage1Output = read_json(&paths.stage1_state(&entry.file_stem))?;
        let report = silhouette(&state.latents, &state.assignments)
            .map_err(|e| stage_err(StageName::Eval, format!("group {}: {e}", entry.name)))?;
        let docs: Vec<TokenizedDoc> = state
            .doc_ids
            .iter()
            .map(|id| {
                by_id.get(id.as_str()).map(|d| (*d).clone()).ok_or_else(|| {
                    PipelineError::Input(format!(
                        "group member {id} missing from tokenized artifact"
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
        let probs = count_window_probs(&docs, coherence_cfg.window_size);
        let top_word_lists: Vec<Vec<String>> = state
            .clusters
            .iter()
            .map(|c| c.top_words.clone())
            .collect();
        let coherence_per_subtopic = cluster_coherences(
            &entry.name,
            &top_word_lists,
            &probs,
            coherence_cfg.epsilon,
        );
        let metrics = GroupMetrics {
            group: entry.name.clone(),
            method: method.to_string(),
            silhouette: report.mean,
            coherence_mean: mean_of(&coherence_per_subtopic),
            coherence_per_subtopic,
        };
        write_json_pretty(&paths.metrics(&entry.file_stem), &metrics)?;
    }
    Ok(())
}

fn stage_report(cfg: &PipelineConfig, paths: &ArtifactPaths) -> Result<(), PipelineError> {
    let stats: CorpusStats = read_json(&paths.corpus_stats())?;
    let classifier: ClassifyMetrics = read_json(&paths.classify_metrics())?;
    let groups_file: GroupsFile = read_json(&paths.groups())?;

    let mut groups = Vec::new();
    for entry in &groups_file.groups {
        let public: Stage1Public = read_json(&paths.stage1_public(&entry.file_stem))?;
        let labels: GroupLabels = read_json(&paths.labels(&entry.file_stem))?;
        let metrics: GroupMetrics = read_json(&paths.metrics(&entry.file_stem))?;
        let subtopics = public
            .clusters
            .iter()
            .map(|cluster| {
                let label = labels
                    .subtopics
                    .iter()
                    .find(|row| row.index == cluster.index)
                    .ok_or_else(|| {
                        PipelineError::Input(format!(
                            "label artifact for group {} lacks cluster {}",
                            entry.name, cluster.index
                        ))
                    })?;
                Ok(SubTopicReport {
                    index: cluster.index,
                    size: cluster.members.len(),
                    label_kind: label.label_kind,
                    issue_id: label.issue_id.clone(),
                    issue_title: label.issue_title.clone(),
                    confidence: label.confidence,
                    top_words: cluster.top_words.clone(),
                    coherence: metrics
                        .coherence_per_subtopic
                        .get(cluster.index)
                        .copied()
                        .flatten(),
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        groups.push(GroupReport {
            name: entry.name.clone(),
            size: entry.size,
            k_sub: entry.k_sub,
            silhouette: metrics.silhouette,
            coherence_mean: metrics.coherence_mean,
            subtopics,
        });
    }

    let report = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        corpus: stats,
        classifier,
        groups,
        skipped_groups: groups_file.skipped,
        config: cfg.clone(),
    };
    write_json_pretty(&paths.report_json(), &report)?;
    fs::write(paths.report_md(), render_markdown(&report)).map_err(|e| {
        PipelineError::Input(format!("cannot write {}: {e}", paths.report_md().display()))
    })
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

fn render_markdown(report: &RunReport) -> String {
    let mut md = String::new();
    md.push_str("# Feedback insight report\n\n");
    md.push_str(&format!("Tool version: {}\n\n", report.tool_version));

    md.push_str("## Corpus\n\n");
    md.push_str(&format!("Records: {}\n\n", report.corpus.records));
    md.push_str("| labels per feedback | count |\n|---:|---:|\n");
    for (n, count) in &report.corpus.labels_per_doc {
        md.push_str(&format!("| {n} | {count} |\n"));
    }
    md.push_str("\n| top label | count |\n|---|---:|\n");
    for (label, count) in &report.corpus.top_labels {
        md.push_str(&format!("| {label} | {count} |\n"));
    }

    md.push_str("\n## Main-topic classifier\n\n");
    md.push_str(&format!(
        "{} classes, {} training pairs, {} held-out records.\n\n",
        report.classifier.classes.len(),
        report.classifier.n_train,
        report.classifier.n_test
    ));
    md.push_str("| metric | value |\n|---|---:|\n");
    md.push_str(&format!(
        "| accuracy@top1 | {} |\n",
        fmt_opt(report.classifier.accuracy_top1)
    ));
    md.push_str(&format!(
        "| accuracy@top2 | {} |\n",
        fmt_opt(report.classifier.accuracy_top2)
    ));
    md.push_str(&format!(
        "| accuracy@top3 | {} |\n",
        fmt_opt(report.classifier.accuracy_top3)
    ));
    md.push_str(&format!(
        "| final training loss | {:.6} |\n",
        report.classifier.final_loss
    ));

    md.push_str("\n## Sub-topics by main-topic group\n");
    for group in &report.groups {
        md.push_str(&format!(
            "\n### {} ({} feedback, {} sub-topics)\n\n",
            group.name, group.size, group.k_sub
        ));
        md.push_str(&format!(
            "Silhouette {:.4}, mean coherence {}.\n\n",
            group.silhouette,
            fmt_opt(group.coherence_mean)
        ));
        md.push_str("| # | size | label | confidence | coherence | top words |\n");
        md.push_str("|---:|---:|---|---:|---:|---|\n");
        for sub in &group.subtopics {
            let label = match sub.label_kind {
                LabelKind::Issue => sub
                    .issue_title
                    .clone()
                    .unwrap_or_else(|| "(missing title)".to_string()),
                LabelKind::WordFallback => "(word fallback)".to_string(),
            };
            md.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                sub.index,
                sub.size,
                label,
                fmt_opt(sub.confidence),
                fmt_opt(sub.coherence),
                sub.top_words.join(" / ")
            ));
        }
    }

    if !report.skipped_groups.is_empty() {
        md.push_str("\n## Skipped groups\n\n| group | reason |\n|---|---|\n");
        for (name, reason) in &report.skipped_groups {
            md.push_str(&format!("| {name} | {reason} |\n"));
        }
    }
    md.push_str("\nPer-stage timings are recorded separately in timings.json.\n");
    md
}

// ---------------------------------------------------------------------------
// Method comparison
// ---------------------------------------------------------------------------

/// Clusters arbitrary per-document points with the pipeline's k-means
/// settings and extracts class-TF-IDF top words per cluster.
fn cluster_points(
    group: &GroupData,
    points: &[Vec<f64>],
    k_sub: usize,
    seed: u64,
    cfg: &PipelineConfig,
) -> Result<(Vec<usize>, Vec<Vec<String>>), PipelineError> {
    let km = kmeans(points, k_sub, seed, cfg.pshti.kmeans_max_iterations)
        .map_err(|e| stage_err(StageName::Pshti, format!("group {}: {e}", group.name)))?;
    let mut cluster_docs: Vec<Vec<&TokenizedDoc>> = vec![Vec::new(); k_sub];
    for (doc, &assignment) in group.docs.iter().zip(&km.assignments) {
        cluster_docs[assignment].push(doc);
    }
    let mut top_word_lists = Vec::with_capacity(k_sub);
    for index in 0..k_sub {
        let words = extract_top_words(index, &cluster_docs, cfg.pshti.top_words)
            .map_err(|e| stage_err(StageName::Pshti, format!("group {}: {e}", group.name)))?;
        top_word_lists.push(words);
    }
    Ok((km.assignments, top_word_lists))
}

fn compare_group(
    method: CompareMethod,
    gamma: Option<f64>,
    group: &GroupData,
    cfg: &PipelineConfig,
    template: &Stage1Config,
) -> Result<CompareGroup, PipelineError> {
    let vocab = build_vocabulary(
        &group.docs,
        cfg.vocabulary.min_df,
        cfg.vocabulary.max_df_ratio,
    )
    .map_err(|e| stage_err(StageName::Pshti, format!("group {}: {e}", group.name)))?;

    let (points, assignments, top_word_lists): (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<String>>) =
        match method {
            CompareMethod::PshtiNorm | CompareMethod::PshtiUnnorm => {
                let variant = Stage1Config {
                    normalize_embeddings: method == CompareMethod::PshtiNorm,
                    gamma: gamma.expect("hybrid methods carry a gamma"),
                    ..template.clone()
                };
                let output =
                    run_stage1(&group.name, &group.docs, &group.embeddings, &vocab, &variant)
                        .map_err(|e| {
                            stage_err(StageName::Pshti, format!("group {}: {e}", group.name))
                        })?;
                let words = output
                    .clusters
                    .iter()
                    .map(|c| c.top_words.clone())
                    .collect();
                (output.latents, output.assignments, words)
            }
            CompareMethod::LdaOnly => {
                let k_sub = template
                    .k_sub_override
                    .unwrap_or_else(|| choose_k_sub(group.docs.len(), &template.k_sub_rule))
                    .min(group.docs.len())
                    .max(1);
                let lda_cfg = LdaConfig {
                    k: k_sub,
                    seed: derive_seed(cfg.seed, &format!("lda:{}", group.name)),
                    ..template.lda.clone()
                };
                let model = lda::fit(&group.docs, &vocab, &lda_cfg)
                    .map_err(|e| {
                        stage_err(StageName::Pshti, format!("group {}: {e}", group.name))
                    })?;
                let points: Vec<Vec<f64>> = model
                    .train_doc_topics()
                    .into_iter()
                    .map(|d| d.probabilities)
                    .collect();
                let (assignments, words) = cluster_points(
                    group,
                    &points,
                    k_sub,
                    derive_seed(cfg.seed, &format!("kmeans:{}", group.name)),
                    cfg,
                )?;
                (points, assignments, words)
            }
            CompareMethod::EmbedOnly => {
                let k_sub = template
                    .k_sub_override
                    .unwrap_or_else(|| choose_k_sub(group.docs.len(), &template.k_sub_rule))
                    .min(group.docs.len())
                    .max(1);
                let points: Vec<Vec<f64>> = group
                    .embeddings
                    .iter()
                    .map(|e| e.values.clone())
                    .collect();
                let (assignments, words) = cluster_points(
                    group,
                    &points,
                    k_sub,
                    derive_seed(cfg.seed, &format!("kmeans:{}", group.name)),
                    cfg,
                )?;
                (points, assignments, words)
            }
        };

    let report = silhouette(&points, &assignments)
        .map_err(|e| stage_err(StageName::Eval, format!("group {}: {e}", group.name)))?;
    let probs = count_window_probs(&group.docs, cfg.eval.window_size);
    let coherence_per_subtopic =
        cluster_coherences(&group.name, &top_word_lists, &probs, cfg.eval.epsilon);
    Ok(CompareGroup {
        silhouette: report.mean,
        coherence_mean: mean_of(&coherence_per_subtopic),
        coherence_per_subtopic,
    })
}

pub(super) fn run_compare(
    cfg: &PipelineConfig,
    paths: &ArtifactPaths,
    methods: &[CompareMethod],
) -> Result<(), PipelineError> {
    let (groups, _skipped) = collect_groups(cfg, paths)?;
    if groups.is_empty() {
        return Err(PipelineError::Input(
            "no routed group reaches pshti.min_group_size; nothing to compare".into(),
        ));
    }
    let template = cfg.stage1_config();

    let mut rows = Vec::new();
    for &method in methods {
        let hybrid = matches!(
            method,
            CompareMethod::PshtiNorm | CompareMethod::PshtiUnnorm
        );
        let gammas: Vec<Option<f64>> = if hybrid {
            if cfg.compare.gammas.is_empty() {
                vec![Some(cfg.pshti.gamma)]
            } else {
                cfg.compare.gammas.iter().map(|&g| Some(g)).collect()
            }
        } else {
            vec![None]
        };
        for gamma in gammas {
            let per_group: Vec<Result<CompareGroup, PipelineError>> =
                with_workers(cfg.workers, || {
                    groups
                        .par_iter()
                        .map(|g| compare_group(method, gamma, g, cfg, &template))
                        .collect()
                })?;
            let mut group_map = BTreeMap::new();
            for (group, result) in groups.iter().zip(per_group) {
                group_map.insert(group.name.clone(), result?);
            }
            let silhouette_mean = group_map.values().map(|g| g.silhouette).sum::<f64>()
                / group_map.len() as f64;
            let coherences: Vec<Option<f64>> =
                group_map.values().map(|g| g.coherence_mean).collect();
            let label = match (hybrid, cfg.compare.gammas.is_empty()) {
                (true, false) => format!("{method}[gamma={}]", gamma.expect("hybrid")),
                _ => method.to_string(),
            };
            rows.push(CompareRow {
                method: label,
                gamma,
                silhouette_mean,
                coherence_mean: mean_of(&coherences),
                groups: group_map,
            });
        }
    }

    let report = CompareReport { rows };
    write_json_pretty(&paths.compare_json(), &report)?;
    fs::write(paths.compare_md(), render_compare_markdown(&report)).map_err(|e| {
        PipelineError::Input(format!("cannot write {}: {e}", paths.compare_md().display()))
    })
}

fn render_compare_markdown(report: &CompareReport) -> String {
    let mut md = String::new();
    md.push_str("# Sub-topic method comparison\n\n");
    md.push_str("| method | silhouette | coherence |\n|---|---:|---:|\n");
    for row in &report.rows {
        md.push_str(&format!(
            "| {} | {:.4} | {} |\n",
            row.method,
            row.silhouette_mean,
            fmt_opt(row.coherence_mean)
        ));
    }
    md.push_str(
        "\nSilhouette is averaged over main-topic groups; coherence over the groups' \
         sub-topic means.\n",
    );
    md
}
