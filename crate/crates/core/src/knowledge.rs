//! Mapping discovered sub-topics onto a self-help issue catalog.
//!
//! Stage one shortlists catalog entries by cosine similarity between the
//! cluster's top-word query and issue titles. Stage two re-scores the
//! shortlist against a representative feedback embedding (cluster centroid
//! in batch mode, the single feedback in streaming mode); the best stage-two
//! score becomes the label confidence, and clusters that clear the
//! acceptance threshold get the issue as their label. Everything else keeps
//! its top words as a fallback label.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{get_embedding, EmbeddingError, EmbeddingProvider, EmbeddingVector};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate issue id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// One entry of the self-help catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueEntry {
    pub id: String,
    pub title: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
}

/// Reads a JSONL catalog; ids must be unique and titles nonempty.
pub fn load_catalog(path: &Path) -> Result<Vec<IssueEntry>, KnowledgeError> {
    let file = File::open(path).map_err(|source| KnowledgeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| KnowledgeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IssueEntry = serde_json::from_str(&line).map_err(|e| KnowledgeError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if entry.title.trim().is_empty() {
            return Err(KnowledgeError::Parse {
                line: line_no,
                message: format!("issue {:?} has an empty title", entry.id),
            });
        }
        if !seen.insert(entry.id.clone()) {
            return Err(KnowledgeError::DuplicateId(entry.id));
        }
        entries.push(entry);
    }
    Ok(entries)
}

/// Cosine similarity. A zero vector on either side yields 0 with a warning,
/// since direction is undefined there.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine needs equal-length vectors");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        log::warn!("cosine similarity against a zero vector; returning 0");
        return 0.0;
    }
    dot / (norm_a * norm_b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Stage-one shortlist floor on query-vs-title similarity.
    pub candidate_threshold: f64,
    /// Stage-two floor for accepting an issue label (inclusive).
    pub accept_threshold: f64,
    /// Shortlist size cap.
    pub max_candidates: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            candidate_threshold: 0.3,
            accept_threshold: 0.6,
            max_candidates: 10,
        }
    }
}

/// One shortlisted issue with its scores from both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMatch {
    pub issue_id: String,
    pub title: String,
    pub stage1_score: f64,
    /// Filled once the candidate is re-scored against the representative
    /// feedback embedding.
    pub stage2_score: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Issue,
    WordFallback,
}

/// Final label for a sub-topic. Issue labels always carry a confidence at or
/// above the acceptance threshold; fallback labels rely on the top words,
/// which are retained in every case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTopicLabel {
    pub kind: LabelKind,
    pub issue_id: Option<String>,
    pub issue_title: Option<String>,
    pub confidence: Option<f64>,
    pub top_words: Vec<String>,
    pub candidates: Vec<CandidateMatch>,
}

impl SubTopicLabel {
    fn fallback(top_words: &[String], candidates: Vec<CandidateMatch>) -> Self {
        SubTopicLabel {
            kind: LabelKind::WordFallback,
            issue_id: None,
            issue_title: None,
            confidence: None,
            top_words: top_words.to_vec(),
            candidates,
        }
    }
}

/// Catalog entries with pre-computed title embeddings.
pub struct CatalogIndex {
    entries: Vec<IssueEntry>,
    title_embeddings: Vec<EmbeddingVector>,
    dimension: usize,
}

impl CatalogIndex {
    /// Embeds every issue title with the given provider. An empty catalog is
    /// allowed; every sub-topic then keeps its word-fallback label.
    pub fn build(
        entries: Vec<IssueEntry>,
        provider: &dyn EmbeddingProvider,
    ) -> Result<Self, KnowledgeError> {
        let mut title_embeddings = Vec::with_capacity(entries.len());
        for entry in &entries {
            title_embeddings.push(get_embedding(provider, &entry.title)?);
        }
        Ok(CatalogIndex {
            dimension: provider.dimension(),
            entries,
            title_embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IssueEntry] {
        &self.entries
    }

    /// Stage one: similarity of the query embedding against every title,
    /// keeping scores at or above the candidate threshold, best first (ties
    /// by issue id), capped at `max_candidates`.
    pub fn shortlist(&self, query: &EmbeddingVector, cfg: &MatchConfig) -> Vec<CandidateMatch> {
        let mut candidates: Vec<CandidateMatch> = self
            .entries
            .iter()
            .zip(&self.title_embeddings)
            .filter_map(|(entry, emb)| {
                let score = cosine_similarity(&query.values, &emb.values);
                (score >= cfg.candidate_threshold).then(|| CandidateMatch {
                    issue_id: entry.id.clone(),
                    title: entry.title.clone(),
                    stage1_score: score,
                    stage2_score: None,
                })
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.stage1_score
                .partial_cmp(&a.stage1_score)
                .expect("scores are finite")
                .then_with(|| a.issue_id.cmp(&b.issue_id))
        });
        candidates.truncate(cfg.max_candidates);
        candidates
    }

    fn title_embedding(&self, issue_id: &str) -> Option<&EmbeddingVector> {
        self.entries
            .iter()
            .position(|e| e.id == issue_id)
            .map(|i| &self.title_embeddings[i])
    }
}

/// Stage two: re-score every candidate against the representative feedback
/// embedding.
fn score_stage2(
    candidates: &mut [CandidateMatch],
    representative: &EmbeddingVector,
    index: &CatalogIndex,
) -> Result<(), KnowledgeError> {
    if representative.dimension() != index.dimension {
        return Err(KnowledgeError::DimensionMismatch {
            expected: index.dimension,
            got: representative.dimension(),
        });
    }
    for candidate in candidates.iter_mut() {
        let title_emb = index
            .title_embedding(&candidate.issue_id)
            .expect("candidate came from this index");
        candidate.stage2_score = Some(cosine_similarity(
            &title_emb.values,
            &representative.values,
        ));
    }
    Ok(())
}

/// Decides the label from stage-two scores: the best candidate wins (ties by
/// issue id) and is accepted iff its score is at or above the threshold.
pub fn resolve_label(
    candidates: Vec<CandidateMatch>,
    accept_threshold: f64,
    top_words: &[String],
) -> SubTopicLabel {
    let best = candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.stage2_score.map(|s| (i, s)))
        .max_by(|(ia, sa), (ib, sb)| {
            sa.partial_cmp(sb)
                .expect("scores are finite")
                .then_with(|| {
                    candidates[*ib]
                        .issue_id
                        .cmp(&candidates[*ia].issue_id)
                })
        });
    match best {
        Some((i, score)) if score >= accept_threshold => SubTopicLabel {
            kind: LabelKind::Issue,
            issue_id: Some(candidates[i].issue_id.clone()),
            issue_title: Some(candidates[i].title.clone()),
            confidence: Some(score),
            top_words: top_words.to_vec(),
            candidates,
        },
        _ => SubTopicLabel::fallback(top_words, candidates),
    }
}

fn label_with_representative(
    top_words: &[String],
    representative: &EmbeddingVector,
    index: &CatalogIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &MatchConfig,
) -> Result<SubTopicLabel, KnowledgeError> {
    if top_words.is_empty() {
        log::warn!("sub-topic has no top words; keeping word fallback label");
        return Ok(SubTopicLabel::fallback(top_words, Vec::new()));
    }
    let query_text = top_words.join(" ");
    let query = get_embedding(provider, &query_text)?;
    let mut candidates = index.shortlist(&query, cfg);
    score_stage2(&mut candidates, representative, index)?;
    Ok(resolve_label(candidates, cfg.accept_threshold, top_words))
}

/// Batch mode: the representative embedding is the centroid of the cluster
/// members' embeddings.
pub fn label_cluster(
    top_words: &[String],
    member_embeddings: &[EmbeddingVector],
    index: &CatalogIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &MatchConfig,
) -> Result<SubTopicLabel, KnowledgeError> {
    assert!(
        !member_embeddings.is_empty(),
        "cluster must have at least one member embedding"
    );
    let dim = member_embeddings[0].dimension();
    let mut centroid = vec![0.0; dim];
    for emb in member_embeddings {
        if emb.dimension() != dim {
            return Err(KnowledgeError::DimensionMismatch {
                expected: dim,
                got: emb.dimension(),
            });
        }
        for (c, v) in centroid.iter_mut().zip(&emb.values) {
            *c += v;
        }
    }
    let n = member_embeddings.len() as f64;
    for c in centroid.iter_mut() {
        *c /= n;
    }
    let representative = EmbeddingVector { values: centroid };
    label_with_representative(top_words, &representative, index, provider, cfg)
}

/// Streaming mode: one feedback stands for itself.
pub fn label_feedback(
    top_words: &[String],
    feedback_embedding: &EmbeddingVector,
    index: &CatalogIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &MatchConfig,
) -> Result<SubTopicLabel, KnowledgeError> {
    label_with_representative(top_words, feedback_embedding, index, provider, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::io::Write;

    /// Test provider with hand-placed vectors per exact text.
    struct MapProvider {
        dimension: usize,
        map: HashMap<String, Vec<f64>>,
    }

    impl MapProvider {
        fn new(dimension: usize, pairs: &[(&str, &[f64])]) -> Self {
            MapProvider {
                dimension,
                map: pairs
                    .iter()
                    .map(|(k, v)| (k.to_string(), v.to_vec()))
                    .collect(),
            }
        }
    }

    impl EmbeddingProvider for MapProvider {
        fn name(&self) -> &str {
            "map"
        }
        fn dimension(&self) -> usize {
            self.dimension
        }
        fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
            self.map
                .get(text)
                .map(|v| EmbeddingVector { values: v.clone() })
                .ok_or_else(|| EmbeddingError::ProviderUnavailable {
                    message: format!("no vector for {text:?}"),
                })
        }
    }

    fn issue(id: &str, title: &str) -> IssueEntry {
        IssueEntry {
            id: id.to_string(),
            title: title.to_string(),
            url: format!("https://help.example/{id}"),
            body: None,
        }
    }

    fn words(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn cosine_hand_values() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine_similarity(&[5.0, 0.0], &[3.0, 4.0]), 0.6);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]) - (-1.0)).abs() < 1e-12);
        let v = [1.0, 2.0, 3.0];
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_is_zero() {
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn load_catalog_happy_path_and_errors() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"KB1","title":"Fix calendar sync","url":"u1"}}"#).unwrap();
        writeln!(
            f,
            r#"{{"id":"KB2","title":"Attach files to mail","url":"u2","body":"steps"}}"#
        )
        .unwrap();
        let entries = load_catalog(f.path()).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].body.as_deref(), Some("steps"));

        let mut dup = tempfile::NamedTempFile::new().unwrap();
        writeln!(dup, r#"{{"id":"KB1","title":"a","url":"u"}}"#).unwrap();
        writeln!(dup, r#"{{"id":"KB1","title":"b","url":"u"}}"#).unwrap();
        assert!(matches!(
            load_catalog(dup.path()),
            Err(KnowledgeError::DuplicateId(_))
        ));

        let mut empty_title = tempfile::NamedTempFile::new().unwrap();
        writeln!(empty_title, r#"{{"id":"KB1","title":"ok","url":"u"}}"#).unwrap();
        writeln!(empty_title, r#"{{"id":"KB2","title":" ","url":"u"}}"#).unwrap();
        match load_catalog(empty_title.path()) {
            Err(KnowledgeError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn shortlist_filters_sorts_and_caps() {
        let provider = MapProvider::new(
            2,
            &[
                ("calendar sync", &[1.0, 0.0]),
                ("sync calendar events", &[0.8, 0.6]),
                ("reset password", &[0.0, 1.0]),
                ("update calendar", &[1.0, 0.1]),
            ],
        );
        let entries = vec![
            issue("KB3", "update calendar"),
            issue("KB1", "sync calendar events"),
            issue("KB2", "reset password"),
        ];
        let index = CatalogIndex::build(entries, &provider).unwrap();
        let query = provider.embed("calendar sync").unwrap();
        let cfg = MatchConfig::default();
        let shortlist = index.shortlist(&query, &cfg);
        // KB2 is orthogonal (score 0 < 0.3) and drops out; the others sort
        // by score descending.
        let ids: Vec<&str> = shortlist.iter().map(|c| c.issue_id.as_str()).collect();
        assert_eq!(ids, vec!["KB3", "KB1"]);
        assert!(shortlist[0].stage1_score > shortlist[1].stage1_score);
        assert!(shortlist.iter().all(|c| c.stage2_score.is_none()));

        let capped = index.shortlist(
            &query,
            &MatchConfig {
                max_candidates: 1,
                ..cfg
            },
        );
        assert_eq!(capped.len(), 1);
        assert_eq!(capped[0].issue_id, "KB3");
    }

    #[test]
    fn shortlist_breaks_score_ties_by_issue_id() {
        let provider = MapProvider::new(
            2,
            &[
                ("q", &[1.0, 0.0]),
                ("same direction a", &[2.0, 0.0]),
                ("same direction b", &[4.0, 0.0]),
            ],
        );
        let entries = vec![
            issue("KB9", "same direction b"),
            issue("KB2", "same direction a"),
        ];
        let index = CatalogIndex::build(entries, &provider).unwrap();
        let shortlist = index.shortlist(&provider.embed("q").unwrap(), &MatchConfig::default());
        // Both score exactly 1.0; KB2 comes first.
        assert_eq!(shortlist[0].issue_id, "KB2");
        assert_eq!(shortlist[1].issue_id, "KB9");
    }

    #[test]
    fn resolve_accepts_best_stage2_candidate() {
        let candidates = vec![
            CandidateMatch {
                issue_id: "KB1".into(),
                title: "a".into(),
                stage1_score: 0.9,
                stage2_score: Some(0.6),
            },
            CandidateMatch {
                issue_id: "KB2".into(),
                title: "b".into(),
                stage1_score: 0.5,
                stage2_score: Some(0.8),
            },
        ];
        let label = resolve_label(candidates, 0.6, &words(&["w1", "w2"]));
        assert_eq!(label.kind, LabelKind::Issue);
        // Stage-two ranking wins even though KB1 led stage one.
        assert_eq!(label.issue_id.as_deref(), Some("KB2"));
        assert_eq!(label.confidence, Some(0.8));
        assert_eq!(label.top_words, words(&["w1", "w2"]));
        assert_eq!(label.candidates.len(), 2);
    }

    #[test]
    fn resolve_threshold_is_inclusive() {
        let candidate = |s: f64| {
            vec![CandidateMatch {
                issue_id: "KB1".into(),
                title: "t".into(),
                stage1_score: 0.9,
                stage2_score: Some(s),
            }]
        };
        let at = resolve_label(candidate(0.6), 0.6, &words(&["w"]));
        assert_eq!(at.kind, LabelKind::Issue);
        assert_eq!(at.confidence, Some(0.6));
        let below = resolve_label(candidate(0.5999999), 0.6, &words(&["w"]));
        assert_eq!(below.kind, LabelKind::WordFallback);
        assert_eq!(below.confidence, None);
        // The rejected candidate list is still reported.
        assert_eq!(below.candidates.len(), 1);
    }

    #[test]
    fn resolve_empty_candidates_is_fallback() {
        let label = resolve_label(Vec::new(), 0.6, &words(&["only", "words"]));
        assert_eq!(label.kind, LabelKind::WordFallback);
        assert_eq!(label.issue_id, None);
        assert_eq!(label.top_words, words(&["only", "words"]));
    }

    #[test]
    fn label_cluster_uses_member_centroid() {
        // Exact-0.6 construction: centroid of members is (3, 4); the sole
        // candidate title sits at (5, 0); cosine = 15/25 = 0.6 exactly, which
        // the inclusive threshold accepts.
        let provider = MapProvider::new(
            2,
            &[
                ("sync fails", &[5.0, 0.0]),
                ("sync", &[5.0, 0.0]),
            ],
        );
        let index = CatalogIndex::build(vec![issue("KB1", "sync fails")], &provider).unwrap();
        let members = vec![
            EmbeddingVector {
                values: vec![2.0, 4.0],
            },
            EmbeddingVector {
                values: vec![4.0, 4.0],
            },
        ];
        let label = label_cluster(
            &words(&["sync"]),
            &members,
            &index,
            &provider,
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(label.kind, LabelKind::Issue);
        assert_eq!(label.confidence, Some(0.6));
        assert_eq!(label.issue_id.as_deref(), Some("KB1"));
    }

    #[test]
    fn label_feedback_single_mode() {
        let provider = MapProvider::new(
            2,
            &[("login", &[1.0, 0.0]), ("login broken", &[1.0, 0.0])],
        );
        let index = CatalogIndex::build(vec![issue("KB7", "login broken")], &provider).unwrap();
        let feedback = EmbeddingVector {
            values: vec![1.0, 0.05],
        };
        let label = label_feedback(
            &words(&["login"]),
            &feedback,
            &index,
            &provider,
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(label.kind, LabelKind::Issue);
        assert!(label.confidence.unwrap() > 0.99);
    }

    #[test]
    fn label_with_no_top_words_falls_back() {
        let provider = MapProvider::new(2, &[("anything", &[1.0, 0.0])]);
        let index = CatalogIndex::build(vec![issue("KB1", "anything")], &provider).unwrap();
        let label = label_cluster(
            &[],
            &[EmbeddingVector {
                values: vec![1.0, 0.0],
            }],
            &index,
            &provider,
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(label.kind, LabelKind::WordFallback);
        assert!(label.candidates.is_empty());
    }

    #[test]
    fn empty_catalog_means_fallback() {
        let provider = MapProvider::new(2, &[("sync", &[1.0, 0.0])]);
        let index = CatalogIndex::build(Vec::new(), &provider).unwrap();
        let label = label_cluster(
            &words(&["sync"]),
            &[EmbeddingVector {
                values: vec![1.0, 0.0],
            }],
            &index,
            &provider,
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(label.kind, LabelKind::WordFallback);
        assert!(label.candidates.is_empty());
    }

    #[test]
    fn identical_title_and_member_text_gives_full_confidence() {
        // Byte-identical query, title, and member text all embed to the same
        // vector under any deterministic provider, so both stages score 1.
        let provider = crate::embeddings::HashEmbeddingProvider::new(16, 3);
        use crate::embeddings::EmbeddingProvider as _;
        let title = "change an appointment meeting or event";
        let index =
            CatalogIndex::build(vec![issue("KB1", title)], &provider).unwrap();
        let member = provider.embed(title).unwrap();
        let label = label_cluster(
            &title.split(' ').map(str::to_string).collect::<Vec<_>>(),
            &[member],
            &index,
            &provider,
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(label.kind, LabelKind::Issue);
        assert!((label.confidence.unwrap() - 1.0).abs() < 1e-12);
        assert!((label.candidates[0].stage1_score - 1.0).abs() < 1e-12);
    }
}
