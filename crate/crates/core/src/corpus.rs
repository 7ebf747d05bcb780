//! Corpus loading and text preparation.
//!
//! Feedback arrives as JSONL, one record per line. Records keep their
//! original text for embedding; topic modeling and top-word extraction work
//! on the token stream produced by [`preprocess`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("vocabulary is empty after document-frequency filtering")]
    EmptyVocabulary,
}

/// One feedback record as it appears in the input corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub id: String,
    pub text: String,
    pub channel: String,
    /// Main-topic labels when the record is annotated; empty when not.
    #[serde(default)]
    pub labels: BTreeSet<String>,
}

/// Token stream for a record after cleanup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub id: String,
    pub tokens: Vec<String>,
    /// True when the token stream was cut at `max_length`.
    pub truncated: bool,
}

/// Why a record was dropped during preprocessing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    /// Fewer than `min_tokens` tokens survived cleanup.
    TooShort { token_count: usize },
}

/// Outcome of preprocessing a single record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Preprocessed {
    Doc(TokenizedDoc),
    Rejected { id: String, reason: RejectReason },
}

#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    /// Hard cap on tokens kept per document.
    pub max_length: usize,
    pub stopwords: HashSet<String>,
    /// Remove `<...>` spans and decode the common HTML entities first.
    pub strip_markup: bool,
    /// Documents with fewer surviving tokens are rejected.
    pub min_tokens: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_length: 192,
            stopwords: default_stopwords().clone(),
            strip_markup: true,
            min_tokens: 3,
        }
    }
}

/// Built-in English stopword list; callers can swap in their own set via
/// [`PreprocessConfig`].
pub fn default_stopwords() -> &'static HashSet<String> {
    static LIST: OnceLock<HashSet<String>> = OnceLock::new();
    LIST.get_or_init(|| {
        include_str!("../data/stopwords.txt")
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect()
    })
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    channel: String,
    #[serde(default)]
    labels: Vec<String>,
}

/// Reads a JSONL corpus. Line numbers in errors are 1-based; blank lines are
/// skipped. Records must have unique ids and nonempty text.
pub fn load_corpus(path: &Path) -> Result<Vec<FeedbackRecord>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.text.trim().is_empty() {
            return Err(CorpusError::Parse {
                line: line_no,
                message: format!("record {:?} has empty text", raw.id),
            });
        }
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId(raw.id));
        }
        records.push(FeedbackRecord {
            id: raw.id,
            text: raw.text,
            channel: raw.channel,
            labels: raw.labels.into_iter().collect(),
        });
    }
    Ok(records)
}

/// Drops `<...>` spans (replaced by a space so adjacent words stay separate)
/// and decodes `&amp; &lt; &gt; &quot; &apos;` in a single left-to-right
/// pass, so already-escaped text is not decoded twice.
pub fn strip_markup(text: &str) -> String {
    const ENTITIES: [(&str, char); 5] = [
        ("&amp;", '&'),
        ("&lt;", '<'),
        ("&gt;", '>'),
        ("&quot;", '"'),
        ("&apos;", '\''),
    ];
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(ch) = rest.chars().next() {
        match ch {
            '<' => {
                // Skip to the closing '>'; an unterminated tag swallows the rest.
                match rest.find('>') {
                    Some(end) => rest = &rest[end + 1..],
                    None => rest = "",
                }
                out.push(' ');
            }
            '&' => {
                let mut matched = false;
                for (name, decoded) in ENTITIES {
                    if rest.starts_with(name) {
                        out.push(decoded);
                        rest = &rest[name.len()..];
                        matched = true;
                        break;
                    }
                }
                if !matched {
                    out.push('&');
                    rest = &rest[1..];
                }
            }
            _ => {
                out.push(ch);
                rest = &rest[ch.len_utf8()..];
            }
        }
    }
    out
}

pub(crate) fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lowercases, optionally strips markup, tokenizes on non-alphanumeric runs,
/// removes stopwords, then truncates to `max_length`. Documents with fewer
/// than `min_tokens` surviving tokens are rejected rather than returned.
pub fn preprocess(record: &FeedbackRecord, cfg: &PreprocessConfig) -> Preprocessed {
    let cleaned;
    let text = if cfg.strip_markup {
        cleaned = strip_markup(&record.text);
        cleaned.as_str()
    } else {
        record.text.as_str()
    };
    let mut tokens: Vec<String> = tokenize(text)
        .into_iter()
        .filter(|t| !cfg.stopwords.contains(t))
        .collect();
    if tokens.len() < cfg.min_tokens {
        return Preprocessed::Rejected {
            id: record.id.clone(),
            reason: RejectReason::TooShort {
                token_count: tokens.len(),
            },
        };
    }
    let truncated = tokens.len() > cfg.max_length;
    if truncated {
        tokens.truncate(cfg.max_length);
    }
    Preprocessed::Doc(TokenizedDoc {
        id: record.id.clone(),
        tokens,
        truncated,
    })
}

/// Term index over a tokenized corpus. Terms are sorted lexicographically and
/// indices are dense, so the same corpus always yields the same layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    terms: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    doc_frequency: Vec<usize>,
    total_docs: usize,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn total_docs(&self) -> usize {
        self.total_docs
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, index: usize) -> &str {
        &self.terms[index]
    }

    pub fn doc_frequency(&self, term: &str) -> Option<usize> {
        self.index_of(term).map(|i| self.doc_frequency[i])
    }

    /// Rebuilds the term→index map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    /// Stable content hash, recorded in model artifacts so stale pairings of
    /// model and vocabulary are detectable.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for term in &self.terms {
            hasher.update(term.as_bytes());
            hasher.update([0u8]);
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds the vocabulary from tokenized docs, keeping terms whose document
/// frequency is at least `min_df` and at most `max_df_ratio * total_docs`.
pub fn build_vocabulary(
    docs: &[TokenizedDoc],
    min_df: usize,
    max_df_ratio: f64,
) -> Result<Vocabulary, CorpusError> {
    let total_docs = docs.len();
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for doc in docs {
        let distinct: BTreeSet<&str> = doc.tokens.iter().map(String::as_str).collect();
        for term in distinct {
            *df.entry(term).or_insert(0) += 1;
        }
    }
    let max_df = max_df_ratio * total_docs as f64;
    let mut terms = Vec::new();
    let mut doc_frequency = Vec::new();
    for (term, count) in df {
        if count >= min_df && count as f64 <= max_df {
            terms.push(term.to_string());
            doc_frequency.push(count);
        }
    }
    if terms.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    let mut vocab = Vocabulary {
        terms,
        index: HashMap::new(),
        doc_frequency,
        total_docs,
    };
    vocab.rebuild_index();
    Ok(vocab)
}

/// Label statistics over a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub records: usize,
    /// Histogram of label-set sizes; values sum to `records`, with key 0
    /// counting unlabeled records.
    pub labels_per_doc: BTreeMap<usize, usize>,
    pub label_counts: BTreeMap<String, usize>,
    /// Most frequent labels, count descending then label ascending.
    pub top_labels: Vec<(String, usize)>,
}

pub fn corpus_stats(records: &[FeedbackRecord], top_n: usize) -> CorpusStats {
    let mut labels_per_doc = BTreeMap::new();
    let mut label_counts: BTreeMap<String, usize> = BTreeMap::new();
    for record in records {
        *labels_per_doc.entry(record.labels.len()).or_insert(0) += 1;
        for label in &record.labels {
            *label_counts.entry(label.clone()).or_insert(0) += 1;
        }
    }
    let mut top_labels: Vec<(String, usize)> =
        label_counts.iter().map(|(l, c)| (l.clone(), *c)).collect();
    top_labels.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top_labels.truncate(top_n);
    CorpusStats {
        records: records.len(),
        labels_per_doc,
        label_counts,
        top_labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn record(id: &str, text: &str, labels: &[&str]) -> FeedbackRecord {
        FeedbackRecord {
            id: id.to_string(),
            text: text.to_string(),
            channel: "in-app".to_string(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn doc(id: &str, tokens: &[&str]) -> TokenizedDoc {
        TokenizedDoc {
            id: id.to_string(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            truncated: false,
        }
    }

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().expect("temp file");
        for line in lines {
            writeln!(f, "{line}").expect("write line");
        }
        f
    }

    #[test]
    fn load_corpus_reads_records_in_order() {
        let f = write_corpus(&[
            r#"{"id":"f1","text":"Calendar sync is broken","channel":"in-app","labels":["Calendar"]}"#,
            r#"{"id":"f2","text":"I cannot attach files","channel":"store","labels":["Mail","Attachments"]}"#,
            r#"{"id":"f3","text":"great app","channel":"store"}"#,
        ]);
        let records = load_corpus(f.path()).expect("load");
        assert_eq!(records.len(), 3);
        assert_eq!(records[0].id, "f1");
        assert_eq!(records[1].labels.len(), 2);
        // Missing labels field means an empty set, not an error.
        assert!(records[2].labels.is_empty());
    }

    #[test]
    fn load_corpus_reports_parse_line() {
        let f = write_corpus(&[
            r#"{"id":"f1","text":"fine","channel":"in-app"}"#,
            r#"{"id":"f2","text":"","channel":"in-app"}"#,
        ]);
        match load_corpus(f.path()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_rejects_malformed_json_with_line() {
        let f = write_corpus(&[
            r#"{"id":"f1","text":"fine","channel":"in-app"}"#,
            r#"{"id":"f2","text":"no channel"}"#,
        ]);
        match load_corpus(f.path()) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_rejects_duplicate_ids() {
        let f = write_corpus(&[
            r#"{"id":"f1","text":"one","channel":"in-app"}"#,
            r#"{"id":"f1","text":"two","channel":"in-app"}"#,
        ]);
        match load_corpus(f.path()) {
            Err(CorpusError::DuplicateId(id)) => assert_eq!(id, "f1"),
            other => panic!("expected duplicate id error, got {other:?}"),
        }
    }

    #[test]
    fn load_corpus_missing_file_is_io_error() {
        match load_corpus(Path::new("/nonexistent/corpus.jsonl")) {
            Err(CorpusError::Io { .. }) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }

    #[test]
    fn preprocess_lowercases_and_drops_stopwords() {
        let cfg = PreprocessConfig {
            stopwords: ["i", "want", "to"].iter().map(|s| s.to_string()).collect(),
            ..PreprocessConfig::default()
        };
        let rec = record("f1", "I want to change Calendar", &[]);
        // min_tokens default is 3 but only 2 tokens survive; use min_tokens 1
        // to observe the token stream itself.
        let cfg = PreprocessConfig {
            min_tokens: 1,
            ..cfg
        };
        match preprocess(&rec, &cfg) {
            Preprocessed::Doc(d) => {
                assert_eq!(d.tokens, vec!["change", "calendar"]);
                assert!(!d.truncated);
            }
            other => panic!("expected doc, got {other:?}"),
        }
    }

    #[test]
    fn preprocess_truncates_to_max_length() {
        let text: Vec<String> = (0..200).map(|i| format!("word{i}")).collect();
        let rec = record("f1", &text.join(" "), &[]);
        let cfg = PreprocessConfig {
            stopwords: HashSet::new(),
            ..PreprocessConfig::default()
        };
        match preprocess(&rec, &cfg) {
            Preprocessed::Doc(d) => {
                assert_eq!(d.tokens.len(), 192);
                assert!(d.truncated);
                assert_eq!(d.tokens[0], "word0");
                assert_eq!(d.tokens[191], "word191");
            }
            other => panic!("expected doc, got {other:?}"),
        }
    }

    #[test]
    fn preprocess_rejects_short_documents() {
        let rec = record("f1", "ok", &[]);
        let cfg = PreprocessConfig {
            stopwords: HashSet::new(),
            min_tokens: 3,
            ..PreprocessConfig::default()
        };
        match preprocess(&rec, &cfg) {
            Preprocessed::Rejected { id, reason } => {
                assert_eq!(id, "f1");
                assert_eq!(reason, RejectReason::TooShort { token_count: 1 });
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn preprocess_strips_markup_and_entities() {
        let rec = record("f1", "<b>Good</b> &amp; bad <br/>calendar&apos;s view", &[]);
        let cfg = PreprocessConfig {
            stopwords: HashSet::new(),
            min_tokens: 1,
            ..PreprocessConfig::default()
        };
        match preprocess(&rec, &cfg) {
            Preprocessed::Doc(d) => {
                assert_eq!(d.tokens, vec!["good", "bad", "calendar", "s", "view"]);
            }
            other => panic!("expected doc, got {other:?}"),
        }
    }

    #[test]
    fn strip_markup_single_pass_decoding() {
        // "&amp;lt;" decodes the leading entity only; the remainder stays literal.
        assert_eq!(strip_markup("&amp;lt;"), "&lt;");
        assert_eq!(strip_markup("a<br>b"), "a b");
        assert_eq!(strip_markup("unterminated <tag"), "unterminated  ");
        assert_eq!(strip_markup("5 &gt; 3"), "5 > 3");
    }

    #[test]
    fn tokenize_splits_on_non_alphanumeric() {
        assert_eq!(
            tokenize("can't open e-mail (v2.1)!"),
            vec!["can", "t", "open", "e", "mail", "v2", "1"]
        );
    }

    #[test]
    fn build_vocabulary_sorts_and_counts_df() {
        let docs = vec![
            doc("d1", &["b", "a", "c"]),
            doc("d2", &["b", "c", "d", "c"]),
            doc("d3", &["c", "d", "e"]),
        ];
        let vocab = build_vocabulary(&docs, 1, 1.0).expect("vocab");
        assert_eq!(vocab.terms(), ["a", "b", "c", "d", "e"]);
        assert_eq!(vocab.index_of("a"), Some(0));
        assert_eq!(vocab.index_of("e"), Some(4));
        assert_eq!(vocab.doc_frequency("c"), Some(3)); // once per doc, not per token
        assert_eq!(vocab.doc_frequency("b"), Some(2));
        assert_eq!(vocab.total_docs(), 3);
    }

    #[test]
    fn build_vocabulary_applies_df_filters() {
        let docs = vec![
            doc("d1", &["a", "b", "c"]),
            doc("d2", &["b", "c", "d"]),
            doc("d3", &["c", "d", "e"]),
        ];
        // min_df=2 drops a and e; max_df_ratio=0.67 (cutoff 2.01) drops c.
        let vocab = build_vocabulary(&docs, 2, 0.67).expect("vocab");
        assert_eq!(vocab.terms(), ["b", "d"]);
        assert_eq!(vocab.index_of("c"), None);
    }

    #[test]
    fn build_vocabulary_empty_result_is_error() {
        let docs = vec![doc("d1", &["a"]), doc("d2", &["b"])];
        match build_vocabulary(&docs, 2, 1.0) {
            Err(CorpusError::EmptyVocabulary) => {}
            other => panic!("expected empty vocabulary error, got {other:?}"),
        }
    }

    #[test]
    fn vocabulary_hash_tracks_content() {
        let docs_a = vec![doc("d1", &["a", "b"]), doc("d2", &["a", "b"])];
        let docs_b = vec![doc("d1", &["a", "c"]), doc("d2", &["a", "c"])];
        let va = build_vocabulary(&docs_a, 1, 1.0).unwrap();
        let vb = build_vocabulary(&docs_b, 1, 1.0).unwrap();
        assert_eq!(va.content_hash(), va.content_hash());
        assert_ne!(va.content_hash(), vb.content_hash());
    }

    #[test]
    fn corpus_stats_histogram_and_top_labels() {
        let records = vec![
            record("f1", "t", &["Calendar"]),
            record("f2", "t", &["Mail", "Calendar"]),
            record("f3", "t", &["Mail"]),
            record("f4", "t", &[]),
        ];
        let stats = corpus_stats(&records, 10);
        assert_eq!(stats.records, 4);
        assert_eq!(
            stats.labels_per_doc,
            BTreeMap::from([(0, 1), (1, 2), (2, 1)])
        );
        assert_eq!(stats.labels_per_doc.values().sum::<usize>(), 4);
        // Equal counts break ties by label name.
        assert_eq!(
            stats.top_labels,
            vec![("Calendar".to_string(), 2), ("Mail".to_string(), 2)]
        );
    }

    #[test]
    fn corpus_stats_unlabeled_corpus() {
        let records = vec![record("f1", "t", &[]), record("f2", "t", &[])];
        let stats = corpus_stats(&records, 5);
        assert_eq!(stats.labels_per_doc, BTreeMap::from([(0, 2)]));
        assert!(stats.top_labels.is_empty());
    }

    #[test]
    fn corpus_stats_top_n_truncates() {
        let records = vec![
            record("f1", "t", &["A", "B", "C"]),
            record("f2", "t", &["A", "B"]),
            record("f3", "t", &["A"]),
        ];
        let stats = corpus_stats(&records, 2);
        assert_eq!(
            stats.top_labels,
            vec![("A".to_string(), 3), ("B".to_string(), 2)]
        );
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(words in proptest::collection::vec("[a-z]{1,8}", 1..40)) {
            let cfg = PreprocessConfig {
                stopwords: HashSet::new(),
                min_tokens: 0,
                ..PreprocessConfig::default()
            };
            let rec = record("p", &words.join(" "), &[]);
            if let Preprocessed::Doc(d) = preprocess(&rec, &cfg) {
                let rejoined = record("p", &d.tokens.join(" "), &[]);
                match preprocess(&rejoined, &cfg) {
                    Preprocessed::Doc(d2) => prop_assert_eq!(d.tokens, d2.tokens),
                    other => prop_assert!(false, "second pass rejected: {:?}", other),
                }
            }
        }

        #[test]
        fn preprocess_respects_max_length(n in 1usize..400) {
            let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
            let cfg = PreprocessConfig {
                stopwords: HashSet::new(),
                min_tokens: 0,
                max_length: 192,
                ..PreprocessConfig::default()
            };
            let rec = record("p", &words.join(" "), &[]);
            match preprocess(&rec, &cfg) {
                Preprocessed::Doc(d) => {
                    prop_assert!(d.tokens.len() <= 192);
                    prop_assert_eq!(d.truncated, n > 192);
                }
                other => prop_assert!(false, "unexpected rejection: {:?}", other),
            }
        }

        #[test]
        fn corpus_stats_histogram_sums_to_record_count(
            label_sets in proptest::collection::vec(proptest::collection::btree_set("[A-D]", 0..4), 0..30)
        ) {
            let records: Vec<FeedbackRecord> = label_sets
                .iter()
                .enumerate()
                .map(|(i, labels)| FeedbackRecord {
                    id: format!("f{i}"),
                    text: "t".to_string(),
                    channel: "c".to_string(),
                    labels: labels.clone(),
                })
                .collect();
            let stats = corpus_stats(&records, 10);
            prop_assert_eq!(stats.labels_per_doc.values().sum::<usize>(), records.len());
            let total_from_hist: usize = stats
                .labels_per_doc
                .iter()
                .map(|(size, count)| size * count)
                .sum();
            let total_from_counts: usize = stats.label_counts.values().sum();
            prop_assert_eq!(total_from_hist, total_from_counts);
        }

        #[test]
        fn vocabulary_is_sorted_and_dense(
            token_lists in proptest::collection::vec(
                proptest::collection::vec("[a-f]{1,3}", 1..10), 1..10)
        ) {
            let docs: Vec<TokenizedDoc> = token_lists
                .iter()
                .enumerate()
                .map(|(i, tokens)| TokenizedDoc {
                    id: format!("d{i}"),
                    tokens: tokens.clone(),
                    truncated: false,
                })
                .collect();
            let vocab = build_vocabulary(&docs, 1, 1.0).expect("nonempty");
            let mut sorted = vocab.terms().to_vec();
            sorted.sort();
            prop_assert_eq!(vocab.terms(), &sorted[..]);
            for (i, term) in vocab.terms().iter().enumerate() {
                prop_assert_eq!(vocab.index_of(term), Some(i));
            }
        }
    }
}
