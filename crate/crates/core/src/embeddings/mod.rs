//! Sentence embeddings: vector type, on-disk store, and the group-level
//! min-max normalization used before building hybrid vectors.

pub mod provider;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use provider::{
    embed_corpus, get_embedding, EmbeddingProvider, HashEmbeddingProvider, RemoteConfig,
    RemoteEmbeddingProvider, StoredEmbeddingProvider,
};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dimension mismatch ({context}): expected {expected}, got {got}")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("embedding provider unavailable: {message}")]
    ProviderUnavailable { message: String },
    #[error("non-finite embedding value ({context})")]
    NonFinite { context: String },
}

/// A dense sentence embedding. Operations that produce these are responsible
/// for keeping every value finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
}

impl EmbeddingVector {
    /// Wraps raw values, rejecting NaN and infinities.
    pub fn new(values: Vec<f64>, context: &str) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite {
                context: context.to_string(),
            });
        }
        Ok(EmbeddingVector { values })
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }
}

/// Embedding vectors keyed by an id (record id, or raw text when the store
/// backs a lookup provider). Iteration order is the sorted key order, so
/// saving is deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    provider: String,
    vectors: BTreeMap<String, EmbeddingVector>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    dimension: usize,
    provider: String,
}

#[derive(Serialize, Deserialize)]
struct StoreRow {
    id: String,
    values: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dimension: usize, provider: impl Into<String>) -> Self {
        EmbeddingStore {
            dimension,
            provider: provider.into(),
            vectors: BTreeMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.vectors.get(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.vectors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.vectors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Inserts or replaces a vector; the dimension must match the store.
    pub fn insert(&mut self, id: String, vector: EmbeddingVector) -> Result<(), EmbeddingError> {
        if vector.dimension() != self.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dimension,
                got: vector.dimension(),
                context: format!("store insert for {id:?}"),
            });
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    /// Writes the store as JSONL: a header line with dimension and provider,
    /// then one row per vector in sorted id order.
    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let io_err = |source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut writer = BufWriter::new(file);
        let header = StoreHeader {
            dimension: self.dimension,
            provider: self.provider.clone(),
        };
        serde_json::to_writer(&mut writer, &header)
            .map_err(|e| io_err(std::io::Error::other(e)))?;
        writer.write_all(b"\n").map_err(io_err)?;
        for (id, vector) in &self.vectors {
            let row = StoreRow {
                id: id.clone(),
                values: vector.values.clone(),
            };
            serde_json::to_writer(&mut writer, &row)
                .map_err(|e| io_err(std::io::Error::other(e)))?;
            writer.write_all(b"\n").map_err(io_err)?;
        }
        writer.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let file = File::open(path).map_err(|source| EmbeddingError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();
        let header: StoreHeader = loop {
            match lines.next() {
                Some((idx, line)) => {
                    let line = line.map_err(|source| EmbeddingError::Io {
                        path: path.to_path_buf(),
                        source,
                    })?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str(&line).map_err(|e| EmbeddingError::Parse {
                        line: idx + 1,
                        message: format!("bad store header: {e}"),
                    })?;
                }
                None => {
                    return Err(EmbeddingError::Parse {
                        line: 1,
                        message: "store file is empty (missing header)".to_string(),
                    })
                }
            }
        };
        let mut store = EmbeddingStore::new(header.dimension, header.provider);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|source| EmbeddingError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let row: StoreRow = serde_json::from_str(&line).map_err(|e| EmbeddingError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if row.values.len() != store.dimension {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: store.dimension,
                    got: row.values.len(),
                    context: format!("row {:?} at line {line_no}", row.id),
                });
            }
            if store.vectors.contains_key(&row.id) {
                return Err(EmbeddingError::Parse {
                    line: line_no,
                    message: format!("duplicate id {:?}", row.id),
                });
            }
            let vector = EmbeddingVector::new(
                row.values,
                &format!("row {:?} at line {line_no}", row.id),
            )?;
            store.vectors.insert(row.id, vector);
        }
        Ok(store)
    }
}

/// Outcome of group normalization: the scalar range that was mapped to
/// [0, 1], plus whether the range was degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSummary {
    pub min: f64,
    pub max: f64,
    pub vectors: usize,
    pub degenerate: bool,
}

/// Min-max normalizes a group of embeddings with one global scalar range:
/// every value of every vector is mapped via `(v - min) / (max - min)` where
/// min and max are taken over all values in the group. A degenerate range
/// (all values equal) maps everything to 0.5 and logs a warning.
///
/// The group must be nonempty and all vectors must share a dimension.
pub fn minmax_normalize_group(
    vectors: &[EmbeddingVector],
) -> (Vec<EmbeddingVector>, NormalizationSummary) {
    assert!(!vectors.is_empty(), "normalization group must be nonempty");
    let dim = vectors[0].dimension();
    assert!(
        vectors.iter().all(|v| v.dimension() == dim),
        "normalization group must share a dimension"
    );
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for vector in vectors {
        for &v in &vector.values {
            min = min.min(v);
            max = max.max(v);
        }
    }
    let range = max - min;
    let degenerate = range <= 0.0;
    if degenerate {
        log::warn!(
            "degenerate embedding range in normalization group ({} vectors, all values = {min}); \
             mapping everything to 0.5",
            vectors.len()
        );
    }
    let normalized = vectors
        .iter()
        .map(|vector| EmbeddingVector {
            values: vector
                .values
                .iter()
                .map(|&v| if degenerate { 0.5 } else { (v - min) / range })
                .collect(),
        })
        .collect();
    (
        normalized,
        NormalizationSummary {
            min,
            max,
            vectors: vectors.len(),
            degenerate,
        },
    )
}
