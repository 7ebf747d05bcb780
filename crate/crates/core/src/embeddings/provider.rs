//! Embedding providers: a deterministic hash-based encoder (offline runs and
//! tests), a file-backed lookup, and a remote HTTP service client.

use std::time::Duration;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingStore, EmbeddingVector};
use crate::corpus::tokenize;

/// Something that can turn text into fixed-width vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    /// Batch embedding; the default maps [`EmbeddingProvider::embed`] over the
    /// inputs, remote providers override this with real batching.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Embeds one text and verifies the provider honored its own contract
/// (declared dimension, finite values). `text` must be nonempty.
pub fn get_embedding(
    provider: &dyn EmbeddingProvider,
    text: &str,
) -> Result<EmbeddingVector, EmbeddingError> {
    assert!(!text.trim().is_empty(), "cannot embed empty text");
    let vector = provider.embed(text)?;
    if vector.dimension() != provider.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: provider.dimension(),
            got: vector.dimension(),
            context: format!("provider {}", provider.name()),
        });
    }
    EmbeddingVector::new(vector.values, &format!("provider {}", provider.name()))
}

/// Embeds every record text and returns a store keyed by record id.
pub fn embed_corpus(
    provider: &dyn EmbeddingProvider,
    records: &[crate::corpus::FeedbackRecord],
    batch_size: usize,
) -> Result<EmbeddingStore, EmbeddingError> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut store = EmbeddingStore::new(provider.dimension(), provider.name());
    for chunk in records.chunks(batch_size) {
        let texts: Vec<String> = chunk.iter().map(|r| r.text.clone()).collect();
        let vectors = provider.embed_batch(&texts)?;
        if vectors.len() != chunk.len() {
            return Err(EmbeddingError::ProviderUnavailable {
                message: format!(
                    "provider {} returned {} vectors for {} texts",
                    provider.name(),
                    vectors.len(),
                    chunk.len()
                ),
            });
        }
        for (record, vector) in chunk.iter().zip(vectors) {
            if vector.dimension() != store.dimension() {
                return Err(EmbeddingError::DimensionMismatch {
                    expected: store.dimension(),
                    got: vector.dimension(),
                    context: format!("record {:?}", record.id),
                });
            }
            let vector = EmbeddingVector::new(vector.values, &format!("record {:?}", record.id))?;
            store.insert(record.id.clone(), vector)?;
        }
    }
    Ok(store)
}

/// Deterministic offline encoder: each token hashes to a fixed Gaussian
/// vector and a document embeds as the mean of its token vectors. Texts that
/// share vocabulary land near each other, identical texts collide exactly,
/// and no network or model files are involved — which is what the test
/// corpus and offline pipeline runs need from an encoder.
#[derive(Debug, Clone)]
pub struct HashEmbeddingProvider {
    dimension: usize,
    seed: u64,
}

impl HashEmbeddingProvider {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "dimension must be positive");
        HashEmbeddingProvider { dimension, seed }
    }

    fn seeded_vector(&self, key: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash64(key));
        (0..self.dimension)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

/// First eight bytes of SHA-256; stable across platforms and runs, unlike
/// `DefaultHasher`.
fn stable_hash64(key: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest >= 8 bytes"))
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn name(&self) -> &str {
        "hash"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            // Nothing alphanumeric to hash; fall back to the raw text key.
            return Ok(EmbeddingVector {
                values: self.seeded_vector(text),
            });
        }
        let mut sum = vec![0.0; self.dimension];
        for token in &tokens {
            for (acc, v) in sum.iter_mut().zip(self.seeded_vector(token)) {
                *acc += v;
            }
        }
        let n = tokens.len() as f64;
        Ok(EmbeddingVector {
            values: sum.into_iter().map(|v| v / n).collect(),
        })
    }
}

/// Serves embeddings from a pre-computed store; lookups are by store key, so
/// the store must be keyed by the exact texts the pipeline will embed.
#[derive(Debug, Clone)]
pub struct StoredEmbeddingProvider {
    store: EmbeddingStore,
}

impl StoredEmbeddingProvider {
    pub fn new(store: EmbeddingStore) -> Self {
        StoredEmbeddingProvider { store }
    }
}

impl EmbeddingProvider for StoredEmbeddingProvider {
    fn name(&self) -> &str {
        "file"
    }

    fn dimension(&self) -> usize {
        self.store.dimension()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.store
            .get(text)
            .cloned()
            .ok_or_else(|| EmbeddingError::ProviderUnavailable {
                message: format!("no stored embedding for key {text:?}"),
            })
    }
}

/// Client settings for a remote embedding service.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; the client posts to `{base_url}/embed`.
    pub base_url: String,
    pub dimension: usize,
    /// Texts per request.
    pub batch_size: usize,
    /// Retries after the initial attempt.
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub initial_backoff_ms: u64,
    /// Concurrent batch requests.
    pub max_in_flight: usize,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8080".to_string(),
            dimension: 768,
            batch_size: 32,
            max_retries: 3,
            initial_backoff_ms: 250,
            max_in_flight: 4,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    dimension: usize,
    vectors: Vec<Vec<f64>>,
}

/// HTTP client for an embedding service speaking the `POST /embed` protocol:
/// request `{"texts": [...]}`, response `{"dimension": D, "vectors": [[...]]}`.
///
/// Transport errors and non-2xx statuses are retried with exponential
/// backoff (`max_retries` times, starting at `initial_backoff_ms`); protocol
/// violations such as a wrong dimension fail immediately.
pub struct RemoteEmbeddingProvider {
    cfg: RemoteConfig,
    agent: ureq::Agent,
}

impl RemoteEmbeddingProvider {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent_cfg = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build();
        RemoteEmbeddingProvider {
            cfg,
            agent: agent_cfg.into(),
        }
    }

    fn request_chunk(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let url = format!("{}/embed", self.cfg.base_url.trim_end_matches('/'));
        let mut last_error = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let backoff = self.cfg.initial_backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self
                .agent
                .post(&url)
                .send_json(EmbedRequest { texts })
            {
                Ok(mut response) => {
                    let parsed: EmbedResponse =
                        response.body_mut().read_json().map_err(|e| {
                            EmbeddingError::ProviderUnavailable {
                                message: format!("bad response body from {url}: {e}"),
                            }
                        })?;
                    return self.validate_response(texts, parsed);
                }
                Err(e) => {
                    last_error = e.to_string();
                }
            }
        }
        Err(EmbeddingError::ProviderUnavailable {
            message: format!(
                "{url} failed after {} attempts: {last_error}",
                self.cfg.max_retries + 1
            ),
        })
    }

    fn validate_response(
        &self,
        texts: &[String],
        parsed: EmbedResponse,
    ) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if parsed.dimension != self.cfg.dimension {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.cfg.dimension,
                got: parsed.dimension,
                context: "remote response header".to_string(),
            });
        }
        if parsed.vectors.len() != texts.len() {
            return Err(EmbeddingError::ProviderUnavailable {
                message: format!(
                    "remote returned {} vectors for {} texts",
                    parsed.vectors.len(),
                    texts.len()
                ),
            });
        }
        parsed
            .vectors
            .into_iter()
            .enumerate()
            .map(|(i, values)| {
                if values.len() != self.cfg.dimension {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.cfg.dimension,
                        got: values.len(),
                        context: format!("remote response vector {i}"),
                    });
                }
                EmbeddingVector::new(values, &format!("remote response vector {i}"))
            })
            .collect()
    }
}

impl EmbeddingProvider for RemoteEmbeddingProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let texts = vec![text.to_string()];
        let mut vectors = self.request_chunk(&texts)?;
        Ok(vectors.remove(0))
    }

    /// Splits the texts into `batch_size` chunks and issues up to
    /// `max_in_flight` requests concurrently. Results are reassembled in
    /// input order, so concurrency never changes the output.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let chunks: Vec<&[String]> = texts.chunks(self.cfg.batch_size.max(1)).collect();
        let mut results: Vec<Option<Result<Vec<EmbeddingVector>, EmbeddingError>>> =
            (0..chunks.len()).map(|_| None).collect();
        let in_flight = self.cfg.max_in_flight.max(1);
        for (wave_idx, wave) in chunks.chunks(in_flight).enumerate() {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|chunk| scope.spawn(|| self.request_chunk(chunk)))
                    .collect();
                for (i, handle) in handles.into_iter().enumerate() {
                    let outcome = handle.join().expect("embedding worker panicked");
                    results[wave_idx * in_flight + i] = Some(outcome);
                }
            });
        }
        let mut out = Vec::with_capacity(texts.len());
        for result in results {
            out.extend(result.expect("all chunks processed")?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn hash_provider_is_deterministic() {
        let provider = HashEmbeddingProvider::new(32, 7);
        let a = get_embedding(&provider, "calendar sync is broken").unwrap();
        let b = get_embedding(&provider, "calendar sync is broken").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dimension(), 32);
        // A second instance with the same seed agrees bit for bit.
        let provider2 = HashEmbeddingProvider::new(32, 7);
        let c = get_embedding(&provider2, "calendar sync is broken").unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn hash_provider_seed_changes_output() {
        let a = get_embedding(&HashEmbeddingProvider::new(16, 1), "hello world").unwrap();
        let b = get_embedding(&HashEmbeddingProvider::new(16, 2), "hello world").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn hash_provider_reflects_shared_vocabulary() {
        let provider = HashEmbeddingProvider::new(64, 42);
        let a = get_embedding(&provider, "calendar invite meeting room schedule").unwrap();
        let b = get_embedding(&provider, "calendar invite meeting room booking").unwrap();
        let c = get_embedding(&provider, "password reset login account locked").unwrap();
        let close = cosine(&a.values, &b.values);
        let far = cosine(&a.values, &c.values);
        assert!(
            close > far,
            "shared-vocabulary cosine {close} should beat disjoint {far}"
        );
        assert!(close > 0.5, "4/5 shared tokens should be clearly similar");
    }

    #[test]
    fn hash_provider_ignores_punctuation_case() {
        let provider = HashEmbeddingProvider::new(16, 3);
        let a = provider.embed("Calendar, Sync!").unwrap();
        let b = provider.embed("calendar sync").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stored_provider_returns_exact_vectors() {
        let mut store = EmbeddingStore::new(2, "file");
        store
            .insert(
                "calendar broken".into(),
                EmbeddingVector {
                    values: vec![3.0, 4.0],
                },
            )
            .unwrap();
        let provider = StoredEmbeddingProvider::new(store);
        let v = get_embedding(&provider, "calendar broken").unwrap();
        assert_eq!(v.values, vec![3.0, 4.0]);
        match get_embedding(&provider, "missing text") {
            Err(EmbeddingError::ProviderUnavailable { message }) => {
                assert!(message.contains("missing text"));
            }
            other => panic!("expected unavailable, got {other:?}"),
        }
    }

    #[test]
    fn get_embedding_checks_declared_dimension() {
        struct Lying;
        impl EmbeddingProvider for Lying {
            fn name(&self) -> &str {
                "lying"
            }
            fn dimension(&self) -> usize {
                4
            }
            fn embed(&self, _: &str) -> Result<EmbeddingVector, EmbeddingError> {
                Ok(EmbeddingVector {
                    values: vec![1.0, 2.0],
                })
            }
        }
        match get_embedding(&Lying, "text") {
            Err(EmbeddingError::DimensionMismatch { expected, got, .. }) => {
                assert_eq!((expected, got), (4, 2));
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn embed_corpus_keys_by_record_id() {
        let provider = HashEmbeddingProvider::new(8, 5);
        let records = vec![
            crate::corpus::FeedbackRecord {
                id: "f2".into(),
                text: "calendar sync".into(),
                channel: "in-app".into(),
                labels: Default::default(),
            },
            crate::corpus::FeedbackRecord {
                id: "f1".into(),
                text: "mail search".into(),
                channel: "in-app".into(),
                labels: Default::default(),
            },
        ];
        let store = embed_corpus(&provider, &records, 1).unwrap();
        assert_eq!(store.len(), 2);
        let direct = provider.embed("calendar sync").unwrap();
        assert_eq!(store.get("f2"), Some(&direct));
    }
}
