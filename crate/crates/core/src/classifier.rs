//! Main-topic classifier: multinomial logistic regression over frozen
//! sentence embeddings, with an optional tanh hidden layer.
//!
//! The embeddings do all the heavy lifting, so a small head trained with
//! mini-batch gradient descent is enough. Everything is seeded and
//! single-threaded: the same config and data always produce bit-identical
//! weights.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::EmbeddingVector;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("unknown class {0:?} in training data")]
    UnknownClass(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("training loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty label set for {0}")]
    EmptyLabelSet(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("gradient check epsilon must be in (0, 1e-2], got {0}")]
    InvalidEpsilon(f64),
    #[error("no training pairs provided")]
    EmptyTrainingSet,
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad classifier artifact: {0}")]
    Artifact(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Coefficient of the `l2/2 * ||W||^2` penalty on weight matrices
    /// (biases are not penalized).
    pub l2_penalty: f64,
    /// Width of the optional tanh layer between embedding and logits.
    pub hidden_width: Option<usize>,
    /// Weights start uniform in `[-init_scale, init_scale]`; zero means
    /// all-zero initialization.
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 100,
            batch_size: 64,
            seed: 42,
            l2_penalty: 0.0,
            hidden_width: None,
            init_scale: 0.01,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 {
            return Err(ClassifierError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig(
                "batch_size must be >= 1".into(),
            ));
        }
        // learning_rate 0 is allowed: it freezes parameters, which is useful
        // for loss probes at initialization.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(ClassifierError::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !self.l2_penalty.is_finite() || self.l2_penalty < 0.0 {
            return Err(ClassifierError::InvalidConfig(
                "l2_penalty must be finite and >= 0".into(),
            ));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return Err(ClassifierError::InvalidConfig(
                "init_scale must be finite and >= 0".into(),
            ));
        }
        if self.hidden_width == Some(0) {
            return Err(ClassifierError::InvalidConfig(
                "hidden_width must be >= 1 when set".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HiddenLayer {
    width: usize,
    /// width x dimension, row-major.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

/// Softmax classifier over embeddings. `weights` is classes x features
/// row-major, where features is the hidden width when a hidden layer is
/// present and the embedding dimension otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    classes: Vec<String>,
    dimension: usize,
    hidden: Option<HiddenLayer>,
    weights: Vec<f64>,
    biases: Vec<f64>,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out.push(row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

struct Forward {
    /// Post-activation hidden output, when a hidden layer exists.
    hidden_out: Option<Vec<f64>>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl SoftmaxClassifier {
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn n_classes(&self) -> usize {
        self.classes.len()
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let mut logits = Vec::new();
        let hidden_out = match &self.hidden {
            Some(layer) => {
                let mut pre = Vec::new();
                matvec(&layer.weights, layer.width, self.dimension, x, &mut pre);
                let h: Vec<f64> = pre
                    .iter()
                    .zip(&layer.biases)
                    .map(|(v, b)| (v + b).tanh())
                    .collect();
                matvec(&self.weights, self.n_classes(), layer.width, &h, &mut logits);
                Some(h)
            }
            None => {
                matvec(&self.weights, self.n_classes(), self.dimension, x, &mut logits);
                None
            }
        };
        for (l, b) in logits.iter_mut().zip(&self.biases) {
            *l += b;
        }
        let lse = log_sum_exp(&logits);
        let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
        let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
        Forward {
            hidden_out,
            probs,
            log_probs,
        }
    }

    /// Class probabilities for one embedding; sums to 1 up to rounding.
    pub fn predict_proba(&self, x: &EmbeddingVector) -> Result<Vec<f64>, ClassifierError> {
        if x.dimension() != self.dimension {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.dimension,
                got: x.dimension(),
            });
        }
        Ok(self.forward(&x.values).probs)
    }

    /// Top-k classes by probability, descending; equal probabilities break
    /// ties by class name. `k` larger than the class count returns all
    /// classes.
    pub fn predict_topk(
        &self,
        x: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<(String, f64)>, ClassifierError> {
        assert!(k >= 1, "k must be >= 1");
        let probs = self.predict_proba(x)?;
        let mut order: Vec<usize> = (0..self.n_classes()).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .expect("probabilities are finite")
                .then_with(|| self.classes[a].cmp(&self.classes[b]))
        });
        Ok(order
            .into_iter()
            .take(k.min(self.n_classes()))
            .map(|i| (self.classes[i].clone(), probs[i]))
            .collect())
    }

    /// Mean cross-entropy over the pairs (targets as class indices).
    fn mean_ce(&self, xs: &[&[f64]], targets: &[usize]) -> f64 {
        let mut total = 0.0;
        for (x, &t) in xs.iter().zip(targets) {
            let fwd = self.forward(x);
            total += -fwd.log_probs[t];
        }
        total / xs.len() as f64
    }

    fn l2_term(&self, l2: f64) -> f64 {
        if l2 == 0.0 {
            return 0.0;
        }
        let mut sq: f64 = self.weights.iter().map(|w| w * w).sum();
        if let Some(layer) = &self.hidden {
            sq += layer.weights.iter().map(|w| w * w).sum::<f64>();
        }
        0.5 * l2 * sq
    }

    /// Accumulates the gradient of mean cross-entropy over the given batch
    /// into `grads` (which must be zeroed by the caller).
    #[allow(clippy::needless_range_loop)]
    fn accumulate_grads(&self, xs: &[&[f64]], targets: &[usize], grads: &mut Grads) {
        let scale = 1.0 / xs.len() as f64;
        let n_classes = self.n_classes();
        for (x, &t) in xs.iter().zip(targets) {
            let fwd = self.forward(x);
            let feat: &[f64] = fwd.hidden_out.as_deref().unwrap_or(x);
            let feat_len = feat.len();
            for c in 0..n_classes {
                let d = (fwd.probs[c] - if c == t { 1.0 } else { 0.0 }) * scale;
                grads.biases[c] += d;
                let row = &mut grads.weights[c * feat_len..(c + 1) * feat_len];
                for (g, f) in row.iter_mut().zip(feat) {
                    *g += d * f;
                }
            }
            if let (Some(layer), Some(h)) = (&self.hidden, &fwd.hidden_out) {
                for f in 0..layer.width {
                    let mut dfeat = 0.0;
                    for c in 0..n_classes {
                        let d = (fwd.probs[c] - if c == t { 1.0 } else { 0.0 }) * scale;
                        dfeat += d * self.weights[c * layer.width + f];
                    }
                    let dpre = dfeat * (1.0 - h[f] * h[f]);
                    grads.hidden_biases[f] += dpre;
                    let row = &mut grads.hidden_weights[f * self.dimension..(f + 1) * self.dimension];
                    for (g, xv) in row.iter_mut().zip(*x) {
                        *g += dpre * xv;
                    }
                }
            }
        }
    }

    fn apply_step(&mut self, grads: &Grads, lr: f64, l2: f64) {
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            *w -= lr * (g + l2 * *w);
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            *b -= lr * g;
        }
        if let Some(layer) = &mut self.hidden {
            for (w, g) in layer.weights.iter_mut().zip(&grads.hidden_weights) {
                *w -= lr * (g + l2 * *w);
            }
            for (b, g) in layer.biases.iter_mut().zip(&grads.hidden_biases) {
                *b -= lr * g;
            }
        }
    }
}

struct Grads {
    weights: Vec<f64>,
    biases: Vec<f64>,
    hidden_weights: Vec<f64>,
    hidden_biases: Vec<f64>,
}

impl Grads {
    fn zeroed_like(model: &SoftmaxClassifier) -> Self {
        let (hw, hb) = match &model.hidden {
            Some(layer) => (layer.weights.len(), layer.biases.len()),
            None => (0, 0),
        };
        Grads {
            weights: vec![0.0; model.weights.len()],
            biases: vec![0.0; model.biases.len()],
            hidden_weights: vec![0.0; hw],
            hidden_biases: vec![0.0; hb],
        }
    }

    fn zero(&mut self) {
        self.weights.fill(0.0);
        self.biases.fill(0.0);
        self.hidden_weights.fill(0.0);
        self.hidden_biases.fill(0.0);
    }
}

fn init_weights(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            if scale == 0.0 {
                0.0
            } else {
                rng.random_range(-scale..scale)
            }
        })
        .collect()
}

/// Trains a classifier with seeded mini-batch gradient descent and returns
/// the model plus a per-epoch loss trace (mean cross-entropy plus the L2
/// term, measured over the full training set after each epoch's updates).
pub fn train(
    pairs: &[(EmbeddingVector, String)],
    classes: &[String],
    cfg: &TrainConfig,
) -> Result<(SoftmaxClassifier, Vec<f64>), ClassifierError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    if classes.is_empty() {
        return Err(ClassifierError::InvalidConfig("no classes given".into()));
    }
    let unique: HashSet<&String> = classes.iter().collect();
    if unique.len() != classes.len() {
        return Err(ClassifierError::InvalidConfig(
            "classes must be unique".into(),
        ));
    }
    let dimension = pairs[0].0.dimension();
    let mut targets = Vec::with_capacity(pairs.len());
    for (x, label) in pairs {
        if x.dimension() != dimension {
            return Err(ClassifierError::DimensionMismatch {
                expected: dimension,
                got: x.dimension(),
            });
        }
        let idx = classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| ClassifierError::UnknownClass(label.clone()))?;
        targets.push(idx);
    }
    let xs: Vec<&[f64]> = pairs.iter().map(|(x, _)| x.values.as_slice()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = cfg.hidden_width.map(|width| HiddenLayer {
        width,
        weights: init_weights(&mut rng, width * dimension, cfg.init_scale),
        biases: vec![0.0; width],
    });
    let feat = cfg.hidden_width.unwrap_or(dimension);
    let mut model = SoftmaxClassifier {
        classes: classes.to_vec(),
        dimension,
        hidden,
        weights: init_weights(&mut rng, classes.len() * feat, cfg.init_scale),
        biases: vec![0.0; classes.len()],
    };

    let mut indices: Vec<usize> = (0..pairs.len()).collect();
    let mut grads = Grads::zeroed_like(&model);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks(cfg.batch_size) {
            let bx: Vec<&[f64]> = batch.iter().map(|&i| xs[i]).collect();
            let bt: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            grads.zero();
            model.accumulate_grads(&bx, &bt, &mut grads);
            model.apply_step(&grads, cfg.learning_rate, cfg.l2_penalty);
        }
        let loss = model.mean_ce(&xs, &targets) + model.l2_term(cfg.l2_penalty);
        if !loss.is_finite() {
            return Err(ClassifierError::NonFiniteLoss { epoch });
        }
        trace.push(loss);
    }
    Ok((model, trace))
}

/// Fraction of pairs whose top-k predictions intersect the true label set.
/// With multi-label ground truth a single correct guess counts as a hit.
pub fn evaluate_topk(
    model: &SoftmaxClassifier,
    pairs: &[(EmbeddingVector, std::collections::BTreeSet<String>)],
    k: usize,
) -> Result<f64, ClassifierError> {
    assert!(!pairs.is_empty(), "evaluation set must be nonempty");
    let mut hits = 0usize;
    for (i, (x, labels)) in pairs.iter().enumerate() {
        if labels.is_empty() {
            return Err(ClassifierError::EmptyLabelSet(format!("pair index {i}")));
        }
        let top = model.predict_topk(x, k)?;
        if top.iter().any(|(name, _)| labels.contains(name)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Compares the analytic gradient of the mean cross-entropy against central
/// finite differences, returning the worst relative difference over all
/// parameters. `epsilon` must be in (0, 1e-2].
pub fn gradient_check(
    model: &SoftmaxClassifier,
    pairs: &[(EmbeddingVector, String)],
    epsilon: f64,
) -> Result<f64, ClassifierError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(ClassifierError::InvalidEpsilon(epsilon));
    }
    assert!(!pairs.is_empty(), "gradient check needs at least one pair");
    let mut targets = Vec::new();
    for (x, label) in pairs {
        if x.dimension() != model.dimension {
            return Err(ClassifierError::DimensionMismatch {
                expected: model.dimension,
                got: x.dimension(),
            });
        }
        let idx = model
            .classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| ClassifierError::UnknownClass(label.clone()))?;
        targets.push(idx);
    }
    let xs: Vec<&[f64]> = pairs.iter().map(|(x, _)| x.values.as_slice()).collect();

    let mut grads = Grads::zeroed_like(model);
    model.accumulate_grads(&xs, &targets, &mut grads);
    let analytic: Vec<f64> = grads
        .hidden_weights
        .iter()
        .chain(&grads.hidden_biases)
        .chain(&grads.weights)
        .chain(&grads.biases)
        .copied()
        .collect();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + epsilon;
        let plus = probe.mean_ce(&xs, &targets);
        *probe.param_mut(i) = orig - epsilon;
        let minus = probe.mean_ce(&xs, &targets);
        *probe.param_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

impl SoftmaxClassifier {
    /// Flat parameter view in gradient order: hidden weights, hidden biases,
    /// output weights, output biases.
    fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        if let Some(layer) = &mut self.hidden {
            if i < layer.weights.len() {
                return &mut layer.weights[i];
            }
            i -= layer.weights.len();
            if i < layer.biases.len() {
                return &mut layer.biases[i];
            }
            i -= layer.biases.len();
        }
        if i < self.weights.len() {
            return &mut self.weights[i];
        }
        i -= self.weights.len();
        &mut self.biases[i]
    }
}

#[derive(Serialize, Deserialize)]
struct HiddenArtifact {
    width: usize,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ClassifierArtifact {
    classes: Vec<String>,
    dimension: usize,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden: Option<HiddenArtifact>,
}

impl SoftmaxClassifier {
    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let feat = self
            .hidden
            .as_ref()
            .map(|h| h.width)
            .unwrap_or(self.dimension);
        let artifact = ClassifierArtifact {
            classes: self.classes.clone(),
            dimension: self.dimension,
            weights: self.weights.chunks(feat).map(<[f64]>::to_vec).collect(),
            biases: self.biases.clone(),
            hidden: self.hidden.as_ref().map(|h| HiddenArtifact {
                width: h.width,
                weights: h.weights.chunks(self.dimension).map(<[f64]>::to_vec).collect(),
                biases: h.biases.clone(),
            }),
        };
        let file = File::create(path).map_err(|source| ClassifierError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::to_writer_pretty(BufWriter::new(file), &artifact)
            .map_err(|e| ClassifierError::Artifact(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let file = File::open(path).map_err(|source| ClassifierError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let artifact: ClassifierArtifact = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| ClassifierError::Artifact(e.to_string()))?;
        let n_classes = artifact.classes.len();
        if n_classes == 0 {
            return Err(ClassifierError::Artifact("no classes".into()));
        }
        let hidden = match artifact.hidden {
            Some(h) => {
                if h.weights.len() != h.width
                    || h.weights.iter().any(|row| row.len() != artifact.dimension)
                    || h.biases.len() != h.width
                {
                    return Err(ClassifierError::Artifact(
                        "hidden layer shape does not match width/dimension".into(),
                    ));
                }
                Some(HiddenLayer {
                    width: h.width,
                    weights: h.weights.into_iter().flatten().collect(),
                    biases: h.biases,
                })
            }
            None => None,
        };
        let feat = hidden.as_ref().map(|h| h.width).unwrap_or(artifact.dimension);
        if artifact.weights.len() != n_classes
            || artifact.weights.iter().any(|row| row.len() != feat)
            || artifact.biases.len() != n_classes
        {
            return Err(ClassifierError::Artifact(
                "weight shape does not match classes/features".into(),
            ));
        }
        let model = SoftmaxClassifier {
            classes: artifact.classes,
            dimension: artifact.dimension,
            hidden,
            weights: artifact.weights.into_iter().flatten().collect(),
            biases: artifact.biases,
        };
        let all_finite = model.weights.iter().chain(&model.biases).all(|v| v.is_finite())
            && model
                .hidden
                .as_ref()
                .map(|h| h.weights.iter().chain(&h.biases).all(|v| v.is_finite()))
                .unwrap_or(true);
        if !all_finite {
            return Err(ClassifierError::Artifact("non-finite parameter".into()));
        }
        Ok(model)
    }
}
