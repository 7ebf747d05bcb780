//! Variational autoencoder for compressing hybrid vectors, written out by
//! hand (forward and backward) so the training path has no framework
//! dependency and stays bit-reproducible.
//!
//! Layout: input -> act(enc) -> (mu, logvar) -> z -> act(dec) -> output,
//! with the reparameterization z = mu + exp(logvar/2) * eps. Setting
//! `kl_weight = 0` and `sample_latent = false` turns the same network into a
//! plain bottleneck autoencoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PshtiError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VaeConfig {
    pub hidden_dim: usize,
    pub latent_dim: usize,
    /// Weight of the KL term; 0 disables it (plain autoencoder).
    pub kl_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub activation: Activation,
    /// Draw latent noise during training; false makes z = mu everywhere.
    pub sample_latent: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            hidden_dim: 256,
            latent_dim: 32,
            kl_weight: 1.0,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 64,
            seed: 42,
            activation: Activation::Tanh,
            sample_latent: true,
        }
    }
}

impl VaeConfig {
    fn validate(&self) -> Result<(), PshtiError> {
        if self.hidden_dim == 0 || self.latent_dim == 0 {
            return Err(PshtiError::InvalidConfig(
                "hidden_dim and latent_dim must be >= 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(PshtiError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PshtiError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(PshtiError::InvalidConfig(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        if !self.kl_weight.is_finite() || self.kl_weight < 0.0 {
            return Err(PshtiError::InvalidConfig(
                "kl_weight must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder/decoder parameters. All matrices are row-major (rows x cols named
/// in the field comments).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub activation: Activation,
    pub kl_weight: f64,
    /// hidden x input
    enc_w: Vec<f64>,
    enc_b: Vec<f64>,
    /// latent x hidden
    mu_w: Vec<f64>,
    mu_b: Vec<f64>,
    /// latent x hidden
    lv_w: Vec<f64>,
    lv_b: Vec<f64>,
    /// hidden x latent
    dec_w: Vec<f64>,
    dec_b: Vec<f64>,
    /// input x hidden
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

/// KL(q(z|x) || N(0, I)) for a diagonal Gaussian; zero exactly at
/// mu = 0, logvar = 0 and positive elsewhere.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5
        * mu.iter()
            .zip(logvar)
            .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
            .sum::<f64>()
}

struct Forward {
    h1: Vec<f64>,
    mu: Vec<f64>,
    logvar: Vec<f64>,
    z: Vec<f64>,
    h2: Vec<f64>,
    xhat: Vec<f64>,
}

fn matvec_into(w: &[f64], rows: usize, cols: usize, x: &[f64], b: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out.push(row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b[r]);
    }
}

impl AutoencoderModel {
    fn new_seeded(input_dim: usize, cfg: &VaeConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layer = |rows: usize, cols: usize| -> Vec<f64> {
            let scale = 1.0 / (cols as f64).sqrt();
            (0..rows * cols)
                .map(|_| rng.random_range(-scale..scale))
                .collect()
        };
        AutoencoderModel {
            input_dim,
            hidden_dim: cfg.hidden_dim,
            latent_dim: cfg.latent_dim,
            activation: cfg.activation,
            kl_weight: cfg.kl_weight,
            enc_w: layer(cfg.hidden_dim, input_dim),
            enc_b: vec![0.0; cfg.hidden_dim],
            mu_w: layer(cfg.latent_dim, cfg.hidden_dim),
            mu_b: vec![0.0; cfg.latent_dim],
            lv_w: layer(cfg.latent_dim, cfg.hidden_dim),
            lv_b: vec![0.0; cfg.latent_dim],
            dec_w: layer(cfg.hidden_dim, cfg.latent_dim),
            dec_b: vec![0.0; cfg.hidden_dim],
            out_w: layer(input_dim, cfg.hidden_dim),
            out_b: vec![0.0; input_dim],
        }
    }

    /// Forward pass with explicit latent noise (`eps` of latent length);
    /// pass zeros for the deterministic z = mu path.
    fn forward(&self, x: &[f64], eps: &[f64]) -> Forward {
        let mut h1 = Vec::new();
        matvec_into(&self.enc_w, self.hidden_dim, self.input_dim, x, &self.enc_b, &mut h1);
        for v in h1.iter_mut() {
            *v = self.activation.apply(*v);
        }
        let mut mu = Vec::new();
        matvec_into(&self.mu_w, self.latent_dim, self.hidden_dim, &h1, &self.mu_b, &mut mu);
        let mut logvar = Vec::new();
        matvec_into(&self.lv_w, self.latent_dim, self.hidden_dim, &h1, &self.lv_b, &mut logvar);
        let z: Vec<f64> = mu
            .iter()
            .zip(&logvar)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let mut h2 = Vec::new();
        matvec_into(&self.dec_w, self.hidden_dim, self.latent_dim, &z, &self.dec_b, &mut h2);
        for v in h2.iter_mut() {
            *v = self.activation.apply(*v);
        }
        let mut xhat = Vec::new();
        matvec_into(&self.out_w, self.input_dim, self.hidden_dim, &h2, &self.out_b, &mut xhat);
        Forward {
            h1,
            mu,
            logvar,
            z,
            h2,
            xhat,
        }
    }

    fn example_loss(&self, x: &[f64], eps: &[f64]) -> f64 {
        let fwd = self.forward(x, eps);
        let recon: f64 = fwd
            .xhat
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / self.input_dim as f64;
        recon + self.kl_weight * kl_divergence(&fwd.mu, &fwd.logvar)
    }

    /// Mean per-example loss with z = mu (evaluation mode).
    pub fn eval_loss(&self, data: &[Vec<f64>]) -> f64 {
        let zeros = vec![0.0; self.latent_dim];
        data.iter().map(|x| self.example_loss(x, &zeros)).sum::<f64>() / data.len() as f64
    }

    /// Deterministic latent code: the posterior mean mu(x).
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>, PshtiError> {
        if x.len() != self.input_dim {
            return Err(PshtiError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let zeros = vec![0.0; self.latent_dim];
        Ok(self.forward(x, &zeros).mu)
    }

    /// Reconstruction of one input through z = mu.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>, PshtiError> {
        if x.len() != self.input_dim {
            return Err(PshtiError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let zeros = vec![0.0; self.latent_dim];
        Ok(self.forward(x, &zeros).xhat)
    }

    /// Mean squared reconstruction error over a dataset, eval mode.
    pub fn reconstruction_mse(&self, data: &[Vec<f64>]) -> f64 {
        let zeros = vec![0.0; self.latent_dim];
        data.iter()
            .map(|x| {
                let fwd = self.forward(x, &zeros);
                fwd.xhat
                    .iter()
                    .zip(x)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / self.input_dim as f64
            })
            .sum::<f64>()
            / data.len() as f64
    }

    /// Backprop for one example; adds `scale` times the gradient into `g`.
    #[allow(clippy::needless_range_loop)]
    fn accumulate_grads(&self, x: &[f64], eps: &[f64], scale: f64, g: &mut VaeGrads) {
        let fwd = self.forward(x, eps);
        let i_dim = self.input_dim;
        let h_dim = self.hidden_dim;
        let l_dim = self.latent_dim;

        // d recon / d xhat
        let dxhat: Vec<f64> = fwd
            .xhat
            .iter()
            .zip(x)
            .map(|(a, b)| scale * 2.0 * (a - b) / i_dim as f64)
            .collect();
        for j in 0..i_dim {
            g.out_b[j] += dxhat[j];
            let row = &mut g.out_w[j * h_dim..(j + 1) * h_dim];
            for (gv, h) in row.iter_mut().zip(&fwd.h2) {
                *gv += dxhat[j] * h;
            }
        }
        let mut dh2 = vec![0.0; h_dim];
        for j in 0..i_dim {
            let row = &self.out_w[j * h_dim..(j + 1) * h_dim];
            for (d, w) in dh2.iter_mut().zip(row) {
                *d += dxhat[j] * w;
            }
        }
        let dpre2: Vec<f64> = dh2
            .iter()
            .zip(&fwd.h2)
            .map(|(d, h)| d * self.activation.derivative_from_output(*h))
            .collect();
        for h in 0..h_dim {
            g.dec_b[h] += dpre2[h];
            let row = &mut g.dec_w[h * l_dim..(h + 1) * l_dim];
            for (gv, z) in row.iter_mut().zip(&fwd.z) {
                *gv += dpre2[h] * z;
            }
        }
        let mut dz = vec![0.0; l_dim];
        for h in 0..h_dim {
            let row = &self.dec_w[h * l_dim..(h + 1) * l_dim];
            for (d, w) in dz.iter_mut().zip(row) {
                *d += dpre2[h] * w;
            }
        }

        // Latent gradients: decoder path plus the KL term.
        // d KL / d mu = mu; d KL / d logvar = (exp(logvar) - 1) / 2.
        let kw = self.kl_weight;
        let dmu: Vec<f64> = dz
            .iter()
            .zip(&fwd.mu)
            .map(|(d, m)| d + scale * kw * m)
            .collect();
        let dlv: Vec<f64> = dz
            .iter()
            .zip(&fwd.logvar)
            .zip(eps)
            .map(|((d, lv), e)| {
                d * e * 0.5 * (0.5 * lv).exp() + scale * kw * 0.5 * (lv.exp() - 1.0)
            })
            .collect();

        for l in 0..l_dim {
            g.mu_b[l] += dmu[l];
            g.lv_b[l] += dlv[l];
            let mu_row = &mut g.mu_w[l * h_dim..(l + 1) * h_dim];
            let lv_row = &mut g.lv_w[l * h_dim..(l + 1) * h_dim];
            for h in 0..h_dim {
                mu_row[h] += dmu[l] * fwd.h1[h];
                lv_row[h] += dlv[l] * fwd.h1[h];
            }
        }
        let mut dh1 = vec![0.0; h_dim];
        for l in 0..l_dim {
            let mu_row = &self.mu_w[l * h_dim..(l + 1) * h_dim];
            let lv_row = &self.lv_w[l * h_dim..(l + 1) * h_dim];
            for h in 0..h_dim {
                dh1[h] += dmu[l] * mu_row[h] + dlv[l] * lv_row[h];
            }
        }
        let dpre1: Vec<f64> = dh1
            .iter()
            .zip(&fwd.h1)
            .map(|(d, h)| d * self.activation.derivative_from_output(*h))
            .collect();
        for h in 0..h_dim {
            g.enc_b[h] += dpre1[h];
            let row = &mut g.enc_w[h * i_dim..(h + 1) * i_dim];
            for (gv, xv) in row.iter_mut().zip(x) {
                *gv += dpre1[h] * xv;
            }
        }
    }

    fn apply_step(&mut self, g: &VaeGrads, lr: f64) {
        let pairs: [(&mut Vec<f64>, &Vec<f64>); 10] = [
            (&mut self.enc_w, &g.enc_w),
            (&mut self.enc_b, &g.enc_b),
            (&mut self.mu_w, &g.mu_w),
            (&mut self.mu_b, &g.mu_b),
            (&mut self.lv_w, &g.lv_w),
            (&mut self.lv_b, &g.lv_b),
            (&mut self.dec_w, &g.dec_w),
            (&mut self.dec_b, &g.dec_b),
            (&mut self.out_w, &g.out_w),
            (&mut self.out_b, &g.out_b),
        ];
        for (param, grad) in pairs {
            for (p, gv) in param.iter_mut().zip(grad) {
                *p -= lr * gv;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.enc_w.len()
            + self.enc_b.len()
            + self.mu_w.len()
            + self.mu_b.len()
            + self.lv_w.len()
            + self.lv_b.len()
            + self.dec_w.len()
            + self.dec_b.len()
            + self.out_w.len()
            + self.out_b.len()
    }

    /// Flat parameter access in gradient order.
    fn param_mut(&mut self, index: usize) -> &mut f64 {
        let mut i = index;
        for part in [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.lv_w,
            &mut self.lv_b,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
        ] {
            if i < part.len() {
                return &mut part[i];
            }
            i -= part.len();
        }
        panic!("parameter index {index} out of range");
    }
}

struct VaeGrads {
    enc_w: Vec<f64>,
    enc_b: Vec<f64>,
    mu_w: Vec<f64>,
    mu_b: Vec<f64>,
    lv_w: Vec<f64>,
    lv_b: Vec<f64>,
    dec_w: Vec<f64>,
    dec_b: Vec<f64>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl VaeGrads {
    fn zeroed_like(m: &AutoencoderModel) -> Self {
        VaeGrads {
            enc_w: vec![0.0; m.enc_w.len()],
            enc_b: vec![0.0; m.enc_b.len()],
            mu_w: vec![0.0; m.mu_w.len()],
            mu_b: vec![0.0; m.mu_b.len()],
            lv_w: vec![0.0; m.lv_w.len()],
            lv_b: vec![0.0; m.lv_b.len()],
            dec_w: vec![0.0; m.dec_w.len()],
            dec_b: vec![0.0; m.dec_b.len()],
            out_w: vec![0.0; m.out_w.len()],
            out_b: vec![0.0; m.out_b.len()],
        }
    }

    fn zero(&mut self) {
        for part in [
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.lv_w,
            &mut self.lv_b,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
        ] {
            part.fill(0.0);
        }
    }

    fn flat(&self) -> Vec<f64> {
        self.enc_w
            .iter()
            .chain(&self.enc_b)
            .chain(&self.mu_w)
            .chain(&self.mu_b)
            .chain(&self.lv_w)
            .chain(&self.lv_b)
            .chain(&self.dec_w)
            .chain(&self.dec_b)
            .chain(&self.out_w)
            .chain(&self.out_b)
            .copied()
            .collect()
    }
}

/// Trains on the given vectors with seeded mini-batch SGD. Returns the model
/// and a per-epoch loss trace; the trace is measured in evaluation mode
/// (z = mu) over the whole dataset after each epoch, so it is smooth even
/// when latent sampling is on.
pub fn train_autoencoder(
    data: &[Vec<f64>],
    cfg: &VaeConfig,
) -> Result<(AutoencoderModel, Vec<f64>), PshtiError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PshtiError::InvalidConfig("no training vectors".into()));
    }
    let input_dim = data[0].len();
    if input_dim == 0 {
        return Err(PshtiError::InvalidConfig("zero-width vectors".into()));
    }
    for (i, x) in data.iter().enumerate() {
        if x.len() != input_dim {
            return Err(PshtiError::DimensionMismatch {
                expected: input_dim,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(PshtiError::InvalidConfig(format!(
                "non-finite value in training vector {i}"
            )));
        }
    }

    let mut model = AutoencoderModel::new_seeded(input_dim, cfg);
    // Separate stream for shuffling and noise, so changing epochs does not
    // reshuffle the init.
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, "vae-train"));
    let mut grads = VaeGrads::zeroed_like(&model);
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let zeros = vec![0.0; cfg.latent_dim];
    let mut eps = vec![0.0; cfg.latent_dim];
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks(cfg.batch_size) {
            grads.zero();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let eps_slice: &[f64] = if cfg.sample_latent {
                    for e in eps.iter_mut() {
                        *e = rng.sample(StandardNormal);
                    }
                    &eps
                } else {
                    &zeros
                };
                model.accumulate_grads(&data[i], eps_slice, scale, &mut grads);
            }
            model.apply_step(&grads, cfg.learning_rate);
        }
        let loss = model.eval_loss(data);
        if !loss.is_finite() {
            return Err(PshtiError::NonFiniteLoss { epoch });
        }
        trace.push(loss);
    }
    Ok((model, trace))
}

/// Central finite-difference check of the training gradient, returning the
/// worst relative difference over all parameters. Uses one fixed latent
/// noise draw shared by the analytic and numeric sides so the sampled path
/// is exercised deterministically. `epsilon` must be in (0, 1e-2].
pub fn gradient_check(
    model: &AutoencoderModel,
    batch: &[Vec<f64>],
    epsilon: f64,
) -> Result<f64, PshtiError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(PshtiError::InvalidEpsilon(epsilon));
    }
    assert!(!batch.is_empty(), "gradient check needs at least one vector");
    for x in batch {
        if x.len() != model.input_dim {
            return Err(PshtiError::DimensionMismatch {
                expected: model.input_dim,
                got: x.len(),
            });
        }
    }
    let mut noise_rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let noise: Vec<Vec<f64>> = batch
        .iter()
        .map(|_| {
            (0..model.latent_dim)
                .map(|_| noise_rng.sample(StandardNormal))
                .collect()
        })
        .collect();

    let loss_under = |m: &AutoencoderModel| -> f64 {
        batch
            .iter()
            .zip(&noise)
            .map(|(x, eps)| m.example_loss(x, eps))
            .sum::<f64>()
            / batch.len() as f64
    };

    let mut grads = VaeGrads::zeroed_like(model);
    let scale = 1.0 / batch.len() as f64;
    for (x, eps) in batch.iter().zip(&noise) {
        model.accumulate_grads(x, eps, scale, &mut grads);
    }
    let analytic = grads.flat();

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate().take(probe.param_count()) {
        let orig = *probe.param_mut(i);
        *probe.param_mut(i) = orig + epsilon;
        let plus = loss_under(&probe);
        *probe.param_mut(i) = orig - epsilon;
        let minus = loss_under(&probe);
        *probe.param_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Deterministic pseudo-random data spread across the unit cube-ish.
    fn toy_data(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    /// Exactly rank-2 data in a higher-dimensional space.
    fn rank2_data(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis_a: Vec<f64> = (0..dim).map(|i| ((i + 1) as f64 * 0.37).sin()).collect();
        let basis_b: Vec<f64> = (0..dim).map(|i| ((i + 1) as f64 * 0.91).cos()).collect();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random_range(-1.0..1.0);
                let v: f64 = rng.random_range(-1.0..1.0);
                basis_a.iter().zip(&basis_b).map(|(a, b)| u * a + v * b).collect()
            })
            .collect()
    }

    fn small_cfg() -> VaeConfig {
        VaeConfig {
            hidden_dim: 16,
            latent_dim: 4,
            learning_rate: 0.01,
            epochs: 30,
            batch_size: 64,
            seed: 9,
            ..VaeConfig::default()
        }
    }

    #[test]
    fn kl_is_zero_at_standard_normal_and_positive_elsewhere() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        // Hand check: mu = 1, logvar = 0 gives KL = 0.5.
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        // Hand check: mu = 0, logvar = ln(2): -0.5 (1 + ln 2 - 2) = (1 - ln 2)/2.
        let expected = 0.5 * (1.0 - 2.0f64.ln());
        assert!((kl_divergence(&[0.0], &[2.0f64.ln()]) - expected).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            assert!(kl_divergence(&mu, &lv) >= -1e-12);
        }
    }

    #[test]
    fn gradient_check_vae_path() {
        let data = toy_data(6, 5, 3);
        let cfg = VaeConfig {
            hidden_dim: 7,
            latent_dim: 3,
            epochs: 2,
            seed: 5,
            ..VaeConfig::default()
        };
        let (model, _) = train_autoencoder(&data, &cfg).unwrap();
        let worst = gradient_check(&model, &data[..4], 1e-5).unwrap();
        assert!(worst < 1e-4, "gradient check {worst}");
    }

    #[test]
    fn gradient_check_identity_plain_ae_path() {
        let data = toy_data(6, 5, 4);
        let cfg = VaeConfig {
            hidden_dim: 6,
            latent_dim: 2,
            kl_weight: 0.0,
            activation: Activation::Identity,
            sample_latent: false,
            epochs: 2,
            seed: 6,
            ..VaeConfig::default()
        };
        let (model, _) = train_autoencoder(&data, &cfg).unwrap();
        let worst = gradient_check(&model, &data[..4], 1e-5).unwrap();
        assert!(worst < 1e-4, "gradient check {worst}");
    }

    #[test]
    fn gradient_check_rejects_bad_epsilon() {
        let data = toy_data(3, 4, 1);
        let (model, _) = train_autoencoder(&data, &small_cfg()).unwrap();
        assert!(matches!(
            gradient_check(&model, &data, 0.5),
            Err(PshtiError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            gradient_check(&model, &data, 0.0),
            Err(PshtiError::InvalidEpsilon(_))
        ));
    }

    #[test]
    fn linear_autoencoder_recovers_rank2_data() {
        let data = rank2_data(60, 6, 11);
        let cfg = VaeConfig {
            hidden_dim: 6,
            latent_dim: 2,
            kl_weight: 0.0,
            activation: Activation::Identity,
            sample_latent: false,
            learning_rate: 0.05,
            epochs: 800,
            batch_size: 60,
            seed: 2,
        };
        let (model, trace) = train_autoencoder(&data, &cfg).unwrap();
        let mse = model.reconstruction_mse(&data);
        assert!(mse < 1e-3, "rank-2 reconstruction MSE {mse}");
        assert!(trace.last().unwrap() < &1e-3);
    }

    #[test]
    fn loss_trace_has_epoch_length_and_trends_down() {
        let data = toy_data(30, 8, 7);
        let cfg = VaeConfig {
            hidden_dim: 16,
            latent_dim: 4,
            kl_weight: 0.05,
            learning_rate: 0.02,
            epochs: 60,
            batch_size: 30,
            seed: 13,
            ..VaeConfig::default()
        };
        let (_, trace) = train_autoencoder(&data, &cfg).unwrap();
        assert_eq!(trace.len(), 60);
        assert!(
            trace.last().unwrap() < trace.first().unwrap(),
            "no improvement: {} -> {}",
            trace.first().unwrap(),
            trace.last().unwrap()
        );
        // Full-batch updates keep the eval-mode trace within a small
        // tolerance of monotone after the early epochs.
        for w in trace[trace.len() / 5..].windows(2) {
            assert!(w[1] <= w[0] * 1.01 + 1e-9, "jump {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = toy_data(10, 6, 2);
        let (m1, t1) = train_autoencoder(&data, &small_cfg()).unwrap();
        let (m2, t2) = train_autoencoder(&data, &small_cfg()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        let other = VaeConfig {
            seed: 10,
            ..small_cfg()
        };
        let (m3, _) = train_autoencoder(&data, &other).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn encode_is_deterministic_and_latent_width() {
        let data = toy_data(10, 6, 8);
        let (model, _) = train_autoencoder(&data, &small_cfg()).unwrap();
        let z1 = model.encode(&data[0]).unwrap();
        let z2 = model.encode(&data[0]).unwrap();
        assert_eq!(z1, z2);
        assert_eq!(z1.len(), 4);
        assert!(matches!(
            model.encode(&[0.0; 3]),
            Err(PshtiError::DimensionMismatch { expected: 6, got: 3 })
        ));
    }

    #[test]
    fn train_rejects_bad_inputs() {
        assert!(matches!(
            train_autoencoder(&[], &small_cfg()),
            Err(PshtiError::InvalidConfig(_))
        ));
        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(
            train_autoencoder(&ragged, &small_cfg()),
            Err(PshtiError::DimensionMismatch { .. })
        ));
        let cfg = VaeConfig {
            epochs: 0,
            ..small_cfg()
        };
        assert!(matches!(
            train_autoencoder(&toy_data(4, 3, 1), &cfg),
            Err(PshtiError::InvalidConfig(_))
        ));
    }

    #[test]
    fn kl_weight_zero_matches_plain_reconstruction_objective() {
        // With kl_weight = 0 and no sampling, the eval loss is exactly the
        // reconstruction MSE.
        let data = toy_data(12, 5, 3);
        let cfg = VaeConfig {
            kl_weight: 0.0,
            sample_latent: false,
            epochs: 20,
            hidden_dim: 10,
            latent_dim: 3,
            learning_rate: 0.02,
            batch_size: 12,
            seed: 4,
            activation: Activation::Tanh,
        };
        let (model, trace) = train_autoencoder(&data, &cfg).unwrap();
        let mse = model.reconstruction_mse(&data);
        assert!((trace.last().unwrap() - mse).abs() < 1e-12);
    }
}
