//! Deep-mean / deep-kernel Gaussian processes.
//!
//! A *prior particle* is one flat parameter vector `phi = (theta_mean,
//! theta_feat, log_sigma)` describing a full GP prior: a mean network
//! `m(x)`, a squared-exponential kernel `k(x, x') = exp(-0.5 * ||f(x) -
//! f(x')||^2)` over a learned feature map `f`, and a Gaussian observation
//! noise `sigma = exp(log_sigma)`. Conditioning that GP on a client's data
//! is exactly the client's Gibbs posterior at inverse temperature `beta =
//! m`, so the log marginal likelihood doubles as the log partition function
//! the PAC-Bayesian bounds consume.
//!
//! All factorizations go through Cholesky with an escalating jitter: start
//! at `1e-8`, multiply by 10 on failure, give up above `1e-2`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::nn::{self, FlatParams, NetSpec};
use crate::util::softmax_from_log;

/// First jitter added to the diagonal before any Cholesky attempt.
pub const DEFAULT_JITTER: f64 = 1e-8;
/// Largest jitter tried before declaring the matrix numerically singular.
pub const MAX_JITTER: f64 = 1e-2;
/// `log_sigma` is clamped to this window when evaluating the noise, with a
/// matching zero gradient outside. Invisible for any sane particle; keeps
/// heavily-noised DP runs finite instead of overflowing `exp`.
pub const LOG_SIGMA_LIMIT: f64 = 40.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Architecture of a GP prior particle: mean network, feature network, and
/// the implicit trailing `log_sigma` coordinate.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GpPriorSpec {
    pub mean_net: NetSpec,
    pub feature_net: NetSpec,
}

impl GpPriorSpec {
    pub fn new(mean_net: NetSpec, feature_net: NetSpec) -> Result<Self> {
        let spec = GpPriorSpec { mean_net, feature_net };
        spec.validate()?;
        Ok(spec)
    }

    /// Both networks share depth and width; the feature net maps into
    /// `feature_dim` dimensions, the mean net to a scalar.
    pub fn symmetric(input_dim: usize, hidden_layers: usize, hidden_width: usize, feature_dim: usize) -> Result<Self> {
        GpPriorSpec::new(
            NetSpec::new(input_dim, hidden_layers, hidden_width, 1),
            NetSpec::new(input_dim, hidden_layers, hidden_width, feature_dim),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.mean_net.validate()?;
        self.feature_net.validate()?;
        if self.mean_net.output_dim != 1 {
            return Err(Error::config("model.mean_net.output_dim", "mean network must output a scalar"));
        }
        if self.mean_net.input_dim != self.feature_net.input_dim {
            return Err(Error::config(
                "model",
                format!(
                    "mean net input dim {} != feature net input dim {}",
                    self.mean_net.input_dim, self.feature_net.input_dim
                ),
            ));
        }
        Ok(())
    }

    #[must_use]
    pub fn input_dim(&self) -> usize {
        self.mean_net.input_dim
    }

    #[must_use]
    pub fn feature_dim(&self) -> usize {
        self.feature_net.output_dim
    }

    /// Length of one particle: mean params + feature params + log_sigma.
    #[must_use]
    pub fn particle_dim(&self) -> usize {
        self.mean_net.parameter_count() + self.feature_net.parameter_count() + 1
    }

    /// Split a particle into (mean params, feature params, log_sigma).
    pub fn split<'a>(&self, particle: &'a [f64]) -> Result<(&'a [f64], &'a [f64], f64)> {
        if particle.len() != self.particle_dim() {
            return Err(Error::shape(
                "prior particle",
                format!("expected dim {}, got {}", self.particle_dim(), particle.len()),
            ));
        }
        let pm = self.mean_net.parameter_count();
        let pf = self.feature_net.parameter_count();
        Ok((&particle[..pm], &particle[pm..pm + pf], particle[pm + pf]))
    }

    /// Observation noise std `exp(log_sigma)` with the clamp guard applied.
    pub fn noise_std(&self, particle: &[f64]) -> Result<f64> {
        let (_, _, ls) = self.split(particle)?;
        Ok(ls.clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT).exp())
    }

    /// Stable 64-bit fingerprint of the architecture, used to detect
    /// particle files written against a different spec.
    #[must_use]
    pub fn fingerprint(&self) -> u64 {
        let canonical = format!(
            "mean:{:?}/{:?}/{:?}|feat:{:?}",
            self.mean_net.layer_dims(),
            self.mean_net.hidden_activation,
            self.mean_net.output_activation,
            (
                self.feature_net.layer_dims(),
                self.feature_net.hidden_activation,
                self.feature_net.output_activation,
            ),
        );
        fnv1a64(canonical.as_bytes())
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// One prediction of a k-component GP mixture at a single input.
#[derive(Clone, Debug, PartialEq)]
pub struct MixturePrediction {
    /// Posterior component weights, nonnegative and summing to 1.
    pub weights: Vec<f64>,
    /// Per-component predictive means.
    pub means: Vec<f64>,
    /// Per-component predictive variances, each at least `sigma_k^2`
    /// (observation noise included).
    pub variances: Vec<f64>,
}

impl MixturePrediction {
    /// Mean of the mixture, `sum_k w_k mu_k`.
    #[must_use]
    pub fn mixture_mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }
}

/// SE kernel over the learned feature map of one particle.
pub fn se_deep_kernel(spec: &GpPriorSpec, particle: &[f64], x1: &[f64], x2: &[f64]) -> Result<f64> {
    let (_, feat, _) = spec.split(particle)?;
    let z1 = nn::forward(&spec.feature_net, feat, x1)?;
    let z2 = nn::forward(&spec.feature_net, feat, x2)?;
    let sq: f64 = z1.iter().zip(&z2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-0.5 * sq).exp())
}

/// Cholesky with escalating diagonal jitter. Returns the factorization and
/// the jitter that succeeded.
pub(crate) fn cholesky_with_jitter(base: &DMatrix<f64>, start: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = base.nrows();
    let mut jitter = start;
    while jitter <= MAX_JITTER {
        let mut c = base.clone();
        for i in 0..n {
            c[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(c) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::numerical(format!(
        "Cholesky failed after jitter escalation up to {MAX_JITTER:e}"
    )))
}

/// A GP prior particle factored against one dataset.
pub(crate) struct FittedGp {
    pub embeddings: Vec<Vec<f64>>,
    pub chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    pub sigma2: f64,
    pub log_sigma_in_window: bool,
    pub lml: f64,
}

fn validate_xy(spec: &GpPriorSpec, x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "dataset",
            format!("{} inputs but {} targets", x.len(), y.len()),
        ));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != spec.input_dim() {
            return Err(Error::shape(
                "dataset",
                format!("input {} has dim {}, expected {}", i, row.len(), spec.input_dim()),
            ));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite feature in input row {i}")));
        }
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(format!("non-finite target at row {i}")));
    }
    Ok(())
}

pub(crate) fn fit(
    spec: &GpPriorSpec,
    particle: &[f64],
    x: &[Vec<f64>],
    y: &[f64],
    base_jitter: f64,
) -> Result<FittedGp> {
    validate_xy(spec, x, y)?;
    let m = x.len();
    if m == 0 {
        return Err(Error::shape("dataset", "log marginal likelihood needs at least one sample"));
    }
    let (mean_p, feat_p, log_sigma) = spec.split(particle)?;
    let ls_clamped = log_sigma.clamp(-LOG_SIGMA_LIMIT, LOG_SIGMA_LIMIT);
    let sigma2 = (2.0 * ls_clamped).exp();

    let mut embeddings = Vec::with_capacity(m);
    let mut residual = DVector::zeros(m);
    for (i, row) in x.iter().enumerate() {
        embeddings.push(nn::forward(&spec.feature_net, feat_p, row)?);
        let mu = nn::forward(&spec.mean_net, mean_p, row)?[0];
        residual[i] = y[i] - mu;
    }

    let mut c = DMatrix::zeros(m, m);
    for i in 0..m {
        c[(i, i)] = 1.0 + sigma2;
        for j in 0..i {
            let sq: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let k = (-0.5 * sq).exp();
            c[(i, j)] = k;
            c[(j, i)] = k;
        }
    }

    let (chol, _) = cholesky_with_jitter(&c, base_jitter)?;
    let alpha = chol.solve(&residual);
    let quad: f64 = residual.dot(&alpha);
    let log_det_half: f64 = (0..m).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let lml = -0.5 * quad - log_det_half - 0.5 * m as f64 * LN_2PI;

    Ok(FittedGp {
        embeddings,
        chol,
        alpha,
        sigma2,
        log_sigma_in_window: log_sigma.abs() < LOG_SIGMA_LIMIT,
        lml,
    })
}

/// Log marginal likelihood `ln N(y; m(X), K + sigma^2 I)` of one particle
/// on one dataset. This equals the client's log partition function at
/// `beta = m`.
pub fn log_marginal_likelihood(spec: &GpPriorSpec, particle: &[f64], x: &[Vec<f64>], y: &[f64]) -> Result<f64> {
    Ok(fit(spec, particle, x, y, DEFAULT_JITTER)?.lml)
}

/// Gradient of the log marginal likelihood with respect to the full
/// particle (mean params, feature params, log_sigma).
pub fn lml_gradient(spec: &GpPriorSpec, particle: &[f64], x: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    Ok(lml_value_and_gradient(spec, particle, x, y)?.1)
}

/// LML and its gradient in one pass (the value is free once the
/// factorization exists).
pub fn lml_value_and_gradient(
    spec: &GpPriorSpec,
    particle: &[f64],
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<(f64, Vec<f64>)> {
    lml_value_and_gradient_with_jitter(spec, particle, x, y, DEFAULT_JITTER)
}

pub(crate) fn lml_value_and_gradient_with_jitter(
    spec: &GpPriorSpec,
    particle: &[f64],
    x: &[Vec<f64>],
    y: &[f64],
    base_jitter: f64,
) -> Result<(f64, Vec<f64>)> {
    let fitted = fit(spec, particle, x, y, base_jitter)?;
    let m = x.len();
    let (mean_p, feat_p, _) = spec.split(particle)?;

    // dLML/dC = 0.5 (alpha alpha^T - C^{-1}) =: W, where C = K + sigma^2 I.
    let c_inv = fitted.chol.inverse();
    let alpha = &fitted.alpha;
    let mut w = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            w[(i, j)] = 0.5 * (alpha[i] * alpha[j] - c_inv[(i, j)]);
        }
    }

    let pm = spec.mean_net.parameter_count();
    let pf = spec.feature_net.parameter_count();
    let mut grad = vec![0.0; pm + pf + 1];

    // Mean network: dLML/dm(x_i) = -dLML/dr_i = alpha_i.
    for (i, row) in x.iter().enumerate() {
        let (gp, _) = nn::backward(&spec.mean_net, mean_p, row, &[alpha[i]])?;
        for (g, d) in grad[..pm].iter_mut().zip(&gp) {
            *g += d;
        }
    }

    // Feature network: K_ij = exp(-0.5 ||z_i - z_j||^2) gives
    // dLML/dz_i = sum_j 2 W_ij K_ij (z_j - z_i).
    let d_f = spec.feature_dim();
    for (i, row) in x.iter().enumerate() {
        let mut dz = vec![0.0; d_f];
        for j in 0..m {
            if i == j {
                continue;
            }
            let sq: f64 = fitted.embeddings[i]
                .iter()
                .zip(&fitted.embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let k = (-0.5 * sq).exp();
            let coeff = 2.0 * w[(i, j)] * k;
            for (d, (zj, zi)) in dz
                .iter_mut()
                .zip(fitted.embeddings[j].iter().zip(fitted.embeddings[i].iter()))
            {
                *d += coeff * (zj - zi);
            }
        }
        let (gf, _) = nn::backward(&spec.feature_net, feat_p, row, &dz)?;
        for (g, d) in grad[pm..pm + pf].iter_mut().zip(&gf) {
            *g += d;
        }
    }

    // Noise: dLML/dsigma2 = tr(W), chained through sigma2 = exp(2 log_sigma).
    if fitted.log_sigma_in_window {
        let trace_w: f64 = (0..m).map(|i| w[(i, i)]).sum();
        grad[pm + pf] = trace_w * 2.0 * fitted.sigma2;
    }

    Ok((fitted.lml, grad))
}

/// Posterior mixture over `k` particles conditioned on one dataset, with
/// the per-particle factorizations cached so repeated predictions are
/// cheap. An empty dataset yields the prior predictive with uniform
/// weights.
pub struct MixturePredictor {
    spec: GpPriorSpec,
    particles: Vec<FlatParams>,
    x: Vec<Vec<f64>>,
    fits: Vec<Option<FittedGp>>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl MixturePredictor {
    pub fn new(spec: &GpPriorSpec, particles: &[FlatParams], x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::shape("mixture", "need at least one particle"));
        }
        let mut fits = Vec::with_capacity(particles.len());
        let mut log_weights = Vec::with_capacity(particles.len());
        if x.is_empty() {
            for p in particles {
                spec.split(p)?; // dimension check even without data
                fits.push(None);
                log_weights.push(0.0);
            }
        } else {
            for (k, p) in particles.iter().enumerate() {
                let fitted = fit(spec, p, x, y, DEFAULT_JITTER).map_err(|e| e.with_particle(k))?;
                log_weights.push(fitted.lml);
                fits.push(Some(fitted));
            }
        }
        let weights = softmax_from_log(&log_weights);
        Ok(MixturePredictor {
            spec: spec.clone(),
            particles: particles.to_vec(),
            x: x.to_vec(),
            fits,
            weights,
            log_weights,
        })
    }

    #[must_use]
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Per-component log marginal likelihoods (zero for an empty
    /// conditioning set).
    #[must_use]
    pub fn log_weights_unnormalized(&self) -> &[f64] {
        &self.log_weights
    }

    #[must_use]
    pub fn num_components(&self) -> usize {
        self.particles.len()
    }

    pub fn predict(&self, x_star: &[f64]) -> Result<MixturePrediction> {
        let mut means = Vec::with_capacity(self.particles.len());
        let mut variances = Vec::with_capacity(self.particles.len());
        for (k, p) in self.particles.iter().enumerate() {
            let (mean_p, feat_p, _) = self.spec.split(p)?;
            let mu0 = nn::forward(&self.spec.mean_net, mean_p, x_star)?[0];
            match &self.fits[k] {
                None => {
                    let sigma2 = self.spec.noise_std(p)?.powi(2);
                    means.push(mu0);
                    variances.push(1.0 + sigma2);
                }
                Some(fitted) => {
                    let z_star = nn::forward(&self.spec.feature_net, feat_p, x_star)?;
                    let m = self.x.len();
                    let mut k_star = DVector::zeros(m);
                    for i in 0..m {
                        let sq: f64 = z_star
                            .iter()
                            .zip(&fitted.embeddings[i])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        k_star[i] = (-0.5 * sq).exp();
                    }
                    let mu = mu0 + k_star.dot(&fitted.alpha);
                    let w = fitted.chol.solve(&k_star);
                    // Latent variance clamped at zero: C >= K makes it
                    // nonnegative in exact arithmetic.
                    let var_f = (1.0 - k_star.dot(&w)).max(0.0);
                    means.push(mu);
                    variances.push(var_f + fitted.sigma2);
                }
            }
        }
        Ok(MixturePrediction { weights: self.weights.clone(), means, variances })
    }
}

/// One-shot mixture prediction at a single input.
pub fn predictive_mixture(
    spec: &GpPriorSpec,
    particles: &[FlatParams],
    x: &[Vec<f64>],
    y: &[f64],
    x_star: &[f64],
) -> Result<MixturePrediction> {
    MixturePredictor::new(spec, particles, x, y)?.predict(x_star)
}
