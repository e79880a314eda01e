//! Stein variational gradient descent over prior particles.
//!
//! The hyper-posterior is represented by `k` particles transported along
//! the Stein direction: for each particle `phi_kappa`,
//!
//! ```text
//! phi_kappa += (eta / k) * sum_l [ K[l,kappa] * score(phi_l) + grad_{phi_l} K[l,kappa] ]
//! ```
//!
//! with an RBF kernel whose bandwidth follows the median heuristic
//! `l^2 = median(pairwise squared distances) / (2 ln(k+1))`, recomputed at
//! every step. The score of the optimal hyper-posterior is
//! `-(phi - mu_P)/sigma_P^2 + tau * G(phi)` where `G` aggregates per-client
//! log-partition gradients; the caller supplies `G` so this module stays a
//! set of pure transforms.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::FlatParams;

/// A set of `k` particles of equal dimension. `k = 1` degenerates SVGD to
/// plain gradient ascent on the score.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    particles: Vec<FlatParams>,
    dim: usize,
}

impl ParticleSet {
    pub fn new(particles: Vec<FlatParams>) -> Result<Self> {
        let Some(first) = particles.first() else {
            return Err(Error::shape("particle set", "need at least one particle"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::shape("particle set", "particles must have positive dimension"));
        }
        if let Some(bad) = particles.iter().position(|p| p.len() != dim) {
            return Err(Error::shape(
                "particle set",
                format!("particle {bad} has dim {}, expected {dim}", particles[bad].len()),
            ));
        }
        Ok(ParticleSet { particles, dim })
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[must_use]
    pub fn rows(&self) -> &[FlatParams] {
        &self.particles
    }

    #[must_use]
    pub fn into_rows(self) -> Vec<FlatParams> {
        self.particles
    }
}

/// Isotropic Gaussian hyper-prior over particles.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperPrior {
    pub mean: Vec<f64>,
    pub variance: f64,
}

impl HyperPrior {
    pub fn new(mean: Vec<f64>, variance: f64) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::config("hyper_prior.variance", "must be a positive finite real"));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("hyper_prior.mean", "must be finite"));
        }
        Ok(HyperPrior { mean, variance })
    }

    #[must_use]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draw one particle `phi ~ N(mean, variance I)`.
    pub fn sample(&self, rng: &mut impl Rng) -> FlatParams {
        let std = self.variance.sqrt();
        let values = self
            .mean
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + std * z
            })
            .collect();
        FlatParams::new(values).expect("finite mean and std give finite samples")
    }

    /// Draw a whole particle set.
    pub fn sample_set(&self, k: usize, rng: &mut impl Rng) -> Result<ParticleSet> {
        ParticleSet::new((0..k).map(|_| self.sample(rng)).collect())
    }

    /// `grad_phi ln P(phi) = -(phi - mean) / variance`.
    pub fn log_density_grad(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.mean.len() {
            return Err(Error::shape(
                "hyper-prior gradient",
                format!("particle dim {} != prior dim {}", phi.len(), self.mean.len()),
            ));
        }
        Ok(phi.iter().zip(&self.mean).map(|(p, m)| -(p - m) / self.variance).collect())
    }

    /// `-ln P(phi)` for the isotropic Gaussian (used as the surrogate
    /// cross-entropy term in bound reports).
    pub fn neg_log_density(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.mean.len() {
            return Err(Error::shape(
                "hyper-prior density",
                format!("particle dim {} != prior dim {}", phi.len(), self.mean.len()),
            ));
        }
        let d = self.mean.len() as f64;
        let quad: f64 = phi.iter().zip(&self.mean).map(|(p, m)| (p - m) * (p - m)).sum();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        Ok(0.5 * quad / self.variance + 0.5 * d * (ln_2pi + self.variance.ln()))
    }
}

/// RBF kernel matrix over a particle set plus the gradients SVGD needs.
#[derive(Clone, Debug)]
pub struct RbfKernel {
    /// `values[l][kappa] = exp(-||phi_l - phi_kappa||^2 / (2 l^2))`.
    pub values: Vec<Vec<f64>>,
    /// `grads[l][kappa] = d values[l][kappa] / d phi_l`, a length-`dim` vector.
    pub grads: Vec<Vec<Vec<f64>>>,
    /// Median-heuristic bandwidth squared actually used.
    pub bandwidth_sq: f64,
}

/// Median of the `k(k-1)/2` distinct pairwise squared distances, midpoint
/// convention for even counts. `None` for a single particle.
fn median_pairwise_sq(particles: &ParticleSet) -> Option<f64> {
    let k = particles.len();
    if k < 2 {
        return None;
    }
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    let rows = particles.rows();
    for l in 0..k {
        for kk in (l + 1)..k {
            let sq: f64 = rows[l]
                .iter()
                .zip(rows[kk].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(sq);
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("squared distances are finite"));
    let n = dists.len();
    Some(if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    })
}

/// Kernel matrix and gradients under the median-heuristic bandwidth
/// `l^2 = median / (2 ln(k+1))`, falling back to `l^2 = 1` when the median
/// is unavailable (`k = 1`) or zero (all particles coincide).
pub fn rbf_kernel_matrix(particles: &ParticleSet) -> RbfKernel {
    let k = particles.len();
    let dim = particles.dim();
    let rows = particles.rows();
    let bandwidth_sq = match median_pairwise_sq(particles) {
        Some(med) if med > 0.0 => med / (2.0 * ((k as f64) + 1.0).ln()),
        _ => 1.0,
    };

    let mut values = vec![vec![0.0; k]; k];
    let mut grads = vec![vec![vec![0.0; dim]; k]; k];
    for l in 0..k {
        values[l][l] = 1.0;
        for kk in 0..k {
            if kk == l {
                continue;
            }
            let sq: f64 = rows[l]
                .iter()
                .zip(rows[kk].iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let v = (-sq / (2.0 * bandwidth_sq)).exp();
            values[l][kk] = v;
            for d in 0..dim {
                grads[l][kk][d] = v * (rows[kk][d] - rows[l][d]) / bandwidth_sq;
            }
        }
    }
    RbfKernel { values, grads, bandwidth_sq }
}

/// Score of the optimal hyper-posterior at each particle:
/// `-(phi - mu_P)/sigma_P^2 + tau * aggregated[kappa]`.
///
/// `aggregated` must already carry the full-population scaling (the sum
/// over clients, or `n` times an unbiased subsample average).
pub fn score(
    particles: &ParticleSet,
    hyper_prior: &HyperPrior,
    tau: f64,
    aggregated: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::config("tau", format!("must be finite and nonnegative, got {tau}")));
    }
    if aggregated.len() != particles.len() {
        return Err(Error::shape(
            "svgd score",
            format!("{} gradient rows for {} particles", aggregated.len(), particles.len()),
        ));
    }
    let mut out = Vec::with_capacity(particles.len());
    for (phi, g) in particles.rows().iter().zip(aggregated) {
        if g.len() != particles.dim() {
            return Err(Error::shape(
                "svgd score",
                format!("gradient row dim {} != particle dim {}", g.len(), particles.dim()),
            ));
        }
        let prior = hyper_prior.log_density_grad(phi)?;
        out.push(prior.iter().zip(g).map(|(p, gi)| p + tau * gi).collect());
    }
    Ok(out)
}

/// One SVGD transport step; pure (returns the new set).
pub fn svgd_step(
    particles: &ParticleSet,
    scores: &[Vec<f64>],
    kernel: &RbfKernel,
    eta: f64,
) -> Result<ParticleSet> {
    let k = particles.len();
    let dim = particles.dim();
    if scores.len() != k {
        return Err(Error::shape(
            "svgd step",
            format!("{} score rows for {k} particles", scores.len()),
        ));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::config("fed.eta", format!("step size must be finite and nonnegative, got {eta}")));
    }
    let scale = eta / k as f64;
    let rows = particles.rows();
    let mut new_rows = Vec::with_capacity(k);
    for kappa in 0..k {
        let mut phi = rows[kappa].as_slice().to_vec();
        for d in 0..dim {
            let mut acc = 0.0;
            for l in 0..k {
                acc += kernel.values[l][kappa] * scores[l][d] + kernel.grads[l][kappa][d];
            }
            phi[d] += scale * acc;
        }
        new_rows.push(FlatParams::new(phi).map_err(|e| e.with_particle(kappa))?);
    }
    ParticleSet::new(new_rows)
}
