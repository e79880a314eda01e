//! PAC-Bayesian bound arithmetic.
//!
//! Scalar formulas for the client-level, server-level, and new-client
//! generalization bounds, the differential-privacy penalty, the derived
//! temperature `tau`, and the discrete Gibbs/optimal-hyper-posterior
//! constructions used both by the experiment runner and by the bound
//! validity tests. Everything here is closed-form arithmetic over a
//! [`BoundContext`]; nothing touches GPs or networks.
//!
//! Conventions: `n` existing clients with `m[i]` observed samples and
//! `m_tilde[i]` future (personalization) samples, loss window `(a, b)`,
//! confidence `delta`, hyper-prior spread `lambda`, and the positive
//! constant `upsilon` that keeps the server bound finite when no client
//! expects future samples.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::util::{logsumexp, softmax_from_log};

/// Shared inputs of the server-level bounds.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundContext {
    m: Vec<usize>,
    m_tilde: Vec<usize>,
    pub beta: f64,
    pub lambda: f64,
    pub upsilon: f64,
    pub delta: f64,
    /// Loss window `(a, b)`, `a < b`.
    pub loss_range: (f64, f64),
}

impl BoundContext {
    pub fn new(
        m: Vec<usize>,
        m_tilde: Vec<usize>,
        beta: f64,
        lambda: f64,
        upsilon: f64,
        delta: f64,
        loss_range: (f64, f64),
    ) -> Result<Self> {
        let n = m.len();
        if n == 0 {
            return Err(Error::config("bounds", "need at least one client"));
        }
        if m_tilde.len() != n {
            return Err(Error::config(
                "bounds",
                format!("m_tilde has {} entries for {} clients", m_tilde.len(), n),
            ));
        }
        if let Some(i) = m.iter().position(|&mi| mi == 0) {
            return Err(Error::config("bounds", format!("client {i} has no samples")));
        }
        let (a, b) = loss_range;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::config("bounds.loss_window", format!("need finite a < b, got ({a}, {b})")));
        }
        if !(delta > 0.0 && delta <= 1.0) {
            return Err(Error::config("bounds.delta", format!("must lie in (0, 1], got {delta}")));
        }
        if !(upsilon.is_finite() && upsilon > 0.0) {
            return Err(Error::config("bounds.upsilon", format!("must be positive, got {upsilon}")));
        }
        let n2 = m_tilde.iter().filter(|&&t| t > 0).count() as f64;
        if !(lambda.is_finite() && lambda > n2 + upsilon) {
            return Err(Error::config(
                "bounds.lambda",
                format!("must exceed n2 + upsilon = {}, got {lambda}", n2 + upsilon),
            ));
        }
        if !(beta.is_finite() && beta >= 1.0 / n as f64) {
            return Err(Error::config(
                "bounds.beta",
                format!("must be at least 1/n = {}, got {beta}", 1.0 / n as f64),
            ));
        }
        Ok(BoundContext { m, m_tilde, beta, lambda, upsilon, delta, loss_range })
    }

    #[must_use]
    pub fn n(&self) -> usize {
        self.m.len()
    }

    /// Number of clients expecting future samples (`m_tilde > 0`).
    #[must_use]
    pub fn n2(&self) -> usize {
        self.m_tilde.iter().filter(|&&t| t > 0).count()
    }

    #[must_use]
    pub fn sample_counts(&self) -> &[usize] {
        &self.m
    }

    #[must_use]
    pub fn future_counts(&self) -> &[usize] {
        &self.m_tilde
    }

    /// Derived temperature `tau = lambda / (lambda + beta n (n2 + upsilon))`.
    #[must_use]
    pub fn tau(&self) -> f64 {
        tau(self.n(), self.n2(), self.upsilon, self.beta, self.lambda)
            .expect("context invariants imply a valid tau")
    }

    /// Per-client DP leakage `epsilon_i = 2 beta tau (b - a) / m_i`.
    #[must_use]
    pub fn epsilons(&self) -> Vec<f64> {
        let t = self.tau();
        self.m
            .iter()
            .map(|&mi| epsilon_for_client(self.beta, t, self.loss_range, mi).expect("valid context"))
            .collect()
    }

    /// Per-client posterior-shift radii `Delta_i`.
    #[must_use]
    pub fn deltas(&self) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.m_tilde)
            .map(|(&mi, &ti)| delta_i(self.beta, mi, ti, self.loss_range, self.n()).expect("valid context"))
            .collect()
    }
}

/// Information-leakage penalty `I(epsilon, m, delta) =
/// 0.5 m eps^2 + eps sqrt(0.5 m ln(4/delta)) + ln 2`.
pub fn dp_penalty_i(epsilon: f64, m: usize, delta: f64) -> Result<f64> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::config("epsilon", format!("must be finite and nonnegative, got {epsilon}")));
    }
    if m == 0 {
        return Err(Error::config("m", "sample count must be at least 1"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::config("delta", format!("must lie in (0, 1], got {delta}")));
    }
    let mf = m as f64;
    Ok(0.5 * mf * epsilon * epsilon
        + epsilon * (0.5 * mf * (4.0 / delta).ln()).sqrt()
        + std::f64::consts::LN_2)
}

/// Gibbs-posterior privacy level of client `i`:
/// `epsilon_i = 2 beta tau (b - a) / m_i`.
pub fn epsilon_for_client(beta: f64, tau: f64, loss_range: (f64, f64), m_i: usize) -> Result<f64> {
    let (a, b) = loss_range;
    if !(a < b) {
        return Err(Error::config("loss_window", "need a < b"));
    }
    if m_i == 0 {
        return Err(Error::config("m_i", "sample count must be at least 1"));
    }
    if !(beta > 0.0 && tau >= 0.0 && tau.is_finite() && beta.is_finite()) {
        return Err(Error::config("beta/tau", "beta must be positive and tau nonnegative"));
    }
    Ok(2.0 * beta * tau * (b - a) / m_i as f64)
}

/// Derived temperature of the optimal hyper-posterior:
/// `tau = lambda / (lambda + beta n (n2 + upsilon))`.
pub fn tau(n: usize, n2: usize, upsilon: f64, beta: f64, lambda: f64) -> Result<f64> {
    if n == 0 || n2 > n {
        return Err(Error::config("bounds", format!("need 0 < n and n2 <= n, got n={n}, n2={n2}")));
    }
    if !(upsilon > 0.0 && upsilon.is_finite()) {
        return Err(Error::config("bounds.upsilon", "must be positive"));
    }
    if !(lambda > n2 as f64 + upsilon) {
        return Err(Error::config("bounds.lambda", "must exceed n2 + upsilon"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("bounds.beta", "must be positive"));
    }
    Ok(lambda / (lambda + beta * n as f64 * (n2 as f64 + upsilon)))
}

/// Shift radius of client `i`'s Gibbs posterior when `m_tilde_i` future
/// samples arrive:
/// `Delta_i = (1/n) min{ b - a, b (e^x - e^-x) }` with
/// `x = 2 beta m_tilde_i (b - a) / (m_i + m_tilde_i)`.
pub fn delta_i(beta: f64, m_i: usize, m_tilde_i: usize, loss_range: (f64, f64), n: usize) -> Result<f64> {
    let (a, b) = loss_range;
    if !(a < b) {
        return Err(Error::config("loss_window", "need a < b"));
    }
    if m_i == 0 || n == 0 {
        return Err(Error::config("bounds", "need m_i >= 1 and n >= 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("bounds.beta", "must be positive"));
    }
    let x = 2.0 * beta * m_tilde_i as f64 * (b - a) / (m_i + m_tilde_i) as f64;
    // e^x - e^-x may overflow to inf for extreme beta; min() then saturates
    // at the b - a branch, which is the correct limit.
    let shift = b * (x.exp() - (-x).exp());
    Ok((b - a).min(shift) / n as f64)
}

/// Client-level bound: `L_hat + (KL + beta^2 (b-a)^2 / (8 m_total) +
/// I(eps_i, m_i, delta) + ln(1/delta)) / beta`.
///
/// `m_total` is the sample count behind the empirical risk (`m_i`, or
/// `m_i + m_tilde_i` after personalization); `m_i` is the count the DP
/// penalty sees.
#[allow(clippy::too_many_arguments)]
pub fn client_bound(
    empirical_risk: f64,
    kl: f64,
    beta: f64,
    m_total: usize,
    eps_i: f64,
    m_i: usize,
    delta: f64,
    loss_range: (f64, f64),
) -> Result<f64> {
    if m_total == 0 {
        return Err(Error::config("m_total", "sample count must be at least 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config("beta", "must be positive"));
    }
    if !(kl.is_finite() && kl >= 0.0) {
        return Err(Error::config("kl", format!("must be finite and nonnegative, got {kl}")));
    }
    let (a, b) = loss_range;
    if !(a < b) {
        return Err(Error::config("loss_window", "need a < b"));
    }
    let width = b - a;
    let penalty = kl
        + beta * beta * width * width / (8.0 * m_total as f64)
        + dp_penalty_i(eps_i, m_i, delta)?
        + (1.0 / delta).ln();
    Ok(empirical_risk + penalty / beta)
}

/// The five server-bound terms, in the order they are reported.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ServerBoundTerms {
    /// `(1/(n beta)) sum_i E_{P~Q}[-ln Z_i]`.
    pub empirical: f64,
    /// Coefficient `1/(n beta) + (n2 + upsilon)/lambda` multiplying the KL.
    pub kl_coefficient: f64,
    /// `kl_coefficient * KL(Q || P)`.
    pub kl_term: f64,
    /// `beta (b-a)^2 / (8n) * sum_i 1/m_i`.
    pub concentration: f64,
    /// `lambda sum_i Delta_i^2 / (8 (n2 + upsilon))`.
    pub delta_term: f64,
    /// `ln(1/delta) / sqrt(n)`.
    pub confidence: f64,
    pub total: f64,
}

/// Server-level bound on the average true risk across clients.
///
/// `avg_neg_lml_per_client[i]` must hold `E_{P ~ Q}[-ln Z_i(P)]`, the
/// hyper-posterior average of the client's negative log partition
/// function.
pub fn server_bound_terms(
    avg_neg_lml_per_client: &[f64],
    kl_hyper: f64,
    ctx: &BoundContext,
) -> Result<ServerBoundTerms> {
    let n = ctx.n();
    if avg_neg_lml_per_client.len() != n {
        return Err(Error::shape(
            "server bound",
            format!("{} empirical terms for {n} clients", avg_neg_lml_per_client.len()),
        ));
    }
    if !(kl_hyper.is_finite()) {
        return Err(Error::config("kl_hyper", format!("must be finite, got {kl_hyper}")));
    }
    let nf = n as f64;
    let (a, b) = ctx.loss_range;
    let width = b - a;
    let n2_ups = ctx.n2() as f64 + ctx.upsilon;

    let empirical = avg_neg_lml_per_client.iter().sum::<f64>() / (nf * ctx.beta);
    let kl_coefficient = 1.0 / (nf * ctx.beta) + n2_ups / ctx.lambda;
    let kl_term = kl_coefficient * kl_hyper;
    let inv_m: f64 = ctx.m.iter().map(|&mi| 1.0 / mi as f64).sum();
    let concentration = ctx.beta * width * width / (8.0 * nf) * inv_m;
    let delta_sq: f64 = ctx.deltas().iter().map(|d| d * d).sum();
    let delta_term = ctx.lambda * delta_sq / (8.0 * n2_ups);
    let confidence = (1.0 / ctx.delta).ln() / nf.sqrt();
    let total = empirical + kl_term + concentration + delta_term + confidence;
    Ok(ServerBoundTerms { empirical, kl_coefficient, kl_term, concentration, delta_term, confidence, total })
}

pub fn server_bound(avg_neg_lml_per_client: &[f64], kl_hyper: f64, ctx: &BoundContext) -> Result<f64> {
    Ok(server_bound_terms(avg_neg_lml_per_client, kl_hyper, ctx)?.total)
}

/// Terms of the new-client bound evaluated at the optimal hyper-posterior.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NewClientBoundTerms {
    /// `-(1/(n beta) + (n2 + upsilon)/lambda) ln Z^S`.
    pub partition_term: f64,
    /// `(b-a)^2/(8n) (beta sum_i 1/m_i + lambda/(n2 + upsilon))`.
    pub concentration: f64,
    /// `ln(1/delta)/sqrt(n)`.
    pub confidence: f64,
    pub total: f64,
}

/// Bound on the expected true risk of a *new* client drawn from the task
/// distribution, given the log server partition function `ln Z^S_tau`.
pub fn new_client_bound_terms(log_z_s: f64, ctx: &BoundContext) -> Result<NewClientBoundTerms> {
    if !log_z_s.is_finite() {
        return Err(Error::numerical(format!("ln Z^S must be finite, got {log_z_s}")));
    }
    let n = ctx.n() as f64;
    let (a, b) = ctx.loss_range;
    let width = b - a;
    let n2_ups = ctx.n2() as f64 + ctx.upsilon;
    let partition_term = -(1.0 / (n * ctx.beta) + n2_ups / ctx.lambda) * log_z_s;
    let inv_m: f64 = ctx.m.iter().map(|&mi| 1.0 / mi as f64).sum();
    let concentration = width * width / (8.0 * n) * (ctx.beta * inv_m + ctx.lambda / n2_ups);
    let confidence = (1.0 / ctx.delta).ln() / n.sqrt();
    Ok(NewClientBoundTerms { partition_term, concentration, confidence, total: partition_term + concentration + confidence })
}

pub fn new_client_bound(log_z_s: f64, ctx: &BoundContext) -> Result<f64> {
    Ok(new_client_bound_terms(log_z_s, ctx)?.total)
}

/// A finite hypothesis space with a per-hypothesis, per-sample loss table;
/// the discrete testbed for the Gibbs/Bayes constructions.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteHypothesisSpace {
    /// `losses[h][j]` = loss of hypothesis `h` on sample `j`.
    pub losses: Vec<Vec<f64>>,
    /// Prior over hypotheses; nonnegative, sums to 1.
    pub prior: Vec<f64>,
}

impl FiniteHypothesisSpace {
    pub fn new(losses: Vec<Vec<f64>>, prior: Vec<f64>) -> Result<Self> {
        if losses.is_empty() {
            return Err(Error::config("hypothesis space", "need at least one hypothesis"));
        }
        if prior.len() != losses.len() {
            return Err(Error::config(
                "hypothesis space",
                format!("{} prior weights for {} hypotheses", prior.len(), losses.len()),
            ));
        }
        let m = losses[0].len();
        if m == 0 {
            return Err(Error::config("hypothesis space", "need at least one sample"));
        }
        for (h, row) in losses.iter().enumerate() {
            if row.len() != m {
                return Err(Error::config(
                    "hypothesis space",
                    format!("hypothesis {h} has {} losses, expected {m}", row.len()),
                ));
            }
            if row.iter().any(|l| !l.is_finite()) {
                return Err(Error::config("hypothesis space", format!("non-finite loss for hypothesis {h}")));
            }
        }
        if prior.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::config("hypothesis space", "prior weights must be nonnegative"));
        }
        let total: f64 = prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("hypothesis space", format!("prior sums to {total}, expected 1")));
        }
        Ok(FiniteHypothesisSpace { losses, prior })
    }

    #[must_use]
    pub fn num_hypotheses(&self) -> usize {
        self.losses.len()
    }

    #[must_use]
    pub fn num_samples(&self) -> usize {
        self.losses[0].len()
    }

    /// Mean loss of hypothesis `h` over the given sample subset.
    pub fn mean_loss(&self, h: usize, subset: &[usize]) -> Result<f64> {
        if subset.is_empty() {
            return Err(Error::config("subset", "need at least one sample index"));
        }
        let mut total = 0.0;
        for &j in subset {
            let Some(&l) = self.losses[h].get(j) else {
                return Err(Error::config("subset", format!("sample index {j} out of range")));
            };
            total += l;
        }
        Ok(total / subset.len() as f64)
    }
}

/// Gibbs posterior `Q(h) proportional to prior(h) exp(-beta L_hat(h))`
/// over the subset, computed in log domain.
pub fn gibbs_posterior(space: &FiniteHypothesisSpace, beta: f64, subset: &[usize]) -> Result<Vec<f64>> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::config("beta", format!("must be finite and nonnegative, got {beta}")));
    }
    let mut log_w = Vec::with_capacity(space.num_hypotheses());
    for h in 0..space.num_hypotheses() {
        let lp = if space.prior[h] > 0.0 { space.prior[h].ln() } else { f64::NEG_INFINITY };
        log_w.push(lp - beta * space.mean_loss(h, subset)?);
    }
    Ok(softmax_from_log(&log_w))
}

/// Optimal hyper-posterior over a finite family of candidate priors.
///
/// `log_z[p][i]` is `ln Z_i` of prior `p` on client `i`. Returns the
/// weight vector `Q*(p) proportional to P(p) exp(tau sum_i log_z[p][i])`
/// and the log server partition function `ln Z^S_tau` (its normalizer).
pub fn optimal_hyper_posterior_weights(
    log_z: &[Vec<f64>],
    hyper_prior: &[f64],
    tau: f64,
) -> Result<(Vec<f64>, f64)> {
    if log_z.is_empty() {
        return Err(Error::config("hyper-posterior", "need at least one candidate prior"));
    }
    if hyper_prior.len() != log_z.len() {
        return Err(Error::config(
            "hyper-posterior",
            format!("{} prior weights for {} candidates", hyper_prior.len(), log_z.len()),
        ));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::config("tau", "must be finite and nonnegative"));
    }
    let n = log_z[0].len();
    let mut log_w = Vec::with_capacity(log_z.len());
    for (p, row) in log_z.iter().enumerate() {
        if row.len() != n {
            return Err(Error::shape(
                "hyper-posterior",
                format!("candidate {p} has {} client terms, expected {n}", row.len()),
            ));
        }
        let lp = if hyper_prior[p] > 0.0 { hyper_prior[p].ln() } else { f64::NEG_INFINITY };
        log_w.push(lp + tau * row.iter().sum::<f64>());
    }
    let log_z_s = logsumexp(&log_w);
    Ok((softmax_from_log(&log_w), log_z_s))
}

/// Outcome of the non-vacuousness conditions: loss window narrower than 8
/// and every client's `epsilon_i` below `sqrt(2 (b - a))`, plus the
/// implied upper limit on `lambda`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NonVacuousReport {
    pub range_width: f64,
    pub range_ok: bool,
    pub epsilons: Vec<f64>,
    pub epsilon_limit: f64,
    pub epsilon_ok: bool,
    /// Largest `lambda` keeping every `epsilon_i` under the limit;
    /// `None` when the condition holds for every `lambda`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_limit: Option<f64>,
    pub pass: bool,
}

pub fn check_nonvacuous(ctx: &BoundContext) -> NonVacuousReport {
    let (a, b) = ctx.loss_range;
    let width = b - a;
    let range_ok = width < 8.0;
    let epsilon_limit = (2.0 * width).sqrt();
    let epsilons = ctx.epsilons();
    let epsilon_ok = epsilons.iter().all(|&e| e < epsilon_limit);

    // epsilon_i = 2 beta tau w / m_i is worst for the smallest m_i. Invert
    // tau(lambda) at the critical tau for that client.
    let m_min = *ctx.m.iter().min().expect("context has clients") as f64;
    let tau_max = m_min * epsilon_limit / (2.0 * ctx.beta * width);
    let lambda_limit = if tau_max >= 1.0 {
        None
    } else {
        let n2_ups = ctx.n2() as f64 + ctx.upsilon;
        Some(ctx.beta * ctx.n() as f64 * n2_ups * tau_max / (1.0 - tau_max))
    };

    NonVacuousReport {
        range_width: width,
        range_ok,
        epsilons,
        epsilon_limit,
        epsilon_ok,
        lambda_limit,
        pass: range_ok && epsilon_ok,
    }
}
