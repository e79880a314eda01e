//! The federated protocol.
//!
//! A synchronous, fault-free simulation: each round the server selects a
//! client subset, every selected client computes per-particle gradients
//! of its log marginal likelihood on a fresh mini-batch, the server
//! aggregates (optionally clipping and adding Laplace noise for the
//! differentially private variant) and moves the particle set by one
//! SVGD step. Also provides the per-client personalization step, the
//! non-federated baseline trainer, and the particle-set file format.
//!
//! Randomness is split into independent streams of one seeded generator:
//! particle initialization, client selection, DP noise, and one stream
//! per client, so each source is reproducible in isolation.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::gp::{self, GpPriorSpec, MixturePredictor};
use crate::nn::FlatParams;
use crate::svgd::{self, HyperPrior, ParticleSet};

const INIT_STREAM: u64 = 0;
const SELECT_STREAM: u64 = 1;
const DP_STREAM: u64 = 2;
const CLIENT_STREAM_BASE: u64 = 16;

/// Server-side schedule of the federated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    /// Total rounds `T`.
    pub rounds: usize,
    /// Clients sampled per round `c`.
    pub clients_per_round: usize,
    /// Mini-batch size `b`; clamped to the client's sample count.
    pub batch_size: usize,
    /// SVGD step size.
    pub eta: f64,
    pub seed: u64,
    /// Particle count `k`.
    pub particles: usize,
    /// Optional step-size decay: after `h` rounds eta has halved,
    /// following `eta / (1 + t/h)`. `None` keeps eta constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_half_life: Option<f64>,
}

impl RoundConfig {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("fed.rounds", "need at least one round"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > n_clients {
            return Err(Error::config(
                "fed.clients_per_round",
                format!("must lie in 1..={n_clients}, got {}", self.clients_per_round),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("fed.batch_size", "must be at least 1"));
        }
        if self.particles == 0 {
            return Err(Error::config("fed.particles", "need at least one particle"));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::config("fed.eta", format!("must be finite and nonnegative, got {}", self.eta)));
        }
        if let Some(h) = self.eta_half_life {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::config("fed.eta_half_life", format!("must be positive, got {h}")));
            }
        }
        Ok(())
    }

    fn eta_at(&self, round: usize) -> f64 {
        match self.eta_half_life {
            None => self.eta,
            Some(h) => self.eta / (1.0 + round as f64 / h),
        }
    }
}

/// Differential-privacy settings for the sanitized variant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub enabled: bool,
    /// Privacy budget epsilon of the whole run.
    pub epsilon: f64,
    /// Per-particle gradient clipping norm gamma.
    pub clip_norm: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("dp.epsilon", format!("must be positive, got {}", self.epsilon)));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(Error::config("dp.clip_norm", format!("must be positive, got {}", self.clip_norm)));
        }
        Ok(())
    }

    /// Per-coordinate Laplace scale `T * gamma / (epsilon * c)`.
    #[must_use]
    pub fn noise_scale(&self, rounds: usize, clients_per_round: usize) -> f64 {
        rounds as f64 * self.clip_norm / (self.epsilon * clients_per_round as f64)
    }
}

/// One client's contribution to a round: per-particle gradients of its
/// mini-batch log marginal likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMessage {
    pub client_id: usize,
    pub round: usize,
    /// `k x d_phi` matrix; row kappa belongs to particle kappa.
    pub grads: Vec<Vec<f64>>,
}

/// Per-round, per-client log row. Unselected clients keep the metric
/// fields empty.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    pub client_id: usize,
    pub selected: bool,
    /// Mean over particles of the mini-batch log marginal likelihood.
    pub batch_lml_mean: Option<f64>,
    /// Frobenius norm of the client's gradient matrix.
    pub grad_norm: Option<f64>,
}

/// The complete training log, one record per client per round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoundLog {
    pub records: Vec<RoundRecord>,
}

impl RoundLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let rows: Vec<Vec<String>> = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.round.to_string(),
                    r.client_id.to_string(),
                    fmt_opt(r.batch_lml_mean),
                    fmt_opt(r.grad_norm),
                    u8::from(r.selected).to_string(),
                ]
            })
            .collect();
        crate::metrics::write_csv(path, &["round", "client_id", "batch_lml_mean", "grad_norm", "selected"], &rows)
    }

    /// How often each of the `n` clients was selected.
    #[must_use]
    pub fn selection_counts(&self, n: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n];
        for r in &self.records {
            if r.selected && r.client_id < n {
                counts[r.client_id] += 1;
            }
        }
        counts
    }
}

/// Draw a sorted uniform-without-replacement subset of `c` of the `n` clients.
pub fn select_clients(rng: &mut impl Rng, n: usize, c: usize) -> Result<Vec<usize>> {
    if c == 0 || c > n {
        return Err(Error::config("fed.clients_per_round", format!("must lie in 1..={n}, got {c}")));
    }
    // Partial Fisher-Yates: after j swaps the prefix is a uniform sample.
    let mut idx: Vec<usize> = (0..n).collect();
    for j in 0..c {
        let pick = j + rng.gen_range(0..n - j);
        idx.swap(j, pick);
    }
    let mut chosen = idx[..c].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Compute one client's gradient message on a fresh mini-batch.
///
/// The batch is drawn once (uniform, without replacement, sorted) and
/// shared by all particles; `batch_size` is clamped to the client's
/// sample count. Returns the message and the mean mini-batch log
/// marginal likelihood across particles.
pub fn client_update(
    spec: &GpPriorSpec,
    dataset: &ClientDataset,
    particles: &ParticleSet,
    batch_size: usize,
    rng: &mut impl Rng,
    client_id: usize,
    round: usize,
) -> Result<(GradientMessage, f64)> {
    let m = dataset.num_train();
    if m == 0 {
        return Err(Error::shape("client update", "client has no training data").with_client(client_id));
    }
    let b = batch_size.min(m);
    let batch = select_clients(rng, m, b)?; // same sorted-subset draw
    let x_b: Vec<Vec<f64>> = batch.iter().map(|&j| dataset.x[j].clone()).collect();
    let y_b: Vec<f64> = batch.iter().map(|&j| dataset.y[j]).collect();

    let mut grads = Vec::with_capacity(particles.len());
    let mut lml_total = 0.0;
    for (kappa, phi) in particles.rows().iter().enumerate() {
        let (value, grad) = gp::lml_value_and_gradient(spec, phi, &x_b, &y_b)
            .map_err(|e| e.with_particle(kappa).with_client(client_id))?;
        lml_total += value;
        grads.push(grad);
    }
    let message = GradientMessage { client_id, round, grads };
    Ok((message, lml_total / particles.len() as f64))
}

/// Average the round's messages into the `k x d_phi` matrix
/// `G_bar = (1/c) sum_i G_i`.
pub fn aggregate(messages: &[GradientMessage], expected: usize) -> Result<Vec<Vec<f64>>> {
    if messages.len() != expected {
        return Err(Error::protocol(format!(
            "expected {expected} gradient messages this round, got {}",
            messages.len()
        )));
    }
    let first = &messages[0].grads;
    let k = first.len();
    let d = first.first().map_or(0, Vec::len);
    let mut mean = vec![vec![0.0; d]; k];
    for msg in messages {
        if msg.grads.len() != k || msg.grads.iter().any(|row| row.len() != d) {
            return Err(Error::protocol(format!(
                "client {} sent a gradient of mismatched shape",
                msg.client_id
            )));
        }
        for (acc, row) in mean.iter_mut().zip(&msg.grads) {
            for (a, g) in acc.iter_mut().zip(row) {
                *a += g;
            }
        }
    }
    let scale = 1.0 / messages.len() as f64;
    for row in &mut mean {
        for a in row {
            *a *= scale;
        }
    }
    Ok(mean)
}

fn laplace(rng: &mut impl Rng, scale: f64) -> f64 {
    // Sign and magnitude drawn separately so the sample is exactly
    // proportional to the scale under a shared random stream.
    let sign = if rng.gen::<f64>() < 0.5 { -1.0 } else { 1.0 };
    let u: f64 = rng.gen();
    sign * scale * -(1.0 - u).ln()
}

/// The differentially private aggregation: clip every per-particle row
/// to L2 norm `gamma`, average, then add per-coordinate Laplace noise of
/// scale `T gamma / (epsilon c)` once for the round.
pub fn dp_sanitize(
    messages: &[GradientMessage],
    dp: &DpConfig,
    rounds: usize,
    expected: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    if !dp.enabled {
        return Err(Error::protocol("dp_sanitize called with privacy disabled"));
    }
    dp.validate()?;
    let clipped: Vec<GradientMessage> = messages
        .iter()
        .map(|msg| {
            let grads = msg
                .grads
                .iter()
                .map(|row| {
                    let norm = row.iter().map(|g| g * g).sum::<f64>().sqrt();
                    let factor = 1.0f64.max(norm / dp.clip_norm);
                    row.iter().map(|g| g / factor).collect()
                })
                .collect();
            GradientMessage { client_id: msg.client_id, round: msg.round, grads }
        })
        .collect();
    let mut mean = aggregate(&clipped, expected)?;
    let scale = dp.noise_scale(rounds, expected);
    for row in &mut mean {
        for a in row {
            *a += laplace(rng, scale);
        }
    }
    Ok(mean)
}

struct TrainerState {
    particles: ParticleSet,
    select_rng: ChaCha8Rng,
    dp_rng: ChaCha8Rng,
    client_rngs: Vec<ChaCha8Rng>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn init_state(spec: &GpPriorSpec, hyper_prior: &HyperPrior, cfg: &RoundConfig, n: usize) -> Result<TrainerState> {
    if hyper_prior.dim() != spec.particle_dim() {
        return Err(Error::shape(
            "hyper-prior",
            format!("dimension {} != particle dimension {}", hyper_prior.dim(), spec.particle_dim()),
        ));
    }
    let mut init_rng = stream_rng(cfg.seed, INIT_STREAM);
    let particles = hyper_prior.sample_set(cfg.particles, &mut init_rng)?;
    Ok(TrainerState {
        particles,
        select_rng: stream_rng(cfg.seed, SELECT_STREAM),
        dp_rng: stream_rng(cfg.seed, DP_STREAM),
        client_rngs: (0..n).map(|i| stream_rng(cfg.seed, CLIENT_STREAM_BASE + i as u64)).collect(),
    })
}

fn execute_round(
    spec: &GpPriorSpec,
    clients: &[ClientDataset],
    hyper_prior: &HyperPrior,
    cfg: &RoundConfig,
    tau: f64,
    dp: Option<&DpConfig>,
    state: &mut TrainerState,
    round_index: usize,
) -> Result<Vec<RoundRecord>> {
    let n = clients.len();
    let c = cfg.clients_per_round;
    let selected = select_clients(&mut state.select_rng, n, c)?;

    let mut messages = Vec::with_capacity(c);
    let mut records: Vec<RoundRecord> = (0..n)
        .map(|i| RoundRecord {
            round: round_index + 1,
            client_id: i,
            selected: false,
            batch_lml_mean: None,
            grad_norm: None,
        })
        .collect();
    for &i in &selected {
        let (message, lml_mean) = client_update(
            spec,
            &clients[i],
            &state.particles,
            cfg.batch_size,
            &mut state.client_rngs[i],
            i,
            round_index + 1,
        )?;
        let norm = message
            .grads
            .iter()
            .flat_map(|row| row.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        records[i] = RoundRecord {
            round: round_index + 1,
            client_id: i,
            selected: true,
            batch_lml_mean: Some(lml_mean),
            grad_norm: Some(norm),
        };
        messages.push(message);
    }

    let mean = match dp {
        Some(dp_cfg) if dp_cfg.enabled => dp_sanitize(&messages, dp_cfg, cfg.rounds, c, &mut state.dp_rng)?,
        _ => aggregate(&messages, c)?,
    };
    // The SVGD target needs sum_{i=1..n} grad ln Z_i; n times the round
    // average is its unbiased estimate under uniform selection.
    let scaled: Vec<Vec<f64>> = mean
        .into_iter()
        .map(|row| row.into_iter().map(|g| g * n as f64).collect())
        .collect();
    let scores = svgd::score(&state.particles, hyper_prior, tau, &scaled)?;
    let kernel = svgd::rbf_kernel_matrix(&state.particles);
    state.particles = svgd::svgd_step(&state.particles, &scores, &kernel, cfg.eta_at(round_index))?;
    Ok(records)
}

/// Run the full federated loop and return the trained particle set with
/// its per-round log. Deterministic in `cfg.seed`.
pub fn run_federated(
    spec: &GpPriorSpec,
    clients: &[ClientDataset],
    hyper_prior: &HyperPrior,
    cfg: &RoundConfig,
    tau: f64,
    dp: Option<&DpConfig>,
) -> Result<(ParticleSet, RoundLog)> {
    let n = clients.len();
    if n == 0 {
        return Err(Error::config("fed", "need at least one client"));
    }
    cfg.validate(n)?;
    if let Some(dp_cfg) = dp {
        dp_cfg.validate()?;
    }
    if let Some(i) = clients.iter().position(|cl| cl.num_train() == 0) {
        return Err(Error::shape("fed", "every participating client needs training data").with_client(i));
    }
    let mut state = init_state(spec, hyper_prior, cfg, n)?;
    let mut log = RoundLog::default();
    for t in 0..cfg.rounds {
        let records = execute_round(spec, clients, hyper_prior, cfg, tau, dp, &mut state, t)?;
        log.records.extend(records);
    }
    Ok((state.particles, log))
}

/// Personalize one client: bind the mixture predictor to the union of
/// its training and personalization splits. No optimization happens —
/// conditioning the GP posteriors *is* the personalization step.
pub fn personalize(spec: &GpPriorSpec, dataset: &ClientDataset, particles: &ParticleSet) -> Result<MixturePredictor> {
    let (x, y) = dataset.personalization_data();
    MixturePredictor::new(spec, particles.rows(), &x, &y)
}

/// Plain gradient ascent on one client's log marginal likelihood — the
/// non-federated baseline. With `halve_on_decrease` the step size halves
/// whenever a step would lower the objective (the step is retried);
/// without it every step is accepted as-is.
pub fn train_vanilla(
    spec: &GpPriorSpec,
    x: &[Vec<f64>],
    y: &[f64],
    init: FlatParams,
    epochs: usize,
    eta: f64,
    halve_on_decrease: bool,
) -> Result<FlatParams> {
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::config("eta", format!("must be finite and nonnegative, got {eta}")));
    }
    if eta == 0.0 || epochs == 0 {
        return Ok(init);
    }
    let mut phi = init;
    let mut step = eta;
    let (mut value, mut grad) = gp::lml_value_and_gradient(spec, &phi, x, y)?;
    for _ in 0..epochs {
        if step < 1e-12 {
            break;
        }
        let candidate: Vec<f64> = phi.iter().zip(&grad).map(|(p, g)| p + step * g).collect();
        let candidate = FlatParams::new(candidate)?;
        let (new_value, new_grad) = gp::lml_value_and_gradient(spec, &candidate, x, y)?;
        if halve_on_decrease && new_value < value {
            step *= 0.5;
            continue;
        }
        phi = candidate;
        value = new_value;
        grad = new_grad;
    }
    Ok(phi)
}

/// Serialize a particle set: a header naming the particle count, the
/// dimension, and the architecture fingerprint, then one whitespace-
/// separated row per particle at full round-trip precision.
pub fn write_particles(path: &Path, particles: &ParticleSet, spec: &GpPriorSpec) -> Result<()> {
    if particles.dim() != spec.particle_dim() {
        return Err(Error::shape(
            "particle file",
            format!("particle dim {} != architecture dim {}", particles.dim(), spec.particle_dim()),
        ));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<std::fs::File>, text: String| -> Result<()> {
        out.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    };
    write(
        &mut out,
        format!(
            "pacpfl-particles k={} d_phi={} spec={:016x}\n",
            particles.len(),
            particles.dim(),
            spec.fingerprint()
        ),
    )?;
    for row in particles.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        write(&mut out, cells.join(" ") + "\n")?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read a particle set back, verifying the header against the current
/// architecture.
pub fn read_particles(path: &Path, spec: &GpPriorSpec) -> Result<ParticleSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| Error::io(path, e))?
        .ok_or_else(|| Error::protocol(format!("{}: empty particle file", path.display())))?;

    let mut k = None;
    let mut d = None;
    let mut hash = None;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("pacpfl-particles") {
        return Err(Error::protocol(format!("{}: not a particle file", path.display())));
    }
    for field in fields {
        match field.split_once('=') {
            Some(("k", v)) => k = v.parse::<usize>().ok(),
            Some(("d_phi", v)) => d = v.parse::<usize>().ok(),
            Some(("spec", v)) => hash = u64::from_str_radix(v, 16).ok(),
            _ => {}
        }
    }
    let (Some(k), Some(d), Some(hash)) = (k, d, hash) else {
        return Err(Error::protocol(format!("{}: malformed particle header: {header}", path.display())));
    };
    if hash != spec.fingerprint() {
        return Err(Error::protocol(format!(
            "{}: particle file was trained with a different architecture (spec {hash:016x}, expected {:016x})",
            path.display(),
            spec.fingerprint()
        )));
    }
    if d != spec.particle_dim() {
        return Err(Error::protocol(format!(
            "{}: particle dimension {d} does not match the architecture's {}",
            path.display(),
            spec.particle_dim()
        )));
    }

    let mut rows = Vec::with_capacity(k);
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|cell| {
                cell.parse::<f64>().map_err(|_| {
                    Error::protocol(format!("{}: particle row {idx}: bad value {cell:?}", path.display()))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != d {
            return Err(Error::protocol(format!(
                "{}: particle row {idx} has {} values, expected {d}",
                path.display(),
                values.len()
            )));
        }
        rows.push(FlatParams::new(values).map_err(|e| e.with_particle(idx))?);
    }
    if rows.len() != k {
        return Err(Error::protocol(format!(
            "{}: particle file declares k={k} but holds {} rows",
            path.display(),
            rows.len()
        )));
    }
    ParticleSet::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_client, ModeConfig, TaskDistributionConfig};
    use crate::gp::lml_gradient;

    fn toy_spec() -> GpPriorSpec {
        GpPriorSpec::symmetric(1, 1, 3, 2).unwrap()
    }

    fn toy_config(seed: u64) -> TaskDistributionConfig {
        TaskDistributionConfig {
            modes: vec![ModeConfig {
                poly_coeffs: vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
                se_length_scale: 1.0,
                se_output_scale: 0.3,
                weight: 1.0,
            }],
            noise_std: 0.1,
            x_range: (-2.0, 2.0),
            seed,
        }
    }

    fn toy_clients(n: usize, m: usize) -> Vec<ClientDataset> {
        (0..n).map(|i| generate_client(&toy_config(0), m, 0, 0, 100 + i as u64).unwrap()).collect()
    }

    fn toy_prior(dim: usize, variance: f64) -> HyperPrior {
        HyperPrior::new(vec![0.0; dim], variance).unwrap()
    }

    fn message(client_id: usize, grads: &[&[f64]]) -> GradientMessage {
        GradientMessage {
            client_id,
            round: 1,
            grads: grads.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn aggregate_matches_hand_average() {
        let m1 = message(0, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let m2 = message(3, &[&[5.0, -2.0], &[1.0, 0.0]]);
        let mean = aggregate(&[m1, m2], 2).unwrap();
        assert_eq!(mean, vec![vec![3.0, 0.0], vec![2.0, 2.0]]);
    }

    #[test]
    fn aggregate_of_identical_messages_is_any_single_message() {
        let m = message(0, &[&[0.5, -1.5]]);
        let mean = aggregate(&[m.clone(), m.clone(), m.clone()], 3).unwrap();
        assert_eq!(mean, m.grads);
    }

    #[test]
    fn aggregate_rejects_wrong_message_count() {
        let m = message(0, &[&[1.0]]);
        let err = aggregate(&[m], 2).err().expect("protocol violation");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn full_batch_client_update_equals_the_exact_gradient() {
        let spec = toy_spec();
        let clients = toy_clients(1, 6);
        let phi = toy_prior(spec.particle_dim(), 0.25).sample(&mut stream_rng(9, 0));
        let particles = ParticleSet::new(vec![phi.clone()]).unwrap();
        let mut rng = stream_rng(1, 7);
        let (msg, _) = client_update(&spec, &clients[0], &particles, 6, &mut rng, 0, 1).unwrap();
        let exact = lml_gradient(&spec, &phi, &clients[0].x, &clients[0].y).unwrap();
        assert_eq!(msg.grads[0], exact, "b = m must reproduce the full-data gradient bit for bit");
    }

    #[test]
    fn client_update_is_deterministic_in_the_rng_state() {
        let spec = toy_spec();
        let clients = toy_clients(1, 8);
        let particles = toy_prior(spec.particle_dim(), 0.25).sample_set(2, &mut stream_rng(5, 0)).unwrap();
        let rng = stream_rng(12, 3);
        let (a, la) = client_update(&spec, &clients[0], &particles, 3, &mut rng.clone(), 0, 1).unwrap();
        let (b, lb) = client_update(&spec, &clients[0], &particles, 3, &mut rng.clone(), 0, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }

    #[test]
    fn multi_particle_update_rows_match_single_particle_updates() {
        let spec = toy_spec();
        let clients = toy_clients(1, 8);
        let particles = toy_prior(spec.particle_dim(), 0.25).sample_set(2, &mut stream_rng(5, 0)).unwrap();
        let rng = stream_rng(21, 4);
        let (both, _) = client_update(&spec, &clients[0], &particles, 4, &mut rng.clone(), 0, 1).unwrap();
        for (kappa, phi) in particles.rows().iter().enumerate() {
            let one = ParticleSet::new(vec![phi.clone()]).unwrap();
            // A fresh clone replays the identical batch draw.
            let (single, _) = client_update(&spec, &clients[0], &one, 4, &mut rng.clone(), 0, 1).unwrap();
            assert_eq!(both.grads[kappa], single.grads[0], "particle {kappa} row must be independent");
        }
    }

    #[test]
    fn dp_clips_an_oversized_row_to_exactly_gamma() {
        let dp = DpConfig { enabled: true, epsilon: 1e30, clip_norm: 1.0 };
        // Row norm 2 with gamma 1: clipped by factor 2.
        let m = message(0, &[&[1.2, 1.6]]);
        let out = dp_sanitize(&[m], &dp, 1, 1, &mut stream_rng(0, DP_STREAM)).unwrap();
        let norm = out[0].iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9, "clipped norm must be exactly gamma, got {norm}");
        assert!((out[0][0] - 0.6).abs() < 1e-9);
        assert!((out[0][1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn dp_with_extreme_limits_is_a_no_op() {
        let dp = DpConfig { enabled: true, epsilon: 1e30, clip_norm: 1e18 };
        let m1 = message(0, &[&[1.0, -2.0]]);
        let m2 = message(1, &[&[3.0, 4.0]]);
        let plain = aggregate(&[m1.clone(), m2.clone()], 2).unwrap();
        let sanitized = dp_sanitize(&[m1, m2], &dp, 100, 2, &mut stream_rng(0, DP_STREAM)).unwrap();
        for (a, b) in plain[0].iter().zip(&sanitized[0]) {
            assert!((a - b).abs() < 1e-6, "huge gamma and epsilon must act like plain averaging");
        }
    }

    #[test]
    fn laplace_noise_matches_its_moments() {
        let mut rng = stream_rng(3, DP_STREAM);
        let scale = 0.7;
        let n = 10_000;
        let draws: Vec<f64> = (0..n).map(|_| laplace(&mut rng, scale)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let abs_mean = draws.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        // Laplace std is scale * sqrt(2); 3 standard errors around 0.
        let se = scale * 2.0f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "noise mean {mean} too far from 0");
        assert!(
            (abs_mean - scale).abs() / scale < 0.05,
            "mean |noise| must sit within 5% of the scale: {abs_mean} vs {scale}"
        );
    }

    #[test]
    fn doubling_epsilon_halves_every_noise_coordinate_exactly() {
        let base = DpConfig { enabled: true, epsilon: 0.5, clip_norm: 1.0 };
        let doubled = DpConfig { epsilon: 1.0, ..base };
        // Zero gradients isolate the noise.
        let zeros = message(0, &[&[0.0; 6]]);
        let a = dp_sanitize(&[zeros.clone()], &base, 10, 1, &mut stream_rng(2, DP_STREAM)).unwrap();
        let b = dp_sanitize(&[zeros], &doubled, 10, 1, &mut stream_rng(2, DP_STREAM)).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert_eq!(*x, 2.0 * y, "same stream, double budget: noise must halve exactly");
        }
    }

    #[test]
    fn client_selection_is_unbiased_and_without_replacement() {
        let mut rng = stream_rng(8, SELECT_STREAM);
        let (n, c, rounds) = (8usize, 2usize, 2000usize);
        let mut counts = vec![0usize; n];
        for _ in 0..rounds {
            let chosen = select_clients(&mut rng, n, c).unwrap();
            assert_eq!(chosen.len(), c);
            assert!(chosen.windows(2).all(|w| w[0] < w[1]), "sorted and distinct: {chosen:?}");
            for i in chosen {
                counts[i] += 1;
            }
        }
        let expected = (rounds * c / n) as f64;
        let tol = 4.0 * expected.sqrt();
        for (i, &count) in counts.iter().enumerate() {
            assert!(
                (count as f64 - expected).abs() < tol,
                "client {i} selected {count} times, expected {expected} +- {tol}"
            );
        }
    }

    #[test]
    fn zero_step_run_returns_the_hyper_prior_samples() {
        let spec = toy_spec();
        let clients = toy_clients(3, 5);
        let prior = toy_prior(spec.particle_dim(), 0.25);
        let cfg = RoundConfig {
            rounds: 1,
            clients_per_round: 2,
            batch_size: 5,
            eta: 0.0,
            seed: 44,
            particles: 3,
            eta_half_life: None,
        };
        let (particles, log) = run_federated(&spec, &clients, &prior, &cfg, 0.5, None).unwrap();
        let expected = prior.sample_set(3, &mut stream_rng(44, INIT_STREAM)).unwrap();
        assert_eq!(particles, expected, "eta = 0 must leave the initialization untouched");
        assert_eq!(log.records.len(), 3);
        assert_eq!(log.selection_counts(3).iter().sum::<usize>(), 2);
    }

    #[test]
    fn fixed_seed_reproduces_particles_and_log_bit_for_bit() {
        let spec = toy_spec();
        let clients = toy_clients(4, 6);
        let prior = toy_prior(spec.particle_dim(), 0.25);
        let cfg = RoundConfig {
            rounds: 3,
            clients_per_round: 2,
            batch_size: 4,
            eta: 0.01,
            seed: 7,
            particles: 2,
            eta_half_life: None,
        };
        let (p1, l1) = run_federated(&spec, &clients, &prior, &cfg, 0.5, None).unwrap();
        let (p2, l2) = run_federated(&spec, &clients, &prior, &cfg, 0.5, None).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn single_particle_wide_prior_follows_the_total_lml_gradient() {
        // One particle, full participation, full batches, and a nearly
        // flat hyper-prior: each SVGD step must align with the gradient
        // of sum_i ln Z_i — at every round, not only the first.
        let spec = toy_spec();
        let clients = toy_clients(3, 6);
        let prior = toy_prior(spec.particle_dim(), 1e6);
        let cfg = RoundConfig {
            rounds: 4,
            clients_per_round: 3,
            batch_size: 6,
            eta: 0.05,
            seed: 13,
            particles: 1,
            eta_half_life: None,
        };
        let tau = 0.5;
        // Start from a moderate particle (a draw from the wide prior
        // would saturate every activation); the wide prior only needs to
        // make the score's prior term negligible.
        let mut state = TrainerState {
            particles: toy_prior(spec.particle_dim(), 0.25)
                .sample_set(1, &mut stream_rng(13, INIT_STREAM))
                .unwrap(),
            select_rng: stream_rng(13, SELECT_STREAM),
            dp_rng: stream_rng(13, DP_STREAM),
            client_rngs: (0..3).map(|i| stream_rng(13, CLIENT_STREAM_BASE + i)).collect(),
        };
        for t in 0..cfg.rounds {
            let before = state.particles.rows()[0].as_slice().to_vec();
            let mut total = vec![0.0; spec.particle_dim()];
            for client in &clients {
                let g = lml_gradient(&spec, &before, &client.x, &client.y).unwrap();
                for (a, b) in total.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            execute_round(&spec, &clients, &prior, &cfg, tau, None, &mut state, t).unwrap();
            let after = state.particles.rows()[0].as_slice().to_vec();
            let step: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
            let dot: f64 = step.iter().zip(&total).map(|(s, g)| s * g).sum();
            let ns = step.iter().map(|s| s * s).sum::<f64>().sqrt();
            let ng = total.iter().map(|g| g * g).sum::<f64>().sqrt();
            let cosine = dot / (ns * ng);
            assert!(cosine > 0.99, "round {t}: update direction cosine {cosine} too low");
        }
    }

    #[test]
    fn round_log_csv_has_one_row_per_client_per_round() {
        let spec = toy_spec();
        let clients = toy_clients(3, 5);
        let prior = toy_prior(spec.particle_dim(), 0.25);
        let cfg = RoundConfig {
            rounds: 2,
            clients_per_round: 1,
            batch_size: 3,
            eta: 0.01,
            seed: 5,
            particles: 2,
            eta_half_life: None,
        };
        let (_, log) = run_federated(&spec, &clients, &prior, &cfg, 0.3, None).unwrap();
        assert_eq!(log.records.len(), 6);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rounds.csv");
        log.write_csv(&path).unwrap();
        let mut reader = csv::Reader::from_path(&path).unwrap();
        assert_eq!(
            reader.headers().unwrap(),
            &csv::StringRecord::from(vec!["round", "client_id", "batch_lml_mean", "grad_norm", "selected"])
        );
        let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 6);
        let selected: u32 = rows.iter().map(|r| r[4].parse::<u32>().unwrap()).sum();
        assert_eq!(selected, 2, "one selected client per round over two rounds");
        // Unselected rows leave the metric cells empty.
        let empty = rows.iter().find(|r| &r[4] == "0").unwrap();
        assert_eq!(&empty[2], "");
        assert_eq!(&empty[3], "");
    }

    #[test]
    fn eta_decay_halves_the_step_after_the_half_life() {
        let cfg = RoundConfig {
            rounds: 100,
            clients_per_round: 1,
            batch_size: 1,
            eta: 0.2,
            seed: 0,
            particles: 1,
            eta_half_life: Some(10.0),
        };
        assert_eq!(cfg.eta_at(0), 0.2);
        assert!((cfg.eta_at(10) - 0.1).abs() < 1e-15);
        assert!((cfg.eta_at(30) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn train_vanilla_with_zero_eta_returns_the_initialization() {
        let spec = toy_spec();
        let clients = toy_clients(1, 5);
        let init = toy_prior(spec.particle_dim(), 0.25).sample(&mut stream_rng(2, 0));
        let out = train_vanilla(&spec, &clients[0].x, &clients[0].y, init.clone(), 50, 0.0, true).unwrap();
        assert_eq!(out, init);
    }

    #[test]
    fn train_vanilla_does_not_decrease_the_objective() {
        let spec = toy_spec();
        let clients = toy_clients(1, 8);
        let init = toy_prior(spec.particle_dim(), 0.25).sample(&mut stream_rng(3, 0));
        let before = gp::log_marginal_likelihood(&spec, &init, &clients[0].x, &clients[0].y).unwrap();
        let out = train_vanilla(&spec, &clients[0].x, &clients[0].y, init, 40, 1e-3, false).unwrap();
        let after = gp::log_marginal_likelihood(&spec, &out, &clients[0].x, &clients[0].y).unwrap();
        assert!(after >= before, "small-step ascent must not lose likelihood: {after} < {before}");
    }

    #[test]
    fn train_vanilla_recovers_the_noise_scale_of_generated_data() {
        // Data drawn from the model itself at a known particle; after
        // training from a perturbed start, the learned noise std must
        // land within 50% of the truth.
        use rand_distr::StandardNormal;
        let spec = GpPriorSpec::symmetric(1, 0, 0, 1).unwrap();
        let dim = spec.particle_dim();
        let mut truth = FlatParams::zeros(dim).into_vec();
        // Feature net: weight 1, bias 0 -> unit-length-scale kernel.
        // Mean net: zero map. Noise std 0.3.
        let true_sigma = 0.3f64;
        truth[dim - 1] = true_sigma.ln();
        {
            // The feature net owns the second parameter block; set its
            // single weight to 1 by probing the split layout.
            let spec_ref = &spec;
            let mean_len = {
                let (mean, _, _) = spec_ref.split(&truth).unwrap();
                mean.len()
            };
            truth[mean_len] = 1.0;
        }
        let truth = FlatParams::new(truth).unwrap();

        let mut rng = stream_rng(31, 0);
        let m = 200;
        let x: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.gen_range(-3.0..3.0)]).collect();
        // Draw y from the GP: mean 0, cov K + sigma^2 I.
        let mut k = nalgebra::DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                k[(i, j)] = gp::se_deep_kernel(&spec, &truth, &x[i], &x[j]).unwrap();
            }
            k[(i, i)] += true_sigma * true_sigma;
        }
        let (chol, _) = gp::cholesky_with_jitter(&k, gp::DEFAULT_JITTER).unwrap();
        let z = nalgebra::DMatrix::from_fn(m, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (chol.l() * z).iter().copied().collect();

        let mut start = truth.clone().into_vec();
        start[dim - 1] = (true_sigma * 3.0).ln(); // begin 3x off
        let start = FlatParams::new(start).unwrap();
        let out = train_vanilla(&spec, &x, &y, start, 60, 0.05, true).unwrap();
        let learned = spec.noise_std(&out).unwrap();
        assert!(
            (learned - true_sigma).abs() / true_sigma < 0.5,
            "learned noise std {learned} must land within 50% of {true_sigma}"
        );
    }

    #[test]
    fn personalize_conditions_on_train_and_personal_splits() {
        let spec = toy_spec();
        let mut client = toy_clients(1, 6).remove(0);
        client.x_personal = vec![vec![0.5], vec![-0.5]];
        client.y_personal = vec![0.2, -0.1];
        let particles = toy_prior(spec.particle_dim(), 0.25).sample_set(2, &mut stream_rng(6, 0)).unwrap();
        let personalized = personalize(&spec, &client, &particles).unwrap();

        let (x_union, y_union) = client.personalization_data();
        let direct = MixturePredictor::new(&spec, particles.rows(), &x_union, &y_union).unwrap();
        let a = personalized.predict(&[0.3]).unwrap();
        let b = direct.predict(&[0.3]).unwrap();
        assert_eq!(a, b, "personalization is conditioning on the union split");

        // m_tilde = 0 degenerates to the training split alone.
        client.x_personal.clear();
        client.y_personal.clear();
        let plain = personalize(&spec, &client, &particles).unwrap();
        let reference = MixturePredictor::new(&spec, particles.rows(), &client.x, &client.y).unwrap();
        assert_eq!(plain.predict(&[0.3]).unwrap(), reference.predict(&[0.3]).unwrap());
    }

    #[test]
    fn particle_file_round_trips_bit_for_bit() {
        let spec = toy_spec();
        let particles = toy_prior(spec.particle_dim(), 0.25).sample_set(3, &mut stream_rng(15, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("particles.txt");
        write_particles(&path, &particles, &spec).unwrap();
        let back = read_particles(&path, &spec).unwrap();
        assert_eq!(back, particles, "text round trip must preserve every bit");
    }

    #[test]
    fn particle_file_rejects_a_different_architecture() {
        let spec = toy_spec();
        let particles = toy_prior(spec.particle_dim(), 0.25).sample_set(2, &mut stream_rng(16, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("particles.txt");
        write_particles(&path, &particles, &spec).unwrap();
        let other = GpPriorSpec::symmetric(1, 2, 4, 2).unwrap();
        let err = read_particles(&path, &other).err().expect("fingerprint mismatch");
        assert!(err.to_string().contains("architecture"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn particle_file_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.txt");
        std::fs::write(&path, "not a particle file\n1 2 3\n").unwrap();
        assert!(read_particles(&path, &toy_spec()).is_err());
    }
}
