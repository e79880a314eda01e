//! Experiment orchestration behind the CLI: the four commands.
//!
//! `cmd_generate` materializes a synthetic federation as per-client CSV
//! files plus a manifest; `cmd_train` dispatches on the experiment mode
//! (federated SVGD, its differentially private variant, the forced
//! single-particle wide-prior variant, per-client gradient ascent, or a
//! single pooled model) and writes the particle file, round log, and a
//! bound report; `cmd_evaluate` personalizes every client and writes
//! per-client and per-group metric tables; `cmd_bounds` recomputes the
//! term-by-term bound audit for an existing (or freshly drawn) particle
//! set.
//!
//! Every command is a pure function of (config, files on disk): re-running
//! with the same config and seed reproduces each output byte-for-byte.
//! Existing outputs are never overwritten unless `force` is set.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::data::{self, ClientDataset, FederationDataset};
use crate::error::{Error, Result};
use crate::fed::{self, RoundConfig, RoundLog};
use crate::gp::{self, GpPriorSpec, MixturePrediction, MixturePredictor};
use crate::metrics::{self, Summary};
use crate::pacbayes::{self, BoundContext, NewClientBoundTerms, NonVacuousReport, ServerBoundTerms};
use crate::svgd::{HyperPrior, ParticleSet};
use crate::util;

pub const PARTICLES_FILE: &str = "particles.txt";
pub const ROUND_LOG_FILE: &str = "round_log.csv";
pub const BOUNDS_FILE: &str = "bounds.toml";
pub const CLIENT_METRICS_FILE: &str = "metrics_clients.csv";
pub const SUMMARY_METRICS_FILE: &str = "metrics_summary.csv";
pub const DATA_DIR: &str = "data";
pub const MANIFEST_FILE: &str = "manifest.toml";
/// Target column name used for generated CSV files.
pub const TARGET_COLUMN: &str = "y";

// Random streams owned by the orchestrator. The fed module reserves
// streams 0..16+n for the protocol itself; the orchestrator draws from a
// disjoint range so adding clients never perturbs these sources.
const ZS_STREAM: u64 = 1 << 32;
const PRIOR_DRAW_STREAM: u64 = (1 << 32) + 1;
const BASELINE_STREAM_BASE: u64 = 1 << 33;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::AlreadyExists { path: path.to_path_buf() });
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// On-disk index of a generated (or externally supplied) federation:
/// the target column plus, per client, the CSV files whose rows are
/// unioned into that client's dataset.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    target_column: String,
    clients: Vec<ManifestClient>,
    #[serde(default)]
    new_clients: Vec<ManifestClient>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestClient {
    files: Vec<String>,
}

#[derive(Debug)]
pub struct GenerateReport {
    pub data_dir: PathBuf,
    pub manifest_path: PathBuf,
    pub files_written: usize,
}

/// Write the synthetic federation to disk: one CSV per client per
/// non-empty split, plus a manifest naming them. Data is written
/// unstandardized; standardization is a load-time transform so the files
/// stay in the units the task distribution produced them in.
pub fn cmd_generate(config: &ExperimentConfig, force: bool) -> Result<GenerateReport> {
    config.validate()?;
    let task = config.data.task.as_ref().ok_or_else(|| {
        Error::config("data.task", "generate needs a synthetic task; manifest data is already on disk")
    })?;
    let dataset = data::generate_polynomial(
        task,
        config.data.n_clients,
        config.data.n_new_clients,
        config.data.m_train,
        config.data.m_test,
        false,
    )?;
    let data_dir = config.run_dir().join(DATA_DIR);
    let manifest_path = data_dir.join(MANIFEST_FILE);
    refuse_existing(&manifest_path, force)?;
    create_dir(&data_dir)?;

    let mut files_written = 0;
    let mut clients = Vec::with_capacity(dataset.existing.len());
    for (i, client) in dataset.existing.iter().enumerate() {
        let mut files = Vec::new();
        let train = ClientDataset { x: client.x.clone(), y: client.y.clone(), ..ClientDataset::default() };
        files.push(write_split(&data_dir, &format!("client_{i:02}_train.csv"), &train)?);
        let test = ClientDataset {
            x_test: client.x_test.clone(),
            y_test: client.y_test.clone(),
            ..ClientDataset::default()
        };
        files.push(write_split(&data_dir, &format!("client_{i:02}_test.csv"), &test)?);
        files_written += files.len();
        clients.push(ManifestClient { files });
    }
    let mut new_clients = Vec::with_capacity(dataset.new.len());
    for (j, client) in dataset.new.iter().enumerate() {
        let mut files = Vec::new();
        let personal = ClientDataset {
            x_personal: client.x_personal.clone(),
            y_personal: client.y_personal.clone(),
            ..ClientDataset::default()
        };
        files.push(write_split(&data_dir, &format!("new_{j:02}_personal.csv"), &personal)?);
        let test = ClientDataset {
            x_test: client.x_test.clone(),
            y_test: client.y_test.clone(),
            ..ClientDataset::default()
        };
        files.push(write_split(&data_dir, &format!("new_{j:02}_test.csv"), &test)?);
        files_written += files.len();
        new_clients.push(ManifestClient { files });
    }

    let manifest = Manifest { target_column: TARGET_COLUMN.to_string(), clients, new_clients };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::protocol(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(GenerateReport { data_dir, manifest_path, files_written })
}

fn write_split(dir: &Path, name: &str, part: &ClientDataset) -> Result<String> {
    data::save_csv(&dir.join(name), part, TARGET_COLUMN)?;
    Ok(name.to_string())
}

/// Assemble the federation the other commands run on: regenerate the
/// synthetic task in memory, or load the CSV files a manifest names.
fn load_federation(config: &ExperimentConfig) -> Result<FederationDataset> {
    if let Some(task) = &config.data.task {
        return data::generate_polynomial(
            task,
            config.data.n_clients,
            config.data.n_new_clients,
            config.data.m_train,
            config.data.m_test,
            config.data.standardize,
        );
    }
    let manifest_path = config
        .data
        .manifest
        .as_ref()
        .expect("config validation enforces task xor manifest");
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| Error::config(manifest_path.display().to_string(), e.message()))?;
    if manifest.clients.is_empty() {
        return Err(Error::config("data.manifest", "manifest lists no clients"));
    }
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let n = manifest.clients.len();
    let mut existing = Vec::with_capacity(n);
    let mut new = Vec::with_capacity(manifest.new_clients.len());
    let mut standardization = Vec::new();
    for (idx, entry) in manifest.clients.iter().chain(&manifest.new_clients).enumerate() {
        let mut merged = ClientDataset::default();
        for name in &entry.files {
            let part = data::load_csv(&base.join(name), &manifest.target_column)?;
            merge_into(&mut merged, part);
        }
        merged.validate().map_err(|e| e.with_client(idx))?;
        let prepared = if config.data.standardize {
            let (ds, params) = data::standardize(&merged).map_err(|e| e.with_client(idx))?;
            standardization.push(params);
            ds
        } else {
            merged
        };
        if idx < n {
            existing.push(prepared);
        } else {
            new.push(prepared);
        }
    }
    Ok(FederationDataset { existing, new, standardization })
}

fn merge_into(target: &mut ClientDataset, part: ClientDataset) {
    target.x.extend(part.x);
    target.y.extend(part.y);
    target.x_personal.extend(part.x_personal);
    target.y_personal.extend(part.y_personal);
    target.x_test.extend(part.x_test);
    target.y_test.extend(part.y_test);
}

fn check_dataset_dims(spec: &GpPriorSpec, dataset: &FederationDataset) -> Result<()> {
    for (i, client) in dataset.existing.iter().chain(&dataset.new).enumerate() {
        if let Some(d) = client.input_dim() {
            if d != spec.input_dim() {
                return Err(Error::shape(
                    "data",
                    format!("client features have dimension {d} but the model expects {}", spec.input_dim()),
                )
                .with_client(i));
            }
        }
    }
    Ok(())
}

/// The schedule and hyper-prior a mode actually runs with. The forced
/// single-particle wide-prior variant overrides both; every other mode
/// uses the config as written.
fn effective_setup(
    config: &ExperimentConfig,
    spec: &GpPriorSpec,
    warnings: &mut Vec<String>,
) -> Result<(RoundConfig, HyperPrior)> {
    let mut fed_cfg = config.fed.clone();
    let base = config.hyper_prior.build(spec)?;
    if config.mode == Mode::PfedgpMode {
        if fed_cfg.particles != 1 {
            warnings.push(format!(
                "pfedgp_mode forces a single particle (config asked for {})",
                fed_cfg.particles
            ));
            fed_cfg.particles = 1;
        }
        if config.hyper_prior.variance != 1e6 {
            warnings.push(format!(
                "pfedgp_mode forces hyper-prior variance 1e6 (config asked for {})",
                config.hyper_prior.variance
            ));
        }
        let prior = HyperPrior::new(base.mean.clone(), 1e6)?;
        return Ok((fed_cfg, prior));
    }
    Ok((fed_cfg, base))
}

/// Bound context for the existing clients: `beta` is the mean training
/// count, future counts come from the personalization splits.
fn bound_context(config: &ExperimentConfig, dataset: &FederationDataset) -> Result<BoundContext> {
    let m = dataset.training_counts();
    let m_tilde: Vec<usize> = dataset.existing.iter().map(ClientDataset::num_personal).collect();
    let beta = m.iter().sum::<usize>() as f64 / m.len().max(1) as f64;
    BoundContext::new(
        m,
        m_tilde,
        beta,
        config.bounds.lambda,
        config.bounds.upsilon,
        config.bounds.delta,
        config.bounds.loss_window,
    )
}

#[derive(Debug)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub particle_path: PathBuf,
    pub round_log_path: PathBuf,
    pub bounds_path: PathBuf,
    pub particles: ParticleSet,
    pub bounds: BoundsReport,
    pub warnings: Vec<String>,
}

/// Train under the configured mode and write the particle file, the
/// round log, and the bound report.
pub fn cmd_train(config: &ExperimentConfig, force: bool) -> Result<TrainReport> {
    config.validate()?;
    let spec = config.model.to_spec()?;
    let dataset = load_federation(config)?;
    check_dataset_dims(&spec, &dataset)?;

    let run_dir = config.run_dir();
    let particle_path = run_dir.join(PARTICLES_FILE);
    let round_log_path = run_dir.join(ROUND_LOG_FILE);
    let bounds_path = run_dir.join(BOUNDS_FILE);
    refuse_existing(&particle_path, force)?;
    refuse_existing(&round_log_path, force)?;
    refuse_existing(&bounds_path, force)?;
    create_dir(&run_dir)?;

    let mut warnings = Vec::new();
    let (fed_cfg, hyper_prior) = effective_setup(config, &spec, &mut warnings)?;
    let (particles, log) = match config.mode {
        Mode::Pacpfl | Mode::PfedgpMode => {
            let tau = bound_context(config, &dataset)?.tau();
            fed::run_federated(&spec, &dataset.existing, &hyper_prior, &fed_cfg, tau, None)?
        }
        Mode::PacpflDp => {
            let tau = bound_context(config, &dataset)?.tau();
            fed::run_federated(&spec, &dataset.existing, &hyper_prior, &fed_cfg, tau, Some(&config.dp))?
        }
        Mode::Vanilla => train_vanilla_mode(config, &spec, &dataset, &hyper_prior, &mut warnings)?,
        Mode::Pooled => train_pooled_mode(config, &spec, &dataset, &hyper_prior, &mut warnings)?,
    };

    fed::write_particles(&particle_path, &particles, &spec)?;
    log.write_csv(&round_log_path)?;
    let bounds = compute_bounds_report(
        config,
        &spec,
        &dataset,
        &particles,
        &hyper_prior,
        particle_path.display().to_string(),
    )?;
    write_bounds(&bounds_path, &bounds)?;
    Ok(TrainReport { run_dir, particle_path, round_log_path, bounds_path, particles, bounds, warnings })
}

/// Independent gradient ascent per client; the particle file carries one
/// row per existing client, in client order.
fn train_vanilla_mode(
    config: &ExperimentConfig,
    spec: &GpPriorSpec,
    dataset: &FederationDataset,
    prior: &HyperPrior,
    warnings: &mut Vec<String>,
) -> Result<(ParticleSet, RoundLog)> {
    warnings.push(
        "vanilla ignores fed.clients_per_round, fed.batch_size, fed.particles, and fed.eta_half_life; \
         fed.rounds and fed.eta become per-client epochs and step size"
            .to_string(),
    );
    let mut rows = Vec::with_capacity(dataset.existing.len());
    for (i, client) in dataset.existing.iter().enumerate() {
        let mut rng = stream_rng(config.fed.seed, BASELINE_STREAM_BASE + i as u64);
        let init = prior.sample(&mut rng);
        let phi = fed::train_vanilla(spec, &client.x, &client.y, init, config.fed.rounds, config.fed.eta, true)
            .map_err(|e| e.with_client(i))?;
        rows.push(phi);
    }
    Ok((ParticleSet::new(rows)?, RoundLog::default()))
}

/// One model fitted to the concatenation of every existing client's
/// training data; the particle file carries a single row.
fn train_pooled_mode(
    config: &ExperimentConfig,
    spec: &GpPriorSpec,
    dataset: &FederationDataset,
    prior: &HyperPrior,
    warnings: &mut Vec<String>,
) -> Result<(ParticleSet, RoundLog)> {
    warnings.push(
        "pooled ignores fed.clients_per_round, fed.batch_size, fed.particles, and fed.eta_half_life; \
         fed.rounds and fed.eta become epochs and step size"
            .to_string(),
    );
    let (x, y) = pooled_training_data(&dataset.existing);
    if y.len() > 2000 {
        warnings.push(format!("pooled fits one GP to {} samples; expect cubic cost per epoch", y.len()));
    }
    let mut rng = stream_rng(config.fed.seed, BASELINE_STREAM_BASE);
    let init = prior.sample(&mut rng);
    let phi = fed::train_vanilla(spec, &x, &y, init, config.fed.rounds, config.fed.eta, true)?;
    Ok((ParticleSet::new(vec![phi])?, RoundLog::default()))
}

fn pooled_training_data(clients: &[ClientDataset]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for client in clients {
        x.extend(client.x.iter().cloned());
        y.extend(client.y.iter().cloned());
    }
    (x, y)
}

/// Term-by-term audit of every bound the trained (or supplied) particle
/// set supports, written as the `bounds.toml` artifact.
///
/// The KL between the particle approximation and the hyper-prior has no
/// closed form, so the report uses the cross-entropy surrogate
/// `mean_kappa[-ln P(phi_kappa)]`, which drops the unknown entropy of the
/// particle cloud; the field name says so. The new-client partition value
/// `ln Z^S` is importance-sampled from the hyper-prior with
/// `bounds.zs_samples` draws.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    /// Particle provenance: a file path, or `hyper-prior draw` when no
    /// trained particles were available.
    pub source: String,
    pub mode: String,
    pub n: usize,
    pub n2: usize,
    pub beta: f64,
    pub lambda: f64,
    pub upsilon: f64,
    pub delta: f64,
    pub tau: f64,
    pub loss_window: (f64, f64),
    pub sample_counts: Vec<usize>,
    pub future_counts: Vec<usize>,
    /// Per-client privacy leakage `epsilon_i`.
    pub epsilons: Vec<f64>,
    /// Per-client information penalties `I(epsilon_i, m_i, delta)`.
    pub information_penalties: Vec<f64>,
    /// Per-client posterior-shift radii `Delta_i`.
    pub posterior_shifts: Vec<f64>,
    /// Per-client risk certificates at `beta_i = m_i` under the uniform
    /// particle mixture.
    pub client_bounds: Vec<f64>,
    /// `mean_kappa[-ln Z_i(phi_kappa)]` per client.
    pub avg_neg_log_z: Vec<f64>,
    pub kl_hyper_surrogate: f64,
    /// Importance-sampled `ln Z^S`.
    pub log_z_server: f64,
    /// Mean per-sample predictive NLL after clamping to the loss window,
    /// over every existing client's training points.
    pub clipped_nll_mean: f64,
    /// Fraction of those NLL evaluations that fell outside the window.
    pub clip_fraction: f64,
    pub server: ServerBoundTerms,
    pub new_client: NewClientBoundTerms,
    pub nonvacuous: NonVacuousReport,
}

fn compute_bounds_report(
    config: &ExperimentConfig,
    spec: &GpPriorSpec,
    dataset: &FederationDataset,
    particles: &ParticleSet,
    hyper_prior: &HyperPrior,
    source: String,
) -> Result<BoundsReport> {
    let ctx = bound_context(config, dataset)?;
    let n = ctx.n();
    let k = particles.len();

    let mut log_z = vec![vec![0.0; n]; k];
    for (kappa, phi) in particles.rows().iter().enumerate() {
        for (i, client) in dataset.existing.iter().enumerate() {
            log_z[kappa][i] = gp::log_marginal_likelihood(spec, phi, &client.x, &client.y)
                .map_err(|e| e.with_particle(kappa).with_client(i))?;
        }
    }
    let avg_neg_log_z: Vec<f64> =
        (0..n).map(|i| log_z.iter().map(|row| -row[i]).sum::<f64>() / k as f64).collect();
    let kl_hyper_surrogate = particles
        .rows()
        .iter()
        .map(|phi| hyper_prior.neg_log_density(phi))
        .sum::<Result<f64>>()?
        / k as f64;

    let tau = ctx.tau();
    let epsilons = ctx.epsilons();
    let information_penalties: Vec<f64> = epsilons
        .iter()
        .zip(ctx.sample_counts())
        .map(|(&eps, &mi)| pacbayes::dp_penalty_i(eps, mi, ctx.delta))
        .collect::<Result<_>>()?;
    let posterior_shifts = ctx.deltas();
    let client_bounds: Vec<f64> = (0..n)
        .map(|i| {
            let m_i = ctx.sample_counts()[i];
            let beta_i = m_i as f64;
            pacbayes::client_bound(
                avg_neg_log_z[i] / beta_i,
                0.0,
                beta_i,
                m_i,
                epsilons[i],
                m_i,
                ctx.delta,
                ctx.loss_range,
            )
        })
        .collect::<Result<_>>()?;

    let server = pacbayes::server_bound_terms(&avg_neg_log_z, kl_hyper_surrogate, &ctx)?;

    let mut rng = stream_rng(config.fed.seed, ZS_STREAM);
    let draws = config.bounds.zs_samples;
    let mut scores = Vec::with_capacity(draws);
    for _ in 0..draws {
        let phi = hyper_prior.sample(&mut rng);
        let mut total = 0.0;
        for (i, client) in dataset.existing.iter().enumerate() {
            total += gp::log_marginal_likelihood(spec, &phi, &client.x, &client.y)
                .map_err(|e| e.with_client(i))?;
        }
        scores.push(tau * total);
    }
    let log_z_server = util::logsumexp(&scores) - (draws as f64).ln();
    let new_client = pacbayes::new_client_bound_terms(log_z_server, &ctx)?;
    let nonvacuous = pacbayes::check_nonvacuous(&ctx);

    let (a, b) = ctx.loss_range;
    let mut clipped_sum = 0.0;
    let mut evaluations = 0usize;
    let mut outside = 0usize;
    for (i, client) in dataset.existing.iter().enumerate() {
        let predictor = fed::personalize(spec, client, particles).map_err(|e| e.with_client(i))?;
        for (xj, &yj) in client.x.iter().zip(&client.y) {
            let pred = predictor.predict(xj).map_err(|e| e.with_client(i))?;
            let nll = metrics::mixture_nll(&pred, yj)?;
            if nll < a || nll > b {
                outside += 1;
            }
            clipped_sum += nll.clamp(a, b);
            evaluations += 1;
        }
    }
    let clipped_nll_mean = if evaluations == 0 { 0.0 } else { clipped_sum / evaluations as f64 };
    let clip_fraction = if evaluations == 0 { 0.0 } else { outside as f64 / evaluations as f64 };

    Ok(BoundsReport {
        source,
        mode: config.mode.as_str().to_string(),
        n,
        n2: ctx.n2(),
        beta: ctx.beta,
        lambda: ctx.lambda,
        upsilon: ctx.upsilon,
        delta: ctx.delta,
        tau,
        loss_window: ctx.loss_range,
        sample_counts: ctx.sample_counts().to_vec(),
        future_counts: ctx.future_counts().to_vec(),
        epsilons,
        information_penalties,
        posterior_shifts,
        client_bounds,
        avg_neg_log_z,
        kl_hyper_surrogate,
        log_z_server,
        clipped_nll_mean,
        clip_fraction,
        server,
        new_client,
        nonvacuous,
    })
}

fn write_bounds(path: &Path, report: &BoundsReport) -> Result<()> {
    let text = toml::to_string_pretty(report)
        .map_err(|e| Error::protocol(format!("bound report serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Human-readable rendering of the bound audit, one line per quantity.
#[must_use]
pub fn format_bounds_report(report: &BoundsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "bound report for mode={} ({})", report.mode, report.source);
    let _ = writeln!(
        out,
        "n = {} clients ({} expecting future data), beta = {}, lambda = {}, upsilon = {}, delta = {}",
        report.n, report.n2, report.beta, report.lambda, report.upsilon, report.delta
    );
    let _ = writeln!(
        out,
        "loss window = [{}, {}], tau = {:.6e}",
        report.loss_window.0, report.loss_window.1, report.tau
    );
    let _ = writeln!(out, "per-client terms:");
    let _ = writeln!(out, "  {:>6} {:>5} {:>5} {:>13} {:>13} {:>13} {:>13}", "client", "m", "m~", "epsilon", "info-penalty", "shift", "bound");
    for i in 0..report.n {
        let _ = writeln!(
            out,
            "  {:>6} {:>5} {:>5} {:>13.6e} {:>13.6e} {:>13.6e} {:>13.6e}",
            i,
            report.sample_counts[i],
            report.future_counts[i],
            report.epsilons[i],
            report.information_penalties[i],
            report.posterior_shifts[i],
            report.client_bounds[i],
        );
    }
    let s = &report.server;
    let _ = writeln!(
        out,
        "server bound: empirical {:.6e} + kl {:.6e} (coefficient {:.6e}) + concentration {:.6e} + posterior-shift {:.6e} + confidence {:.6e} = {:.6e}",
        s.empirical, s.kl_term, s.kl_coefficient, s.concentration, s.delta_term, s.confidence, s.total
    );
    let nc = &report.new_client;
    let _ = writeln!(
        out,
        "new-client bound: partition {:.6e} + concentration {:.6e} + confidence {:.6e} = {:.6e}  (ln Z^S = {:.6e})",
        nc.partition_term, nc.concentration, nc.confidence, nc.total, report.log_z_server
    );
    let _ = writeln!(
        out,
        "kl surrogate (cross-entropy to hyper-prior): {:.6e}",
        report.kl_hyper_surrogate
    );
    let _ = writeln!(
        out,
        "clipped per-sample nll: mean {:.6e}, {:.2}% of evaluations outside the window",
        report.clipped_nll_mean,
        report.clip_fraction * 100.0
    );
    let nv = &report.nonvacuous;
    let verdict = if nv.pass { "PASS" } else { "FAIL" };
    let lambda_limit = match nv.lambda_limit {
        Some(l) => format!("{l:.6e}"),
        None => "none (any lambda qualifies)".to_string(),
    };
    let _ = writeln!(
        out,
        "non-vacuous: {verdict} (range width {} vs 8; epsilon limit {:.6e}; lambda limit {lambda_limit})",
        nv.range_width, nv.epsilon_limit
    );
    out
}

/// Recompute the bound audit for an existing run. `particle_file`
/// overrides the default location; when neither exists the report is
/// computed on a fresh hyper-prior draw of `fed.particles` particles, so
/// the command also works before any training.
pub fn cmd_bounds(config: &ExperimentConfig, particle_file: Option<&Path>, force: bool) -> Result<BoundsReport> {
    config.validate()?;
    let spec = config.model.to_spec()?;
    let dataset = load_federation(config)?;
    check_dataset_dims(&spec, &dataset)?;

    let run_dir = config.run_dir();
    let bounds_path = run_dir.join(BOUNDS_FILE);
    refuse_existing(&bounds_path, force)?;

    let mut warnings = Vec::new();
    let (fed_cfg, hyper_prior) = effective_setup(config, &spec, &mut warnings)?;
    let default_path = run_dir.join(PARTICLES_FILE);
    let (particles, source) = match particle_file {
        Some(path) => (fed::read_particles(path, &spec)?, path.display().to_string()),
        None if default_path.exists() => {
            (fed::read_particles(&default_path, &spec)?, default_path.display().to_string())
        }
        None => {
            let mut rng = stream_rng(config.fed.seed, PRIOR_DRAW_STREAM);
            (hyper_prior.sample_set(fed_cfg.particles, &mut rng)?, "hyper-prior draw".to_string())
        }
    };
    let report = compute_bounds_report(config, &spec, &dataset, &particles, &hyper_prior, source)?;
    create_dir(&run_dir)?;
    write_bounds(&bounds_path, &report)?;
    Ok(report)
}

/// Which split population a metric row describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Existing,
    New,
}

impl Group {
    #[must_use]
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Existing => "existing",
            Group::New => "new",
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
pub struct ClientMetrics {
    pub client_id: usize,
    pub group: Group,
    pub rsmse: f64,
    pub ce: f64,
}

#[derive(Clone, Debug)]
pub struct GroupSummary {
    pub group: Group,
    pub metric: String,
    pub summary: Summary,
}

#[derive(Debug)]
pub struct EvaluateReport {
    pub client_metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub per_client: Vec<ClientMetrics>,
    pub summaries: Vec<GroupSummary>,
}

/// Personalize and score every client on its test split, writing the
/// per-client table and the per-group summary table.
pub fn cmd_evaluate(config: &ExperimentConfig, particle_file: Option<&Path>, force: bool) -> Result<EvaluateReport> {
    config.validate()?;
    let spec = config.model.to_spec()?;
    let dataset = load_federation(config)?;
    check_dataset_dims(&spec, &dataset)?;

    let run_dir = config.run_dir();
    let client_metrics_path = run_dir.join(CLIENT_METRICS_FILE);
    let summary_path = run_dir.join(SUMMARY_METRICS_FILE);
    refuse_existing(&client_metrics_path, force)?;
    refuse_existing(&summary_path, force)?;

    let levels = config.evaluate.calibration_levels;
    let per_client = if config.evaluate.oracle {
        oracle_metrics(config, &dataset, levels)?
    } else {
        let default_path = run_dir.join(PARTICLES_FILE);
        let path = particle_file.unwrap_or(&default_path);
        let particles = fed::read_particles(path, &spec)?;
        model_metrics(config, &spec, &dataset, &particles, levels)?
    };
    let summaries = group_summaries(&per_client)?;

    create_dir(&run_dir)?;
    let client_rows: Vec<Vec<String>> = per_client
        .iter()
        .map(|cm| {
            vec![cm.client_id.to_string(), cm.group.to_string(), cm.rsmse.to_string(), cm.ce.to_string()]
        })
        .collect();
    metrics::write_csv(&client_metrics_path, &["client_id", "group", "rsmse", "ce"], &client_rows)?;
    let summary_rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|gs| {
            let s = &gs.summary;
            vec![
                gs.group.to_string(),
                gs.metric.clone(),
                s.count.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                s.min.to_string(),
                s.q1.to_string(),
                s.median.to_string(),
                s.q3.to_string(),
                s.max.to_string(),
                s.ci_half_width.to_string(),
            ]
        })
        .collect();
    metrics::write_csv(
        &summary_path,
        &["group", "metric", "count", "mean", "std", "min", "q1", "median", "q3", "max", "ci_half_width"],
        &summary_rows,
    )?;
    Ok(EvaluateReport { client_metrics_path, summary_path, per_client, summaries })
}

/// Index every client of the federation: global id, group, dataset.
fn all_clients(dataset: &FederationDataset) -> Vec<(usize, Group, &ClientDataset)> {
    let n = dataset.existing.len();
    dataset
        .existing
        .iter()
        .enumerate()
        .map(|(i, c)| (i, Group::Existing, c))
        .chain(dataset.new.iter().enumerate().map(move |(j, c)| (n + j, Group::New, c)))
        .collect()
}

fn score_predictor(
    predictor: &MixturePredictor,
    client: &ClientDataset,
    levels: usize,
    id: usize,
) -> Result<(f64, f64)> {
    let mut predictions = Vec::with_capacity(client.x_test.len());
    for x in &client.x_test {
        predictions.push(predictor.predict(x).map_err(|e| e.with_client(id))?);
    }
    let means: Vec<f64> = predictions.iter().map(MixturePrediction::mixture_mean).collect();
    let rsmse = metrics::rsmse(&means, &client.y_test)?;
    let ce = metrics::calibration_error_regression(&predictions, &client.y_test, levels)?;
    Ok((rsmse, ce))
}

fn model_metrics(
    config: &ExperimentConfig,
    spec: &GpPriorSpec,
    dataset: &FederationDataset,
    particles: &ParticleSet,
    levels: usize,
) -> Result<Vec<ClientMetrics>> {
    let n = dataset.existing.len();
    let mut out = Vec::new();
    match config.mode {
        Mode::Pacpfl | Mode::PacpflDp | Mode::PfedgpMode => {
            for (id, group, client) in all_clients(dataset) {
                let predictor = fed::personalize(spec, client, particles).map_err(|e| e.with_client(id))?;
                let (rsmse, ce) = score_predictor(&predictor, client, levels, id)?;
                out.push(ClientMetrics { client_id: id, group, rsmse, ce });
            }
        }
        Mode::Vanilla => {
            if particles.len() != n {
                return Err(Error::protocol(format!(
                    "vanilla particle file carries one row per client; got {} rows for {} clients",
                    particles.len(),
                    n
                )));
            }
            let rows = particles.rows();
            for (i, client) in dataset.existing.iter().enumerate() {
                let single = std::slice::from_ref(&rows[i]);
                let (x, y) = client.personalization_data();
                let predictor = MixturePredictor::new(spec, single, &x, &y).map_err(|e| e.with_client(i))?;
                let (rsmse, ce) = score_predictor(&predictor, client, levels, i)?;
                out.push(ClientMetrics { client_id: i, group: Group::Existing, rsmse, ce });
            }
            // New clients never trained; fit each from its own prior draw
            // on the personalization split, like an existing client that
            // just arrived.
            let prior = config.hyper_prior.build(spec)?;
            for (j, client) in dataset.new.iter().enumerate() {
                let id = n + j;
                let mut rng = stream_rng(config.fed.seed, BASELINE_STREAM_BASE + id as u64);
                let init = prior.sample(&mut rng);
                let (x, y) = client.personalization_data();
                let phi = fed::train_vanilla(spec, &x, &y, init, config.fed.rounds, config.fed.eta, true)
                    .map_err(|e| e.with_client(id))?;
                let predictor =
                    MixturePredictor::new(spec, std::slice::from_ref(&phi), &x, &y).map_err(|e| e.with_client(id))?;
                let (rsmse, ce) = score_predictor(&predictor, client, levels, id)?;
                out.push(ClientMetrics { client_id: id, group: Group::New, rsmse, ce });
            }
        }
        Mode::Pooled => {
            if particles.len() != 1 {
                return Err(Error::protocol(format!(
                    "pooled particle file carries exactly one row; got {}",
                    particles.len()
                )));
            }
            let (x, y) = pooled_training_data(&dataset.existing);
            let predictor = MixturePredictor::new(spec, particles.rows(), &x, &y)?;
            for (id, group, client) in all_clients(dataset) {
                let (rsmse, ce) = score_predictor(&predictor, client, levels, id)?;
                out.push(ClientMetrics { client_id: id, group, rsmse, ce });
            }
        }
    }
    Ok(out)
}

/// Score the generating process itself: predict the stored latent values
/// with the task's noise level as predictive variance. Only synthetic
/// data keeps those latents, so this needs `data.task`.
fn oracle_metrics(
    config: &ExperimentConfig,
    dataset: &FederationDataset,
    levels: usize,
) -> Result<Vec<ClientMetrics>> {
    let task = config
        .data
        .task
        .as_ref()
        .ok_or_else(|| Error::config("evaluate.oracle", "oracle evaluation needs synthetic data"))?;
    let mut out = Vec::new();
    for (id, group, client) in all_clients(dataset) {
        let f_test = client.f_test.as_ref().ok_or_else(|| {
            Error::config("evaluate.oracle", "latent test values missing; regenerate the data in-process")
        })?;
        let noise_std = if config.data.standardize {
            task.noise_std / dataset.standardization[id].y_std
        } else {
            task.noise_std
        };
        let variance = (noise_std * noise_std).max(1e-12);
        let predictions: Vec<MixturePrediction> = f_test
            .iter()
            .map(|&f| MixturePrediction { weights: vec![1.0], means: vec![f], variances: vec![variance] })
            .collect();
        let means: Vec<f64> = f_test.clone();
        let rsmse = metrics::rsmse(&means, &client.y_test)?;
        let ce = metrics::calibration_error_regression(&predictions, &client.y_test, levels)?;
        out.push(ClientMetrics { client_id: id, group, rsmse, ce });
    }
    Ok(out)
}

fn group_summaries(per_client: &[ClientMetrics]) -> Result<Vec<GroupSummary>> {
    let mut out = Vec::new();
    for group in [Group::Existing, Group::New] {
        let members: Vec<&ClientMetrics> = per_client.iter().filter(|cm| cm.group == group).collect();
        if members.is_empty() {
            continue;
        }
        let rsmse: Vec<f64> = members.iter().map(|cm| cm.rsmse).collect();
        let ce: Vec<f64> = members.iter().map(|cm| cm.ce).collect();
        out.push(GroupSummary { group, metric: "rsmse".to_string(), summary: metrics::summarize(&rsmse)? });
        out.push(GroupSummary { group, metric: "ce".to_string(), summary: metrics::summarize(&ce)? });
    }
    Ok(out)
}
