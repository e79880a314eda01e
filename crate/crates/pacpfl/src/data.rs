//! Dataset generation, CSV ingestion, and standardization.
//!
//! The synthetic generator draws each client's regression function from a
//! mixture of GP priors (polynomial mean of order 7 plus a squared-
//! exponential kernel per mode), producing the heterogeneous federation
//! the experiments run on. Real data enters through `load_csv`, whose
//! files optionally carry a `split` column assigning rows to the
//! training, personalization, or test split. Standardization is
//! per-client, fitted on the training split and applied to every split.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp;

/// Name of the optional CSV column assigning rows to splits.
pub const SPLIT_COLUMN: &str = "split";

/// One mode of the task distribution: a GP prior with polynomial mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeConfig {
    /// Coefficients `c0..c7` of the order-7 polynomial mean.
    pub poly_coeffs: Vec<f64>,
    /// Length scale of the squared-exponential kernel.
    pub se_length_scale: f64,
    /// Output scale (amplitude) of the kernel; zero draws the mean exactly.
    pub se_output_scale: f64,
    /// Mixture weight of this mode.
    pub weight: f64,
}

/// The task distribution: a weighted mixture of GP-prior modes plus
/// observation noise and the sampling range for inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDistributionConfig {
    pub modes: Vec<ModeConfig>,
    pub noise_std: f64,
    /// Inputs are drawn uniformly from `[x_range.0, x_range.1)`.
    pub x_range: (f64, f64),
    pub seed: u64,
}

impl TaskDistributionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::config("task.modes", "need at least one mode"));
        }
        let mut total = 0.0;
        for (i, mode) in self.modes.iter().enumerate() {
            if mode.poly_coeffs.len() != 8 {
                return Err(Error::config(
                    format!("task.modes[{i}].poly_coeffs"),
                    format!("need 8 coefficients (order 7), got {}", mode.poly_coeffs.len()),
                ));
            }
            if mode.poly_coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::config(format!("task.modes[{i}].poly_coeffs"), "must be finite"));
            }
            if !(mode.se_length_scale.is_finite() && mode.se_length_scale > 0.0) {
                return Err(Error::config(format!("task.modes[{i}].se_length_scale"), "must be positive"));
            }
            if !(mode.se_output_scale.is_finite() && mode.se_output_scale >= 0.0) {
                return Err(Error::config(format!("task.modes[{i}].se_output_scale"), "must be nonnegative"));
            }
            if !(mode.weight.is_finite() && mode.weight >= 0.0) {
                return Err(Error::config(format!("task.modes[{i}].weight"), "must be nonnegative"));
            }
            total += mode.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            let detail: Vec<String> = self
                .modes
                .iter()
                .enumerate()
                .map(|(i, m)| format!("modes[{i}].weight = {}", m.weight))
                .collect();
            return Err(Error::config(
                "task.modes",
                format!("weights sum to {total}, expected 1 ({})", detail.join(", ")),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("task.noise_std", "must be nonnegative"));
        }
        let (lo, hi) = self.x_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("task.x_range", format!("need finite lo < hi, got ({lo}, {hi})")));
        }
        Ok(())
    }
}

/// One client's private data: training, personalization, and test splits.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ClientDataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub x_personal: Vec<Vec<f64>>,
    pub y_personal: Vec<f64>,
    pub x_test: Vec<Vec<f64>>,
    pub y_test: Vec<f64>,
    /// Noiseless function values on the test inputs, when the generator
    /// that produced this client knows them.
    pub f_test: Option<Vec<f64>>,
}

impl ClientDataset {
    pub fn validate(&self) -> Result<()> {
        let splits: [(&str, &[Vec<f64>], &[f64]); 3] = [
            ("train", &self.x, &self.y),
            ("personal", &self.x_personal, &self.y_personal),
            ("test", &self.x_test, &self.y_test),
        ];
        let mut dim = None;
        for (name, xs, ys) in splits {
            if xs.len() != ys.len() {
                return Err(Error::shape(
                    "dataset",
                    format!("{name} split has {} inputs but {} targets", xs.len(), ys.len()),
                ));
            }
            for row in xs {
                match dim {
                    None => dim = Some(row.len()),
                    Some(d) if d != row.len() => {
                        return Err(Error::shape(
                            "dataset",
                            format!("{name} split mixes input dims {d} and {}", row.len()),
                        ));
                    }
                    _ => {}
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!("non-finite input in {name} split")));
                }
            }
            if ys.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("non-finite target in {name} split")));
            }
        }
        if let Some(f) = &self.f_test {
            if f.len() != self.y_test.len() {
                return Err(Error::shape(
                    "dataset",
                    format!("{} oracle values for {} test targets", f.len(), self.y_test.len()),
                ));
            }
        }
        Ok(())
    }

    #[must_use]
    pub fn num_train(&self) -> usize {
        self.x.len()
    }

    #[must_use]
    pub fn num_personal(&self) -> usize {
        self.x_personal.len()
    }

    #[must_use]
    pub fn num_test(&self) -> usize {
        self.x_test.len()
    }

    /// Input dimension, from the first nonempty split.
    #[must_use]
    pub fn input_dim(&self) -> Option<usize> {
        [&self.x, &self.x_personal, &self.x_test]
            .iter()
            .find_map(|xs| xs.first().map(Vec::len))
    }

    /// Training and personalization splits concatenated — the data a
    /// client personalizes its posterior on.
    #[must_use]
    pub fn personalization_data(&self) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut xs = self.x.clone();
        xs.extend(self.x_personal.iter().cloned());
        let mut ys = self.y.clone();
        ys.extend(self.y_personal.iter().copied());
        (xs, ys)
    }
}

/// Per-client affine transform mapping raw features/targets to zero mean
/// and unit standard deviation on the fitted split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl StandardizationParams {
    /// Fit on one split; errors name any zero-variance column.
    pub fn fit(x: &[Vec<f64>], y: &[f64]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::shape("standardize", format!("{} inputs for {} targets", x.len(), y.len())));
        }
        if x.len() < 2 {
            return Err(Error::shape("standardize", "need at least two samples to fit a standard deviation"));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut x_mean = vec![0.0; d];
        for row in x {
            if row.len() != d {
                return Err(Error::shape("standardize", "inputs must share a dimension"));
            }
            for (m, v) in x_mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut x_mean {
            *m /= n;
        }
        let mut x_std = vec![0.0; d];
        for row in x {
            for ((s, v), m) in x_std.iter_mut().zip(row).zip(&x_mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (j, s) in x_std.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if !(*s > 0.0) {
                return Err(Error::numerical(format!("feature column x{j} has zero variance")));
            }
        }
        let y_mean = y.iter().sum::<f64>() / n;
        let y_std = (y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n).sqrt();
        if !(y_std > 0.0) {
            return Err(Error::numerical("target column y has zero variance"));
        }
        Ok(StandardizationParams { x_mean, x_std, y_mean, y_std })
    }

    #[must_use]
    pub fn transform_x(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.x_mean)
            .zip(&self.x_std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    #[must_use]
    pub fn transform_y(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    #[must_use]
    pub fn inverse_y(&self, z: f64) -> f64 {
        z * self.y_std + self.y_mean
    }
}

/// Standardize one client with its own training-split statistics (the
/// personalization split stands in when the training split is empty).
pub fn standardize(dataset: &ClientDataset) -> Result<(ClientDataset, StandardizationParams)> {
    dataset.validate()?;
    let params = if dataset.num_train() >= 2 {
        StandardizationParams::fit(&dataset.x, &dataset.y)?
    } else if dataset.num_personal() >= 2 {
        StandardizationParams::fit(&dataset.x_personal, &dataset.y_personal)?
    } else {
        return Err(Error::shape(
            "standardize",
            "client needs a training or personalization split with at least two samples",
        ));
    };
    let tx = |xs: &[Vec<f64>]| xs.iter().map(|r| params.transform_x(r)).collect::<Vec<_>>();
    let ty = |ys: &[f64]| ys.iter().map(|&v| params.transform_y(v)).collect::<Vec<_>>();
    let out = ClientDataset {
        x: tx(&dataset.x),
        y: ty(&dataset.y),
        x_personal: tx(&dataset.x_personal),
        y_personal: ty(&dataset.y_personal),
        x_test: tx(&dataset.x_test),
        y_test: ty(&dataset.y_test),
        f_test: dataset.f_test.as_ref().map(|f| ty(f)),
    };
    Ok((out, params))
}

/// A federation: existing clients, new clients joining later, and the
/// per-client standardization that was applied (existing then new).
#[derive(Clone, Debug, PartialEq)]
pub struct FederationDataset {
    pub existing: Vec<ClientDataset>,
    pub new: Vec<ClientDataset>,
    pub standardization: Vec<StandardizationParams>,
}

impl FederationDataset {
    /// Sample counts of the existing clients' training splits.
    #[must_use]
    pub fn training_counts(&self) -> Vec<usize> {
        self.existing.iter().map(ClientDataset::num_train).collect()
    }
}

/// Evaluate `c0 + c1 x + ... + c7 x^7` by Horner's rule.
#[must_use]
pub fn polynomial(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn draw_mode_index(modes: &[ModeConfig], u: f64) -> usize {
    let mut cum = 0.0;
    for (i, mode) in modes.iter().enumerate() {
        cum += mode.weight;
        if u < cum {
            return i;
        }
    }
    modes.len() - 1
}

/// Generate one client with the given split sizes from its own RNG
/// stream. The same seed always yields the same dataset.
pub fn generate_client(
    config: &TaskDistributionConfig,
    m_train: usize,
    m_personal: usize,
    m_test: usize,
    seed: u64,
) -> Result<ClientDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = &config.modes[draw_mode_index(&config.modes, rng.gen::<f64>())];
    let total = m_train + m_personal + m_test;
    let (lo, hi) = config.x_range;
    let xs: Vec<f64> = (0..total).map(|_| rng.gen_range(lo..hi)).collect();

    let mean: Vec<f64> = xs.iter().map(|&x| polynomial(&mode.poly_coeffs, x)).collect();
    let mut f = mean;
    if mode.se_output_scale > 0.0 && total > 0 {
        let s2 = mode.se_output_scale * mode.se_output_scale;
        let ls2 = mode.se_length_scale * mode.se_length_scale;
        let k = DMatrix::from_fn(total, total, |i, j| {
            let d = xs[i] - xs[j];
            s2 * (-d * d / (2.0 * ls2)).exp()
        });
        let (chol, _) = gp::cholesky_with_jitter(&k, gp::DEFAULT_JITTER)?;
        let z = DMatrix::from_fn(total, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let draw = chol.l() * z;
        for (fi, di) in f.iter_mut().zip(draw.iter()) {
            *fi += di;
        }
    }
    let y: Vec<f64> = f
        .iter()
        .map(|&fi| fi + config.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let col = |range: std::ops::Range<usize>| xs[range].iter().map(|&x| vec![x]).collect::<Vec<_>>();
    let dataset = ClientDataset {
        x: col(0..m_train),
        y: y[0..m_train].to_vec(),
        x_personal: col(m_train..m_train + m_personal),
        y_personal: y[m_train..m_train + m_personal].to_vec(),
        x_test: col(m_train + m_personal..total),
        y_test: y[m_train + m_personal..total].to_vec(),
        f_test: Some(f[m_train + m_personal..total].to_vec()),
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Generate a federation of `n_clients` existing and `n_new_clients` new
/// clients, standardized per client. Existing clients get
/// `(m_train, 0, m_test)` splits; new clients get `(0, m_train, m_test)`
/// — their `m_train` samples arrive only at personalization time.
///
/// Client `i` uses seed `config.seed + i` (new clients continue the
/// numbering), so regenerating any single client is cheap and the whole
/// federation is bit-stable for a fixed seed.
pub fn generate_polynomial(
    config: &TaskDistributionConfig,
    n_clients: usize,
    n_new_clients: usize,
    m_train: usize,
    m_test: usize,
    apply_standardization: bool,
) -> Result<FederationDataset> {
    if n_clients == 0 {
        return Err(Error::config("data.n_clients", "need at least one existing client"));
    }
    if m_train < 2 {
        return Err(Error::config("data.m_train", "need at least two training samples per client"));
    }
    let mut existing = Vec::with_capacity(n_clients);
    let mut new = Vec::with_capacity(n_new_clients);
    let mut standardization = Vec::new();
    for i in 0..n_clients + n_new_clients {
        let seed = config.seed.wrapping_add(i as u64);
        let raw = if i < n_clients {
            generate_client(config, m_train, 0, m_test, seed)?
        } else {
            generate_client(config, 0, m_train, m_test, seed)?
        };
        let prepared = if apply_standardization {
            let (std_ds, params) = standardize(&raw).map_err(|e| e.with_client(i))?;
            standardization.push(params);
            std_ds
        } else {
            raw
        };
        if i < n_clients {
            existing.push(prepared);
        } else {
            new.push(prepared);
        }
    }
    Ok(FederationDataset { existing, new, standardization })
}

fn csv_read_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::protocol(format!("csv read from {}: {other:?}", path.display())),
    }
}

/// Load one client from a CSV file.
///
/// Every column except `target_column` and the optional `split` column is
/// a feature, in header order. Split values `train`, `personal`, and
/// `test` route rows; a missing split column puts everything in the
/// training split. Errors name the 1-based file row (header is row 1)
/// and the offending column.
pub fn load_csv(path: &Path, target_column: &str) -> Result<ClientDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_read_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_read_error(path, e))?.clone();
    let target_idx = headers.iter().position(|h| h == target_column).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        row: 1,
        column: target_column.to_string(),
        message: "target column not found in header".to_string(),
    })?;
    let split_idx = headers.iter().position(|h| h == SPLIT_COLUMN);
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&j| j != target_idx && Some(j) != split_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            row: 1,
            column: target_column.to_string(),
            message: "no feature columns besides the target".to_string(),
        });
    }

    let mut dataset = ClientDataset::default();
    for (rec_idx, record) in reader.records().enumerate() {
        let row = rec_idx + 2; // header occupies row 1
        let record = record.map_err(|e| csv_read_error(path, e))?;
        let parse = |j: usize| -> Result<f64> {
            let cell = record.get(j).unwrap_or("");
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row,
                column: headers[j].to_string(),
                message: format!("cannot parse {cell:?} as a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: headers[j].to_string(),
                    message: format!("non-finite value {value}"),
                });
            }
            Ok(value)
        };
        let features: Vec<f64> = feature_idx.iter().map(|&j| parse(j)).collect::<Result<_>>()?;
        let target = parse(target_idx)?;
        let split = match split_idx {
            None => "train",
            Some(j) => record.get(j).unwrap_or("").trim(),
        };
        match split {
            "train" => {
                dataset.x.push(features);
                dataset.y.push(target);
            }
            "personal" => {
                dataset.x_personal.push(features);
                dataset.y_personal.push(target);
            }
            "test" => {
                dataset.x_test.push(features);
                dataset.y_test.push(target);
            }
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: SPLIT_COLUMN.to_string(),
                    message: format!("unknown split {other:?} (expected train, personal, or test)"),
                });
            }
        }
    }
    dataset.validate()?;
    Ok(dataset)
}

/// Save one client as a CSV with feature columns `x0..x{d-1}`, the named
/// target column, and a `split` column; `load_csv` restores it exactly.
pub fn save_csv(path: &Path, dataset: &ClientDataset, target_column: &str) -> Result<()> {
    dataset.validate()?;
    let d = dataset.input_dim().unwrap_or(0);
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push(target_column.to_string());
    header.push(SPLIT_COLUMN.to_string());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();

    let mut rows = Vec::new();
    let splits: [(&str, &[Vec<f64>], &[f64]); 3] = [
        ("train", &dataset.x, &dataset.y),
        ("personal", &dataset.x_personal, &dataset.y_personal),
        ("test", &dataset.x_test, &dataset.y_test),
    ];
    for (name, xs, ys) in splits {
        for (row, target) in xs.iter().zip(ys) {
            let mut cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            cells.push(format!("{target}"));
            cells.push(name.to_string());
            rows.push(cells);
        }
    }
    crate::metrics::write_csv(path, &header_refs, &rows)
}
