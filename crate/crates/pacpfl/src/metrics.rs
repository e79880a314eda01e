//! Evaluation metrics and small reporting helpers.
//!
//! Standardized RMSE, regression calibration error against the mixture
//! predictive CDF, classification expected calibration error, predictive
//! negative log likelihood of a Gaussian mixture, and the summary
//! statistics (median, quartiles, confidence half-width) used in the
//! per-experiment reports. Also hosts the generic CSV writer shared by
//! the runner's output files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gp::MixturePrediction;
use crate::util::logsumexp;

/// Standard normal CDF via the error function.
#[must_use]
pub fn standard_normal_cdf(t: f64) -> f64 {
    0.5 * (1.0 + libm::erf(t / std::f64::consts::SQRT_2))
}

/// Root-mean-squared error divided by the population standard deviation
/// of the targets. Predicting the target mean everywhere scores exactly 1.
pub fn rsmse(predicted_means: &[f64], targets: &[f64]) -> Result<f64> {
    if predicted_means.len() != targets.len() {
        return Err(Error::shape(
            "rsmse",
            format!("{} predictions for {} targets", predicted_means.len(), targets.len()),
        ));
    }
    if targets.len() < 2 {
        return Err(Error::shape("rsmse", "need at least two targets"));
    }
    if predicted_means.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::numerical("rsmse inputs must be finite"));
    }
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::numerical("targets have zero variance; rsmse is undefined"));
    }
    let mse = predicted_means
        .iter()
        .zip(targets)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / n;
    Ok((mse / var).sqrt())
}

/// Predictive CDF of a Gaussian mixture at `y`.
pub fn mixture_cdf(pred: &MixturePrediction, y: f64) -> Result<f64> {
    validate_mixture(pred)?;
    let mut total = 0.0;
    for ((&w, &mu), &var) in pred.weights.iter().zip(&pred.means).zip(&pred.variances) {
        total += w * standard_normal_cdf((y - mu) / var.sqrt());
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Negative log density of a Gaussian mixture at `y`, in nats.
pub fn mixture_nll(pred: &MixturePrediction, y: f64) -> Result<f64> {
    validate_mixture(pred)?;
    if !y.is_finite() {
        return Err(Error::numerical(format!("target must be finite, got {y}")));
    }
    let log_terms: Vec<f64> = pred
        .weights
        .iter()
        .zip(&pred.means)
        .zip(&pred.variances)
        .map(|((&w, &mu), &var)| {
            let lw = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            let r = y - mu;
            lw - 0.5 * (2.0 * std::f64::consts::PI * var).ln() - r * r / (2.0 * var)
        })
        .collect();
    Ok(-logsumexp(&log_terms))
}

fn validate_mixture(pred: &MixturePrediction) -> Result<()> {
    if pred.weights.is_empty()
        || pred.weights.len() != pred.means.len()
        || pred.weights.len() != pred.variances.len()
    {
        return Err(Error::shape("mixture", "weights, means, and variances must share a nonzero length"));
    }
    if pred.variances.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::numerical("mixture variances must be finite and positive"));
    }
    if pred.means.iter().chain(pred.weights.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numerical("mixture weights and means must be finite"));
    }
    Ok(())
}

/// Regression calibration error.
///
/// For each quantile level `q_h = h / levels`, compares the nominal level
/// against the empirical frequency of `F_hat(y_j) <= q_h`, where `F_hat`
/// is the predictive mixture CDF, and averages the absolute gaps.
pub fn calibration_error_regression(
    predictions: &[MixturePrediction],
    targets: &[f64],
    levels: usize,
) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::shape(
            "calibration",
            format!("{} predictions for {} targets", predictions.len(), targets.len()),
        ));
    }
    if predictions.is_empty() {
        return Err(Error::shape("calibration", "need at least one prediction"));
    }
    if levels == 0 {
        return Err(Error::config("calibration_levels", "must be at least 1"));
    }
    let mut cdf_values = Vec::with_capacity(targets.len());
    for (pred, &y) in predictions.iter().zip(targets) {
        cdf_values.push(mixture_cdf(pred, y)?);
    }
    let n = cdf_values.len() as f64;
    let mut total = 0.0;
    for h in 1..=levels {
        let q = h as f64 / levels as f64;
        let covered = cdf_values.iter().filter(|&&f| f <= q).count() as f64 / n;
        total += (covered - q).abs();
    }
    Ok(total / levels as f64)
}

/// Expected calibration error for classifiers: bin predictions by
/// confidence and average `|accuracy - confidence|` weighted by bin mass.
pub fn calibration_error_classification(
    confidences: &[f64],
    correct: &[bool],
    bins: usize,
) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::shape(
            "calibration",
            format!("{} confidences for {} outcomes", confidences.len(), correct.len()),
        ));
    }
    if confidences.is_empty() {
        return Err(Error::shape("calibration", "need at least one prediction"));
    }
    if bins == 0 {
        return Err(Error::config("bins", "must be at least 1"));
    }
    if confidences.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
        return Err(Error::numerical("confidences must lie in [0, 1]"));
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut acc_sum = vec![0.0; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = ((c * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            acc_sum[b] += 1.0;
        }
    }
    let n = confidences.len() as f64;
    let mut ece = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let cb = count[b] as f64;
        ece += cb / n * (acc_sum[b] / cb - conf_sum[b] / cb).abs();
    }
    Ok(ece)
}

/// Location and spread statistics for a batch of per-client scores.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation (`ddof = 1`); zero for a single value.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    /// Half-width of the normal-approximation 95% confidence interval.
    pub ci_half_width: f64,
}

/// Summarize a nonempty batch of finite values.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::shape("summarize", "need at least one value"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("summary inputs must be finite"));
    }
    let n = values.len();
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values compare"));
    let ci_half_width = if n > 1 { 1.96 * std / nf.sqrt() } else { 0.0 };
    Ok(Summary {
        count: n,
        mean,
        std,
        min: sorted[0],
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
        max: sorted[n - 1],
        ci_half_width,
    })
}

/// Linear-interpolation quantile of an already sorted slice (the
/// convention where the order statistics sit at positions `k/(n-1)`).
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Write one CSV file with the given header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::shape(
                "csv",
                format!("row {i} has {} fields, header has {}", row.len(), header.len()),
            ));
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_write_error(path, e))?;
    writer.write_record(header).map_err(|e| csv_write_error(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| csv_write_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_write_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::protocol(format!("csv write to {}: {other:?}", path.display())),
    }
}
