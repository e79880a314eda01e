//! Small numeric helpers shared across modules.

/// Log-sum-exp with max subtraction; `-inf` for an empty slice.
pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (or empty): the sum is 0 in linear space.
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Normalized exponentials of log-weights (softmax). Falls back to the
/// uniform distribution when every entry is `-inf`, so a degenerate set of
/// components stays a valid mixture instead of turning into NaNs.
pub(crate) fn softmax_from_log(log_weights: &[f64]) -> Vec<f64> {
    let n = log_weights.len();
    let lse = logsumexp(log_weights);
    if !lse.is_finite() {
        return vec![1.0 / n as f64; n];
    }
    log_weights.iter().map(|l| (l - lse).exp()).collect()
}
