//! Estimation and classification metrics.

use serde::{Deserialize, Serialize};

use crate::prob::{ProbabilityVector, MIN_SOURCE_PROB};
use crate::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Metrics for one method on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub w_mse: f64,
    /// Top-1 accuracy over the `K+1` classes; absent when only an estimate
    /// (no corrected predictions) was evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    pub rho_t_abs_err: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
}

/// `(1/K) Σⱼ (πⱼ/cⱼ − π̂ⱼ/cⱼ)²`.
pub fn w_mse(
    pi_hat: &ProbabilityVector,
    pi_true: &ProbabilityVector,
    c: &ProbabilityVector,
) -> Result<f64> {
    let k = c.len();
    if pi_hat.len() != k || pi_true.len() != k {
        return Err(Error::validation(format!(
            "w-MSE length mismatch: estimate {}, truth {}, source {k}",
            pi_hat.len(),
            pi_true.len()
        )));
    }
    if let Some(j) = c.as_slice().iter().position(|&x| x < MIN_SOURCE_PROB) {
        return Err(Error::validation(format!(
            "source prior entry {} below {MIN_SOURCE_PROB}",
            j + 1
        )));
    }
    Ok((0..k)
        .map(|j| (pi_true[j] / c[j] - pi_hat[j] / c[j]).powi(2))
        .sum::<f64>()
        / k as f64)
}

pub fn top1_accuracy(predictions: &[usize], truths: &[usize]) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::validation(format!(
            "{} predictions but {} labels",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::validation("no predictions to score"));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Expected calibration error with `n_bins` equal-width bins. A confidence
/// `p` goes to bin `⌊p · n_bins⌋`, with `p = 1` in the top bin.
pub fn ece(confidences: &[(f64, bool)], n_bins: usize) -> Result<f64> {
    if confidences.is_empty() {
        return Err(Error::validation("no confidences to score"));
    }
    if n_bins == 0 {
        return Err(Error::validation("ECE needs at least one bin"));
    }
    if let Some((p, _)) = confidences.iter().find(|(p, _)| !(0.0..=1.0).contains(p)) {
        return Err(Error::validation(format!("confidence {p} outside [0, 1]")));
    }
    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0.0; n_bins];
    for &(p, correct) in confidences {
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf_sum[b] += p;
        if correct {
            hit_sum[b] += 1.0;
        }
    }
    let n = confidences.len() as f64;
    Ok((0..n_bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let nb = count[b] as f64;
            (nb / n) * (hit_sum[b] / nb - conf_sum[b] / nb).abs()
        })
        .sum())
}

pub fn rho_abs_error(rho_hat: f64, rho_true: f64) -> f64 {
    (rho_hat - rho_true).abs()
}
