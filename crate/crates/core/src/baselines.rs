//! Closed-set label-shift estimators used as comparison points.
//!
//! These treat every target sample as belonging to one of the `K` ID
//! classes and ignore the ID score.

use serde::{Deserialize, Serialize};

use crate::prob::{PredictionRecord, ProbabilityVector};
use crate::{Error, Result};

const CONDITION_LIMIT: f64 = 1e8;

/// Result of a closed-set EM run with its per-iteration objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedSetTrace {
    pub pi: ProbabilityVector,
    /// Objective at every iterate including the initial point:
    /// `−Σᵢ log Σⱼ (πⱼ/cⱼ) f(xᵢ)ⱼ` minus the log prior for MAPLS.
    pub nll_per_iter: Vec<f64>,
    pub iterates: Vec<Vec<f64>>,
}

fn check_inputs(target_f: &[ProbabilityVector], c: &ProbabilityVector) -> Result<()> {
    if target_f.is_empty() {
        return Err(Error::validation("empty target set"));
    }
    if c.as_slice().iter().any(|&x| x <= 0.0) {
        return Err(Error::validation("source prior must be strictly positive"));
    }
    if let Some(i) = target_f.iter().position(|f| f.len() != c.len()) {
        return Err(Error::validation(format!(
            "target record {i} has {} classes, expected {}",
            target_f[i].len(),
            c.len()
        )));
    }
    Ok(())
}

fn closed_set_em(
    target_f: &[ProbabilityVector],
    c: &ProbabilityVector,
    alpha: Option<&[f64]>,
    max_iters: usize,
) -> Result<ClosedSetTrace> {
    check_inputs(target_f, c)?;
    let k = c.len();
    let n = target_f.len() as f64;
    let cs = c.as_slice();
    let log_prior = |pi: &[f64]| -> f64 {
        alpha.map_or(0.0, |a| {
            a.iter()
                .zip(pi)
                .map(|(&a, &p)| if a == 1.0 { 0.0 } else { (a - 1.0) * p.ln() })
                .sum()
        })
    };

    let mut pi = cs.to_vec();
    let mut iterates = vec![pi.clone()];
    let mut objective = Vec::with_capacity(max_iters + 1);
    let mut weights = vec![0.0; k];
    for _ in 0..=max_iters {
        let ratios: Vec<f64> = pi.iter().zip(cs).map(|(p, c)| p / c).collect();
        let mut col_sums = vec![0.0; k];
        let mut nll = 0.0;
        for (i, f) in target_f.iter().enumerate() {
            let mut denom = 0.0;
            for j in 0..k {
                weights[j] = ratios[j] * f[j];
                denom += weights[j];
            }
            if !(denom > 0.0) {
                return Err(Error::DegenerateSample { index: i });
            }
            for j in 0..k {
                col_sums[j] += weights[j] / denom;
            }
            nll -= denom.ln();
        }
        objective.push(nll - log_prior(&pi));
        if objective.len() == max_iters + 1 {
            break;
        }
        pi = match alpha {
            None => col_sums.iter().map(|s| s / n).collect(),
            Some(a) => {
                let extra: f64 = a.iter().map(|a| a - 1.0).sum();
                let den = n + extra;
                col_sums
                    .iter()
                    .zip(a)
                    .map(|(s, a)| (s + (a - 1.0)) / den)
                    .collect()
            }
        };
        iterates.push(pi.clone());
    }
    Ok(ClosedSetTrace {
        pi: ProbabilityVector::new(pi)?,
        nll_per_iter: objective,
        iterates,
    })
}

/// Maximum likelihood label shift (EM on the closed-set likelihood), started
/// from `π = c`.
pub fn mlls(
    target_f: &[ProbabilityVector],
    c: &ProbabilityVector,
    max_iters: usize,
) -> Result<ProbabilityVector> {
    Ok(mlls_trace(target_f, c, max_iters)?.pi)
}

pub fn mlls_trace(
    target_f: &[ProbabilityVector],
    c: &ProbabilityVector,
    max_iters: usize,
) -> Result<ClosedSetTrace> {
    closed_set_em(target_f, c, None, max_iters)
}

/// Maximum a-posteriori label shift under a `Dir(alpha)` prior on `π`.
pub fn mapls(
    target_f: &[ProbabilityVector],
    c: &ProbabilityVector,
    alpha: &[f64],
    max_iters: usize,
) -> Result<ProbabilityVector> {
    Ok(mapls_trace(target_f, c, alpha, max_iters)?.pi)
}

pub fn mapls_trace(
    target_f: &[ProbabilityVector],
    c: &ProbabilityVector,
    alpha: &[f64],
    max_iters: usize,
) -> Result<ClosedSetTrace> {
    if alpha.len() != c.len() {
        return Err(Error::validation(format!(
            "alpha has {} entries, expected {}",
            alpha.len(),
            c.len()
        )));
    }
    if alpha.iter().any(|a| !(*a >= 1.0)) {
        return Err(Error::validation("MAPLS concentrations must be >= 1"));
    }
    closed_set_em(target_f, c, Some(alpha), max_iters)
}

/// MAPLS M-step from responsibility column sums over `n` samples.
pub fn mapls_m_step(col_sums: &[f64], n: f64, alpha: &[f64]) -> Vec<f64> {
    let extra: f64 = alpha.iter().map(|a| a - 1.0).sum();
    col_sums
        .iter()
        .zip(alpha)
        .map(|(s, a)| (s + (a - 1.0)) / (n + extra))
        .collect()
}

/// Joint frequencies `p̂(ŷ = i, y = j)` of hard predictions and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Row `i` is the predicted class, column `j` the true class.
    entries: Vec<Vec<f64>>,
}

impl ConfusionMatrix {
    pub fn new(entries: Vec<Vec<f64>>) -> Result<Self> {
        let k = entries.len();
        if k == 0 || entries.iter().any(|r| r.len() != k) {
            return Err(Error::validation(
                "confusion matrix must be square and non-empty",
            ));
        }
        if entries.iter().flatten().any(|x| !(*x >= 0.0)) {
            return Err(Error::validation("confusion entries must be non-negative"));
        }
        let total: f64 = entries.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "confusion entries sum to {total}, not 1"
            )));
        }
        Ok(Self { entries })
    }

    /// Builds the matrix from labeled ID records using `argmax f` as the
    /// hard prediction. Records without a label, or labeled OOD, are skipped.
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        let k = crate::prob::common_k(records)?;
        let mut counts = vec![vec![0.0; k]; k];
        let mut n = 0.0;
        for r in records {
            if let Some(y) = r.label.filter(|&y| y <= k) {
                counts[r.f.argmax() - 1][y - 1] += 1.0;
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::validation(
                "no labeled ID records for the confusion matrix",
            ));
        }
        for row in counts.iter_mut() {
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        Self::new(counts)
    }

    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    /// Marginal of the true label, `Σᵢ Cᵢⱼ`.
    pub fn label_marginal(&self) -> Vec<f64> {
        (0..self.k())
            .map(|j| self.entries.iter().map(|row| row[j]).sum())
            .collect()
    }

    /// Marginal of the predicted label, `Σⱼ Cᵢⱼ`.
    pub fn prediction_marginal(&self) -> Vec<f64> {
        self.entries.iter().map(|row| row.iter().sum()).collect()
    }
}

/// Predicted-class frequencies of `argmax f` over a target set.
pub fn predicted_frequencies(target_f: &[ProbabilityVector]) -> Result<ProbabilityVector> {
    let k = target_f
        .first()
        .ok_or_else(|| Error::validation("empty target set"))?
        .len();
    ProbabilityVector::from_label_counts(target_f.iter().map(|f| f.argmax()), k)
}

/// In-place LU factorisation with partial pivoting; returns the inverse.
fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let k = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for col in 0..k {
        let pivot = (col..k).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[pivot][col] == 0.0 {
            return None;
        }
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for j in 0..k {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for row in 0..k {
            if row != col {
                let factor = m[row][col];
                if factor != 0.0 {
                    for j in 0..k {
                        m[row][j] -= factor * m[col][j];
                        inv[row][j] -= factor * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

fn one_norm(a: &[Vec<f64>]) -> f64 {
    let k = a.len();
    (0..k)
        .map(|j| a.iter().map(|row| row[j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solves `C w = q` by Gauss–Jordan elimination with partial pivoting,
/// rejecting systems whose 1-norm condition number exceeds `1e8`.
pub fn solve_linear(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let inv = invert(a).ok_or(Error::IllConditioned {
        condition: f64::INFINITY,
    })?;
    let condition = one_norm(a) * one_norm(&inv);
    if !(condition < CONDITION_LIMIT) {
        return Err(Error::IllConditioned { condition });
    }
    Ok(inv
        .iter()
        .map(|row| row.iter().zip(b).map(|(x, y)| x * y).sum())
        .collect())
}

/// Black-box shift estimation: solves `C w = q` for importance weights and
/// returns `π ∝ max(w, 0) · c` with `c` the label marginal of `C`.
pub fn bbse(
    confusion: &ConfusionMatrix,
    target_pred_freq: &ProbabilityVector,
) -> Result<ProbabilityVector> {
    if target_pred_freq.len() != confusion.k() {
        return Err(Error::validation(
            "target frequency length differs from confusion size",
        ));
    }
    let w = solve_linear(confusion.entries(), target_pred_freq.as_slice())?;
    let c = confusion.label_marginal();
    let weights: Vec<f64> = w.iter().zip(&c).map(|(w, c)| w.max(0.0) * c).collect();
    ProbabilityVector::from_weights(weights)
        .map_err(|_| Error::validation("all BBSE importance weights are non-positive"))
}
