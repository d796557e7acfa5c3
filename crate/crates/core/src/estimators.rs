//! Closed-form ratio estimators and their concentration bounds.
//!
//! The source ID ratio is recovered from the mean scores of an ID reference
//! set and an OOD reference set: with `μ₁ = E[h | ID]` and `μ₀ = E[h | OOD]`,
//! a calibrated scorer satisfies `ρₛ = μ₀ / (1 − μ₁ + μ₀)`. A mis-specified
//! scorer `h′` whose mean response is affine in the ID indicator is repaired
//! by inverting that affine map, `ρ* = (ρ′ − μ₀′) / (μ₁′ − μ₀′)`.

use serde::{Deserialize, Serialize};

use crate::prob::ProbabilityVector;
use crate::{Error, Result};

/// Below this magnitude a ratio denominator is treated as non-identifying.
pub const DENOMINATOR_EPS: f64 = 1e-6;

/// Source ID ratio estimates are clamped into `[RHO_EPS, 1 − RHO_EPS]`.
pub const RHO_EPS: f64 = 1e-6;

/// Mean scores over the ID and OOD reference sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeans {
    pub mu1_hat: f64,
    pub mu0_hat: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

impl ScoreMeans {
    pub fn new(mu1_hat: f64, mu0_hat: f64, n_id: usize, n_ood: usize) -> Result<Self> {
        for (name, v) in [("mu1_hat", mu1_hat), ("mu0_hat", mu0_hat)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if n_id == 0 || n_ood == 0 {
            return Err(Error::validation("reference set counts must be >= 1"));
        }
        Ok(Self {
            mu1_hat,
            mu0_hat,
            n_id,
            n_ood,
        })
    }

    /// Means of `id_scores` and `ood_scores`.
    pub fn from_scores(id_scores: &[f64], ood_scores: &[f64]) -> Result<Self> {
        Self::new(
            score_mean(id_scores)?,
            score_mean(ood_scores)?,
            id_scores.len(),
            ood_scores.len(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub delta: f64,
    pub bound: f64,
    pub n_min: usize,
}

pub fn score_mean(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::validation("cannot average an empty score list"));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::validation(format!("score {s} outside [0, 1]")));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `ρ̂ₛ = μ̂₀ / (1 − μ̂₁ + μ̂₀)`, clamped into `[RHO_EPS, 1 − RHO_EPS]`.
pub fn estimate_rho_s(means: &ScoreMeans) -> Result<f64> {
    let den = 1.0 - means.mu1_hat + means.mu0_hat;
    if den.abs() < DENOMINATOR_EPS {
        return Err(Error::DegenerateScorer(format!(
            "1 - mu1 + mu0 = {den:.3e} (mu1 = {}, mu0 = {}); the OOD reference set receives \
             no score mass and the ID reference set receives all of it",
            means.mu1_hat, means.mu0_hat
        )));
    }
    Ok((means.mu0_hat / den).clamp(RHO_EPS, 1.0 - RHO_EPS))
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::validation(format!(
            "delta = {delta} must lie in (0, 1)"
        )));
    }
    Ok(())
}

/// Deviation bound on `ρ̂ₛ` holding with probability at least `1 − 2δ`.
pub fn rho_s_bound(
    mu1: f64,
    mu0: f64,
    n_ood: usize,
    n_id: usize,
    delta: f64,
) -> Result<BoundReport> {
    check_delta(delta)?;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::validation("counts must be >= 1"));
    }
    let den = 1.0 - mu1 + mu0;
    if den <= 0.0 {
        return Err(Error::validation(format!(
            "1 - mu1 + mu0 = {den} must be positive"
        )));
    }
    let n_min = n_ood.min(n_id);
    let bound = ((1.0 / delta).ln() / (2.0 * n_min as f64)).sqrt() / den;
    Ok(BoundReport {
        delta,
        bound,
        n_min,
    })
}

/// `(ρ_raw − μ̂₀′) / (μ̂₁′ − μ̂₀′)` clamped to `[0, 1]`.
pub fn correct_rho(rho_raw: f64, mu1p: f64, mu0p: f64) -> Result<f64> {
    let den = mu1p - mu0p;
    if den.abs() < DENOMINATOR_EPS {
        return Err(Error::DegenerateScorer(format!(
            "mu1' - mu0' = {den:.3e}; the scorer responds identically to ID and OOD samples"
        )));
    }
    Ok(((rho_raw - mu0p) / den).clamp(0.0, 1.0))
}

/// Deviation bound on the corrected target ratio, probability `≥ 1 − 2δ`.
pub fn rho_t_bound(mu1p: f64, mu0p: f64, n_min: usize, delta: f64) -> Result<BoundReport> {
    check_delta(delta)?;
    if n_min == 0 {
        return Err(Error::validation("n_min must be >= 1"));
    }
    let gap = (mu1p - mu0p).abs();
    if gap == 0.0 || !gap.is_finite() {
        return Err(Error::validation("mu1' and mu0' must differ"));
    }
    let bound = (2.0 * (1.0 / delta).ln() / n_min as f64).sqrt() / gap;
    Ok(BoundReport {
        delta,
        bound,
        n_min,
    })
}

/// `μ̂₀* = μ̂₀ / T` for a pseudo-OOD reference set.
pub fn rescale_mu0(mu0_gamma: f64, t: f64) -> Result<f64> {
    if !(t >= 1.0) || !t.is_finite() {
        return Err(Error::validation(format!(
            "rescale factor T = {t} must be >= 1"
        )));
    }
    if !(0.0..=1.0).contains(&mu0_gamma) {
        return Err(Error::validation(format!(
            "mu0 = {mu0_gamma} outside [0, 1]"
        )));
    }
    Ok(mu0_gamma / t)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Midpoint of the two reference medians.
pub fn rescale_threshold(id_ref: &[f64], ood_ref: &[f64]) -> Result<f64> {
    if id_ref.is_empty() || ood_ref.is_empty() {
        return Err(Error::validation(
            "threshold rescaling needs non-empty reference sets",
        ));
    }
    Ok(0.5 * (median(id_ref) + median(ood_ref)))
}

/// Binarises raw detector scores at the midpoint of the reference medians.
/// Scores exactly at the threshold map to 0.
pub fn threshold_rescale(raw_scores: &[f64], id_ref: &[f64], ood_ref: &[f64]) -> Result<Vec<f64>> {
    let threshold = rescale_threshold(id_ref, ood_ref)?;
    Ok(raw_scores
        .iter()
        .map(|&s| if s > threshold { 1.0 } else { 0.0 })
        .collect())
}

const PGD_MAX_ITERS: usize = 10_000;
const PGD_GRAD_TOL: f64 = 1e-10;
const STOCHASTIC_TOL: f64 = 1e-6;
const FLAT_TOL: f64 = 1e-12;

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn gram(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = a.len();
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| (0..k).map(|r| a[r][i] * a[r][j]).sum())
                .collect()
        })
        .collect()
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
fn lambda_max(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    let mut x: Vec<f64> = (0..k).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let y = mat_vec(m, &x);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next: Vec<f64> = y.iter().map(|v| v / norm).collect();
        let mx = mat_vec(m, &next);
        let rayleigh: f64 = next.iter().zip(&mx).map(|(a, b)| a * b).sum();
        let done = (rayleigh - lambda).abs() <= 1e-15 * rayleigh.abs().max(1.0);
        lambda = rayleigh;
        x = next;
        if done {
            break;
        }
    }
    lambda
}

/// `½‖(μ̂ − I)ρ‖²` for a `K×K` score-mean matrix.
pub fn stationary_objective(mu_hat: &[Vec<f64>], rho: &[f64]) -> f64 {
    let ar = mat_vec(mu_hat, rho);
    0.5 * ar
        .iter()
        .zip(rho)
        .map(|(a, r)| (a - r) * (a - r))
        .sum::<f64>()
}

fn projected_gradient(m: &[Vec<f64>], start: Vec<f64>, step: f64) -> Vec<f64> {
    let mut x = start;
    for _ in 0..PGD_MAX_ITERS {
        let grad = mat_vec(m, &x);
        let trial: Vec<f64> = x.iter().zip(&grad).map(|(xi, g)| xi - step * g).collect();
        let next = project_to_simplex(&trial);
        let pg_norm = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / step;
        x = next;
        if pg_norm < PGD_GRAD_TOL {
            break;
        }
    }
    x
}

/// Recovers a label distribution `ρ` from class-conditional mean outputs of
/// a calibrated multi-class scorer, as the simplex point minimising
/// `‖(μ̂ − I)ρ‖²`. `mu_hat[j][k]` is the mean of output `j` over samples of
/// class `k`, so every column is a probability vector.
pub fn estimate_source_prior_multiclass(mu_hat: &[Vec<f64>]) -> Result<ProbabilityVector> {
    let k = mu_hat.len();
    if k < 2 {
        return Err(Error::validation(
            "multi-class prior retrieval needs K >= 2",
        ));
    }
    if mu_hat.iter().any(|row| row.len() != k) {
        return Err(Error::validation("score-mean matrix must be square"));
    }
    for col in 0..k {
        let column: Vec<f64> = mu_hat.iter().map(|row| row[col]).collect();
        if !crate::prob::validate_simplex(&column, STOCHASTIC_TOL) {
            return Err(Error::validation(format!(
                "column {} of the score-mean matrix is not a probability vector",
                col + 1
            )));
        }
    }

    let a: Vec<Vec<f64>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| mu_hat[i][j] - if i == j { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let m = gram(&a);
    let lambda = lambda_max(&m);
    if lambda <= FLAT_TOL {
        return Err(Error::AmbiguousStationary);
    }
    let step = 1.0 / lambda;

    let mut starts = vec![vec![1.0 / k as f64; k]];
    for v in 0..k {
        let mut e = vec![0.0; k];
        e[v] = 1.0;
        starts.push(e);
    }
    let solutions: Vec<(Vec<f64>, f64)> = starts
        .into_iter()
        .map(|s| {
            let x = projected_gradient(&m, s, step);
            let obj = stationary_objective(mu_hat, &x);
            (x, obj)
        })
        .collect();
    let best = solutions
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("at least one start");

    // Distinct points that all sit at the minimum mean the objective is flat.
    let ambiguous = solutions.iter().any(|(x, obj)| {
        *obj <= best.1 + FLAT_TOL && x.iter().zip(&best.0).any(|(a, b)| (a - b).abs() > 1e-6)
    });
    if ambiguous {
        return Err(Error::AmbiguousStationary);
    }
    ProbabilityVector::new(best.0.clone())
}
