//! Open-set EM: maximum-likelihood and MAP estimation of `(π, ρₜ)`.
//!
//! Appending the OOD class to the label space turns the open-set problem
//! into a closed-set one over `K+1` classes: the classifier output becomes
//! `f̃ = [h·f, 1 − h]` and the source/target label distributions become
//! `c̃ = [ρₛ·c, 1 − ρₛ]` and `π̃ = [ρₜ·π, 1 − ρₜ]`. Up to a constant the
//! negative log likelihood of the unlabeled target set is
//!
//! ```text
//! NLL(π, ρₜ) = −Σᵢ log Σⱼ (π̃ⱼ / c̃ⱼ) · f̃(xᵢ)ⱼ
//! ```
//!
//! and EM alternates posterior responsibilities `gᵢⱼ` (normalised over all
//! `K+1` entries) with closed-form updates of `π` and `ρₜ`, optionally under
//! a Dirichlet prior on `π` and a Beta prior on `ρₜ`.

use serde::{Deserialize, Serialize};

use crate::prob::{
    common_k, ExtendedDistribution, PredictionRecord, ProbabilityVector, SourceLabelModel,
    TargetLabelModel,
};
use crate::{Error, Result};

/// Floor applied to each per-sample likelihood before taking the log.
pub const LIKELIHOOD_FLOOR: f64 = 1e-300;

/// With `tol = 0` a run counts as converged when its last step moved the
/// parameters by less than this.
const CONVERGED_STEP: f64 = 1e-8;

/// Priors on the target parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prior {
    /// Maximum likelihood.
    Flat,
    /// `π ~ Dir(alpha_in)`, `ρₜ ~ Beta(alpha_out.0, alpha_out.1)`.
    DirichletBeta {
        alpha_in: Vec<f64>,
        alpha_out: (f64, f64),
    },
}

impl Prior {
    fn validate(&self, k: usize) -> Result<()> {
        if let Prior::DirichletBeta {
            alpha_in,
            alpha_out,
        } = self
        {
            if alpha_in.len() != k {
                return Err(Error::validation(format!(
                    "alpha_in has {} entries, expected {k}",
                    alpha_in.len()
                )));
            }
            let all = alpha_in.iter().chain([&alpha_out.0, &alpha_out.1]);
            if all.into_iter().any(|a| !(*a >= 1.0) || !a.is_finite()) {
                return Err(Error::validation(
                    "prior concentrations must be finite and >= 1",
                ));
            }
        }
        Ok(())
    }

    /// Log prior density up to its normalising constant. Terms with a zero
    /// exponent are skipped so boundary iterates stay finite.
    pub fn log_density(&self, pi: &[f64], rho_t: f64) -> f64 {
        match self {
            Prior::Flat => 0.0,
            Prior::DirichletBeta {
                alpha_in,
                alpha_out,
            } => {
                let term = |a: f64, x: f64| if a == 1.0 { 0.0 } else { (a - 1.0) * x.ln() };
                let mut lp: f64 = alpha_in.iter().zip(pi).map(|(&a, &p)| term(a, p)).sum();
                lp += term(alpha_out.0, rho_t);
                lp += term(alpha_out.1, 1.0 - rho_t);
                lp
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Early stop when the L∞ change in `(π, ρₜ)` drops below `tol`;
    /// `0.0` runs the full budget.
    pub tol: f64,
    pub prior: Prior,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self::mle()
    }
}

impl EmConfig {
    pub fn mle() -> Self {
        Self {
            max_iters: 100,
            tol: 0.0,
            prior: Prior::Flat,
        }
    }

    pub fn map(alpha_in: Vec<f64>, alpha_out: (f64, f64)) -> Self {
        Self {
            prior: Prior::DirichletBeta {
                alpha_in,
                alpha_out,
            },
            ..Self::mle()
        }
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

/// One `(π, ρₜ)` iterate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub pi: Vec<f64>,
    pub rho_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    /// Objective at every iterate, starting with the initial point. For MAP
    /// runs this is the negative log posterior.
    pub nll_per_iter: Vec<f64>,
    pub pi_final: ProbabilityVector,
    pub rho_t_final: f64,
    pub iterations_run: usize,
    pub converged: bool,
    /// Set when some M-step found no ID mass and left `π` unchanged.
    pub pi_frozen: bool,
    /// All iterates, `iterates[0]` being the initial point.
    pub iterates: Vec<Iterate>,
}

impl EmTrace {
    pub fn estimate(&self) -> TargetLabelModel {
        TargetLabelModel {
            pi: self.pi_final.clone(),
            rho_t: self.rho_t_final,
        }
    }
}

/// Target records flattened into a row-major `N × (K+1)` matrix of `f̃`.
pub(crate) struct ExtendedBatch {
    k: usize,
    rows: Vec<f64>,
}

impl ExtendedBatch {
    pub(crate) fn new(target: &[PredictionRecord]) -> Result<Self> {
        let k = common_k(target)?;
        let mut rows = Vec::with_capacity(target.len() * (k + 1));
        for r in target {
            rows.extend(r.f.as_slice().iter().map(|f| r.h * f));
            rows.push(1.0 - r.h);
        }
        Ok(Self { k, rows })
    }

    fn n(&self) -> usize {
        self.rows.len() / (self.k + 1)
    }

    fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.rows.chunks_exact(self.k + 1)
    }
}

/// `π̃ⱼ / c̃ⱼ` for all `K+1` classes.
fn likelihood_ratios(pi: &[f64], rho_t: f64, c_ext: &ExtendedDistribution) -> Vec<f64> {
    let k = pi.len();
    let c = c_ext.as_slice();
    let mut ratios: Vec<f64> = (0..k).map(|j| rho_t * pi[j] / c[j]).collect();
    ratios.push((1.0 - rho_t) / c[k]);
    ratios
}

fn nll_with_ratios(batch: &ExtendedBatch, ratios: &[f64]) -> f64 {
    let mut nll = 0.0;
    for row in batch.iter() {
        let inner: f64 = row.iter().zip(ratios).map(|(f, w)| f * w).sum();
        nll -= inner.max(LIKELIHOOD_FLOOR).ln();
    }
    nll
}

struct EStep {
    col_sums: Vec<f64>,
    nll: f64,
}

fn e_step(batch: &ExtendedBatch, ratios: &[f64]) -> Result<EStep> {
    let width = batch.k + 1;
    let mut col_sums = vec![0.0; width];
    let mut weights = vec![0.0; width];
    let mut nll = 0.0;
    for (i, row) in batch.iter().enumerate() {
        let mut denom = 0.0;
        for j in 0..width {
            weights[j] = ratios[j] * row[j];
            denom += weights[j];
        }
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::DegenerateSample { index: i });
        }
        for j in 0..width {
            col_sums[j] += weights[j] / denom;
        }
        nll -= denom.max(LIKELIHOOD_FLOOR).ln();
    }
    Ok(EStep { col_sums, nll })
}

/// Result of a single M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub pi: Vec<f64>,
    pub rho_t: f64,
    /// No ID mass was available and `π` was carried over unchanged.
    pub pi_frozen: bool,
}

/// Closed-form M-step from responsibility column sums `Σᵢ gᵢⱼ`
/// (`K+1` entries) over `n` samples.
///
/// `n = 0` is accepted so that the prior-only fixed point can be checked.
pub fn m_step(col_sums: &[f64], n: f64, prior: &Prior, prev_pi: &[f64]) -> MStep {
    let k = col_sums.len() - 1;
    // Summing the ID columns directly instead of using `n − S_{K+1}` keeps
    // `π` normalized when almost no ID mass remains.
    let id_sum: f64 = col_sums[..k].iter().sum();
    // Prior offsets are added as `(α − 1)` so that unit concentrations
    // reproduce the maximum-likelihood arithmetic bit for bit.
    let (pi_den, rho_num, rho_den, offsets) = match prior {
        Prior::Flat => (id_sum, id_sum, n, None),
        Prior::DirichletBeta {
            alpha_in,
            alpha_out,
        } => {
            let extra: f64 = alpha_in.iter().map(|a| a - 1.0).sum();
            (
                id_sum + extra,
                id_sum + (alpha_out.0 - 1.0),
                n + ((alpha_out.0 - 1.0) + (alpha_out.1 - 1.0)),
                Some(alpha_in.as_slice()),
            )
        }
    };
    let (pi, pi_frozen) = if pi_den > 0.0 {
        let pi = match offsets {
            None => col_sums[..k].iter().map(|s| s / pi_den).collect(),
            Some(alpha) => col_sums[..k]
                .iter()
                .zip(alpha)
                .map(|(s, a)| (s + (a - 1.0)) / pi_den)
                .collect(),
        };
        (pi, false)
    } else {
        (prev_pi.to_vec(), true)
    };
    let rho_t = if rho_den > 0.0 {
        (rho_num / rho_den).clamp(0.0, 1.0)
    } else {
        0.5
    };
    MStep {
        pi,
        rho_t,
        pi_frozen,
    }
}

fn check_start(pi: &ProbabilityVector, rho_t: f64) -> Result<()> {
    if pi.as_slice().iter().any(|&p| p <= 0.0) {
        return Err(Error::validation("EM start needs strictly positive pi"));
    }
    if !(rho_t > 0.0 && rho_t < 1.0) {
        return Err(Error::validation(format!(
            "EM start rho_t = {rho_t} must lie in (0, 1)"
        )));
    }
    Ok(())
}

fn check_dims(source: &SourceLabelModel, batch: &ExtendedBatch, pi_len: usize) -> Result<()> {
    if batch.k != source.k() || pi_len != source.k() {
        return Err(Error::validation(format!(
            "class-count mismatch: source K = {}, target K = {}, pi K = {pi_len}",
            source.k(),
            batch.k
        )));
    }
    Ok(())
}

/// Negative log likelihood of `(π, ρₜ)` for the target records, without the
/// parameter-free constant.
pub fn osls_nll(
    pi: &ProbabilityVector,
    rho_t: f64,
    source: &SourceLabelModel,
    target: &[PredictionRecord],
) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho_t) {
        return Err(Error::validation(format!("rho_t = {rho_t} outside [0, 1]")));
    }
    let batch = ExtendedBatch::new(target)?;
    check_dims(source, &batch, pi.len())?;
    let ratios = likelihood_ratios(pi.as_slice(), rho_t, &source.extended());
    Ok(nll_with_ratios(&batch, &ratios))
}

/// One EM iteration from `(π, ρₜ)`.
pub fn em_step(
    pi: &ProbabilityVector,
    rho_t: f64,
    source: &SourceLabelModel,
    target: &[PredictionRecord],
    config: &EmConfig,
) -> Result<(ProbabilityVector, f64)> {
    check_start(pi, rho_t)?;
    let batch = ExtendedBatch::new(target)?;
    check_dims(source, &batch, pi.len())?;
    config.prior.validate(source.k())?;
    let ratios = likelihood_ratios(pi.as_slice(), rho_t, &source.extended());
    let e = e_step(&batch, &ratios)?;
    let m = m_step(&e.col_sums, batch.n() as f64, &config.prior, pi.as_slice());
    Ok((ProbabilityVector::new(m.pi)?, m.rho_t))
}

/// Runs EM from `init`, defaulting to `π = c`, `ρₜ = ρₛ`.
pub fn run_em(
    source: &SourceLabelModel,
    target: &[PredictionRecord],
    config: &EmConfig,
    init: Option<&TargetLabelModel>,
) -> Result<EmTrace> {
    let batch = ExtendedBatch::new(target)?;
    let (pi0, rho0) = match init {
        Some(t) => (t.pi.clone(), t.rho_t),
        None => (source.c().clone(), source.rho_s()),
    };
    check_start(&pi0, rho0)?;
    check_dims(source, &batch, pi0.len())?;
    config.prior.validate(source.k())?;
    if !(config.tol >= 0.0) {
        return Err(Error::validation("tol must be non-negative"));
    }

    let c_ext = source.extended();
    let n = batch.n() as f64;
    let mut pi = pi0.into_inner();
    let mut rho_t = rho0;
    let mut iterates = vec![Iterate {
        pi: pi.clone(),
        rho_t,
    }];
    let mut objective = Vec::with_capacity(config.max_iters + 1);
    let mut pi_frozen = false;
    let mut last_change = f64::INFINITY;
    let mut converged = false;

    for _ in 0..config.max_iters {
        let ratios = likelihood_ratios(&pi, rho_t, &c_ext);
        let e = e_step(&batch, &ratios)?;
        objective.push(e.nll - config.prior.log_density(&pi, rho_t));

        let m = m_step(&e.col_sums, n, &config.prior, &pi);
        pi_frozen |= m.pi_frozen;
        last_change = pi
            .iter()
            .zip(&m.pi)
            .map(|(a, b)| (a - b).abs())
            .fold((rho_t - m.rho_t).abs(), f64::max);
        pi = m.pi;
        rho_t = m.rho_t;
        iterates.push(Iterate {
            pi: pi.clone(),
            rho_t,
        });
        if config.tol > 0.0 && last_change < config.tol {
            converged = true;
            break;
        }
    }
    if config.tol == 0.0 {
        converged = last_change < CONVERGED_STEP;
    }
    let ratios = likelihood_ratios(&pi, rho_t, &c_ext);
    objective.push(nll_with_ratios(&batch, &ratios) - config.prior.log_density(&pi, rho_t));

    Ok(EmTrace {
        nll_per_iter: objective,
        pi_final: ProbabilityVector::new(pi)?,
        rho_t_final: rho_t,
        iterations_run: iterates.len() - 1,
        converged,
        pi_frozen,
        iterates,
    })
}

/// Maximum-likelihood `ρₜ` for a binary scorer when `π = c`: the fraction
/// of target samples scored as ID.
pub fn closed_form_rho_t(target: &[PredictionRecord]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::validation("empty target set"));
    }
    if let Some(i) = target.iter().position(|r| r.h != 0.0 && r.h != 1.0) {
        return Err(Error::validation(format!(
            "closed-form rho_t needs binary scores; record {i} has h = {}",
            target[i].h
        )));
    }
    Ok(target.iter().map(|r| r.h).sum::<f64>() / target.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn rec(f: &[f64], h: f64) -> PredictionRecord {
        PredictionRecord::new(pv(f), h, None).unwrap()
    }

    fn source(c: &[f64], rho_s: f64) -> SourceLabelModel {
        SourceLabelModel::new(pv(c), rho_s).unwrap()
    }

    /// Direct scalar evaluation of the NLL, independent of the batch code.
    fn scalar_nll(
        pi: &[f64],
        rho_t: f64,
        c: &[f64],
        rho_s: f64,
        records: &[(Vec<f64>, f64)],
    ) -> f64 {
        let k = c.len();
        let mut total = 0.0;
        for (f, h) in records {
            let mut inner = 0.0;
            for j in 0..k {
                inner += (rho_t * pi[j]) / (rho_s * c[j]) * (h * f[j]);
            }
            inner += (1.0 - rho_t) / (1.0 - rho_s) * (1.0 - h);
            total -= inner.ln();
        }
        total
    }

    #[test]
    fn nll_examples() {
        let s = source(&[1.0], 0.5);
        assert_abs_diff_eq!(
            osls_nll(&pv(&[1.0]), 0.5, &s, &[rec(&[1.0], 0.5)]).unwrap(),
            0.0,
            epsilon = 1e-15
        );

        let s = source(&[0.3, 0.7], 0.4);
        let target: Vec<_> = [([0.2, 0.8], 0.3), ([0.9, 0.1], 0.95), ([0.5, 0.5], 0.0)]
            .iter()
            .map(|(f, h)| rec(f, *h))
            .collect();
        assert_abs_diff_eq!(
            osls_nll(&pv(&[0.3, 0.7]), 0.4, &s, &target).unwrap(),
            0.0,
            epsilon = 1e-14
        );

        let s = source(&[0.5, 0.5], 0.5);
        let got = osls_nll(&pv(&[1.0, 0.0]), 1.0, &s, &[rec(&[0.5, 0.5], 1.0)]).unwrap();
        let expected = scalar_nll(&[1.0, 0.0], 1.0, &[0.5, 0.5], 0.5, &[(vec![0.5, 0.5], 1.0)]);
        assert_abs_diff_eq!(expected, -(2.0f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
    }

    #[test]
    fn nll_is_floored_not_infinite() {
        // rho_t = 1 gives an OOD-certain sample zero likelihood.
        let s = source(&[1.0], 0.5);
        let nll = osls_nll(&pv(&[1.0]), 1.0, &s, &[rec(&[1.0], 0.0)]).unwrap();
        assert_abs_diff_eq!(nll, -LIKELIHOOD_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn nll_rejects_mismatched_classes() {
        let s = source(&[0.5, 0.5], 0.5);
        assert!(osls_nll(&pv(&[1.0]), 0.5, &s, &[rec(&[1.0], 0.5)]).is_err());
        assert!(osls_nll(&pv(&[0.5, 0.5]), 0.5, &s, &[]).is_err());
    }

    #[test]
    fn em_step_certain_id_sample() {
        let s = source(&[1.0], 0.3);
        let (pi, rho) =
            em_step(&pv(&[1.0]), 0.6, &s, &[rec(&[1.0], 1.0)], &EmConfig::mle()).unwrap();
        assert_eq!(pi.as_slice(), &[1.0]);
        assert_eq!(rho, 1.0);
    }

    #[test]
    fn em_step_balanced_certain_samples() {
        let s = source(&[1.0], 0.5);
        let target = [rec(&[1.0], 1.0), rec(&[1.0], 0.0)];
        let (pi, rho) = em_step(&pv(&[1.0]), 0.5, &s, &target, &EmConfig::mle()).unwrap();
        assert_eq!(pi.as_slice(), &[1.0]);
        assert_abs_diff_eq!(rho, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn m_step_with_dirichlet_prior() {
        let prior = Prior::DirichletBeta {
            alpha_in: vec![2.0, 2.0],
            alpha_out: (1.0, 1.0),
        };
        let m = m_step(&[3.0, 1.0, 1.0], 5.0, &prior, &[0.5, 0.5]);
        assert_abs_diff_eq!(m.pi[0], 4.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.pi[1], 2.0 / 6.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.rho_t, 0.8, epsilon = 1e-15);
    }

    #[test]
    fn m_step_prior_mode_without_data() {
        let prior = Prior::DirichletBeta {
            alpha_in: vec![2.0; 4],
            alpha_out: (2.0, 2.0),
        };
        let m = m_step(&[0.0; 5], 0.0, &prior, &[0.1, 0.2, 0.3, 0.4]);
        for p in &m.pi {
            assert_abs_diff_eq!(*p, 0.25, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(m.rho_t, 0.5, epsilon = 1e-15);
        assert!(!m.pi_frozen);
    }

    #[test]
    fn m_step_freezes_pi_when_all_mass_is_ood() {
        let m = m_step(&[0.0, 0.0, 3.0], 3.0, &Prior::Flat, &[0.3, 0.7]);
        assert!(m.pi_frozen);
        assert_eq!(m.pi, vec![0.3, 0.7]);
        assert_eq!(m.rho_t, 0.0);
    }

    #[test]
    fn run_em_all_ood_target_sets_frozen_flag() {
        let s = source(&[0.5, 0.5], 0.5);
        let target = vec![rec(&[0.5, 0.5], 0.0); 4];
        let trace = run_em(&s, &target, &EmConfig::mle(), None).unwrap();
        assert!(trace.pi_frozen);
        assert_eq!(trace.rho_t_final, 0.0);
        assert_eq!(trace.pi_final.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn run_em_single_certain_sample() {
        let s = source(&[0.4, 0.6], 0.5);
        let trace = run_em(&s, &[rec(&[1.0, 0.0], 1.0)], &EmConfig::mle(), None).unwrap();
        assert_eq!(trace.iterates[1].pi, vec![1.0, 0.0]);
        assert_eq!(trace.iterates[1].rho_t, 1.0);
        assert_eq!(trace.pi_final.as_slice(), &[1.0, 0.0]);
        assert_eq!(trace.rho_t_final, 1.0);
        assert!(trace.converged);
    }

    #[test]
    fn run_em_trace_shape_and_early_stop() {
        let s = source(&[0.5, 0.5], 0.5);
        let target: Vec<_> = (0..40)
            .map(|i| {
                let a = (i % 7) as f64 / 7.0;
                rec(&[a, 1.0 - a], ((i % 5) as f64 + 0.5) / 5.0)
            })
            .collect();
        let full = run_em(&s, &target, &EmConfig::mle(), None).unwrap();
        assert_eq!(full.iterations_run, 100);
        assert_eq!(full.nll_per_iter.len(), 101);
        let early = run_em(&s, &target, &EmConfig::mle().with_tol(1e-6), None).unwrap();
        assert!(early.converged);
        assert!(early.iterations_run < 100);
        assert_eq!(early.nll_per_iter.len(), early.iterations_run + 1);
    }

    #[test]
    fn run_em_rejects_bad_start_and_prior() {
        let s = source(&[0.5, 0.5], 0.5);
        let target = [rec(&[0.5, 0.5], 0.5)];
        let bad_init = TargetLabelModel::new(pv(&[1.0, 0.0]), 0.5).unwrap();
        assert!(run_em(&s, &target, &EmConfig::mle(), Some(&bad_init)).is_err());
        let bad_prior = EmConfig::map(vec![0.5, 2.0], (1.0, 1.0));
        assert!(run_em(&s, &target, &bad_prior, None).is_err());
        let short_prior = EmConfig::map(vec![2.0], (1.0, 1.0));
        assert!(run_em(&s, &target, &short_prior, None).is_err());
    }

    #[test]
    fn degenerate_sample_reports_index() {
        // rho_t = 1 is reachable only through iteration, so drive the E-step
        // directly with a zero OOD ratio.
        let s = source(&[1.0], 0.5);
        let batch = ExtendedBatch::new(&[rec(&[1.0], 0.7), rec(&[1.0], 0.0)]).unwrap();
        let ratios = likelihood_ratios(&[1.0], 1.0, &s.extended());
        assert!(matches!(
            e_step(&batch, &ratios),
            Err(Error::DegenerateSample { index: 1 })
        ));
    }

    #[test]
    fn closed_form_examples() {
        let mut target = vec![rec(&[1.0], 0.0); 70];
        target.extend(vec![rec(&[1.0], 1.0); 30]);
        assert_abs_diff_eq!(closed_form_rho_t(&target).unwrap(), 0.3, epsilon = 1e-15);
        assert_eq!(closed_form_rho_t(&vec![rec(&[1.0], 1.0); 5]).unwrap(), 1.0);
        target.push(rec(&[1.0], 0.5));
        assert!(closed_form_rho_t(&target).is_err());
    }

    #[test]
    fn map_trace_is_negative_log_posterior() {
        let s = source(&[0.5, 0.5], 0.5);
        let target: Vec<_> = (0..10)
            .map(|i| rec(&[0.1 * i as f64, 1.0 - 0.1 * i as f64], 0.7))
            .collect();
        let config = EmConfig::map(vec![3.0, 2.0], (2.0, 4.0)).with_max_iters(5);
        let trace = run_em(&s, &target, &config, None).unwrap();
        for (obj, it) in trace.nll_per_iter.iter().zip(&trace.iterates) {
            let nll = osls_nll(&pv(&it.pi), it.rho_t, &s, &target).unwrap();
            let lp = config.prior.log_density(&it.pi, it.rho_t);
            assert_abs_diff_eq!(*obj, nll - lp, epsilon = 1e-10);
        }
    }
}
