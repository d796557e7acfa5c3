//! End-to-end estimation: source statistics, `ρₛ` retrieval, open-set EM
//! and the `ρₜ` correction, plus the evaluation of estimates and corrected
//! predictions against ground truth.

use serde::{Deserialize, Serialize};

use crate::baselines::{self, ConfusionMatrix};
use crate::correction::{correct_posterior_closed_set, CorrectionContext};
use crate::em::{run_em, EmConfig, Prior};
use crate::estimators::{correct_rho, estimate_rho_s, rescale_mu0, score_mean, ScoreMeans};
use crate::io::{CorrectedRow, Truth};
use crate::metrics::{ece, rho_abs_error, top1_accuracy, w_mse, EvalReport};
use crate::prob::{
    common_k, extend_distribution, PredictionRecord, ProbabilityVector, SourceLabelModel,
    TargetLabelModel,
};
use crate::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.2;
pub const DEFAULT_RESCALE: f64 = 2.0;

/// Where the OOD score mean `μ̂₀` comes from.
#[derive(Debug, Clone, Copy)]
pub enum OodReference<'a> {
    /// Scores of a reference OOD set.
    Scores(&'a [f64]),
    /// Scores of noise-blended source samples, divided by `rescale ≥ 1`.
    Pseudo { scores: &'a [f64], rescale: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub em: EmConfig,
    pub rho_correction: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            em: EmConfig::mle(),
            rho_correction: true,
        }
    }
}

/// Output of [`estimate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateReport {
    #[serde(rename = "K")]
    pub k: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub n_reference: usize,
    pub c_hat: ProbabilityVector,
    pub mu1_hat: f64,
    pub mu0_hat: f64,
    pub rho_s_hat: f64,
    /// Dirichlet concentrations on `π` used by EM (all ones for maximum likelihood).
    pub alpha_in: Vec<f64>,
    /// Beta prior on `ρₜ` (ones for maximum likelihood).
    pub alpha_out: [f64; 2],
    pub pi_hat: ProbabilityVector,
    pub rho_t_hat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_t_corrected: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective_initial: f64,
    pub objective_final: f64,
}

impl EstimateReport {
    pub fn source_model(&self) -> Result<SourceLabelModel> {
        SourceLabelModel::new(self.c_hat.clone(), self.rho_s_hat)
    }

    /// Final ID ratio: the corrected value when present.
    pub fn rho_t(&self) -> f64 {
        self.rho_t_corrected.unwrap_or(self.rho_t_hat)
    }

    pub fn target_model(&self) -> Result<TargetLabelModel> {
        TargetLabelModel::new(self.pi_hat.clone(), self.rho_t())
    }

    /// The per-record reweighting implied by the estimate.
    pub fn correction_context(&self) -> Result<CorrectionContext> {
        let c_ext = self.source_model()?.extended();
        let pi_ext = extend_distribution(&self.pi_hat, self.rho_t())?;
        CorrectionContext::new(&c_ext, &pi_ext)
    }
}

/// `ĉ` from the labels of source ID records.
pub fn source_prior_from_labels(source: &[PredictionRecord]) -> Result<ProbabilityVector> {
    let k = common_k(source)?;
    let labels = source
        .iter()
        .enumerate()
        .map(|(i, r)| match r.label {
            Some(y) if y <= k => Ok(y),
            Some(y) => Err(Error::validation(format!(
                "source record {i} has OOD label {y}; source records must be ID"
            ))),
            None => Err(Error::validation(format!("source record {i} has no label"))),
        })
        .collect::<Result<Vec<_>>>()?;
    ProbabilityVector::from_label_counts(labels, k)
}

fn scores(records: &[PredictionRecord]) -> Vec<f64> {
    records.iter().map(|r| r.h).collect()
}

/// Runs the full estimation on labeled source ID records and unlabeled
/// target records.
pub fn estimate(
    source: &[PredictionRecord],
    target: &[PredictionRecord],
    reference: OodReference<'_>,
    options: &PipelineOptions,
) -> Result<EstimateReport> {
    let k = common_k(source)?;
    let k_target = common_k(target)?;
    if k_target != k {
        return Err(Error::validation(format!(
            "source has K = {k} but target has K = {k_target}"
        )));
    }
    let c_hat = source_prior_from_labels(source)?;
    let mu1_hat = score_mean(&scores(source))?;
    let (mu0_hat, n_reference) = match reference {
        OodReference::Scores(s) => (score_mean(s)?, s.len()),
        OodReference::Pseudo { scores, rescale } => {
            (rescale_mu0(score_mean(scores)?, rescale)?, scores.len())
        }
    };
    let means = ScoreMeans::new(mu1_hat, mu0_hat, source.len(), n_reference)?;
    let rho_s_hat = estimate_rho_s(&means)?;
    let source_model = SourceLabelModel::new(c_hat.clone(), rho_s_hat)?;

    let trace = run_em(&source_model, target, &options.em, None)?;
    let rho_t_corrected = if options.rho_correction {
        Some(correct_rho(trace.rho_t_final, mu1_hat, mu0_hat)?)
    } else {
        None
    };
    let (alpha_in, alpha_out) = match &options.em.prior {
        Prior::Flat => (vec![1.0; k], [1.0, 1.0]),
        Prior::DirichletBeta {
            alpha_in,
            alpha_out,
        } => (alpha_in.clone(), [alpha_out.0, alpha_out.1]),
    };
    Ok(EstimateReport {
        k,
        n_source: source.len(),
        n_target: target.len(),
        n_reference,
        c_hat,
        mu1_hat,
        mu0_hat,
        rho_s_hat,
        alpha_in,
        alpha_out,
        pi_hat: trace.pi_final.clone(),
        rho_t_hat: trace.rho_t_final,
        rho_t_corrected,
        iterations: trace.iterations_run,
        converged: trace.converged,
        objective_initial: trace.nll_per_iter[0],
        objective_final: *trace
            .nll_per_iter
            .last()
            .expect("trace has the initial objective"),
    })
}

/// Corrected posteriors and decisions for every target record.
pub fn correct_target(
    report: &EstimateReport,
    target: &[PredictionRecord],
) -> Result<Vec<CorrectedRow>> {
    let ctx = report.correction_context()?;
    Ok(ctx
        .correct_all(target)?
        .iter()
        .zip(target)
        .map(|(g, r)| CorrectedRow::new(g, r.label))
        .collect())
}

/// Estimation metrics; `top1` and `ece` are filled from `corrected` when
/// given and its rows carry labels.
pub fn evaluate(
    pi_hat: &ProbabilityVector,
    rho_t_hat: f64,
    truth: &Truth,
    corrected: Option<&[CorrectedRow]>,
    n_bins: usize,
) -> Result<EvalReport> {
    let w = w_mse(pi_hat, &truth.pi, &truth.c)?;
    let mut report = EvalReport {
        w_mse: w,
        top1: None,
        rho_t_abs_err: rho_abs_error(rho_t_hat, truth.rho_t),
        ece: None,
    };
    if let Some(rows) = corrected {
        let (top1, e) = classification_metrics(rows, n_bins)?;
        report.top1 = Some(top1);
        report.ece = Some(e);
    }
    Ok(report)
}

/// Top-1 accuracy and ECE of labeled corrected rows.
pub fn classification_metrics(rows: &[CorrectedRow], n_bins: usize) -> Result<(f64, f64)> {
    let labeled: Vec<&CorrectedRow> = rows.iter().filter(|r| r.y.is_some()).collect();
    if labeled.len() != rows.len() {
        return Err(Error::validation(format!(
            "{} of {} corrected rows have no ground-truth label",
            rows.len() - labeled.len(),
            rows.len()
        )));
    }
    let preds: Vec<usize> = labeled.iter().map(|r| r.label).collect();
    let truths: Vec<usize> = labeled.iter().map(|r| r.y.unwrap()).collect();
    let conf: Vec<(f64, bool)> = labeled
        .iter()
        .map(|r| (r.g[r.label - 1].clamp(0.0, 1.0), Some(r.label) == r.y))
        .collect();
    Ok((top1_accuracy(&preds, &truths)?, ece(&conf, n_bins)?))
}

/// Closed-set comparison methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    OslsMle,
    OslsMap,
    Mlls,
    Mapls,
    Bbse,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::OslsMle => "osls-mle",
            Method::OslsMap => "osls-map",
            Method::Mlls => "mlls",
            Method::Mapls => "mapls",
            Method::Bbse => "bbse",
        }
    }

    pub fn is_open_set(self) -> bool {
        matches!(self, Method::OslsMle | Method::OslsMap)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [
            Method::OslsMle,
            Method::OslsMap,
            Method::Mlls,
            Method::Mapls,
            Method::Bbse,
        ]
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| Error::validation(format!("unknown method {s:?}")))
    }
}

/// Hyper-parameters shared by all methods of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSettings {
    pub max_iters: usize,
    /// Symmetric Dirichlet concentration for OSLS-MAP and MAPLS.
    pub alpha_in: f64,
    /// Beta prior on `ρₜ` for OSLS-MAP.
    pub alpha_out: [f64; 2],
}

impl Default for MethodSettings {
    fn default() -> Self {
        Self {
            max_iters: 100,
            alpha_in: 2.0,
            alpha_out: [2.0, 2.0],
        }
    }
}

impl MethodSettings {
    pub fn em_config(&self, method: Method, k: usize) -> EmConfig {
        let base = match method {
            Method::OslsMap => EmConfig::map(
                vec![self.alpha_in; k],
                (self.alpha_out[0], self.alpha_out[1]),
            ),
            _ => EmConfig::mle(),
        };
        base.with_max_iters(self.max_iters)
    }
}

/// Evaluates one method on one dataset. Open-set methods use the real OOD
/// reference scores; closed-set methods treat every target sample as ID, so
/// their implied ID ratio is 1 and OOD samples always count as errors.
pub fn evaluate_method(
    method: Method,
    source: &[PredictionRecord],
    target: &[PredictionRecord],
    ood_scores: &[f64],
    truth: &Truth,
    settings: &MethodSettings,
    n_bins: usize,
) -> Result<EvalReport> {
    let k = common_k(source)?;
    if method.is_open_set() {
        let options = PipelineOptions {
            em: settings.em_config(method, k),
            rho_correction: true,
        };
        let report = estimate(source, target, OodReference::Scores(ood_scores), &options)?;
        let corrected = correct_target(&report, target)?;
        return evaluate(
            &report.pi_hat,
            report.rho_t(),
            truth,
            Some(&corrected),
            n_bins,
        );
    }

    let c_hat = source_prior_from_labels(source)?;
    let target_f: Vec<ProbabilityVector> = target.iter().map(|r| r.f.clone()).collect();
    let pi_hat = match method {
        Method::Mlls => baselines::mlls(&target_f, &c_hat, settings.max_iters)?,
        Method::Mapls => baselines::mapls(
            &target_f,
            &c_hat,
            &vec![settings.alpha_in; k],
            settings.max_iters,
        )?,
        Method::Bbse => {
            let confusion = ConfusionMatrix::from_records(source)?;
            baselines::bbse(&confusion, &baselines::predicted_frequencies(&target_f)?)?
        }
        Method::OslsMle | Method::OslsMap => unreachable!(),
    };
    let corrected = target
        .iter()
        .map(|r| {
            let g = correct_posterior_closed_set(&r.f, &c_hat, &pi_hat)?;
            let label = g.argmax();
            let mut full = g.into_inner();
            full.push(0.0);
            Ok(CorrectedRow {
                g: full,
                label,
                y: r.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&pi_hat, 1.0, truth, Some(&corrected), n_bins)
}
