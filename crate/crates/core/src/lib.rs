//! Open-set label shift estimation and correction.
//!
//! Given only the outputs of a source-domain ID classifier `f(x)` and an
//! ID/OOD scorer `h(x)`, this crate estimates the target-domain ID label
//! distribution `π` and ID ratio `ρₜ`, corrects the classifier to the target
//! domain without retraining, and provides closed-set baselines, metrics and
//! a synthetic Gaussian-mixture simulator with exact posteriors for
//! validation.
//!
//! Module map:
//!
//! - [`prob`]: probability vectors and the extended `K+1` constructions.
//! - [`estimators`]: closed-form ratio estimators and concentration bounds.
//! - [`em`]: the open-set EM algorithm (maximum likelihood and MAP).
//! - [`baselines`]: MLLS, MAPLS and the confusion-matrix (BBSE) estimator.
//! - [`correction`]: the target-adapted `K+1` class posterior.
//! - [`simulate`]: synthetic scenarios, label-shift generators, pseudo-OOD.
//! - [`metrics`]: w-MSE, Top-1 accuracy, ECE, ratio error.
//! - [`pipeline`]: the end-to-end estimation framework.
//! - [`io`]: prediction, truth and report file formats.
//! - [`experiments`]: Monte-Carlo bound checks and seeded sweeps.

// Negated comparisons are used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod correction;
pub mod em;
mod error;
pub mod estimators;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod prob;
pub mod simulate;

pub use error::{Error, Result};
pub use prob::{
    extend_classifier_output, extend_distribution, validate_simplex, ExtendedDistribution,
    PredictionRecord, ProbabilityVector, SourceLabelModel, TargetLabelModel,
};
