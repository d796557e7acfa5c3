//! Target-adapted classifier: reweights the extended classifier output by
//! the estimated target/source prior ratios.

use serde::Serialize;

use crate::em::LIKELIHOOD_FLOOR;
use crate::prob::{
    argmax, extend_classifier_output, ExtendedDistribution, PredictionRecord, ProbabilityVector,
};
use crate::{Error, Result};

/// Posterior over the `K+1` target classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectedPosterior {
    pub probs: ExtendedDistribution,
}

impl CorrectedPosterior {
    /// 1-based argmax, ties broken toward the smallest index.
    pub fn classify(&self) -> usize {
        argmax(self.probs.as_slice()) + 1
    }
}

pub fn classify(posterior: &CorrectedPosterior) -> usize {
    posterior.classify()
}

/// The ratios `π̃ⱼ / c̃ⱼ` computed once for a whole target set.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionContext {
    ratios: Vec<f64>,
}

impl CorrectionContext {
    pub fn new(c_ext: &ExtendedDistribution, pi_ext: &ExtendedDistribution) -> Result<Self> {
        Self::from_slices(c_ext.as_slice(), pi_ext.as_slice())
    }

    fn from_slices(c: &[f64], pi: &[f64]) -> Result<Self> {
        if c.len() != pi.len() {
            return Err(Error::validation(format!(
                "source has {} classes, target {}",
                c.len(),
                pi.len()
            )));
        }
        if let Some(j) = c.iter().position(|&x| !(x > 0.0)) {
            return Err(Error::validation(format!(
                "source prior entry {} is not strictly positive",
                j + 1
            )));
        }
        Ok(Self {
            ratios: pi.iter().zip(c).map(|(p, c)| p / c).collect(),
        })
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    fn reweight(&self, f: &[f64]) -> Option<Vec<f64>> {
        let mut g: Vec<f64> = f.iter().zip(&self.ratios).map(|(f, w)| f * w).collect();
        let total: f64 = g.iter().sum();
        if !(total > LIKELIHOOD_FLOOR) || !total.is_finite() {
            return None;
        }
        for x in g.iter_mut() {
            *x /= total;
        }
        Some(g)
    }

    pub fn correct(&self, record: &PredictionRecord) -> Result<CorrectedPosterior> {
        self.correct_indexed(record, 0)
    }

    fn correct_indexed(
        &self,
        record: &PredictionRecord,
        index: usize,
    ) -> Result<CorrectedPosterior> {
        if record.k() + 1 != self.ratios.len() {
            return Err(Error::validation(format!(
                "record {index} has {} classes, expected {}",
                record.k(),
                self.ratios.len() - 1
            )));
        }
        let f_ext = extend_classifier_output(record);
        let g = self
            .reweight(f_ext.as_slice())
            .ok_or(Error::DegenerateSample { index })?;
        Ok(CorrectedPosterior {
            probs: ExtendedDistribution::new(g)?,
        })
    }

    /// Corrects every record; errors report the offending record index.
    pub fn correct_all(&self, records: &[PredictionRecord]) -> Result<Vec<CorrectedPosterior>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| self.correct_indexed(r, i))
            .collect()
    }
}

/// `g̃ⱼ ∝ (π̃ⱼ / c̃ⱼ) · f̃ⱼ` for one record.
pub fn correct_posterior(
    record: &PredictionRecord,
    c_ext: &ExtendedDistribution,
    pi_ext: &ExtendedDistribution,
) -> Result<CorrectedPosterior> {
    CorrectionContext::new(c_ext, pi_ext)?.correct(record)
}

/// The same reweighting over the `K` ID classes only.
pub fn correct_posterior_closed_set(
    f: &ProbabilityVector,
    c: &ProbabilityVector,
    pi: &ProbabilityVector,
) -> Result<ProbabilityVector> {
    let ctx = CorrectionContext::from_slices(c.as_slice(), pi.as_slice())?;
    if f.len() != c.len() {
        return Err(Error::validation(
            "classifier output length differs from prior length",
        ));
    }
    let g = ctx
        .reweight(f.as_slice())
        .ok_or(Error::DegenerateSample { index: 0 })?;
    ProbabilityVector::new(g)
}
