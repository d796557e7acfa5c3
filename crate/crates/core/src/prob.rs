//! Probability vectors, label models and the extended `K+1` constructions.
//!
//! Labels are 1-based throughout the crate: ID classes are `1..=K` and the
//! OOD class is `K+1`.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Absolute tolerance on ingest for simplex membership.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Smallest admissible source class probability.
pub const MIN_SOURCE_PROB: f64 = 1e-6;

/// Returns true iff all entries are `>= -tol` and the sum is within `tol` of 1.
pub fn validate_simplex(v: &[f64], tol: f64) -> bool {
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return false;
    }
    v.iter().all(|&x| x >= -tol) && (v.iter().sum::<f64>() - 1.0).abs() <= tol
}

/// A point on the probability simplex.
///
/// Construction checks membership within [`SIMPLEX_TOL`] and renormalises,
/// so every stored vector is non-negative and sums to one up to rounding.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if !validate_simplex(&entries, SIMPLEX_TOL) {
            return Err(Error::validation(format!(
                "not a probability vector (len {}, sum {:.12})",
                entries.len(),
                entries.iter().sum::<f64>()
            )));
        }
        Ok(Self::normalize_unchecked(entries))
    }

    /// Normalises a non-negative weight vector with positive total mass.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::validation("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::validation("weights have zero total mass"));
        }
        Ok(Self(weights.into_iter().map(|w| w / total).collect()))
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 1, "uniform distribution needs at least one class");
        Self(vec![1.0 / k as f64; k])
    }

    /// Relative frequencies of 1-based labels in `1..=k`.
    pub fn from_label_counts(labels: impl IntoIterator<Item = usize>, k: usize) -> Result<Self> {
        let mut counts = vec![0.0; k];
        for label in labels {
            if label == 0 || label > k {
                return Err(Error::validation(format!("label {label} outside 1..={k}")));
            }
            counts[label - 1] += 1.0;
        }
        Self::from_weights(counts)
    }

    fn normalize_unchecked(mut entries: Vec<f64>) -> Self {
        for x in entries.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        let total: f64 = entries.iter().sum();
        if total != 1.0 {
            for x in entries.iter_mut() {
                *x /= total;
            }
        }
        Self(entries)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// 1-based index of the largest entry, ties toward the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0) + 1
    }
}

impl<'de> Deserialize<'de> for ProbabilityVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<f64>::deserialize(d)?;
        ProbabilityVector::new(raw).map_err(serde::de::Error::custom)
    }
}

impl std::ops::Index<usize> for ProbabilityVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// 0-based argmax with ties broken toward the smallest index.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Source ID label distribution `c` and source ID ratio `ρₛ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLabelModel {
    c: ProbabilityVector,
    rho_s: f64,
}

impl SourceLabelModel {
    pub fn new(c: ProbabilityVector, rho_s: f64) -> Result<Self> {
        if let Some(j) = c.as_slice().iter().position(|&x| x < MIN_SOURCE_PROB) {
            return Err(Error::validation(format!(
                "source class {} has probability {:.3e} < {MIN_SOURCE_PROB:e}",
                j + 1,
                c[j]
            )));
        }
        if !(rho_s > 0.0 && rho_s < 1.0) {
            return Err(Error::validation(format!(
                "rho_s = {rho_s} must lie in (0, 1)"
            )));
        }
        Ok(Self { c, rho_s })
    }

    pub fn c(&self) -> &ProbabilityVector {
        &self.c
    }

    pub fn rho_s(&self) -> f64 {
        self.rho_s
    }

    pub fn k(&self) -> usize {
        self.c.len()
    }

    /// `c̃ = [ρₛ·c₁, …, ρₛ·c_K, 1 − ρₛ]`.
    pub fn extended(&self) -> ExtendedDistribution {
        extend_distribution(&self.c, self.rho_s).expect("validated on construction")
    }
}

/// Target ID label distribution `π` and target ID ratio `ρₜ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetLabelModel {
    pub pi: ProbabilityVector,
    pub rho_t: f64,
}

impl TargetLabelModel {
    pub fn new(pi: ProbabilityVector, rho_t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho_t) {
            return Err(Error::validation(format!(
                "rho_t = {rho_t} must lie in [0, 1]"
            )));
        }
        Ok(Self { pi, rho_t })
    }

    pub fn extended(&self) -> ExtendedDistribution {
        extend_distribution(&self.pi, self.rho_t).expect("validated on construction")
    }
}

/// A distribution over the `K` ID classes plus the OOD class.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ExtendedDistribution(Vec<f64>);

impl ExtendedDistribution {
    /// Wraps a `K+1` vector; it must lie on the simplex within [`SIMPLEX_TOL`].
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::validation(
                "extended distribution needs K+1 >= 2 entries",
            ));
        }
        let pv = ProbabilityVector::new(entries)?;
        Ok(Self(pv.into_inner()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Number of ID classes `K`.
    pub fn k(&self) -> usize {
        self.0.len() - 1
    }

    pub fn ood_mass(&self) -> f64 {
        self.0[self.k()]
    }

    /// Recovers `(base, ρ)` from `[ρ·base, 1 − ρ]`.
    ///
    /// `ρ` is taken as the total ID mass, which is more accurate than
    /// `1 − e_{K+1}` when `ρ` is small. Returns `None` when `ρ = 0` and the
    /// base distribution is therefore not identified.
    pub fn split(&self) -> Option<(ProbabilityVector, f64)> {
        let id = &self.0[..self.k()];
        let rho: f64 = id.iter().sum();
        if rho <= 0.0 {
            return None;
        }
        let base = id.iter().map(|x| x / rho).collect();
        Some((ProbabilityVector(base), rho))
    }
}

impl std::ops::Index<usize> for ExtendedDistribution {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// `[ρ·base₁, …, ρ·base_K, 1 − ρ]`.
pub fn extend_distribution(base: &ProbabilityVector, rho: f64) -> Result<ExtendedDistribution> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::validation(format!("rho = {rho} must lie in [0, 1]")));
    }
    let mut entries: Vec<f64> = base.as_slice().iter().map(|b| rho * b).collect();
    entries.push(1.0 - rho);
    Ok(ExtendedDistribution(entries))
}

/// One sample's classifier outputs: ID class probabilities `f(x)`, ID score
/// `h(x)` and an optional 1-based ground-truth label in `1..=K+1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub f: ProbabilityVector,
    pub h: f64,
    pub label: Option<usize>,
}

impl PredictionRecord {
    pub fn new(f: ProbabilityVector, h: f64, label: Option<usize>) -> Result<Self> {
        if !(0.0..=1.0).contains(&h) {
            return Err(Error::validation(format!("score h = {h} outside [0, 1]")));
        }
        if let Some(y) = label {
            if y == 0 || y > f.len() + 1 {
                return Err(Error::validation(format!(
                    "label {y} outside 1..={}",
                    f.len() + 1
                )));
            }
        }
        Ok(Self { f, h, label })
    }

    pub fn k(&self) -> usize {
        self.f.len()
    }

    /// True when the label marks the OOD class `K+1`.
    pub fn is_ood(&self) -> Option<bool> {
        self.label.map(|y| y == self.k() + 1)
    }
}

/// `f̃ = [h·f₁, …, h·f_K, 1 − h]`.
pub fn extend_classifier_output(record: &PredictionRecord) -> ExtendedDistribution {
    let mut entries: Vec<f64> = record.f.as_slice().iter().map(|f| record.h * f).collect();
    entries.push(1.0 - record.h);
    ExtendedDistribution(entries)
}

/// Checks that all records share the same number of ID classes and returns it.
pub(crate) fn common_k(records: &[PredictionRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| Error::validation("empty record set"))?;
    let k = first.k();
    if let Some(i) = records.iter().position(|r| r.k() != k) {
        return Err(Error::validation(format!(
            "record {i} has {} classes, expected {k}",
            records[i].k()
        )));
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    fn rec(f: &[f64], h: f64) -> PredictionRecord {
        PredictionRecord::new(pv(f), h, None).unwrap()
    }

    fn assert_slice_eq(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_abs_diff_eq!(x, y, epsilon = tol);
        }
    }

    #[test]
    fn extend_distribution_examples() {
        let e = extend_distribution(&pv(&[0.5, 0.5]), 0.8).unwrap();
        assert_slice_eq(e.as_slice(), &[0.4, 0.4, 0.2], 1e-15);
        let e = extend_distribution(&pv(&[1.0]), 1.0).unwrap();
        assert_slice_eq(e.as_slice(), &[1.0, 0.0], 0.0);
        let e = extend_distribution(&pv(&[0.2, 0.3, 0.5]), 0.5).unwrap();
        assert_slice_eq(e.as_slice(), &[0.1, 0.15, 0.25, 0.5], 1e-15);
        assert!(extend_distribution(&pv(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn non_simplex_base_is_rejected() {
        assert!(ProbabilityVector::new(vec![0.6, 0.5]).is_err());
        assert!(ProbabilityVector::new(vec![]).is_err());
        assert!(ProbabilityVector::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn extend_classifier_output_examples() {
        assert_slice_eq(
            extend_classifier_output(&rec(&[0.7, 0.3], 0.9)).as_slice(),
            &[0.63, 0.27, 0.1],
            1e-15,
        );
        assert_slice_eq(
            extend_classifier_output(&rec(&[1.0], 1.0)).as_slice(),
            &[1.0, 0.0],
            0.0,
        );
        assert_slice_eq(
            extend_classifier_output(&rec(&[0.5, 0.5], 0.0)).as_slice(),
            &[0.0, 0.0, 1.0],
            0.0,
        );
    }

    #[test]
    fn validate_simplex_examples() {
        assert!(validate_simplex(&[0.5, 0.5], 1e-9));
        assert!(!validate_simplex(&[0.6, 0.5], 1e-9));
        assert!(validate_simplex(&[1.0 + 5e-10, -5e-10], 1e-9));
    }

    #[test]
    fn ingest_renormalizes_within_tolerance() {
        let p = ProbabilityVector::new(vec![1.0 + 5e-10, -5e-10]).unwrap();
        assert_eq!(p.as_slice()[1], 0.0);
        assert_abs_diff_eq!(p.as_slice().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn source_model_rejects_tiny_class_probability() {
        assert!(SourceLabelModel::new(pv(&[1.0 - 1e-7, 1e-7]), 0.5).is_err());
        assert!(SourceLabelModel::new(pv(&[0.5, 0.5]), 1.0).is_err());
        assert!(SourceLabelModel::new(pv(&[0.5, 0.5]), 0.0).is_err());
        let s = SourceLabelModel::new(pv(&[0.5, 0.5]), 0.5).unwrap();
        assert_eq!(s.extended().as_slice(), &[0.25, 0.25, 0.5]);
    }

    #[test]
    fn record_validation() {
        assert!(PredictionRecord::new(pv(&[1.0]), 1.2, None).is_err());
        assert!(PredictionRecord::new(pv(&[0.5, 0.5]), 0.5, Some(4)).is_err());
        assert!(PredictionRecord::new(pv(&[0.5, 0.5]), 0.5, Some(0)).is_err());
        let r = PredictionRecord::new(pv(&[0.5, 0.5]), 0.5, Some(3)).unwrap();
        assert_eq!(r.is_ood(), Some(true));
    }

    #[test]
    fn argmax_ties_go_to_smallest_index() {
        assert_eq!(pv(&[0.5, 0.5]).argmax(), 1);
        assert_eq!(pv(&[0.1, 0.7, 0.2]).argmax(), 2);
    }

    fn simplex_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 1..12).prop_filter_map("zero mass", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-6).then(|| w.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn extended_distribution_sums_to_one(base in simplex_strategy(), rho in 0.0f64..=1.0) {
            let k = base.len();
            let e = extend_distribution(&pv(&base), rho).unwrap();
            let sum: f64 = e.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12 * k as f64);
            prop_assert_eq!(e.ood_mass(), 1.0 - rho);
        }

        #[test]
        fn extended_classifier_output_sums_to_one(f in simplex_strategy(), h in 0.0f64..=1.0) {
            let e = extend_classifier_output(&rec(&f, h));
            let sum: f64 = e.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12 * f.len() as f64);
        }

        #[test]
        fn split_inverts_extension(base in simplex_strategy(), rho in 1.000001e-6f64..=1.0) {
            let p = pv(&base);
            let (b, r) = extend_distribution(&p, rho).unwrap().split().unwrap();
            prop_assert!((r - rho).abs() <= 1e-12);
            for (x, y) in b.as_slice().iter().zip(p.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }
}
