//! Synthetic open-set scenarios with exact posteriors.
//!
//! Every class (the `K` ID classes and the OOD class) is an isotropic
//! Gaussian in feature space. Source and target share the same class
//! samplers and differ only in their label priors, and each record carries
//! the exact Bayes posterior `f(x) = p_s(y | x, b = 1)` and ID probability
//! `h(x) = p_s(b = 1 | x)` under the source priors.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::prob::{PredictionRecord, ProbabilityVector, SourceLabelModel, TargetLabelModel};
use crate::{Error, Result};

/// Independent random streams derived from one root seed.
pub mod stream {
    pub const SOURCE_LABELS: u64 = 1;
    pub const SOURCE_FEATURES: u64 = 2;
    pub const TARGET_LABELS: u64 = 3;
    pub const TARGET_FEATURES: u64 = 4;
    pub const OOD_POOL: u64 = 5;
    pub const OOD_REF: u64 = 6;
    pub const SHIFT: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
    pub const PSEUDO_OOD: u64 = 9;
}

/// A ChaCha8 generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftOrder {
    #[default]
    Forward,
    Backward,
}

/// How the target ID label distribution is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShiftSpec {
    /// `π = c`.
    None,
    /// One draw from a symmetric Dirichlet.
    Dirichlet { alpha: f64 },
    /// Exponentially decaying long tail with the given head/tail ratio.
    OrderedLt {
        imbalance: f64,
        #[serde(default)]
        order: ShiftOrder,
    },
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShiftSpec::None => Ok(()),
            ShiftSpec::Dirichlet { alpha } if alpha > 0.0 && alpha.is_finite() => Ok(()),
            ShiftSpec::Dirichlet { alpha } => Err(Error::validation(format!(
                "Dirichlet alpha must be positive, got {alpha}"
            ))),
            ShiftSpec::OrderedLt { imbalance, .. } if imbalance >= 1.0 && imbalance.is_finite() => {
                Ok(())
            }
            ShiftSpec::OrderedLt { imbalance, .. } => Err(Error::validation(format!(
                "imbalance factor must be >= 1, got {imbalance}"
            ))),
        }
    }

    /// Short stable name used as a sweep key, e.g. `dirichlet(1)` or `lt100-forward`.
    pub fn label(&self) -> String {
        match self {
            ShiftSpec::None => "none".to_string(),
            ShiftSpec::Dirichlet { alpha } => format!("dirichlet({alpha})"),
            ShiftSpec::OrderedLt { imbalance, order } => {
                let order = match order {
                    ShiftOrder::Forward => "forward",
                    ShiftOrder::Backward => "backward",
                };
                format!("lt{imbalance}-{order}")
            }
        }
    }

    /// Target label distribution for source prior `c`.
    pub fn apply(&self, c: &ProbabilityVector, seed: u64) -> Result<ProbabilityVector> {
        self.validate()?;
        match *self {
            ShiftSpec::None => Ok(c.clone()),
            ShiftSpec::Dirichlet { alpha } => dirichlet_shift(c.len(), alpha, seed),
            ShiftSpec::OrderedLt { imbalance, order } => {
                ordered_lt_shift(c.len(), imbalance, order)
            }
        }
    }
}

/// One draw from `Dir(α·1_K)` as normalised `Gamma(α, 1)` variates.
pub fn dirichlet_shift(k: usize, alpha: f64, seed: u64) -> Result<ProbabilityVector> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::validation(format!("Dirichlet alpha {alpha}: {e}")))?;
    let mut rng = stream_rng(seed, stream::SHIFT);
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        // Tiny alpha can underflow every draw; redraw in that case.
        if draws.iter().sum::<f64>() > 0.0 {
            return ProbabilityVector::from_weights(draws);
        }
    }
}

/// `πⱼ ∝ imbalance^{−(j−1)/(K−1)}`, reversed for [`ShiftOrder::Backward`].
pub fn ordered_lt_shift(k: usize, imbalance: f64, order: ShiftOrder) -> Result<ProbabilityVector> {
    if k == 0 {
        return Err(Error::validation("K must be at least 1"));
    }
    if !(imbalance >= 1.0) || !imbalance.is_finite() {
        return Err(Error::validation(format!(
            "imbalance factor must be >= 1, got {imbalance}"
        )));
    }
    if k == 1 {
        return Ok(ProbabilityVector::uniform(1));
    }
    let mut w: Vec<f64> = (0..k)
        .map(|j| imbalance.powf(-(j as f64) / (k - 1) as f64))
        .collect();
    if order == ShiftOrder::Backward {
        w.reverse();
    }
    ProbabilityVector::from_weights(w)
}

fn default_feature_dim() -> usize {
    2
}

fn default_separation() -> f64 {
    3.0
}

fn default_rho_s() -> f64 {
    0.5
}

fn default_temperature() -> f64 {
    1.0
}

fn default_shift() -> ShiftSpec {
    ShiftSpec::None
}

/// Parameters of a synthetic scenario.
///
/// `class_means` (K+1 points, OOD last) and `class_scales` default to ID
/// means spaced evenly on a circle of radius `separation` around an OOD
/// class at the origin, all with unit scale. `c` defaults to uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub k: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_means: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_scales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<ProbabilityVector>,
    #[serde(default = "default_rho_s")]
    pub rho_s: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub n_ood_ref: usize,
    #[serde(default = "default_shift")]
    pub shift: ShiftSpec,
    /// Target OOD/ID ratio, so that `ρₜ = 1 / (1 + r)`.
    pub r: f64,
    pub seed: u64,
    /// Temperature applied to the posterior log-odds; 1 is the exact
    /// posterior, other values emulate a mis-calibrated classifier.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl ScenarioConfig {
    /// A scenario with default geometry, uniform `c`, `ρₛ = 0.5` and no shift.
    pub fn new(
        k: usize,
        n_source: usize,
        n_target: usize,
        n_ood_ref: usize,
        r: f64,
        seed: u64,
    ) -> Self {
        Self {
            k,
            feature_dim: default_feature_dim(),
            separation: default_separation(),
            class_means: None,
            class_scales: None,
            c: None,
            rho_s: default_rho_s(),
            n_source,
            n_target,
            n_ood_ref,
            shift: ShiftSpec::None,
            r,
            seed,
            temperature: default_temperature(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::format("scenario config", e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario config serialises to TOML")
    }

    /// Target ID ratio implied by `r`.
    pub fn rho_t(&self) -> f64 {
        1.0 / (1.0 + self.r)
    }

    pub fn source_prior(&self) -> ProbabilityVector {
        self.c
            .clone()
            .unwrap_or_else(|| ProbabilityVector::uniform(self.k))
    }

    pub fn means(&self) -> Vec<Vec<f64>> {
        if let Some(m) = &self.class_means {
            return m.clone();
        }
        let d = self.feature_dim;
        let mut means = Vec::with_capacity(self.k + 1);
        for j in 0..self.k {
            let mut m = vec![0.0; d];
            if d == 1 {
                m[0] = self.separation * (j + 1) as f64;
            } else {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / self.k as f64;
                m[0] = self.separation * angle.cos();
                m[1] = self.separation * angle.sin();
            }
            means.push(m);
        }
        means.push(vec![0.0; d]);
        means
    }

    pub fn scales(&self) -> Vec<f64> {
        self.class_scales
            .clone()
            .unwrap_or_else(|| vec![1.0; self.k + 1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::validation("K must be at least 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::validation("feature_dim must be at least 1"));
        }
        if self.n_source == 0 || self.n_target == 0 || self.n_ood_ref == 0 {
            return Err(Error::validation("sample counts must be at least 1"));
        }
        if !(self.rho_s > 0.0 && self.rho_s < 1.0) {
            return Err(Error::validation(format!(
                "rho_s = {} must lie in (0, 1)",
                self.rho_s
            )));
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::validation(format!(
                "r = {} must be positive",
                self.r
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::validation("temperature must be positive"));
        }
        if !(self.separation > 0.0) {
            return Err(Error::validation("separation must be positive"));
        }
        self.shift.validate()?;
        let c = self.source_prior();
        if c.len() != self.k {
            return Err(Error::validation(format!(
                "c has {} entries, expected K = {}",
                c.len(),
                self.k
            )));
        }
        SourceLabelModel::new(c, self.rho_s)?;

        let means = self.means();
        let scales = self.scales();
        if means.len() != self.k + 1 || scales.len() != self.k + 1 {
            return Err(Error::validation(
                "class_means and class_scales need K+1 entries (OOD last)",
            ));
        }
        if means
            .iter()
            .any(|m| m.len() != self.feature_dim || m.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::validation(format!(
                "every class mean must be a finite point of dimension {}",
                self.feature_dim
            )));
        }
        if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::validation("class scales must be positive"));
        }
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                if means[a] == means[b] {
                    return Err(Error::validation(format!(
                        "class means {} and {} coincide",
                        a + 1,
                        b + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Isotropic Gaussian class-conditional distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSampler {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl ClassSampler {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean
            .iter()
            .map(|m| {
                let z: f64 = StandardNormal.sample(rng);
                m + self.scale * z
            })
            .collect()
    }

    /// Log density up to the `−(d/2)·log 2π` constant shared by all classes.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let sq: f64 = x.iter().zip(&self.mean).map(|(x, m)| (x - m).powi(2)).sum();
        -sq / (2.0 * self.scale * self.scale) - x.len() as f64 * self.scale.ln()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Bayes classifier and ID scorer for the source domain.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleScorer {
    samplers: Vec<ClassSampler>,
    /// `log(ρₛ·cⱼ)` for the ID classes, then `log(1 − ρₛ)`.
    log_prior: Vec<f64>,
    temperature: f64,
}

impl OracleScorer {
    pub fn new(samplers: Vec<ClassSampler>, source: &SourceLabelModel, temperature: f64) -> Self {
        let log_prior = source
            .extended()
            .as_slice()
            .iter()
            .map(|p| p.ln())
            .collect();
        Self {
            samplers,
            log_prior,
            temperature,
        }
    }

    pub fn k(&self) -> usize {
        self.samplers.len() - 1
    }

    pub fn samplers(&self) -> &[ClassSampler] {
        &self.samplers
    }

    /// `(f(x), h(x))`, temperature-scaled when `temperature ≠ 1`.
    pub fn posterior(&self, x: &[f64]) -> (ProbabilityVector, f64) {
        let k = self.k();
        let t = self.temperature;
        let log_joint: Vec<f64> = self
            .samplers
            .iter()
            .zip(&self.log_prior)
            .map(|(s, lp)| lp + s.log_density(x))
            .collect();
        let id = &log_joint[..k];
        let lse_id = log_sum_exp(id);
        let scaled: Vec<f64> = id.iter().map(|l| (l - lse_id) / t).collect();
        let lse_scaled = log_sum_exp(&scaled);
        let f: Vec<f64> = scaled.iter().map(|l| (l - lse_scaled).exp()).collect();
        let log_odds = (lse_id - log_joint[k]) / t;
        let h = if log_odds >= 0.0 {
            1.0 / (1.0 + (-log_odds).exp())
        } else {
            let e = log_odds.exp();
            e / (1.0 + e)
        };
        let f = ProbabilityVector::from_weights(f).expect("softmax weights are positive");
        (f, h.clamp(0.0, 1.0))
    }

    pub fn score(&self, x: &[f64], label: Option<usize>) -> PredictionRecord {
        let (f, h) = self.posterior(x);
        PredictionRecord { f, h, label }
    }
}

/// A scored sample with its ground-truth label and raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub record: PredictionRecord,
    /// 1-based label in `1..=K+1`.
    pub true_label: usize,
    pub features: Vec<f64>,
}

impl LabeledSample {
    pub fn is_ood(&self) -> bool {
        self.true_label == self.record.k() + 1
    }
}

/// Everything generated for one scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub source: Vec<LabeledSample>,
    pub target: Vec<LabeledSample>,
    pub ood_ref: Vec<LabeledSample>,
    pub truth: TargetLabelModel,
    /// True `(c, ρₛ)`.
    pub source_model: SourceLabelModel,
    pub scorer: OracleScorer,
    /// The OOD pool held fewer samples than `round(r · n_ID)`.
    pub ood_capped: bool,
}

fn draw_samples(
    scorer: &OracleScorer,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledSample> {
    labels
        .iter()
        .map(|&y| {
            let features = scorer.samplers[y - 1].sample(rng);
            LabeledSample {
                record: scorer.score(&features, Some(y)),
                true_label: y,
                features,
            }
        })
        .collect()
}

fn draw_labels(prior: &ProbabilityVector, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let dist = WeightedIndex::new(prior.as_slice())
        .map_err(|e| Error::validation(format!("label distribution: {e}")))?;
    Ok((0..n).map(|_| dist.sample(rng) + 1).collect())
}

/// Generates source, target and OOD reference sets for `config`.
pub fn make_scenario(config: &ScenarioConfig) -> Result<Scenario> {
    config.validate()?;
    let k = config.k;
    let seed = config.seed;
    let c = config.source_prior();
    let source_model = SourceLabelModel::new(c.clone(), config.rho_s)?;
    let samplers: Vec<ClassSampler> = config
        .means()
        .into_iter()
        .zip(config.scales())
        .map(|(mean, scale)| ClassSampler { mean, scale })
        .collect();
    let scorer = OracleScorer::new(samplers, &source_model, config.temperature);

    let source_labels = draw_labels(
        &c,
        config.n_source,
        &mut stream_rng(seed, stream::SOURCE_LABELS),
    )?;
    let source = draw_samples(
        &scorer,
        &source_labels,
        &mut stream_rng(seed, stream::SOURCE_FEATURES),
    );

    let pi = config.shift.apply(&c, seed)?;
    let target_labels = draw_labels(
        &pi,
        config.n_target,
        &mut stream_rng(seed, stream::TARGET_LABELS),
    )?;
    let mut target = draw_samples(
        &scorer,
        &target_labels,
        &mut stream_rng(seed, stream::TARGET_FEATURES),
    );

    let pool_size = config
        .n_target
        .max((config.r * config.n_target as f64).ceil() as usize);
    let ood = k + 1;
    target.extend(draw_samples(
        &scorer,
        &vec![ood; pool_size],
        &mut stream_rng(seed, stream::OOD_POOL),
    ));
    let sub = subsample_to_ratio(&target, config.r, seed)?;

    let ood_ref = draw_samples(
        &scorer,
        &vec![ood; config.n_ood_ref],
        &mut stream_rng(seed, stream::OOD_REF),
    );
    Ok(Scenario {
        source,
        target: sub.samples,
        ood_ref,
        truth: TargetLabelModel::new(pi, config.rho_t())?,
        source_model,
        scorer,
        ood_capped: sub.capped,
    })
}

/// Noise-blended copies `(1 − γ)·x + γ·ε` of `source_features`, with a fresh
/// standard-normal `ε` per sample and coordinate.
pub fn gen_pseudo_ood(
    source_features: &[Vec<f64>],
    gamma: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::validation(format!(
            "gamma = {gamma} must lie in [0, 1]"
        )));
    }
    let mut rng = stream_rng(seed, stream::PSEUDO_OOD);
    Ok(source_features
        .iter()
        .map(|x| {
            x.iter()
                .map(|&xi| {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    if gamma == 0.0 {
                        xi
                    } else if gamma == 1.0 {
                        eps
                    } else {
                        (1.0 - gamma) * xi + gamma * eps
                    }
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct Subsampled {
    pub samples: Vec<LabeledSample>,
    /// Fewer OOD samples were available than requested.
    pub capped: bool,
}

/// Keeps every ID sample and a uniform subset of `round(r · n_ID)` OOD
/// samples, preserving the input order.
pub fn subsample_to_ratio(target: &[LabeledSample], r: f64, seed: u64) -> Result<Subsampled> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::validation(format!("r = {r} must be positive")));
    }
    let n_id = target.iter().filter(|s| !s.is_ood()).count();
    if n_id == 0 {
        return Err(Error::validation("target contains no ID samples"));
    }
    let ood_idx: Vec<usize> = (0..target.len()).filter(|&i| target[i].is_ood()).collect();
    let wanted = (r * n_id as f64).round() as usize;
    let capped = wanted > ood_idx.len();
    let keep_n = wanted.min(ood_idx.len());
    let mut keep = vec![false; target.len()];
    for i in target
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_ood())
        .map(|(i, _)| i)
    {
        keep[i] = true;
    }
    let mut rng = stream_rng(seed, stream::SUBSAMPLE);
    for pick in index::sample(&mut rng, ood_idx.len(), keep_n) {
        keep[ood_idx[pick]] = true;
    }
    Ok(Subsampled {
        samples: target
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(s, _)| s.clone())
            .collect(),
        capped,
    })
}

/// Replaces every score `h` by the affine mis-specification `a + b·h`.
pub fn distort_scorer(samples: &[LabeledSample], a: f64, b: f64) -> Result<Vec<LabeledSample>> {
    let lo = a.min(a + b);
    let hi = a.max(a + b);
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::validation(format!(
            "a + b·h = {a} + {b}·h leaves [0, 1] for some h in [0, 1]"
        )));
    }
    Ok(samples
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.record.h = (a + b * s.record.h).clamp(0.0, 1.0);
            s
        })
        .collect())
}

/// Strips samples down to their prediction records.
pub fn records(samples: &[LabeledSample]) -> Vec<PredictionRecord> {
    samples.iter().map(|s| s.record.clone()).collect()
}
