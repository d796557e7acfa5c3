//! Monte-Carlo coverage checks of the concentration bounds and seeded
//! experiment sweeps over shift kinds, OOD ratios and methods.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimators::{correct_rho, estimate_rho_s, rho_s_bound, rho_t_bound, ScoreMeans};
use crate::io::Truth;
use crate::metrics::EvalReport;
use crate::pipeline::{evaluate_method, Method, MethodSettings};
use crate::simulate::{make_scenario, records, stream_rng, ScenarioConfig, ShiftSpec};
use crate::{Error, Result};

const BOUND_CHECK_STREAM: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RatioBound {
    /// Source ID ratio retrieved from score means.
    SourceRatio,
    /// Target ID ratio recovered from an affinely mis-specified scorer.
    TargetRatio,
}

/// Settings of a coverage check with binary (Bernoulli) scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckConfig {
    pub check: RatioBound,
    pub trials: usize,
    pub delta: f64,
    /// Samples per dataset (source ID, OOD reference and target).
    pub n: usize,
    /// `P(h = 1)` for ID samples.
    pub mu1: f64,
    /// `P(h = 1)` for OOD samples.
    pub mu0: f64,
    /// Target ID ratio for the target-ratio check.
    pub rho_t: f64,
    /// Affine distortion `h′ = a + b·h` for the target-ratio check.
    pub distort: (f64, f64),
    pub seed: u64,
}

impl Default for BoundCheckConfig {
    fn default() -> Self {
        Self {
            check: RatioBound::SourceRatio,
            trials: 1000,
            delta: 0.05,
            n: 2000,
            mu1: 0.9,
            mu0: 0.1,
            rho_t: 0.6,
            distort: (0.2, 0.6),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub check: RatioBound,
    pub trials: usize,
    pub delta: f64,
    pub n: usize,
    /// Population value being estimated.
    pub truth: f64,
    pub bound: f64,
    pub violations: usize,
    pub violation_rate: f64,
    /// `2δ + 3·sqrt(2δ(1 − 2δ)/trials)`.
    pub tolerance: f64,
    pub passed: bool,
}

fn bernoulli_mean<R: Rng>(rng: &mut R, p: f64, n: usize) -> f64 {
    (0..n).filter(|_| rng.random::<f64>() < p).count() as f64 / n as f64
}

/// Estimates `P(|estimate − truth| > bound)` over independent trials.
pub fn bound_check(config: &BoundCheckConfig) -> Result<CoverageReport> {
    if config.trials < 100 {
        return Err(Error::validation("bound checks need at least 100 trials"));
    }
    if config.n == 0 {
        return Err(Error::validation("n must be at least 1"));
    }
    if !(config.delta > 0.0 && config.delta < 1.0) {
        return Err(Error::validation("delta must lie in (0, 1)"));
    }
    for (name, p) in [
        ("mu1", config.mu1),
        ("mu0", config.mu0),
        ("rho_t", config.rho_t),
    ] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!("{name} = {p} outside [0, 1]")));
        }
    }
    let n = config.n;
    let mut rng = stream_rng(config.seed, BOUND_CHECK_STREAM);

    let (truth, bound) = match config.check {
        RatioBound::SourceRatio => {
            let den = 1.0 - config.mu1 + config.mu0;
            if !(den > 0.0) {
                return Err(Error::DegenerateScorer("1 − μ₁ + μ₀ is zero".to_string()));
            }
            (
                config.mu0 / den,
                rho_s_bound(config.mu1, config.mu0, n, n, config.delta)?.bound,
            )
        }
        RatioBound::TargetRatio => {
            let (a, b) = config.distort;
            let (mu1p, mu0p) = (a + b * config.mu1, a + b * config.mu0);
            (
                config.rho_t,
                rho_t_bound(mu1p, mu0p, n, config.delta)?.bound,
            )
        }
    };

    let mut violations = 0;
    for _ in 0..config.trials {
        let estimate = match config.check {
            RatioBound::SourceRatio => {
                let mu1_hat = bernoulli_mean(&mut rng, config.mu1, n);
                let mu0_hat = bernoulli_mean(&mut rng, config.mu0, n);
                estimate_rho_s(&ScoreMeans::new(mu1_hat, mu0_hat, n, n)?)?
            }
            RatioBound::TargetRatio => {
                let (a, b) = config.distort;
                let mu1_hat = a + b * bernoulli_mean(&mut rng, config.mu1, n);
                let mu0_hat = a + b * bernoulli_mean(&mut rng, config.mu0, n);
                let hits = (0..n)
                    .filter(|_| {
                        let p = if rng.random::<f64>() < config.rho_t {
                            config.mu1
                        } else {
                            config.mu0
                        };
                        rng.random::<f64>() < p
                    })
                    .count();
                let rho_prime = a + b * (hits as f64 / n as f64);
                correct_rho(rho_prime, mu1_hat, mu0_hat)?
            }
        };
        if (estimate - truth).abs() > bound {
            violations += 1;
        }
    }
    let two_delta = 2.0 * config.delta;
    let tolerance =
        two_delta + 3.0 * (two_delta * (1.0 - two_delta).max(0.0) / config.trials as f64).sqrt();
    let violation_rate = violations as f64 / config.trials as f64;
    Ok(CoverageReport {
        check: config.check,
        trials: config.trials,
        delta: config.delta,
        n,
        truth,
        bound,
        violations,
        violation_rate,
        tolerance,
        passed: violation_rate <= tolerance,
    })
}

fn default_methods() -> Vec<Method> {
    vec![Method::OslsMle, Method::Mlls, Method::Bbse]
}

fn default_bins() -> usize {
    crate::metrics::DEFAULT_ECE_BINS
}

/// A sweep grid. Every `(shift, r, seed)` combination is one scenario
/// built from `base`; every method is evaluated on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Scenario template; its `shift`, `r` and `seed` are overridden.
    pub base: ScenarioConfig,
    pub shifts: Vec<ShiftSpec>,
    pub r: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub settings: MethodSettings,
    #[serde(default = "default_bins")]
    pub ece_bins: usize,
}

impl GridConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: Self = toml::from_str(text).map_err(|e| Error::format("sweep grid", e))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.shifts.is_empty()
            || self.r.is_empty()
            || self.seeds.is_empty()
            || self.methods.is_empty()
        {
            return Err(Error::validation(
                "grid needs at least one shift, r value, seed and method",
            ));
        }
        for cell in self.cells() {
            cell.config.validate()?;
        }
        Ok(())
    }

    /// All scenarios of the grid in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for shift in &self.shifts {
            for &r in &self.r {
                for &seed in &self.seeds {
                    let mut config = self.base.clone();
                    config.shift = shift.clone();
                    config.r = r;
                    config.seed = seed;
                    cells.push(Cell { config });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub config: ScenarioConfig,
}

/// Metrics of one method on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub shift: String,
    pub r: f64,
    pub seed: u64,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub shift: String,
    pub r: f64,
    pub seed: u64,
    pub error: String,
}

/// Mean and population standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// One `(method, shift, r)` row aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub shift: String,
    pub r: f64,
    pub n_seeds: usize,
    pub w_mse: MeanStd,
    pub top1: MeanStd,
    pub rho_t_abs_err: MeanStd,
    pub ece: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResults {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellResult>,
    pub failures: Vec<CellFailure>,
}

impl SweepResults {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

fn run_cell(cell: &Cell, grid: &GridConfig) -> Vec<std::result::Result<CellResult, CellFailure>> {
    let shift = cell.config.shift.label();
    let (r, seed) = (cell.config.r, cell.config.seed);
    let fail = |method: Method, e: Error| CellFailure {
        method,
        shift: shift.clone(),
        r,
        seed,
        error: e.to_string(),
    };
    let scenario = match make_scenario(&cell.config) {
        Ok(s) => s,
        Err(e) => {
            let msg = e.to_string();
            return grid
                .methods
                .iter()
                .map(|&m| Err(fail(m, Error::Validation(msg.clone()))))
                .collect();
        }
    };
    let source = records(&scenario.source);
    let target = records(&scenario.target);
    let ood: Vec<f64> = scenario.ood_ref.iter().map(|s| s.record.h).collect();
    let truth = Truth::new(&scenario.source_model, &scenario.truth);
    grid.methods
        .iter()
        .map(|&method| {
            evaluate_method(
                method,
                &source,
                &target,
                &ood,
                &truth,
                &grid.settings,
                grid.ece_bins,
            )
            .map(|eval| CellResult {
                method,
                shift: shift.clone(),
                r,
                seed,
                eval,
            })
            .map_err(|e| fail(method, e))
        })
        .collect()
}

/// Runs the grid on up to `workers` threads. The output does not depend on
/// the worker count: cells are independent and results are sorted.
pub fn run_sweep(grid: &GridConfig, workers: usize) -> Result<SweepResults> {
    grid.validate()?;
    let cells = grid.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::validation(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<_> = pool.install(|| {
        cells
            .par_iter()
            .flat_map_iter(|c| run_cell(c, grid))
            .collect()
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => results.push(r),
            Err(f) => failures.push(f),
        }
    }
    let shift_order: BTreeMap<String, usize> = grid
        .shifts
        .iter()
        .enumerate()
        .map(|(i, s)| (s.label(), i))
        .collect();
    let key = |m: Method, s: &str, r: f64, seed: u64| (m, shift_order[s], -r, seed);
    results.sort_by(|a, b| {
        key(a.method, &a.shift, a.r, a.seed)
            .partial_cmp(&key(b.method, &b.shift, b.r, b.seed))
            .expect("finite keys")
    });
    failures.sort_by(|a, b| {
        key(a.method, &a.shift, a.r, a.seed)
            .partial_cmp(&key(b.method, &b.shift, b.r, b.seed))
            .expect("finite keys")
    });

    let mut rows = Vec::new();
    for &method in &grid.methods {
        for shift in &grid.shifts {
            let label = shift.label();
            for &r in &grid.r {
                let group: Vec<&CellResult> = results
                    .iter()
                    .filter(|c| c.method == method && c.shift == label && c.r == r)
                    .collect();
                if group.is_empty() {
                    continue;
                }
                let col = |f: &dyn Fn(&EvalReport) -> f64| -> MeanStd {
                    MeanStd::of(&group.iter().map(|c| f(&c.eval)).collect::<Vec<_>>())
                };
                rows.push(SweepRow {
                    method,
                    shift: label.clone(),
                    r,
                    n_seeds: group.len(),
                    w_mse: col(&|e| e.w_mse),
                    top1: col(&|e| e.top1.unwrap_or(f64::NAN)),
                    rho_t_abs_err: col(&|e| e.rho_t_abs_err),
                    ece: col(&|e| e.ece.unwrap_or(f64::NAN)),
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        key(a.method, &a.shift, a.r, 0)
            .partial_cmp(&key(b.method, &b.shift, b.r, 0))
            .expect("finite keys")
    });
    Ok(SweepResults {
        rows,
        cells: results,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(seeds: Vec<u64>) -> GridConfig {
        let base = ScenarioConfig::new(3, 300, 300, 300, 1.0, 0);
        GridConfig {
            base,
            shifts: vec![
                ShiftSpec::Dirichlet { alpha: 1.0 },
                ShiftSpec::OrderedLt {
                    imbalance: 10.0,
                    order: crate::simulate::ShiftOrder::Forward,
                },
            ],
            r: vec![1.0, 0.1, 0.01],
            seeds,
            methods: default_methods(),
            settings: MethodSettings::default(),
            ece_bins: 15,
        }
    }

    #[test]
    fn sweep_shape_and_worker_independence() {
        let g = grid(vec![1, 2, 3]);
        let a = run_sweep(&g, 1).unwrap();
        assert_eq!(a.rows.len(), 18);
        assert_eq!(a.cells.len(), 54);
        assert!(a.all_succeeded(), "{:?}", a.failures);
        assert!(a.rows.iter().all(|r| r.n_seeds == 3));
        let b = run_sweep(&g, 3).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn single_seed_has_zero_std() {
        let res = run_sweep(&grid(vec![5]), 2).unwrap();
        assert!(res
            .rows
            .iter()
            .all(|r| r.w_mse.std == 0.0 && r.top1.std == 0.0));
    }

    #[test]
    fn failing_cells_are_recorded() {
        let mut g = grid(vec![1]);
        g.base.n_source = 5;
        g.base.k = 10;
        g.shifts.truncate(1);
        g.r = vec![1.0];
        let res = run_sweep(&g, 1).unwrap();
        // Five source samples cannot cover ten classes.
        assert!(!res.all_succeeded());
        assert_eq!(res.failures.len() + res.cells.len(), 3);
    }

    #[test]
    fn grid_toml() {
        let text = r#"
r = [1.0, 0.1]
seeds = [1, 2]
methods = ["osls-mle", "mapls"]

[base]
k = 2
n_source = 50
n_target = 50
n_ood_ref = 50
r = 1.0
seed = 0

[[shifts]]
kind = "none"

[[shifts]]
kind = "dirichlet"
alpha = 10.0
"#;
        let g = GridConfig::from_toml(text).unwrap();
        assert_eq!(g.cells().len(), 8);
        assert_eq!(g.methods, vec![Method::OslsMle, Method::Mapls]);
        assert!(GridConfig::from_toml("r = []").unwrap_err().is_usage());
    }

    #[test]
    fn vacuous_delta_always_passes() {
        let cfg = BoundCheckConfig {
            delta: 0.5,
            trials: 200,
            n: 100,
            ..Default::default()
        };
        let r = bound_check(&cfg).unwrap();
        assert!(r.tolerance >= 1.0 && r.passed);
    }

    #[test]
    fn bound_check_rejects_few_trials() {
        let cfg = BoundCheckConfig {
            trials: 10,
            ..Default::default()
        };
        assert!(bound_check(&cfg).is_err());
    }

    #[test]
    fn bound_checks_pass_on_easy_scorer() {
        for check in [RatioBound::SourceRatio, RatioBound::TargetRatio] {
            let cfg = BoundCheckConfig {
                check,
                trials: 200,
                ..Default::default()
            };
            let r = bound_check(&cfg).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
