//! Subcommand implementations behind the `osls` binary.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use osls_core::em::EmConfig;
use osls_core::experiments::{
    bound_check, run_sweep, BoundCheckConfig, GridConfig, RatioBound, SweepResults,
};
use osls_core::io::{self, DataRow, Truth};
use osls_core::metrics::DEFAULT_ECE_BINS;
use osls_core::pipeline::{
    self, classification_metrics, evaluate_method, EstimateReport, Method, MethodSettings,
    OodReference, PipelineOptions, DEFAULT_GAMMA, DEFAULT_RESCALE,
};
use osls_core::simulate::{gen_pseudo_ood, make_scenario, ScenarioConfig};
use osls_core::PredictionRecord;

/// Environment variable holding the default number of sweep workers.
pub const WORKERS_ENV: &str = "OSLS_WORKERS";

#[derive(Debug, Parser)]
#[command(
    name = "osls",
    version,
    about = "Open-set label shift estimation and correction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario: source, target and OOD reference files plus truth.
    Simulate(SimulateArgs),
    /// Estimate the target label distribution and ID ratio.
    Estimate(EstimateArgs),
    /// Write target-adapted posteriors and decisions for every target record.
    Correct(CorrectArgs),
    /// Score estimates, corrected predictions or baselines against the truth.
    Evaluate(EvaluateArgs),
    /// Run a grid of scenarios and methods, aggregated over seeds.
    Sweep(SweepArgs),
    /// Monte-Carlo coverage check of the ID-ratio concentration bounds.
    BoundCheck(BoundCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DataFormat {
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Directory receiving source, target, ood_ref and truth files.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: DataFormat,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Labeled source ID prediction file.
    #[arg(long)]
    pub source: PathBuf,
    /// Unlabeled (or labeled) target prediction file.
    #[arg(long)]
    pub target: PathBuf,
    /// OOD reference prediction file.
    #[arg(
        long,
        conflicts_with = "pseudo_ood",
        required_unless_present = "pseudo_ood"
    )]
    pub ood_ref: Option<PathBuf>,
    /// Build a pseudo-OOD reference from the source features, scored by the
    /// oracle of this scenario config (simulated data only).
    #[arg(long, value_name = "SCENARIO")]
    pub pseudo_ood: Option<PathBuf>,
    /// Maximum-likelihood EM (default).
    #[arg(long, conflicts_with = "map")]
    pub mle: bool,
    /// MAP EM with Dirichlet/Beta priors.
    #[arg(long)]
    pub map: bool,
    /// Dirichlet concentration on the ID label distribution: one value for
    /// all classes or K comma-separated values.
    #[arg(long, value_delimiter = ',', default_value = "2.0")]
    pub alpha_in: Vec<f64>,
    /// Beta prior on the target ID ratio, as `a,b`.
    #[arg(long, value_delimiter = ',', default_value = "2.0,2.0")]
    pub alpha_out: Vec<f64>,
    /// Noise weight of the pseudo-OOD blend.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    /// Rescale factor applied to the pseudo-OOD score mean.
    #[arg(long = "T", alias = "rescale", default_value_t = DEFAULT_RESCALE)]
    pub rescale: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Stop once no parameter moves more than this; 0 runs all iterations.
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    /// Skip the affine correction of the target ID ratio.
    #[arg(long)]
    pub no_rho_correction: bool,
    /// Seed of the pseudo-OOD noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub truth: PathBuf,
    /// Estimate report to score.
    #[arg(long)]
    pub estimate: Option<PathBuf>,
    /// Corrected predictions to score.
    #[arg(long)]
    pub corrected: Option<PathBuf>,
    /// Also run the closed-set baselines on --source/--target.
    #[arg(long, requires_all = ["source", "target"])]
    pub baselines: bool,
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// OOD reference file; with --baselines adds an OSLS-MLE row.
    #[arg(long)]
    pub ood_ref: Option<PathBuf>,
    /// Concentration for the MAPLS baseline.
    #[arg(long, default_value_t = 2.0)]
    pub mapls_alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_ECE_BINS)]
    pub bins: usize,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid config (TOML).
    #[arg(long)]
    pub grid: PathBuf,
    /// Aggregated results (JSON).
    #[arg(long)]
    pub output: PathBuf,
    /// Worker threads; defaults to $OSLS_WORKERS or 1.
    #[arg(long, env = WORKERS_ENV, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BoundArg {
    /// Source ID ratio retrieved from score means.
    #[value(name = "1")]
    One,
    /// Corrected target ID ratio under an affinely distorted scorer.
    #[value(name = "3")]
    Three,
}

#[derive(Debug, Args)]
pub struct BoundCheckArgs {
    #[arg(long, value_enum)]
    pub theorem: BoundArg,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.9)]
    pub mu1: f64,
    #[arg(long, default_value_t = 0.1)]
    pub mu0: f64,
    /// Target ID ratio (target-ratio check).
    #[arg(long, default_value_t = 0.6)]
    pub rho_t: f64,
    /// Affine scorer distortion `a,b` (target-ratio check).
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.6")]
    pub distort: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "table")]
    pub format: ReportFormat,
}

/// Maps an error to the process exit code: 1 for numerical failures on
/// valid inputs, 2 for usage, I/O and format problems.
pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<osls_core::Error>() {
        Some(e) if !e.is_usage() => 1,
        _ => 2,
    }
}

/// A failure that is not an input problem (exit code 1).
#[derive(Debug)]
struct ComputationFailed(String);

impl std::fmt::Display for ComputationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ComputationFailed {}

pub fn run(cli: Cli) -> ExitCode {
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Correct(a) => cmd_correct(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::BoundCheck(a) => cmd_bound_check(&a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ComputationFailed>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(exit_code_for(&e))
            }
        }
    }
}

fn data_ext(format: DataFormat) -> &'static str {
    match format {
        DataFormat::Jsonl => "jsonl",
        DataFormat::Csv => "csv",
    }
}

pub fn cmd_simulate(args: &SimulateArgs) -> anyhow::Result<()> {
    let config: ScenarioConfig = io::read_toml(&args.config, "scenario config")?;
    config.validate()?;
    let scenario = make_scenario(&config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|source| osls_core::Error::Io {
        path: args.out_dir.display().to_string(),
        source,
    })?;
    let ext = data_ext(args.format);
    for (name, samples) in [
        ("source", &scenario.source),
        ("target", &scenario.target),
        ("ood_ref", &scenario.ood_ref),
    ] {
        let rows: Vec<DataRow> = samples.iter().map(DataRow::from).collect();
        let path = args.out_dir.join(format!("{name}.{ext}"));
        io::write_records(&path, &rows)?;
    }
    io::write_json(
        &args.out_dir.join("truth.json"),
        &Truth::new(&scenario.source_model, &scenario.truth),
    )?;
    let n_ood = scenario.target.iter().filter(|s| s.is_ood()).count();
    eprintln!(
        "wrote {} source, {} target ({} OOD), {} OOD reference records to {}",
        scenario.source.len(),
        scenario.target.len(),
        n_ood,
        scenario.ood_ref.len(),
        args.out_dir.display()
    );
    if scenario.ood_capped {
        eprintln!("warning: OOD pool too small for the requested ratio; kept every OOD sample");
    }
    Ok(())
}

fn load_records(path: &Path) -> anyhow::Result<Vec<PredictionRecord>> {
    Ok(io::read_records(path)?
        .into_iter()
        .map(|r| r.record)
        .collect())
}

fn em_config(args: &EstimateArgs, k: usize) -> anyhow::Result<EmConfig> {
    let config = if args.map {
        let alpha_in = match args.alpha_in.len() {
            1 => vec![args.alpha_in[0]; k],
            n if n == k => args.alpha_in.clone(),
            n => bail!("--alpha-in needs 1 or K = {k} values, got {n}"),
        };
        let [a, b] = args.alpha_out[..] else {
            bail!("--alpha-out needs exactly two values");
        };
        EmConfig::map(alpha_in, (a, b))
    } else {
        EmConfig::mle()
    };
    Ok(config.with_max_iters(args.max_iters).with_tol(args.tol))
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(osls_core::Error::Format {
        what: "arguments".to_string(),
        message: msg.into(),
    })
}

pub fn cmd_estimate(args: &EstimateArgs) -> anyhow::Result<()> {
    if !(0.0..1.0).contains(&args.gamma) {
        return Err(usage(format!(
            "--gamma must lie in [0, 1), got {}",
            args.gamma
        )));
    }
    if args.rescale.is_nan() || args.rescale < 1.0 {
        return Err(usage(format!(
            "--T must be at least 1, got {}",
            args.rescale
        )));
    }
    let source_rows = io::read_records(&args.source)?;
    let source: Vec<PredictionRecord> = source_rows.iter().map(|r| r.record.clone()).collect();
    let target = load_records(&args.target)?;
    let k = source[0].k();
    if target[0].k() != k {
        return Err(usage(format!(
            "source has K = {k} but target has K = {}",
            target[0].k()
        )));
    }
    let options = PipelineOptions {
        em: em_config(args, k).map_err(|e| usage(e.to_string()))?,
        rho_correction: !args.no_rho_correction,
    };

    let report = if let Some(path) = &args.ood_ref {
        let reference = load_records(path)?;
        if reference[0].k() != k {
            return Err(usage(format!(
                "OOD reference has K = {}, expected {k}",
                reference[0].k()
            )));
        }
        let scores: Vec<f64> = reference.iter().map(|r| r.h).collect();
        pipeline::estimate(&source, &target, OodReference::Scores(&scores), &options)?
    } else {
        let scenario_path = args.pseudo_ood.as_ref().expect("clap requires a reference");
        let scenario: ScenarioConfig = io::read_toml(scenario_path, "scenario config")?;
        let scorer = make_scenario(&ScenarioConfig {
            n_source: 1,
            n_target: 1,
            n_ood_ref: 1,
            ..scenario
        })?
        .scorer;
        if scorer.k() != k {
            return Err(usage(format!(
                "scenario has K = {}, data has K = {k}",
                scorer.k()
            )));
        }
        let features = source_rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.features.clone().ok_or_else(|| {
                    usage(format!(
                        "source record {} has no features (x) for pseudo-OOD",
                        i + 1
                    ))
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let pseudo = gen_pseudo_ood(&features, args.gamma, args.seed)?;
        let scores: Vec<f64> = pseudo.iter().map(|x| scorer.posterior(x).1).collect();
        pipeline::estimate(
            &source,
            &target,
            OodReference::Pseudo {
                scores: &scores,
                rescale: args.rescale,
            },
            &options,
        )?
    };

    let text = io::to_json_pretty(&report);
    match &args.output {
        Some(path) => io::write_text(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_correct(args: &CorrectArgs) -> anyhow::Result<()> {
    let report: EstimateReport = io::read_json(&args.estimate, "estimate report")?;
    let target = load_records(&args.target)?;
    if target[0].k() != report.k {
        return Err(usage(format!(
            "estimate has K = {} but target has K = {}",
            report.k,
            target[0].k()
        )));
    }
    let rows = pipeline::correct_target(&report, &target)?;
    io::write_text(&args.output, &io::corrected_to_jsonl(&rows))?;
    Ok(())
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_t_abs_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Fixed-width table of evaluation rows.
pub fn render_eval_table(rows: &[EvalRow]) -> String {
    let mut out = format!(
        "{:<10} {:>12} {:>10} {:>14} {:>10}\n",
        "method", "w_mse", "top1", "rho_t_abs_err", "ece"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<10} {:>12} {:>10} {:>14} {:>10}\n",
            r.method,
            cell(r.w_mse),
            cell(r.top1),
            cell(r.rho_t_abs_err),
            cell(r.ece)
        ));
    }
    out
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let truth = io::read_truth(&args.truth)?;
    if args.estimate.is_none() && args.corrected.is_none() && !args.baselines {
        return Err(usage("give --estimate, --corrected or --baselines"));
    }
    let mut rows = Vec::new();
    if args.estimate.is_some() || args.corrected.is_some() {
        let mut row = EvalRow {
            method: "osls".to_string(),
            w_mse: None,
            top1: None,
            rho_t_abs_err: None,
            ece: None,
        };
        if let Some(path) = &args.estimate {
            let report: EstimateReport = io::read_json(path, "estimate report")?;
            let eval = pipeline::evaluate(&report.pi_hat, report.rho_t(), &truth, None, args.bins)?;
            row.w_mse = Some(eval.w_mse);
            row.rho_t_abs_err = Some(eval.rho_t_abs_err);
        }
        if let Some(path) = &args.corrected {
            let corrected = io::read_corrected(path)?;
            let (top1, ece) = classification_metrics(&corrected, args.bins)?;
            row.top1 = Some(top1);
            row.ece = Some(ece);
        }
        rows.push(row);
    }
    if args.baselines {
        let source = load_records(args.source.as_ref().expect("clap requires --source"))?;
        let target = load_records(args.target.as_ref().expect("clap requires --target"))?;
        let settings = MethodSettings {
            max_iters: args.max_iters,
            alpha_in: args.mapls_alpha,
            ..MethodSettings::default()
        };
        let mut methods = vec![Method::Mlls, Method::Mapls, Method::Bbse];
        let mut ood = Vec::new();
        if let Some(path) = &args.ood_ref {
            ood = load_records(path)?.iter().map(|r| r.h).collect();
            methods.insert(0, Method::OslsMle);
        }
        for m in methods {
            let e = evaluate_method(m, &source, &target, &ood, &truth, &settings, args.bins)?;
            rows.push(EvalRow {
                method: m.name().to_string(),
                w_mse: Some(e.w_mse),
                top1: e.top1,
                rho_t_abs_err: Some(e.rho_t_abs_err),
                ece: e.ece,
            });
        }
    }
    match args.format {
        ReportFormat::Table => print!("{}", render_eval_table(&rows)),
        ReportFormat::Json => print!("{}", io::to_json_pretty(&rows)),
    }
    Ok(())
}

fn mean_std(m: &osls_core::experiments::MeanStd) -> String {
    format!("{:.6}±{:.6}", m.mean, m.std)
}

/// Fixed-width table of aggregated sweep rows.
pub fn render_sweep_table(results: &SweepResults) -> String {
    let mut out = format!(
        "{:<10} {:<20} {:>6} {:>22} {:>22} {:>22}\n",
        "method", "shift", "r", "w_mse", "top1", "rho_t_abs_err"
    );
    for r in &results.rows {
        out.push_str(&format!(
            "{:<10} {:<20} {:>6} {:>22} {:>22} {:>22}\n",
            r.method.name(),
            r.shift,
            r.r,
            mean_std(&r.w_mse),
            mean_std(&r.top1),
            mean_std(&r.rho_t_abs_err)
        ));
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let grid: GridConfig = io::read_toml(&args.grid, "sweep grid")?;
    let results = run_sweep(&grid, args.workers)?;
    io::write_json(&args.output, &results)?;
    match args.format {
        ReportFormat::Table => print!("{}", render_sweep_table(&results)),
        ReportFormat::Json => print!("{}", io::to_json_pretty(&results.rows)),
    }
    if !results.all_succeeded() {
        for f in &results.failures {
            eprintln!(
                "cell failed: {} {} r={} seed={}: {}",
                f.method, f.shift, f.r, f.seed, f.error
            );
        }
        return Err(anyhow!(ComputationFailed(format!(
            "{} of {} method runs failed",
            results.failures.len(),
            results.failures.len() + results.cells.len()
        ))));
    }
    Ok(())
}

pub fn cmd_bound_check(args: &BoundCheckArgs) -> anyhow::Result<()> {
    let [a, b] = args.distort[..] else {
        return Err(usage("--distort needs exactly two values a,b"));
    };
    let config = BoundCheckConfig {
        check: match args.theorem {
            BoundArg::One => RatioBound::SourceRatio,
            BoundArg::Three => RatioBound::TargetRatio,
        },
        trials: args.trials,
        delta: args.delta,
        n: args.n,
        mu1: args.mu1,
        mu0: args.mu0,
        rho_t: args.rho_t,
        distort: (a, b),
        seed: args.seed,
    };
    if config.trials < 100 {
        return Err(usage("--trials must be at least 100"));
    }
    let report = bound_check(&config).context("bound check")?;
    match args.format {
        ReportFormat::Json => print!("{}", io::to_json_pretty(&report)),
        ReportFormat::Table => println!(
            "check={:?} n={} delta={} bound={:.6} violations={}/{} rate={:.4} tolerance={:.4} {}",
            report.check,
            report.n,
            report.delta,
            report.bound,
            report.violations,
            report.trials,
            report.violation_rate,
            report.tolerance,
            if report.passed { "PASS" } else { "FAIL" }
        ),
    }
    if !report.passed {
        return Err(anyhow!(ComputationFailed(format!(
            "violation rate {:.4} exceeds tolerance {:.4}",
            report.violation_rate, report.tolerance
        ))));
    }
    Ok(())
}
