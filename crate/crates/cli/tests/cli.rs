use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use osls_cli::{render_eval_table, EvalRow};
use serde_json::Value;

const SCENARIO: &str = "k = 3\nn_source = 400\nn_target = 400\nn_ood_ref = 400\nr = 1.0\nseed = 3\n\n[shift]\nkind = \"ordered_lt\"\nimbalance = 10.0\n";

fn osls(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osls"))
        .args(args)
        .current_dir(dir)
        .env_remove("OSLS_WORKERS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = osls(dir, args);
    assert!(
        out.status.success(),
        "osls {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulated(scenario: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("scenario.toml"), scenario).unwrap();
    ok(
        dir.path(),
        &["simulate", "--config", "scenario.toml", "--out-dir", "data"],
    );
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

const ESTIMATE: [&str; 7] = [
    "estimate",
    "--source",
    "data/source.jsonl",
    "--target",
    "data/target.jsonl",
    "--ood-ref",
    "data/ood_ref.jsonl",
];

#[test]
fn simulate_writes_all_files() {
    let dir = simulated(SCENARIO);
    let d = dir.path().join("data");
    assert_eq!(lines(&d.join("source.jsonl")).len(), 400);
    assert_eq!(lines(&d.join("target.jsonl")).len(), 800);
    assert_eq!(lines(&d.join("ood_ref.jsonl")).len(), 400);
    let truth = json(&d.join("truth.json"));
    assert_eq!(truth["K"], 3);
    assert_eq!(truth["rho_t"], 0.5);
}

#[test]
fn simulate_csv_has_header() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.toml"), SCENARIO).unwrap();
    ok(
        dir.path(),
        &[
            "simulate",
            "--config",
            "s.toml",
            "--out-dir",
            "out",
            "--format",
            "csv",
        ],
    );
    let text = fs::read_to_string(dir.path().join("out/source.csv")).unwrap();
    assert!(text.starts_with("f1,f2,f3,h,y"));
    assert_eq!(text.lines().count(), 401);
}

#[test]
fn small_ratio_subsamples_ood() {
    let scenario = SCENARIO
        .replace("n_target = 400", "n_target = 1000")
        .replace("r = 1.0", "r = 0.01");
    let dir = simulated(&scenario);
    let target = lines(&dir.path().join("data/target.jsonl"));
    let ood = target.iter().filter(|v| v["y"] == 4).count();
    assert_eq!(target.len() - ood, 1000);
    assert_eq!(ood, 10);
}

#[test]
fn estimate_report_fields() {
    let dir = simulated(SCENARIO);
    ok(
        dir.path(),
        &[&ESTIMATE[..], &["--output", "est.json"]].concat(),
    );
    let report = json(&dir.path().join("est.json"));
    for key in [
        "pi_hat",
        "rho_t_hat",
        "rho_t_corrected",
        "c_hat",
        "rho_s_hat",
        "iterations",
        "converged",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["iterations"], 100);

    ok(
        dir.path(),
        &[
            &ESTIMATE[..],
            &["--no-rho-correction", "--output", "raw.json"],
        ]
        .concat(),
    );
    let raw = json(&dir.path().join("raw.json"));
    assert!(raw.get("rho_t_corrected").is_none());
    assert_eq!(raw["rho_t_hat"], report["rho_t_hat"]);
}

#[test]
fn unit_prior_map_matches_mle_bytes() {
    let dir = simulated(SCENARIO);
    ok(
        dir.path(),
        &[&ESTIMATE[..], &["--mle", "--output", "mle.json"]].concat(),
    );
    ok(
        dir.path(),
        &[
            &ESTIMATE[..],
            &[
                "--map",
                "--alpha-in",
                "1",
                "--alpha-out",
                "1,1",
                "--output",
                "map.json",
            ],
        ]
        .concat(),
    );
    assert_eq!(
        fs::read(dir.path().join("mle.json")).unwrap(),
        fs::read(dir.path().join("map.json")).unwrap()
    );
}

#[test]
fn estimate_to_stdout_matches_file() {
    let dir = simulated(SCENARIO);
    let out = ok(dir.path(), &ESTIMATE);
    ok(
        dir.path(),
        &[&ESTIMATE[..], &["--output", "est.json"]].concat(),
    );
    assert_eq!(out.stdout, fs::read(dir.path().join("est.json")).unwrap());
}

#[test]
fn correct_one_row_per_target() {
    let dir = simulated(SCENARIO);
    ok(
        dir.path(),
        &[&ESTIMATE[..], &["--output", "est.json"]].concat(),
    );
    ok(
        dir.path(),
        &[
            "correct",
            "--estimate",
            "est.json",
            "--target",
            "data/target.jsonl",
            "--output",
            "corr.jsonl",
        ],
    );
    let rows = lines(&dir.path().join("corr.jsonl"));
    assert_eq!(rows.len(), 800);
    for row in &rows {
        let g: Vec<f64> = serde_json::from_value(row["g"].clone()).unwrap();
        assert_eq!(g.len(), 4);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let label = row["label"].as_u64().unwrap() as usize;
        assert!(g.iter().all(|&x| x <= g[label - 1]));
    }
}

#[test]
fn identity_estimate_returns_extended_output() {
    let dir = simulated(SCENARIO);
    ok(
        dir.path(),
        &[
            &ESTIMATE[..],
            &["--no-rho-correction", "--output", "est.json"],
        ]
        .concat(),
    );
    let mut report = json(&dir.path().join("est.json"));
    report["pi_hat"] = report["c_hat"].clone();
    report["rho_t_hat"] = report["rho_s_hat"].clone();
    fs::write(
        dir.path().join("id.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "correct",
            "--estimate",
            "id.json",
            "--target",
            "data/target.jsonl",
            "--output",
            "corr.jsonl",
        ],
    );
    let rows = lines(&dir.path().join("corr.jsonl"));
    let target = lines(&dir.path().join("data/target.jsonl"));
    for (row, rec) in rows.iter().zip(&target) {
        let h = rec["h"].as_f64().unwrap();
        let f: Vec<f64> = serde_json::from_value(rec["f"].clone()).unwrap();
        let g: Vec<f64> = serde_json::from_value(row["g"].clone()).unwrap();
        for j in 0..3 {
            assert!((g[j] - h * f[j]).abs() < 1e-12);
        }
        assert!((g[3] - (1.0 - h)).abs() < 1e-12);
    }
}

#[test]
fn evaluate_json_matches_table() {
    let dir = simulated(SCENARIO);
    ok(
        dir.path(),
        &[&ESTIMATE[..], &["--output", "est.json"]].concat(),
    );
    ok(
        dir.path(),
        &[
            "correct",
            "--estimate",
            "est.json",
            "--target",
            "data/target.jsonl",
            "--output",
            "corr.jsonl",
        ],
    );
    let base = [
        "evaluate",
        "--truth",
        "data/truth.json",
        "--estimate",
        "est.json",
        "--corrected",
        "corr.jsonl",
    ];
    let table = ok(dir.path(), &base).stdout;
    let json_out = ok(dir.path(), &[&base[..], &["--format", "json"]].concat()).stdout;
    let rows: Vec<EvalRow> = serde_json::from_slice(&json_out).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].w_mse.is_some() && rows[0].top1.is_some() && rows[0].ece.is_some());
    assert_eq!(render_eval_table(&rows).as_bytes(), &table[..]);
}

#[test]
fn evaluate_baselines_rows() {
    let dir = simulated(SCENARIO);
    let base = [
        "evaluate",
        "--truth",
        "data/truth.json",
        "--baselines",
        "--source",
        "data/source.jsonl",
        "--target",
        "data/target.jsonl",
        "--format",
        "json",
    ];
    let rows: Vec<EvalRow> = serde_json::from_slice(&ok(dir.path(), &base).stdout).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["mlls", "mapls", "bbse"]);
    let with_osls = [&base[..], &["--ood-ref", "data/ood_ref.jsonl"]].concat();
    let rows: Vec<EvalRow> = serde_json::from_slice(&ok(dir.path(), &with_osls).stdout).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0].method, "osls-mle");
    for r in &rows[1..] {
        assert_eq!(r.rho_t_abs_err, Some(0.5));
    }
}

const GRID: &str = "r = [1.0, 0.5, 0.1]\nseeds = [1, 2]\n\n[base]\nk = 3\nn_source = 300\nn_target = 300\nn_ood_ref = 300\nr = 1.0\nseed = 0\n\n[[shifts]]\nkind = \"dirichlet\"\nalpha = 1.0\n\n[[shifts]]\nkind = \"ordered_lt\"\nimbalance = 100.0\n";

#[test]
fn sweep_rows_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("grid.toml"), GRID).unwrap();
    ok(
        dir.path(),
        &["sweep", "--grid", "grid.toml", "--output", "one.json"],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_osls"))
        .args(["sweep", "--grid", "grid.toml", "--output", "four.json"])
        .env("OSLS_WORKERS", "4")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let one = fs::read(dir.path().join("one.json")).unwrap();
    assert_eq!(one, fs::read(dir.path().join("four.json")).unwrap());
    let results: Value = serde_json::from_slice(&one).unwrap();
    assert_eq!(results["rows"].as_array().unwrap().len(), 18);
    assert_eq!(results["cells"].as_array().unwrap().len(), 36);
}

#[test]
fn sweep_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // A perfectly separating scorer leaves the source ID ratio unidentifiable.
    let grid = GRID.replace("seed = 0\n", "seed = 0\nseparation = 60.0\n");
    fs::write(dir.path().join("grid.toml"), grid).unwrap();
    let out = osls(
        dir.path(),
        &["sweep", "--grid", "grid.toml", "--output", "s.json"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("s.json").exists());
}

#[test]
fn bound_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    for theorem in ["1", "3"] {
        let out = ok(
            dir.path(),
            &[
                "bound-check",
                "--theorem",
                theorem,
                "--trials",
                "200",
                "--format",
                "json",
            ],
        );
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(report["passed"], true);
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = osls(
        dir.path(),
        &["simulate", "--config", "nope.toml", "--out-dir", "x"],
    );
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(
        osls(dir.path(), &["estimate", "--source", "a"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(osls(dir.path(), &["frobnicate"]).status.code(), Some(2));
    fs::write(dir.path().join("bad.toml"), "k = 3\nbogus = 1\n").unwrap();
    let bad = osls(
        dir.path(),
        &["simulate", "--config", "bad.toml", "--out-dir", "x"],
    );
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn bad_pseudo_ood_parameters_exit_two() {
    let dir = simulated(SCENARIO);
    let base = [
        "estimate",
        "--source",
        "data/source.jsonl",
        "--target",
        "data/target.jsonl",
        "--pseudo-ood",
        "scenario.toml",
    ];
    assert_eq!(
        osls(dir.path(), &[&base[..], &["--gamma", "1.0"]].concat())
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        osls(dir.path(), &[&base[..], &["--T", "0.5"]].concat())
            .status
            .code(),
        Some(2)
    );
    ok(
        dir.path(),
        &[&base[..], &["--gamma", "0.2", "--T", "2"]].concat(),
    );
}

#[test]
fn simulate_is_deterministic() {
    let a = simulated(SCENARIO);
    let b = simulated(SCENARIO);
    for f in [
        "source.jsonl",
        "target.jsonl",
        "ood_ref.jsonl",
        "truth.json",
    ] {
        assert_eq!(
            fs::read(a.path().join("data").join(f)).unwrap(),
            fs::read(b.path().join("data").join(f)).unwrap()
        );
    }
}
