use osls_core::em::{run_em, EmConfig};
use osls_core::io::Truth;
use osls_core::pipeline::{self, OodReference, PipelineOptions};
use osls_core::simulate::{make_scenario, records, ScenarioConfig, ShiftSpec};
use proptest::prelude::*;

fn scenario(k: usize, seed: u64) -> osls_core::simulate::Scenario {
    let mut cfg = ScenarioConfig::new(k, 3000, 3000, 3000, 1.0, seed);
    cfg.shift = ShiftSpec::Dirichlet { alpha: 1.0 };
    make_scenario(&cfg).unwrap()
}

#[test]
fn pipeline_recovers_shifted_prior() {
    let s = scenario(4, 21);
    let ood: Vec<f64> = s.ood_ref.iter().map(|x| x.record.h).collect();
    let target = records(&s.target);
    let report = pipeline::estimate(
        &records(&s.source),
        &target,
        OodReference::Scores(&ood),
        &PipelineOptions::default(),
    )
    .unwrap();
    for j in 0..4 {
        assert!((report.pi_hat[j] - s.truth.pi[j]).abs() < 0.05, "class {j}");
    }
    assert!((report.rho_t() - s.truth.rho_t).abs() < 0.05);

    let rows = pipeline::correct_target(&report, &target).unwrap();
    let truth = Truth::new(&s.source_model, &s.truth);
    let eval = pipeline::evaluate(&report.pi_hat, report.rho_t(), &truth, Some(&rows), 15).unwrap();
    assert!(eval.top1.unwrap() > 0.8);
    assert!(eval.ece.unwrap() < 0.05);
}

#[test]
fn estimate_report_round_trips() {
    let s = scenario(3, 22);
    let ood: Vec<f64> = s.ood_ref.iter().map(|x| x.record.h).collect();
    let report = pipeline::estimate(
        &records(&s.source),
        &records(&s.target),
        OodReference::Scores(&ood),
        &PipelineOptions::default(),
    )
    .unwrap();
    let text = osls_core::io::to_json_pretty(&report);
    let back: pipeline::EstimateReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn em_objective_never_increases(seed in 0u64..1000, k in 2usize..6, alpha in 1.0f64..4.0) {
        let mut cfg = ScenarioConfig::new(k, 200, 300, 10, 0.7, seed);
        cfg.shift = ShiftSpec::Dirichlet { alpha: 1.0 };
        let s = make_scenario(&cfg).unwrap();
        let target = records(&s.target);
        for config in [EmConfig::mle(), EmConfig::map(vec![alpha; k], (alpha, alpha))] {
            let trace = run_em(&s.source_model, &target, &config, None).unwrap();
            for w in trace.nll_per_iter.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }
}
