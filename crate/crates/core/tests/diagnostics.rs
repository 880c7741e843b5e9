use std::collections::BTreeMap;

use saq_core::diagnostics::maze::value_at_fraction;
use saq_core::diagnostics::*;
use saq_core::eval::EvalConfig;
use saq_core::MetricTrace;

fn tiny_setup() -> MazeSetup {
    let mut s = MazeSetup::default();
    s.quantizer.epochs = 5;
    s.quantizer.codebook_size = 4;
    s.agent.steps = 60;
    s.agent.eval_every = 30;
    s.continuous.steps = 20;
    s.continuous.log_every = 10;
    s.continuous.eval_every = 10;
    s.continuous.penalty_states = 4;
    s.continuous.grid_resolution = 16;
    s.eval = EvalConfig {
        episodes: 2,
        ..Default::default()
    };
    s.bandit_samples = 200;
    s
}

fn trace(columns: &[&str], rows: &[Vec<f64>]) -> MetricTrace {
    let mut t = MetricTrace::new(columns);
    for r in rows {
        t.push(r.clone());
    }
    t
}

#[test]
fn iql_oracle_check_passes() {
    let report = run_iql_oracle_check(100, 12, 0).unwrap();
    assert!(report.passed(), "{}", report.summary_text());
    assert_eq!(report.cells[0].trace.len(), 100);
    assert!(run_iql_oracle_check(50, 12, 0).is_err());
}

#[test]
fn identity_suite_passes() {
    let report = run_identity_suite(0).unwrap();
    assert!(report.passed(), "{}", report.summary_text());
}

#[test]
fn penalty_gap_verdicts_follow_the_traces() {
    let cols = ["step", "penalty_gap", "eval_success"];
    let mut cells = Vec::new();
    for seed in 1..=3u64 {
        let saq = trace(&["step", "exact_penalty", "eval_success"], &(0..300)
            .map(|i| vec![i as f64 * 10.0, 3.0 - i as f64 * 0.01, if i == 299 { 1.0 } else { f64::NAN }])
            .collect::<Vec<_>>());
        cells.push(Cell::new(format!("saq-cql_seed{seed}"), &[("arm", "saq-cql".into()), ("seed", seed.to_string())], saq));
        let growth = if seed == 2 { -0.1 } else { 0.5 };
        let cont = trace(&cols, &[
            vec![0.0, 0.0, f64::NAN],
            vec![100.0, 1.0, 0.0],
            vec![1000.0, 1.0 + growth, 0.0],
        ]);
        cells.push(Cell::new(format!("continuous-cql_seed{seed}"), &[("arm", "continuous-cql".into()), ("seed", seed.to_string())], cont));
    }
    let report = ExperimentReport {
        experiment: "penalty-gap".into(),
        config: BTreeMap::new(),
        cells,
        summary: vec![],
        verdicts: vec![],
    };
    let r = recompute_verdicts(&report).unwrap();
    assert_eq!(r.verdict("saq-cql mean final success").unwrap().observed, 1.0);
    assert_eq!(r.verdict("continuous-cql mean final success").unwrap().observed, 0.0);
    let growth = r.verdict("min continuous gap growth over seeds").unwrap();
    assert!((growth.observed + 0.1).abs() < 1e-12);
    assert!(!growth.passed);
    assert_eq!(r.verdict("min saq-cql penalty monotone fraction").unwrap().observed, 1.0);
    assert!(r.verdict("min paired success advantage (saq - continuous)").unwrap().passed);
    assert!(!r.passed());
}

#[test]
fn gap_reference_is_first_row_past_the_fraction() {
    let t = trace(&["step", "g"], &[vec![0.0, 5.0], vec![50.0, 6.0], vec![100.0, 7.0], vec![1000.0, 8.0]]);
    assert_eq!(value_at_fraction(&t, "g", 0.1), Some(7.0));
    assert_eq!(value_at_fraction(&t, "g", 0.0), Some(5.0));
}

#[test]
fn codebook_verdicts_use_spread_and_range() {
    let mut cells = Vec::new();
    for (k, s) in [(8, 1.0), (16, 0.9), (32, 0.8), (64, 0.0)] {
        for seed in 1..=3 {
            let t = trace(&["step", "eval_success"], &[vec![100.0, s]]);
            cells.push(Cell::new(
                format!("k{k}_seed{seed}"),
                &[("k", k.to_string()), ("seed", seed.to_string()), ("reconstruction_mse", "0.1".into())],
                t,
            ));
        }
    }
    let report = ExperimentReport {
        experiment: "codebook".into(),
        config: BTreeMap::new(),
        cells,
        summary: vec![],
        verdicts: vec![],
    };
    let r = recompute_verdicts(&report).unwrap();
    assert_eq!(r.summary.len(), 4);
    let spread = &r.verdicts[0];
    let range = &r.verdicts[1];
    assert!((spread.observed - 0.1).abs() < 1e-12 && spread.passed);
    assert!((range.observed - 0.2).abs() < 1e-12 && !range.passed);
}

#[test]
fn unknown_experiment_is_rejected() {
    let report = ExperimentReport {
        experiment: "nope".into(),
        config: BTreeMap::new(),
        cells: vec![],
        summary: vec![],
        verdicts: vec![],
    };
    assert!(recompute_verdicts(&report).is_err());
}

#[test]
fn maze_experiments_run_end_to_end_at_small_scale() {
    let setup = tiny_setup();
    let seeds = [1, 2, 3];
    assert!(run_penalty_gap_diagnostic(&setup, &seeds[..2]).is_err());

    let gap = run_penalty_gap_diagnostic(&setup, &seeds).unwrap();
    assert_eq!(gap.cells.len(), 6);
    assert_eq!(gap.verdicts.len(), 5);
    for c in gap.cells_where("arm", "continuous-cql") {
        assert!(c.trace.column("penalty_gap").unwrap().iter().all(|v| v.is_finite()));
    }
    let dir = tempfile::tempdir().unwrap();
    gap.write_dir(dir.path()).unwrap();
    let back = ExperimentReport::read_dir(dir.path()).unwrap();
    assert_eq!(recompute_verdicts(&back).unwrap().verdicts.len(), gap.verdicts.len());
    assert!(dir.path().join("summary.txt").exists());
    assert!(dir.path().join("cells/saq-cql_seed1.csv").exists());

    let sizes = run_codebook_ablation(&setup, &[4, 8], &seeds).unwrap();
    assert_eq!(sizes.cells.len(), 6);
    assert_eq!(sizes.summary.len(), 2);

    let cond = run_state_conditioning_ablation(&setup, &seeds).unwrap();
    assert_eq!(cond.cells_where("arm", "blinded").count(), 3);
    assert_eq!(cond.verdicts.len(), 4);

    let sweep = run_constraint_sweep(&setup, &[0.0, 0.01, 1.0, 10.0], &seeds).unwrap();
    assert_eq!(sweep.cells.len(), 12);
    assert!(run_constraint_sweep(&setup, &[0.1, 1.0, 2.0], &seeds).is_err());
}

#[test]
fn zero_step_cell_still_reports_success() {
    let mut setup = tiny_setup();
    setup.agent.steps = 0;
    let run = run_saq_cell(&setup, 1, 4, true, 1.0).unwrap();
    assert_eq!(run.trace.len(), 1);
    assert!(run.trace.column("eval_success").unwrap()[0].is_finite());
}

#[test]
fn larger_alpha_lowers_the_trained_penalty() {
    let mut setup = tiny_setup();
    setup.quantizer.epochs = 40;
    setup.quantizer.codebook_size = 8;
    setup.agent.steps = 2000;
    setup.agent.eval_every = 0;
    setup.eval.episodes = 1;
    let tail = |alpha: f64| {
        let run = run_saq_cell(&setup, 4, 8, true, alpha).unwrap();
        let p = run.trace.column("exact_penalty").unwrap();
        let last = &p[p.len() - p.len() / 10..];
        last.iter().sum::<f64>() / last.len() as f64
    };
    let penalties: Vec<f64> = [0.1, 1.0, 10.0].into_iter().map(tail).collect();
    assert!(penalties.windows(2).all(|w| w[1] < w[0]), "{penalties:?}");
}
