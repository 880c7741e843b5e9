use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use saq_cli::rundir::{read_manifest, verify_manifest};

fn saq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saq"))
        .args(args)
        .current_dir(dir)
        .env("SAQ_RUN_ROOT", dir.join("runs"))
        .output()
        .expect("saq runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = saq(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// gen-data, train-quantizer, quantize and a short CQL run.
fn pipeline(dir: &Path) {
    ok(dir, &["gen-data", "--env", "maze", "--n", "3", "--seed", "7", "--out", "d.saqd"]);
    ok(dir, &["train-quantizer", "--dataset", "d.saqd", "--k", "8", "--epochs", "10", "--seed", "7", "--out", "q"]);
    ok(dir, &["quantize", "--dataset", "d.saqd", "--model", "q/quantizer.saqm", "--out", "dq.saqd"]);
    ok(
        dir,
        &[
            "train", "--algo", "cql", "--dataset", "dq.saqd", "--quantizer", "q/quantizer.saqm", "--steps", "100",
            "--episodes", "3", "--eval-every", "50", "--seed", "7", "--out", "t",
        ],
    );
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--env", "maze", "--n", "3", "--seed", "7", "--out", "a.saqd"]);
    ok(d, &["gen-data", "--env", "maze", "--n", "3", "--seed", "7", "--out", "b.saqd"]);
    assert_eq!(fs::read(d.join("a.saqd")).unwrap(), fs::read(d.join("b.saqd")).unwrap());
    ok(d, &["gen-data", "--env", "bandit", "--n", "100", "--seed", "1", "--out", "c.saqd"]);
}

#[test]
fn pipeline_writes_complete_run_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    pipeline(d);
    for run in ["q", "t"] {
        let dir = d.join(run);
        let files: Vec<String> = read_manifest(&dir).unwrap().into_iter().map(|e| e.file).collect();
        assert!(files.contains(&"config.resolved".to_string()));
        assert!(files.contains(&"metrics.csv".to_string()));
        assert!(verify_manifest(&dir).unwrap().is_empty());
    }
    let resolved = fs::read_to_string(d.join("t/config.resolved")).unwrap();
    assert!(resolved.contains("algo=cql\n") && resolved.contains("steps=100\n") && resolved.contains("gamma=0.99\n"));

    let out = ok(d, &["eval", "--agent", "t/agent.bin", "--quantizer", "q/quantizer.saqm", "--episodes", "3"]);
    assert!(out.contains("success_rate="));
    ok(d, &["eval", "--agent", "t/agent.bin", "--quantizer", "q/quantizer.saqm", "--episodes", "3", "--out", "e"]);
    assert!(d.join("e/metrics.csv").exists());
}

#[test]
fn pipeline_metrics_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    for f in ["q/metrics.csv", "t/metrics.csv", "t/agent.bin", "dq.saqd"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn untrained_agent_evaluates_without_failing() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "d.saqd"]);
    ok(d, &["train-quantizer", "--dataset", "d.saqd", "--k", "4", "--epochs", "2", "--out", "q"]);
    ok(d, &["train", "--algo", "iql", "--dataset", "d.saqd", "--quantizer", "q/quantizer.saqm", "--steps", "0", "--out", "t"]);
    let out = ok(d, &["eval", "--agent", "t/agent.bin", "--quantizer", "q/quantizer.saqm", "--episodes", "4"]);
    let rate: f64 = out.lines().find_map(|l| l.strip_prefix("success_rate=")).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

#[test]
fn continuous_algorithms_train_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "d.saqd"]);
    ok(d, &["train", "--algo", "cont-bc", "--dataset", "d.saqd", "--steps", "50", "--log-every", "10", "--out", "bc"]);
    ok(
        d,
        &[
            "train", "--algo", "cont-cql", "--dataset", "d.saqd", "--steps", "20", "--log-every", "10",
            "--n-samples", "2", "--penalty-states", "4", "--grid-resolution", "16", "--out", "cql",
        ],
    );
    let header = fs::read_to_string(d.join("cql/metrics.csv")).unwrap();
    assert!(header.starts_with("step,total,bellman,penalty,policy_loss,estimated_penalty,exact_penalty,penalty_gap"));
    ok(d, &["eval", "--agent", "cql/agent.bin", "--episodes", "2"]);
}

#[test]
fn config_file_values_yield_to_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "d.saqd"]);
    ok(d, &["train-quantizer", "--dataset", "d.saqd", "--k", "4", "--epochs", "2", "--out", "q"]);
    fs::write(
        d.join("run.cfg"),
        "# training settings\nalgo = cql\ndataset = d.saqd\nquantizer = q/quantizer.saqm\nalpha = 1.0\nsteps = 20\n",
    )
    .unwrap();
    ok(d, &["train", "--config", "run.cfg", "--alpha", "2.0", "--out", "t"]);
    let resolved = fs::read_to_string(d.join("t/config.resolved")).unwrap();
    assert!(resolved.contains("alpha=2.0\n"), "{resolved}");
    assert!(resolved.contains("steps=20\n"));

    fs::write(d.join("bad.cfg"), "algo = cql\nbogus_key = 3\n").unwrap();
    assert_eq!(code(&saq(d, &["train", "--config", "bad.cfg", "--dataset", "d.saqd", "--quantizer", "q/quantizer.saqm"])), 1);
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "d.saqd"]);
    let before = fs::read(d.join("d.saqd")).unwrap();
    assert_eq!(code(&saq(d, &["gen-data", "--seed", "9", "--out", "d.saqd"])), 2);
    assert_eq!(fs::read(d.join("d.saqd")).unwrap(), before);
    ok(d, &["gen-data", "--seed", "9", "--out", "d.saqd", "--force"]);
    assert_ne!(fs::read(d.join("d.saqd")).unwrap(), before);

    ok(d, &["train-quantizer", "--dataset", "d.saqd", "--k", "4", "--epochs", "2", "--out", "q"]);
    let manifest = fs::read(d.join("q/MANIFEST")).unwrap();
    assert_eq!(code(&saq(d, &["train-quantizer", "--dataset", "d.saqd", "--k", "4", "--epochs", "3", "--out", "q"])), 2);
    assert_eq!(fs::read(d.join("q/MANIFEST")).unwrap(), manifest);
    ok(d, &["train-quantizer", "--dataset", "d.saqd", "--k", "4", "--epochs", "3", "--out", "q", "--force"]);
}

#[test]
fn exit_codes_classify_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&saq(d, &["frobnicate"])), 1);
    assert_eq!(code(&saq(d, &[])), 1);
    assert_eq!(code(&saq(d, &["train", "--dataset", "x.saqd"])), 1);
    assert_eq!(code(&saq(d, &["gen-data", "--env", "moon", "--out", "x.saqd"])), 1);
    assert_eq!(code(&saq(d, &["gen-data", "--noise", "abc", "--out", "x.saqd"])), 1);
    assert_eq!(code(&saq(d, &["diagnose", "nonsense"])), 1);
    assert_eq!(code(&saq(d, &["quantize", "--dataset", "missing.saqd", "--model", "m", "--out", "o.saqd"])), 2);
    fs::write(d.join("junk.bin"), b"not an agent").unwrap();
    assert_eq!(code(&saq(d, &["eval", "--agent", "junk.bin"])), 2);
    assert_eq!(code(&saq(d, &["--help"])), 0);
}

#[test]
fn diagnose_identities_writes_a_passing_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = ok(d, &["diagnose", "identities"]);
    assert!(out.contains("overall: PASS"));
    let dir = d.join("runs/diagnose-identities");
    for f in ["report.json", "summary.txt", "config.resolved", "metrics.csv", "MANIFEST"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    assert!(verify_manifest(&dir).unwrap().is_empty());
}

#[test]
fn failed_verdicts_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    // Untrained maze agents cannot reach the success floor.
    let o = saq(
        d,
        &[
            "diagnose", "penalty-gap", "--steps", "0", "--continuous-steps", "0", "--epochs", "1", "--k", "4",
            "--episodes", "2", "--out", "gap",
        ],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("gap/report.json").exists());
}
