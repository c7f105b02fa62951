use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spectral-pe"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn spectrum_two_triangles_flags_infinite_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "g.txt", "0 1\n1 2\n0 2\n3 4\n4 5\n3 5\n");
    let out = run(&["spectrum", "--graph", &g, "--p", "2"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["schema"], 1);
    assert_eq!(v["rho"], "inf");
    assert_eq!(v["connected"], false);
    assert!(String::from_utf8_lossy(&out.stderr).contains("infinite"));
}

#[test]
fn spectrum_path_ratio_one() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "p3.txt", "0 1\n1 2\n");
    let json = dir.path().join("s.json");
    let out = run(&["spectrum", "--graph", &g, "--p", "1", "--out", json.to_str().unwrap()]);
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert!((v["rho"].as_f64().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn malformed_edge_list_exit_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "bad.txt", "# comment\n0 1\n1 two\n");
    let out = run(&["spectrum", "--graph", &g, "--p", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "parse_error");
    assert_eq!(err["line"], 3);
}

#[test]
fn verify_davis_kahan_exit_0_and_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.jsonl");
    let out = run(&["verify", "--bound", "davis_kahan", "--trials", "100", "--out", log.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["violated"], 0);
    let lines: Vec<Value> = std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 100);
    assert!(lines.iter().all(|r| r["holds"] == true && r["inputs_digest"].as_str().unwrap().len() == 64));
}

#[test]
fn verify_peg_degenerate_graph_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // The 6-cycle has a double eigenvalue at positions 2 and 3.
    let g = write(dir.path(), "c6.txt", "0 1\n1 2\n2 3\n3 4\n4 5\n5 0\n");
    let out = run(&["verify", "--bound", "peg_theorem", "--graph", &g, "--p", "2", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "infinite_delta");
}

#[test]
fn verify_spe_default_exit_0() {
    let out = run(&["verify", "--bound", "spe_theorem", "--trials", "20"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn verify_unknown_bound_exit_2() {
    assert_eq!(run(&["verify", "--bound", "nope"]).status.code(), Some(2));
}

#[test]
fn verify_instability_writes_curve() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("curve.csv");
    let out = run(&["verify", "--bound", "instability", "--p", "2", "--csv", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("eps,lhs,rhs\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn verify_threads_do_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for threads in ["1", "3"] {
        let log = dir.path().join(format!("t{threads}.jsonl"));
        let out = bin()
            .args(["verify", "--bound", "eigenvalue", "--trials", "12", "--out", log.to_str().unwrap()])
            .env("SPECTRAL_PE_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        logs.push(std::fs::read(log).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn encode_le_k2() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "k2.txt", "0 1\n");
    let csv = dir.path().join("z.csv");
    let out = run(&["encode", "--graph", &g, "--method", "le", "--p", "1", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let vals: Vec<f64> = text.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(vals.len(), 2);
    assert!(vals.iter().all(|v| (v.abs() - 0.5f64.sqrt()).abs() < 1e-12));
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("z.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["method"], "le");
    assert_eq!(meta["schema"], 1);
}

#[test]
fn encode_unknown_method_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "k2.txt", "0 1\n");
    assert_eq!(run(&["encode", "--graph", &g, "--method", "spectral", "--p", "1"]).status.code(), Some(2));
}

#[test]
fn encode_deepwalk_zero_steps_is_unoptimized() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "p4.txt", "0 1\n1 2\n2 3\n");
    let csv = dir.path().join("z.csv");
    let out = run(&["encode", "--graph", &g, "--method", "deepwalk", "--p", "2", "--steps", "0", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("z.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["optimized"], false);
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 4);
}

#[test]
fn encode_rank_deficient_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "k2.txt", "0 1\n");
    assert_eq!(run(&["encode", "--graph", &g, "--p", "3"]).status.code(), Some(3));
}

#[test]
fn linkpred_deterministic_with_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for name in ["a.json", "b.json"] {
        let path = dir.path().join(name);
        let out = run(&[
            "linkpred", "--graph", "sbm:40,40:0.4:0.05", "--seed", "3", "--epochs", "20", "--p", "4",
            "--perturb", "drop=0.1", "--out", path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read(path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let v: Value = serde_json::from_slice(&outputs[0]).unwrap();
    assert_eq!(v["schema"], 1);
    assert_eq!(v["train_loss"].as_array().unwrap().len(), 21);
    assert!(v["auc_perturbed"].is_number());
    assert_eq!(v["perturb"]["drop"], 0.1);
}

#[test]
fn linkpred_config_file_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "cfg.json", r#"{"epochs": 7, "lr": 0.02, "pe": {"p": 3}}"#);
    let out = run(&["linkpred", "--graph", "sbm:30,30:0.4:0.05", "--config", &cfg, "--epochs", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    assert_eq!(v["epochs"], 4);
    assert_eq!(v["lr"], 0.02);
    assert_eq!(v["p"], 3);
}

#[test]
fn linkpred_bad_sbm_spec_exit_2() {
    assert_eq!(run(&["linkpred", "--graph", "sbm:40:0.4"]).status.code(), Some(2));
}

#[test]
fn linkpred_empty_split_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let g = write(dir.path(), "k2.txt", "0 1\n");
    assert_eq!(run(&["linkpred", "--graph", &g, "--p", "1"]).status.code(), Some(3));
}
