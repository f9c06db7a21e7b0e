use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vflsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vflsim")).args(args).output().unwrap()
}

fn config(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect()
}

/// A fast variant of the demo scenario.
fn small_demo(dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(config("demo.toml"))
        .unwrap()
        .replace("n = 2000", "n = 600")
        .replace("epochs = 30", "epochs = 25");
    let path = dir.join("small.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn list_tasks_prints_the_builtins() {
    let out = vflsim(&["list-tasks"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("task3\t10 -> 2\t[0,1,0,1,0,1,0,1,0,1]"));
}

#[test]
fn missing_config_is_a_validation_failure() {
    let out = vflsim(&["run", "definitely-missing.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("definitely-missing.toml"));
}

#[test]
fn unknown_flag_prints_usage() {
    let out = vflsim(&["run", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn help_exits_cleanly() {
    let out = vflsim(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mi-chain"));
}

#[test]
fn demo_run_writes_a_csv_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_demo(dir.path());
    let out_path = dir.path().join("out.csv");
    let out = vflsim(&["run", cfg.to_str().unwrap(), "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&out_path).unwrap();
    assert_eq!(
        reader.headers().unwrap(),
        vec!["scenario", "row", "seed", "mta", "attack", "raw_acc", "lift_acc", "mi_mean_cut"]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    // 2 repetitions × 2 attacks, then a mean and a std row per attack.
    assert_eq!(rows.len(), 8);
    let mean = rows.iter().find(|r| &r[1] == "mean" && &r[4] == "cluster").unwrap();
    let mta: f64 = mean[3].parse().unwrap();
    assert!(mta >= 0.9, "mta {mta}");
}

#[test]
fn overrides_apply_and_runs_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_demo(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = vflsim(&["run", cfg, "--format", "json", "--seed", "11"]);
    let b = vflsim(&["run", cfg, "--format", "json", "--seed", "11"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let reports: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let records = &reports[0]["records"];
    assert_eq!(records[0]["seed"], 11);
    assert_eq!(records[1]["seed"], 12);
}

#[test]
fn bad_format_is_rejected() {
    let out = vflsim(&["run", config("demo.toml").to_str().unwrap(), "--format", "xml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mi_chain_checks_a_valid_chain() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.json");
    let chain = r#"{
        "branches": [
            {"input": [0.5, 0.5], "stages": [[[0.9, 0.1], [0.2, 0.8]]]},
            {"input": [0.3, 0.7], "stages": []}
        ],
        "lumping": [[1, 0], [0.5, 0.5], [0.5, 0.5], [0, 1]],
        "top": [[[0.8, 0.2], [0.1, 0.9]]],
        "output": [[0.7, 0.3], [0.4, 0.6]]
    }"#;
    std::fs::write(&path, chain).unwrap();
    let out = vflsim(&["mi-chain", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("branch 0: "));
    assert!(text.contains("ok: all inequalities hold"));
}

#[test]
fn mi_chain_rejects_malformed_chains() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("chain.json");
    std::fs::write(&path, r#"{"branches": [{"input": [0.6, 0.6], "stages": []}], "lumping": [[1],[1]], "top": [], "output": [[1]]}"#).unwrap();
    let out = vflsim(&["mi-chain", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(&path, "{ not json").unwrap();
    let out = vflsim(&["mi-chain", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("byte offset"));
}
