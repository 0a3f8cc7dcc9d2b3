use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dru(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dru"))
        .current_dir(dir)
        .env_remove("DRU_CONFIG")
        .env_remove("DRU_OUT")
        .env_remove("DRU_SEED")
        .env_remove("DRU_JOBS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const SMALL: &str = r#"
[population]
n_population = 5000
n_targets = 2
covariates = [{ name = "gender", levels = 2 }, { name = "age", levels = 3 }]
[bias]
n_sample = 600
[model]
covariates = ["gender", "age"]
[sweep]
replicates = 2
subsets = [["gender"], ["gender", "age"]]
methods = ["dru_informed", "nn_plain"]
[train]
max_epochs = 4
"#;

#[test]
fn generate_is_reproducible_and_records_provenance() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", &SMALL.replace("[bias]", "[bias]\ngamma = [2.0, 3.0]\ndirection = [1, -1]"));
    for out in ["a", "b"] {
        let o = dru(d, &["generate", "--config", "c.toml", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["population.csv", "sample_y1.csv", "sample_y2.csv", "provenance_y2.json", "manifest.json"] {
        assert_eq!(read(d.join("a").join(f)), read(d.join("b").join(f)), "{f}");
    }
    assert_eq!(read(d.join("a/population.csv")).lines().count(), 5001);
    assert_eq!(read(d.join("a/sample_y1.csv")).lines().count(), 601);
    let prov: serde_json::Value = serde_json::from_str(&read(d.join("a/provenance_y1.json"))).unwrap();
    assert_eq!(prov["gamma_true"], 2.0);
    assert_eq!(prov["direction_true"], 1);
    let prov: serde_json::Value = serde_json::from_str(&read(d.join("a/provenance_y2.json"))).unwrap();
    assert_eq!(prov["gamma_true"], 3.0);

    let o = dru(d, &["generate", "--config", "c.toml", "--out", "c", "--seed", "9"]);
    assert!(o.status.success());
    assert_ne!(read(d.join("a/population.csv")), read(d.join("c/population.csv")));
}

#[test]
fn environment_overrides_flags_defaults() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_dru"))
        .current_dir(d)
        .env("DRU_CONFIG", "c.toml")
        .env("DRU_OUT", "envout")
        .env("DRU_SEED", "5")
        .arg("generate")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&read(d.join("envout/manifest.json"))).unwrap();
    assert_eq!(m["seed"], 5);
}

fn constant_csv(n: usize) -> String {
    let mut s = String::from("gender,age,y1,cell_id\n");
    for i in 0..n {
        let (g, a) = (i % 2, (i / 2) % 3);
        s.push_str(&format!("{g},{a},1,{}\n", g * 3 + a));
    }
    s
}

const TRAIN: &str = r#"
[population]
n_targets = 1
covariates = [{ name = "gender", levels = 2 }, { name = "age", levels = 3 }]
[model]
covariates = ["gender", "age"]
"#;

#[test]
fn train_on_constant_outcome_reduces_loss() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", TRAIN);
    write(d, "data.csv", &constant_csv(600));
    let o = dru(d, &["train", "--config", "c.toml", "--data", "data.csv", "--out", "m"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(d.join("m/train_report.json"))).unwrap();
    let trace: Vec<f64> = report["train_loss_trace"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(trace.len() >= 2);
    assert!(trace.last().unwrap() < &trace[0], "{trace:?}");
    for line in read(d.join("m/predictions.csv")).lines().skip(1) {
        let y: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((y - 1.0).abs() < 0.05, "{line}");
    }
}

#[test]
fn dru_with_unit_gamma_matches_plain_training() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let gen = SMALL.to_string();
    write(d, "g.toml", &gen);
    assert!(dru(d, &["generate", "--config", "g.toml", "--out", "g"]).status.success());
    write(d, "plain.toml", &gen);
    write(
        d,
        "dru.toml",
        &gen.replace(
            "[model]",
            "[model]\nloss = { kind = \"dru\", meta = { gamma = 1.0, direction = 0 } }",
        ),
    );
    for (cfg, out) in [("plain.toml", "p"), ("dru.toml", "r")] {
        let o = dru(d, &["train", "--config", cfg, "--data", "g/sample_y1.csv", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let preds = |dir: &str| -> Vec<f64> {
        read(d.join(dir).join("predictions.csv"))
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    let (p, r) = (preds("p"), preds("r"));
    assert_eq!(p.len(), 6);
    for (a, b) in p.iter().zip(&r) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn missing_outcome_column_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", TRAIN);
    write(d, "bad.csv", "gender,age,cell_id\n0,0,0\n");
    let o = dru(d, &["train", "--config", "c.toml", "--data", "bad.csv", "--out", "m"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`y1`"));
}

#[test]
fn parse_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "bad.toml", "mystery = true\n");
    assert_eq!(dru(d, &["sweep", "--config", "bad.toml"]).status.code(), Some(2));
    assert_eq!(dru(d, &["sweep", "--jobs", "many"]).status.code(), Some(2));
    assert_eq!(dru(d, &["frobnicate"]).status.code(), Some(2));
    write(d, "seeded.toml", "[population]\nseed = 4\n");
    assert_eq!(dru(d, &["generate", "--config", "seeded.toml"]).status.code(), Some(2));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", SMALL);
    write(d, "blocker", "");
    let o = dru(d, &["generate", "--config", "c.toml", "--out", "blocker/sub"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn oracle_reports_agreement_and_infeasibility() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "o.toml",
        r#"
[oracle]
instances = 100
[[oracle.cases]]
losses = [4.0, 1.0, 2.0, 3.0]
signs = [1, -1, -1, -1]
gamma = 2.0
direction = 1
[[oracle.cases]]
losses = [4.0, 1.0, 2.0, 3.0]
signs = [1, 1, -1, -1]
gamma = 1.0
direction = 1
"#,
    );
    let o = dru(d, &["oracle", "--config", "o.toml", "--out", "o"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("dRU infeasible"));
    let r: serde_json::Value = serde_json::from_str(&read(d.join("o/oracle_report.json"))).unwrap();
    assert_eq!(r["instances"], 102);
    assert!(r["max_discrepancy"].as_f64().unwrap() < 1e-9);
    assert_eq!(r["dru_above_ru"], 0);
    let cases = &r["results"].as_array().unwrap()[100..];
    assert_eq!(cases[0]["dru"]["status"], "infeasible");
    for key in ["ru_greedy", "ru_lp"] {
        assert!((cases[1][key].as_f64().unwrap() - 2.5).abs() < 1e-12);
    }
    assert!((cases[1]["dru"]["greedy"].as_f64().unwrap() - 2.5).abs() < 1e-12);

    write(d, "big.toml", "[[oracle.cases]]\nlosses = [1.0]\nsigns = [1, 1]\ngamma = 2.0\ndirection = 1\n");
    assert_eq!(dru(d, &["oracle", "--config", "big.toml"]).status.code(), Some(2));
}

#[test]
fn sweep_outputs_and_rerun() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", SMALL);
    let o = dru(d, &["sweep", "--config", "c.toml", "--out", "s", "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = read(d.join("s/records.csv"));
    assert_eq!(records.lines().count(), 17);
    let summary = read(d.join("s/summary.csv"));
    assert_eq!(summary.lines().next(), Some("method,mean_b,freq_b_positive"));
    assert_eq!(summary.lines().count(), 3);
    assert!(read(d.join("s/histogram.csv")).starts_with("method,bin_lower,bin_upper,count\n"));

    let o = dru(d, &["rerun", "--manifest", "s/manifest.json", "--out", "t", "--jobs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["records.csv", "summary.csv", "histogram.csv", "manifest.json"] {
        assert_eq!(read(d.join("s").join(f)), read(d.join("t").join(f)), "{f}");
    }
    assert_eq!(
        dru(d, &["rerun", "--manifest", "s/manifest.json", "--seed", "3"]).status.code(),
        Some(2)
    );
}

#[test]
fn tampered_manifest_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", SMALL);
    assert!(dru(d, &["oracle", "--config", "c.toml", "--out", "o"]).status.success());
    let m = read(d.join("o/manifest.json")).replace("\"instances\": 100", "\"instances\": 99");
    write(d, "o/manifest.json", &m);
    assert_eq!(dru(d, &["rerun", "--manifest", "o/manifest.json"]).status.code(), Some(2));
}

#[test]
fn mostly_failed_sweep_exits_three() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "c.toml", &SMALL.replace("max_epochs = 4", "max_epochs = 4\nbatch_size = 5000"));
    let o = dru(d, &["sweep", "--config", "c.toml", "--out", "s"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(d.join("s/records.csv").exists());
    assert!(d.join("s/manifest.json").exists());
}
