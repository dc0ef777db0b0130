use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn ccfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccfit")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    format!("{}/configs/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FOUR: &str = "y,z,x1\n3.0,1,0.5\n1.0,0,-0.2\n5.0,1,1.1\n2.0,0,0.3\n";

#[test]
fn estimate_zero_predictor_is_difference_in_means() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", FOUR);
    let out = dir.path().join("est.json");
    let o = ccfit(&["estimate", "--data", s(&data), "--design", "cre", "--predictor", "zero", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let tau = v["tau_hat"].as_f64().unwrap();
    assert!((tau - (4.0 - 1.5)).abs() < 1e-12, "{tau}");
    // folds CRE{2,1} have a single control: no variance estimate
    assert!(v["v_cf"].is_null() && v["ci"].is_null());
    assert!(v["variance_error"].as_str().unwrap().contains("insufficient replication"));
    assert_eq!(v["folds"].as_array().unwrap().len(), 2);
    assert_eq!(v["manifest"]["seed"].as_u64(), Some(0));
    assert_eq!(v["manifest"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn estimate_reports_interval() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (0..12).map(|i| format!("{},{},{}\n", i as f64 * 0.25 + (i % 2) as f64 * 2.0, i % 2, i)).collect();
    let data = write(dir.path(), "d.csv", &format!("y,z,x1\n{rows}"));
    let o = ccfit(&["estimate", "--data", s(&data), "--design", "cre", "--predictor", "ols", "--alpha", "0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let tau = v["tau_hat"].as_f64().unwrap();
    let ci = v["ci"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() <= tau && tau <= ci[1].as_f64().unwrap());
    assert!(v["v_cf"].as_f64().unwrap() >= 0.0);
    assert_eq!(v["plan"]["fold1_treated"], 3);
}

#[test]
fn estimate_is_reproducible_from_seed() {
    let dir = tempfile::tempdir().unwrap();
    let rows: String = (0..40)
        .map(|i| format!("{},{},{}\n", (i as f64 * 0.7).sin() + (i % 2) as f64, i % 2, (i as f64 * 1.3).cos()))
        .collect();
    let data = write(dir.path(), "d.csv", &format!("y,z,x1\n{rows}"));
    let run = |seed: &str| {
        let o = ccfit(&["estimate", "--data", s(&data), "--design", "bre:0.5", "--seed", seed]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["tau_hat"].as_f64().unwrap()
    };
    assert_eq!(run("11").to_bits(), run("11").to_bits());
}

#[test]
fn contract_violations_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", FOUR);
    let o = ccfit(&["estimate", "--data", s(&data), "--design", "cre:3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("design/observed mismatch"));

    let holey = write(dir.path(), "h.csv", "y,z,x1\n3.0,1,0.5\n1.0,0,\n5.0,1,1.1\n2.0,0,0.3\n");
    let o = ccfit(&["estimate", "--data", s(&holey), "--design", "cre"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let o = ccfit(&["estimate", "--data", s(&data)]);
    assert_eq!(o.status.code(), Some(2), "no design given and no strata");
    let o = ccfit(&["estimate", "--data", s(&data), "--design", "cre", "--predictor", "forest"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ccfit(&["estimate", "--data", s(&data), "--design", "cre", "--plan", "by-stratum:1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = ccfit(&["estimate", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn estimator_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    // one treated unit can only sit in one fold
    let data = write(dir.path(), "d.csv", "y,z,x1\n1,1,0.1\n2,0,0.2\n3,0,0.3\n4,0,0.4\n");
    let o = ccfit(&["estimate", "--data", s(&data), "--design", "bre:0.5"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn stratified_and_paired_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = String::from("y,z,stratum,x1\n");
    for i in 0..16 {
        rows += &format!("{},{},{},{}\n", i as f64 * 0.3 + (i % 2) as f64, i % 2, ["a", "b"][i / 8], (i as f64).sqrt());
    }
    let data = write(dir.path(), "s.csv", &rows);
    let o = ccfit(&["estimate", "--data", s(&data), "--predictor", "tom"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["design"]["type"], "sre");
    assert_eq!(v["plan"]["type"], "by-treatment-stratified");

    let mut rows = String::from("y,z,pair,x1\n");
    for i in 0..12 {
        rows += &format!("{},{},p{},{}\n", i as f64 * 0.5 + (i % 2) as f64, i % 2, i / 2, (i as f64 * 0.4).sin());
    }
    let data = write(dir.path(), "p.csv", &rows);
    let o = ccfit(&["estimate", "--data", s(&data), "--predictor", "paired-diff"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["design"]["type"], "mpe");
}

#[test]
fn simulate_smoke_is_fast_deterministic_and_manifested() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let t = Instant::now();
    let o = ccfit(&["simulate", "--config", &config("fig1_desk"), "--out", s(&a), "--replications", "10", "--seeds", "2", "--plot"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(t.elapsed().as_secs_f64() < 10.0);
    let o = ccfit(&["simulate", "--config", &config("fig1_desk"), "--out", s(&b), "--replications", "10", "--seeds", "2"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let svg = std::fs::read_to_string(dir.path().join("a.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"].as_u64(), Some(20240601));
    let rows = ccfit::io::parse_metrics_csv(&std::fs::read_to_string(&a).unwrap()).unwrap();
    assert_eq!(rows.len(), 3 * 2 + 3);
    assert!(rows.iter().all(|r| r.replications == 10));
}

#[test]
fn fig3_config_gives_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f3.csv");
    let o = ccfit(&["simulate", "--config", &config("fig3_desk"), "--out", s(&out), "--replications", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = ccfit::io::parse_metrics_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let r: Vec<f64> = rows.iter().map(|r| r.grid_value).collect();
    assert_eq!(r, vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]);
}

#[test]
fn simulate_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", r#"{"experiment": "linear", "replications": 0, "predictors": [{"model": "ols"}]}"#);
    let o = ccfit(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = write(dir.path(), "d.json", "{not json");
    let o = ccfit(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_shipped_corpus_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.csv");
    let o = ccfit(&["verify", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert!(rows.len() > 100);
    assert!(rows.iter().all(|r| &r[9] == "true"));
    assert!(dir.path().join("v.csv.manifest.json").exists());
}

#[test]
fn verify_claim_subset_and_errors() {
    let o = ccfit(&["verify", "--claim", "conditional-independence"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let claims: Vec<String> = rdr.records().map(|r| r.unwrap()[1].to_string()).collect();
    assert!(!claims.is_empty());
    assert!(claims.iter().all(|c| c == "conditional-independence"));

    let o = ccfit(&["verify", "--claim", "everything"]);
    assert_eq!(o.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.json", r#"{"fixtures": [{"name": "x", "x": [[1.0]], "y1": [1.0, 2.0]"#);
    let o = ccfit(&["verify", "--fixtures", s(&bad)]);
    assert_eq!(o.status.code(), Some(2));

    // a cap below the support size turns every check into a failure
    let o = ccfit(&["verify", "--claim", "unbiasedness", "--cap", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn split_writes_fold_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = write(dir.path(), "d.csv", FOUR);
    let out = dir.path().join("split.csv");
    let o = ccfit(&["split", "--data", s(&data), "--design", "cre", "--plan", "by-treatment:1,1", "--seed", "3", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "unit,z,fold,p0,p1");
    assert_eq!(lines.len(), 5);
    let fold1 = lines[1..].iter().filter(|l| l.split(',').nth(2) == Some("1")).count();
    assert_eq!(fold1, 2);
    assert!(dir.path().join("split.csv.manifest.json").exists());
}
