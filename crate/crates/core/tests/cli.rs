use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn apcsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apcsim"))
        .args(args)
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = apcsim(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn generate_is_deterministic_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["generate", "--case", "8", "--out", p(&a)]);
    ok(&["generate", "--case", "8", "--out", p(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("i,j,k,y"));
    assert_eq!(lines.count(), 1000);

    let truth = read_json(&dir.path().join("a.truth.json"));
    assert_eq!(truth["schema"], 1);
    let cohort = truth["truth"]["cohort"].as_array().unwrap();
    assert_eq!(cohort.len(), 19);
    assert!((cohort[0].as_f64().unwrap() + 0.95).abs() < 0.005);
    assert!(truth["manifest"]["seed"].is_u64());

    let small = dir.path().join("t1.csv");
    ok(&["generate", "--case", "1", "--T", "1", "--out", p(&small)]);
    assert_eq!(std::fs::read_to_string(&small).unwrap().lines().count(), 101);
}

#[test]
fn fit_report_carries_point_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let report = dir.path().join("fit.json");
    ok(&["generate", "--case", "8", "--out", p(&data)]);
    ok(&["fit", "--model", "rw", "--method", "map", "--data", p(&data), "--out", p(&report)]);
    let json = read_json(&report);
    assert_eq!(json["schema"], 1);
    assert_eq!(json["converged"], true);
    assert_eq!(json["method"], "map");
    assert_eq!(json["point"]["cohort"].as_array().unwrap().len(), 19);
    assert!(json["sigma_hat"].as_f64().unwrap() > 0.0);
    assert!(json["manifest"]["fit_config"].is_object());

    let plot = dir.path().join("plot.csv");
    ok(&["plotdata", "--fit", p(&report), "--out", p(&plot)]);
    let text = std::fs::read_to_string(&plot).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        *counts.entry(line.split(',').next().unwrap().to_string()).or_insert(0) += 1;
    }
    assert_eq!(counts["age"], 10);
    assert_eq!(counts["period"], 10);
    assert_eq!(counts["cohort"], 19);
}

/// The three models on the case-8 data, MAP: RE is nearly flat in cohort and
/// RR lies between RE and RW in cohort slope.
#[test]
fn fit_case_8_model_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    ok(&["generate", "--case", "8", "--out", p(&data)]);
    let slope = |model: &str| -> (f64, f64) {
        let out = ok(&["fit", "--model", model, "--method", "map", "--data", p(&data)]);
        let json: Value = serde_json::from_slice(&out.stdout).unwrap();
        let c: Vec<f64> = json["point"]["cohort"]
            .as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_f64().unwrap())
            .collect();
        let n = c.len() as f64;
        let (num, den) = c.iter().enumerate().fold((0.0, 0.0), |(a, b), (k, y)| {
            let v = k as f64 + 1.0 - (n + 1.0) / 2.0;
            (a + v * y, b + v * v)
        });
        (num / den, c.iter().map(|x| x.abs()).fold(0.0, f64::max))
    };
    let (re, re_max) = slope("re");
    let (rr, _) = slope("rr");
    let (rw, _) = slope("rw");
    assert!(re_max <= 0.15, "RE max |cohort| {re_max}");
    assert!(re < rr && rr < rw, "slopes {re} {rr} {rw}");
}

#[test]
fn theory_reports_weight_sums() {
    let out = ok(&["theory", "--I", "10", "--J", "10"]);
    let json: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["sum_sq_period"], 82.5);
    assert_eq!(json["sum_sq_cohort"], 570.0);
    assert!((json["weight_gap"].as_f64().unwrap() - 4.909_090_909_090_909).abs() < 1e-12);
    assert_eq!(json["gap_positive"], true);
}

#[test]
fn plotdata_cases_without_nonlinearity() {
    let dir = tempfile::tempdir().unwrap();
    let flat = dir.path().join("c13.csv");
    ok(&["plotdata", "--case", "13", "--nl", "0", "--out", p(&flat)]);
    let ys: Vec<f64> = std::fs::read_to_string(&flat)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ys.len(), 100);
    assert!(ys.iter().all(|y| (y - ys[0]).abs() < 1e-9));

    let c1 = dir.path().join("c1.csv");
    let c7 = dir.path().join("c7.csv");
    ok(&["plotdata", "--case", "1", "--nl", "0", "--out", p(&c1)]);
    ok(&["plotdata", "--case", "7", "--nl", "0", "--out", p(&c7)]);
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c7).unwrap());
}

#[test]
fn grid_map_writes_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grid.json");
    let run = ok(&["grid", "--method", "map", "--models", "re,rw", "--out", p(&out)]);
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(String::from_utf8(run.stdout).unwrap(), csv);
    let rows: Vec<&str> = csv.lines().collect();
    assert!(rows[0].starts_with("case,signs,model,s,grade,converged"));
    assert_eq!(rows.len(), 1 + 26);
    let re3 = rows.iter().find(|r| r.starts_with("3,") && r.contains(",re,")).unwrap();
    assert!(re3.contains(",E,"), "{re3}");
    for r in rows.iter().filter(|r| r.contains(",rw,")) {
        let case: usize = r.split(',').next().unwrap().parse().unwrap();
        if case <= 9 {
            let g = r.split(',').nth(4).unwrap();
            assert!(g == "A" || g == "B", "{r}");
        }
    }
    assert_eq!(read_json(&out)["reports"].as_array().unwrap().len(), 26);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(apcsim(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(apcsim(&["--help"]).status.code(), Some(0));
    let csv = dir.path().join("x.csv");
    assert_eq!(apcsim(&["generate", "--case", "14", "--out", p(&csv)]).status.code(), Some(1));
    let file = dir.path().join("plain");
    std::fs::write(&file, "").unwrap();
    let bad = file.join("x.csv");
    assert_eq!(apcsim(&["generate", "--case", "1", "--out", p(&bad)]).status.code(), Some(2));

    let broken = dir.path().join("broken.csv");
    std::fs::write(&broken, "i,j,k,y\n1,1,10,0.5\n1,2,oops,0.1\n").unwrap();
    let out = apcsim(&["fit", "--model", "rw", "--method", "map", "--data", p(&broken)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row"));
}
