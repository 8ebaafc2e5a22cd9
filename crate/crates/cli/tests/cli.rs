use std::path::Path;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn mewlw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mewlw")).args(args).output().expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fit(design: &str, valid: &str, out: &Path) -> Output {
    mewlw(&[
        "fit",
        "--main",
        &fixture("evs_main.csv"),
        "--valid",
        &fixture(valid),
        "--design",
        design,
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn external_fit_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let run = fit("evs", "evs_valid.csv", &out);
    assert!(run.status.success(), "{}", stderr(&run));
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["beta"].as_array().unwrap().len(), 2);
    assert!(doc["se"].as_array().unwrap().iter().all(|s| s.as_f64().unwrap() > 0.0));
    let ci = &doc["hr_ci95"][0];
    let hr = doc["hr"][0].as_f64().unwrap();
    assert!(ci[0].as_f64().unwrap() < hr && hr < ci[1].as_f64().unwrap());
    assert_eq!(doc["design"], "evs");
    assert_eq!(doc["labels"][1], "event2:z_1");
    assert_eq!(doc["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    assert!(doc["wald_equal"]["p"].as_f64().unwrap() <= 1.0);

    // identical inputs give identical documents
    let again = dir.path().join("again.json");
    assert!(fit("evs", "evs_valid.csv", &again).status.success());
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn weight_dump_and_fd_jacobian() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, w) = (dir.path().join("a.json"), dir.path().join("b.json"), dir.path().join("w.csv"));
    let base = ["fit", "--main", &fixture("evs_main.csv"), "--valid", &fixture("evs_valid.csv")].map(String::from);
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
        args.extend_from_slice(extra);
        mewlw(&args)
    };
    assert!(run(&["--out", a.to_str().unwrap(), "--weights-out", w.to_str().unwrap()]).status.success());
    assert!(run(&["--out", b.to_str().unwrap(), "--gamma-jacobian", "fd"]).status.success());
    assert!(std::fs::read_to_string(&w).unwrap().starts_with("subject_id,event_type,time,h,weight,N_tilde,Y_tilde"));
    let read = |p: &Path| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let (sa, sb) = (read(&a)["se"].clone(), read(&b)["se"].clone());
    for j in 0..2 {
        let (x, y) = (sa[j].as_f64().unwrap(), sb[j].as_f64().unwrap());
        assert!((x - y).abs() < 1e-5 * x);
    }
}

#[test]
fn internal_designs_run() {
    let dir = tempfile::tempdir().unwrap();
    for design in ["ivs-full", "ivs-pooled"] {
        let out = dir.path().join(format!("{design}.json"));
        let run = fit(design, "ivs_valid.csv", &out);
        assert!(run.status.success(), "{design}: {}", stderr(&run));
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(doc["design"], design);
        assert_eq!(doc["pooled"].is_object(), design == "ivs-pooled");
    }
}

#[test]
fn internal_design_needs_a_subset() {
    let dir = tempfile::tempdir().unwrap();
    let run = fit("ivs-pooled", "evs_valid.csv", &dir.path().join("x.json"));
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).contains("subset"));
}

#[test]
fn missing_flags_are_reported() {
    let run = mewlw(&["fit", "--main", &fixture("evs_main.csv"), "--out", "/dev/null"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).contains("--valid"));
    let run = mewlw(&["fit", "--valid", &fixture("evs_valid.csv"), "--out", "/dev/null"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(stderr(&run).contains("--main"));
    assert_eq!(mewlw(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mewlw(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_writes_summary_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |prefix: &str, threads: &str| {
        let prefix = dir.path().join(prefix);
        let out = mewlw(&[
            "simulate",
            "--config",
            &fixture("evs_reference.cfg"),
            "--reps",
            "50",
            "--seed",
            "3",
            "--threads",
            threads,
            "--out-prefix",
            prefix.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr(&out));
        let csv = std::fs::read(format!("{}_summary.csv", prefix.display())).unwrap();
        let json = std::fs::read_to_string(format!("{}_replicates.json", prefix.display())).unwrap();
        (csv, json)
    };
    let (csv, json) = run("a", "1");
    let text = String::from_utf8(csv.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 8);
    assert!(text.starts_with("method,param,true,mean,pct_bias,emp_se,model_se,coverage\n"));
    let doc: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(doc["provenance"]["seed"], 3);
    assert_eq!(run("b", "4").0, csv);
}

#[test]
fn simulate_rejects_zero_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("z");
    let run = mewlw(&[
        "simulate",
        "--config",
        &fixture("evs_reference.cfg"),
        "--reps",
        "0",
        "--out-prefix",
        prefix.to_str().unwrap(),
    ]);
    assert_eq!(run.status.code(), Some(1));
    assert!(!dir.path().join("z_summary.csv").exists());
}

#[test]
fn check_reports_violations() {
    let clean = mewlw(&["check", "--file", &fixture("evs_valid.csv"), "--role", "validation"]);
    assert_eq!(clean.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&clean.stdout).contains("50 subjects"));
    for bad in ["nonmonotone.csv", "empty.csv", "missing.csv"] {
        let run = mewlw(&["check", "--file", &fixture(bad)]);
        assert_eq!(run.status.code(), Some(1), "{bad}");
    }
    let run = mewlw(&["check", "--file", &fixture("nonmonotone.csv")]);
    assert!(stderr(&run).contains("non-monotone"));
}
