use std::process::{Command, Output};

use psbias::cli::sig6;
use psbias::estimands::{balanced_randomization_prob, recruited_ate};
use psbias::model::{PrincipalEffects, StrataDistribution};

fn psbias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psbias"))
        .args(args)
        .env_remove("PSBIAS_SEED")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn csv_values(o: &Output) -> Vec<(String, String)> {
    let mut r = csv::Reader::from_reader(o.stdout.as_slice());
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (rec[0].to_string(), rec[1].to_string())
        })
        .collect()
}

#[test]
fn estimand_prints_library_values() {
    let out = psbias(&[
        "--format", "csv", "estimand", "--pa", "1/3", "--pc", "1/3", "--pn", "1/3", "--ta", "20",
        "--tc", "15", "--tn", "10", "--r", "0.5",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let values = csv_values(&out);
    let get = |k: &str| values.iter().find(|(q, _)| q == k).unwrap().1.clone();
    assert_eq!(get("tau_O"), "15");
    assert_eq!(get("tau_R"), "18.3333");
    let third = 1.0 / 3.0;
    let d = StrataDistribution::new(third, third, 1.0 - 2.0 * third).unwrap();
    let lib = recruited_ate(0.5, &d, &PrincipalEffects::new(20.0, 15.0, Some(10.0))).unwrap();
    assert_eq!(get("tau_R"), sig6(lib));
    assert_eq!(get("P(Z=1|R=1)"), "0.666667");
}

#[test]
fn estimand_without_tau_n_omits_overall_effect() {
    let out = psbias(&[
        "--format", "csv", "estimand", "--pa", "0.4", "--pc", "0.3", "--pn", "0.3", "--ta", "0.2",
        "--tc", "0.8", "--r", "1/2",
    ]);
    assert!(out.status.success());
    let values = csv_values(&out);
    assert!(values.iter().all(|(q, _)| q != "tau_O"));
    assert!(values.iter().any(|(q, _)| q == "tau_R"));
}

#[test]
fn rejects_unnormalized_probabilities_and_unknown_flags() {
    let out = psbias(&[
        "estimand", "--pa", "1/2", "--pc", "1/3", "--pn", "1/3", "--ta", "1", "--tc", "1", "--r",
        "0.5",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("1.166666"), "{err}");

    let out = psbias(&["balance", "--pa", "0.4", "--pc", "0.3", "--bogus"]);
    assert!(!out.status.success());
    assert!(!psbias(&[]).status.success());
}

#[test]
fn balance_matches_library() {
    let out = psbias(&["--format", "csv", "balance", "--pa", "0.4", "--pc", "0.3"]);
    assert!(out.status.success());
    let lib = balanced_randomization_prob(&StrataDistribution::from_recruitable(0.4, 0.3).unwrap())
        .unwrap();
    assert_eq!(csv_values(&out)[0].1, sig6(lib));
    assert_eq!(csv_values(&out)[0].1, "0.363636");
}

#[test]
fn figure1_json() {
    let out = psbias(&["--format", "json", "figure1", "--r", "1/2"]);
    assert!(out.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["itt"], 17.5);
    assert_eq!(doc["tau_o"], 15.0);
    assert!((doc["tau_r"].as_f64().unwrap() - 55.0 / 3.0).abs() < 1e-12);
    assert_eq!(doc["observed"].as_array().unwrap().len(), 4);

    let table = stdout(&psbias(&["figure1"]));
    assert!(table.contains("17.5"));
    assert!(table.contains("18.3333"));
}

#[test]
fn simulate_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trial.csv");
    let out = psbias(&[
        "simulate",
        "--reveal-truth",
        "--seed",
        "3",
        "-o",
        path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "cluster_id,z,x1,x2,y,stratum_truth");
    assert_eq!(lines.count(), 1000);

    let out = psbias(&[
        "simulate",
        "--seed",
        "3",
        "--scenario",
        "ii-r3-icc0.01",
        "--fit",
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).starts_with("cluster_id,z,x1,x2,y\n"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lmm tau"));
}

#[test]
fn experiment_csv_is_identical_across_job_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let path = dir.path().join(format!("jobs{jobs}.csv"));
        let out = psbias(&[
            "experiment",
            "--reps",
            "20",
            "--jobs",
            jobs,
            "--only",
            "i-r1-icc0.1",
            "--only",
            "ii-r5-icc0.01",
            "-o",
            path.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        outputs.push(std::fs::read(&path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    assert!(text.starts_with(
        "label,icc,true_tau_r,pct_bias_signed,pct_bias_abs,mcsd,ese,cp,n_replicates,n_converged,master_seed\n"
    ));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn seed_from_environment_overrides_config() {
    let out = Command::new(env!("CARGO_BIN_EXE_psbias"))
        .args([
            "--format",
            "csv",
            "experiment",
            "--reps",
            "5",
            "--only",
            "i-r2-icc0.01",
        ])
        .env("PSBIAS_SEED", "777")
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().nth(1).unwrap().ends_with(",777"), "{text}");
}

#[test]
fn failed_checks_set_exit_status() {
    // exit status follows the printed verdicts
    let out = psbias(&[
        "experiment",
        "--reps",
        "5",
        "--only",
        "i-r1-icc0.01",
        "--check",
        "--seed",
        "1",
    ]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.success(), !err.contains("FAIL"), "{err}");
}
