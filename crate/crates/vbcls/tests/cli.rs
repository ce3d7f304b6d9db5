//! Drives the installed binary end to end: every subcommand, the files each
//! one writes, and the exit-code contract (0 ok, 1 runtime failure, 2 usage).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vbcls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbcls"))
        .args(args)
        .output()
        .expect("binary launches")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

fn assert_single_error_line(out: &Output, expected_code: i32) {
    let text = stderr_of(out);
    assert_eq!(out.status.code(), Some(expected_code), "stderr: {text}");
    assert_eq!(
        text.trim_end().lines().count(),
        1,
        "stderr should be a single line, got: {text:?}"
    );
}

fn gen_into(dir: &Path, domains: &str, classes: &str, dim: &str, n: &str, seed: &str) {
    let out = vbcls(&[
        "gen",
        "--scenario",
        "covariate_only",
        "--domains",
        domains,
        "--classes",
        classes,
        "--dim",
        dim,
        "--n",
        n,
        "--severity",
        "0.3",
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "gen failed: {}", stderr_of(&out));
}

#[test]
fn gen_writes_one_csv_per_domain() {
    let dir = tempfile::tempdir().unwrap();
    let out = vbcls(&[
        "gen",
        "--scenario",
        "label_shift",
        "--domains",
        "3",
        "--classes",
        "2",
        "--dim",
        "4",
        "--n",
        "30",
        "--severity",
        "0.5",
        "--seed",
        "9",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr_of(&out));
    assert_eq!(stdout_of(&out).lines().filter(|l| l.starts_with("wrote ")).count(), 3);
    for i in 0..3 {
        let text = fs::read_to_string(dir.path().join(format!("domain{i}.csv"))).unwrap();
        assert!(text.starts_with("domain,label,f0,f1,f2,f3"), "bad header: {text}");
        assert_eq!(text.lines().count(), 31, "30 rows plus header");
    }
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
  "data": {"kind": "scenario", "scenario": "covariate_only", "domains": 2,
           "classes": 2, "dim": 3, "n_per_domain": 40, "severity": 0.3, "seed": 4},
  "train": {"epochs": 2, "batch_size": 16, "latent_dim": 2, "hidden_dim": 4, "seed": 1}
}"#,
    )
    .unwrap();
    let model_dir = dir.path().join("model");
    let out = vbcls(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        model_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let checkpoint = model_dir.join("checkpoint.bin");
    assert!(checkpoint.is_file());
    let history = fs::read_to_string(model_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,L1,L2,L_CE1,L_CE2,L_yhat,total_f,train_acc"));
    assert_eq!(history.lines().count(), 3, "two epochs plus header");

    // Fresh draw from the same generator family serves as held-out data.
    let data_dir = dir.path().join("data");
    gen_into(&data_dir, "2", "2", "3", "40", "77");
    let eval = vbcls(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data_dir.join("domain0.csv").to_str().unwrap(),
        "--prior-mode",
        "refined",
    ]);
    assert!(eval.status.success(), "eval failed: {}", stderr_of(&eval));
    let summary: serde_json::Value = serde_json::from_str(&stdout_of(&eval)).unwrap();
    let accuracy = summary["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&accuracy));
    assert_eq!(summary["per_class"].as_array().unwrap().len(), 2);
    let confusion = summary["confusion"].as_array().unwrap();
    let total: u64 = confusion
        .iter()
        .flat_map(|row| row.as_array().unwrap().iter())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 40, "confusion counts every evaluated row once");

    // The default prior mode needs no flag.
    let eval = vbcls(&[
        "eval",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--data",
        data_dir.join("domain1.csv").to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "eval failed: {}", stderr_of(&eval));
}

#[test]
fn loo_emits_report_summary_and_histories() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
  "data": {"kind": "scenario", "scenario": "conditional_and_label", "domains": 3,
           "classes": 2, "dim": 3, "n_per_domain": 30, "severity": 0.5, "seed": 6},
  "train": {"epochs": 1, "batch_size": 16, "latent_dim": 2, "hidden_dim": 4, "seed": 2},
  "n_seeds": 1
}"#,
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = vbcls(&[
        "loo",
        "--config",
        config.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "loo failed: {}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("report written to"), "stdout: {text}");

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["targets"].as_array().unwrap().len(), 3);
    let summary = fs::read_to_string(run_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("target,variant,mean,sd,n_seeds"));
    assert_eq!(summary.lines().count(), 4, "three targets plus header");
    let histories = fs::read_dir(&run_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .starts_with("history_")
        })
        .count();
    assert_eq!(histories, 3, "one history per target and seed");
}

#[test]
fn ablate_runs_each_variant_and_combines_them() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
  "data": {"kind": "scenario", "scenario": "conditional_and_label", "domains": 3,
           "classes": 2, "dim": 3, "n_per_domain": 30, "severity": 0.5, "seed": 6},
  "train": {"epochs": 1, "batch_size": 16, "latent_dim": 2, "hidden_dim": 4, "seed": 2},
  "n_seeds": 1
}"#,
    )
    .unwrap();
    let run_dir = dir.path().join("run");
    let out = vbcls(&[
        "ablate",
        "--config",
        config.to_str().unwrap(),
        "--variants",
        "erm,uniform_yhat",
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "ablate failed: {}", stderr_of(&out));
    for variant in ["erm", "uniform_yhat"] {
        assert!(run_dir.join(variant).join("report.json").is_file());
    }
    let combined = fs::read_to_string(run_dir.join("summary.csv")).unwrap();
    assert!(combined.starts_with("target,variant,mean,sd,n_seeds"));
    assert_eq!(combined.lines().count(), 7, "3 targets x 2 variants plus header");
    assert_eq!(combined.matches(",erm,").count(), 3);
    assert_eq!(combined.matches(",uniform_yhat,").count(), 3);
}

#[test]
fn runtime_failures_exit_one_with_one_line() {
    let dir = tempfile::tempdir().unwrap();

    let out = vbcls(&["train", "--config", "/nonexistent/config.json", "--out", "x"]);
    assert_single_error_line(&out, 1);
    assert!(stderr_of(&out).starts_with("error: "), "stderr: {}", stderr_of(&out));

    // Config that parses but fails validation.
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{
  "data": {"kind": "scenario", "scenario": "covariate_only", "domains": 3,
           "classes": 2, "dim": 3, "n_per_domain": 30, "severity": 0.5, "seed": 6},
  "n_seeds": 0
}"#,
    )
    .unwrap();
    let out = vbcls(&["loo", "--config", bad.to_str().unwrap(), "--out", "x"]);
    assert_single_error_line(&out, 1);

    // Unknown and duplicated ablation variants fail before any training.
    let ok = dir.path().join("ok.json");
    fs::write(
        &ok,
        r#"{"data": {"kind": "scenario", "scenario": "covariate_only", "domains": 3,
                     "classes": 2, "dim": 3, "n_per_domain": 30, "severity": 0.5, "seed": 6}}"#,
    )
    .unwrap();
    for variants in ["erm,bogus", "erm,erm"] {
        let out = vbcls(&[
            "ablate",
            "--config",
            ok.to_str().unwrap(),
            "--variants",
            variants,
            "--out",
            dir.path().join("a").to_str().unwrap(),
        ]);
        assert_single_error_line(&out, 1);
    }

    // Evaluating data whose labels exceed the checkpoint's class count.
    let model_dir = dir.path().join("model");
    let train_config = dir.path().join("train.json");
    fs::write(
        &train_config,
        r#"{
  "data": {"kind": "scenario", "scenario": "covariate_only", "domains": 2,
           "classes": 2, "dim": 3, "n_per_domain": 40, "severity": 0.3, "seed": 4},
  "train": {"epochs": 1, "batch_size": 16, "latent_dim": 2, "hidden_dim": 4, "seed": 1}
}"#,
    )
    .unwrap();
    let out = vbcls(&[
        "train",
        "--config",
        train_config.to_str().unwrap(),
        "--out",
        model_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "train failed: {}", stderr_of(&out));
    let wide = dir.path().join("wide");
    gen_into(&wide, "2", "3", "3", "30", "11");
    let out = vbcls(&[
        "eval",
        "--checkpoint",
        model_dir.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        wide.join("domain0.csv").to_str().unwrap(),
    ]);
    assert_single_error_line(&out, 1);
}

#[test]
fn usage_mistakes_exit_two_with_one_line() {
    let out = vbcls(&["gen", "--scenario", "bogus", "--domains", "2", "--classes", "2",
        "--dim", "3", "--n", "10", "--severity", "0.1", "--seed", "1", "--out", "x"]);
    assert_single_error_line(&out, 2);

    let out = vbcls(&["gen", "--bogus-flag"]);
    assert_single_error_line(&out, 2);

    let out = vbcls(&["frobnicate"]);
    assert_single_error_line(&out, 2);

    let out = vbcls(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout_of(&out);
    for name in ["gen", "train", "eval", "loo", "ablate"] {
        assert!(text.contains(name), "--help omits {name}: {text}");
    }
}
