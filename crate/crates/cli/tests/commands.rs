use std::path::{Path, PathBuf};
use std::process::Command;

use aimrl::learner::RoundStatus;
use aimrl::store;
use aimrl_cli::commands::{
    COMPARISON_FILE, DATASET_FILE, EVALUATION_FILE, MYOPIC, POLICY_SET_FILE, SUMMARY_FILE, TRACE_FILE,
};
use aimrl_cli::{
    cmd_collect, cmd_compare, cmd_evaluate, cmd_train, ComparisonTable, EvaluateArgs, EvaluationReport, Overrides,
    TrainSummary,
};

fn write_config(dir: &Path, name: &str, body: serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path
}

fn example1_config(dir: &Path, rounds: usize, mixer: &str, out: &str) -> PathBuf {
    write_config(
        dir,
        &format!("{out}.json"),
        serde_json::json!({
            "environment": {"kind": "example1", "tau": 0.3},
            "dataset": {"episodes": 20000, "seed": 99},
            "train": {"rounds": rounds, "lambda_update_every": 1, "export_every": 1, "mixer": mixer},
            "output_dir": dir.join(out),
        }),
    )
}

#[test]
fn train_on_example1_reaches_tau_and_writes_loadable_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = example1_config(dir.path(), 2000, "aim_mean", "run");
    let summary = cmd_train(&config, &Overrides::default()).unwrap();
    assert!((summary.target.measurement.j_r() - 0.3).abs() <= 0.02, "{summary:?}");
    assert!(summary.exact.measurement.j_c()[0] <= 0.32);
    let gap = summary.duality_gap.unwrap();
    assert!(gap.gap <= gap.bound + 1e-6);

    let out = dir.path().join("run");
    assert_eq!(TrainSummary::load(&out.join(SUMMARY_FILE)).unwrap(), summary);
    let set = store::load_policy_set(&out.join(POLICY_SET_FILE)).unwrap();
    assert_eq!(set.policy.target(), Some(&summary.target.measurement));
    let trace = store::load_trace(&out.join(TRACE_FILE)).unwrap();
    assert_eq!(trace.records.len(), 2000);
    assert!(trace.records.iter().all(|r| r.status == RoundStatus::Exported));
}

#[test]
fn store_all_memory_grows_linearly_while_aim_mean_stays_constant() {
    let dir = tempfile::tempdir().unwrap();
    let store_all = cmd_train(&example1_config(dir.path(), 5000, "store_all", "all"), &Overrides::default()).unwrap();
    let aim_mean = cmd_train(&example1_config(dir.path(), 5000, "aim_mean", "aim"), &Overrides::default()).unwrap();
    assert_eq!(store_all.policy_size, 2);
    assert_eq!(store_all.peak_stored_params, 5000 * store_all.policy_size);
    assert!(aim_mean.peak_stored_params <= (1 + 2) * aim_mean.policy_size);
    assert!(store_all.target.measurement.max_abs_diff(&aim_mean.target.measurement) <= 1e-8);
}

#[test]
fn missing_config_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let status = Command::new(env!("CARGO_BIN_EXE_aimrl"))
        .args(["train", "--config"])
        .arg(dir.path().join("absent.json"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("absent.json"));
    assert!(!out.exists());
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let config = write_config(
        dir.path(),
        "bad.json",
        serde_json::json!({"environment": {"kind": "example1", "tau": 0.3}, "train": {"rounds": 0}, "output_dir": out}),
    );
    assert!(cmd_train(&config, &Overrides::default()).is_err());
    let typo = write_config(
        dir.path(),
        "typo.json",
        serde_json::json!({"environment": {"kind": "example1", "tau": 0.3}, "trian": {}, "output_dir": out}),
    );
    let status = Command::new(env!("CARGO_BIN_EXE_aimrl"))
        .args(["compare", "--config"])
        .arg(&typo)
        .status()
        .unwrap();
    assert!(!status.success());
    assert!(!out.exists());
}

#[test]
fn binary_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let config = example1_config(dir.path(), 300, "aim_greedy", "bin");
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_aimrl")).args(args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let config = config.to_str().unwrap();
    assert!(run(&["train", "--config", config, "--seed-override", "5"]).contains("aim_greedy"));
    run(&["collect", "--config", config]);
    let out = dir.path().join("bin");
    let printed = run(&[
        "evaluate",
        "--policy-set",
        out.join(POLICY_SET_FILE).to_str().unwrap(),
        "--dataset",
        out.join(DATASET_FILE).to_str().unwrap(),
        "--mode",
        "self-normalized",
    ]);
    assert!(printed.starts_with("estimate"));
    let report = EvaluationReport::load(&out.join(EVALUATION_FILE)).unwrap();
    assert_eq!(report.mode, aimrl::NormalizationMode::SelfNormalized);
    assert_eq!(store::load_json::<serde_json::Value>(&out.join(SUMMARY_FILE)).unwrap()["seed"], 5);
}

#[test]
fn evaluate_matches_exact_on_a_fresh_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let config = example1_config(dir.path(), 2000, "aim_mean", "eval");
    cmd_train(&config, &Overrides::default()).unwrap();
    let dataset = cmd_collect(&config, &Overrides::default()).unwrap();
    let args = EvaluateArgs {
        policy_set: dir.path().join("eval").join(POLICY_SET_FILE),
        dataset: dataset.clone(),
        config: Some(config.clone()),
    };
    let report = cmd_evaluate(&args, &Overrides::default()).unwrap();
    let exact = report.exact.as_ref().unwrap();
    assert!(report.estimate.x_hat.max_abs_diff(&exact.measurement) <= 0.05, "{report:?}");
    assert_eq!(report.n_episodes, 20000);

    let clipped = cmd_evaluate(
        &EvaluateArgs { config: None, ..args },
        &Overrides {
            clip: Some(1.0),
            out: Some(dir.path().join("clipped")),
            ..Overrides::default()
        },
    )
    .unwrap();
    assert_eq!(clipped.clip, 1.0);
    assert!(clipped.estimate.max_weight <= 1.0);
    assert!(clipped.members.iter().all(|m| m.max_weight <= 1.0));
    assert_eq!(
        EvaluationReport::load(&dir.path().join("clipped").join(EVALUATION_FILE)).unwrap(),
        clipped
    );
}

#[test]
fn evaluate_rejects_mismatched_constraint_counts() {
    let dir = tempfile::tempdir().unwrap();
    let simplex = write_config(
        dir.path(),
        "simplex.json",
        serde_json::json!({
            "environment": {"kind": "simplex", "m": 2},
            "train": {"rounds": 50, "lambda_update_every": 1, "export_every": 1},
            "output_dir": dir.path().join("simplex"),
        }),
    );
    cmd_train(&simplex, &Overrides::default()).unwrap();
    let example1 = example1_config(dir.path(), 10, "aim_mean", "ex1");
    let dataset = cmd_collect(&example1, &Overrides::default()).unwrap();
    let err = cmd_evaluate(
        &EvaluateArgs {
            policy_set: dir.path().join("simplex").join(POLICY_SET_FILE),
            dataset,
            config: None,
        },
        &Overrides::default(),
    )
    .unwrap_err();
    assert!(err.to_string().contains("m = 2"), "{err}");
}

#[test]
fn compare_writes_one_row_per_method_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        "compare.json",
        serde_json::json!({
            "environment": {"kind": "simplex", "m": 2},
            "dataset": {"episodes": 2000},
            "train": {"rounds": 400, "lambda_update_every": 1, "export_every": 1},
            "compare": {"seeds": [3, 4]},
            "output_dir": dir.path().join("cmp"),
        }),
    );
    let table = cmd_compare(&config, &Overrides::default()).unwrap();
    assert_eq!(table.rows.len(), 2 * 5);
    let loaded = ComparisonTable::load(&dir.path().join("cmp").join(COMPARISON_FILE)).unwrap();
    assert_eq!(loaded, table);
    let text = std::fs::read_to_string(dir.path().join("cmp").join(COMPARISON_FILE)).unwrap();
    assert!(text.lines().nth(2).unwrap().starts_with("seed,method,target_j_r,target_j_c0,target_j_c1,"));
    for (mean, all) in table.method("aim_mean").iter().zip(table.method("store_all")) {
        assert!(mean.target.max_abs_diff(&all.target) <= 1e-8);
        assert!(mean.peak_stored_params < all.peak_stored_params);
    }
    for (greedy, single) in table.method("aim_greedy").iter().zip(table.method("single_best")) {
        assert!(greedy.target_objective >= single.target_objective);
    }
    assert_eq!(table.method(MYOPIC).len(), 2);
    for seed in [3, 4] {
        for method in ["single_best", "aim_mean", "aim_greedy", "store_all", MYOPIC] {
            let run = dir.path().join("cmp").join(format!("seed_{seed}")).join(method);
            store::load_policy_set(&run.join(POLICY_SET_FILE)).unwrap();
        }
    }
}
