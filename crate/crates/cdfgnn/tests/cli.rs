//! End-to-end tests of the command-line binary: pipeline plumbing, exit
//! codes, config layering, and byte-level reproducibility of outputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cdfgnn"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("failed to spawn binary");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("failed to spawn binary").status.code().expect("no exit code")
}

/// Generates a small dataset under `dir`.
fn gen(dir: &Path, vertices: usize, seed: u64) {
    run_ok(bin().args([
        "gen-graph",
        "--vertices",
        &vertices.to_string(),
        "--seed",
        &seed.to_string(),
        "--classes",
        "3",
        "--feature-dim",
        "8",
        "--out",
        dir.to_str().unwrap(),
    ]));
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

#[test]
fn pipeline_gen_partition_train() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    let plan = tmp.path().join("plan");
    let out = tmp.path().join("run");
    gen(&data, 400, 9);

    let p = run_ok(bin().args([
        "partition",
        "--data",
        data.to_str().unwrap(),
        "--num-hosts",
        "2",
        "--gpus-per-host",
        "2",
        "--order-seed",
        "5",
        "--out",
        plan.to_str().unwrap(),
    ]));
    let stats: serde_json::Value =
        serde_json::from_slice(&p.stdout).expect("partition stats are JSON");
    assert!(stats["replication_factor"].as_f64().unwrap() >= 1.0);
    assert!(plan.join("manifest.json").is_file());
    assert!(plan.join("worker0.map").is_file());
    assert!(plan.join("worker3.edges").is_file());

    run_ok(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--plan",
        plan.to_str().unwrap(),
        "--num-hosts",
        "2",
        "--gpus-per-host",
        "2",
        "--epochs",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]));
    let metrics = read(&out.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 5, "header plus one row per epoch");
    let summary: serde_json::Value =
        serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    assert_eq!(summary["epochs"].as_u64(), Some(4));
}

#[test]
fn train_without_plan_matches_plan_file() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 300, 4);
    let plan = tmp.path().join("plan");
    run_ok(bin().args([
        "partition",
        "--data",
        data.to_str().unwrap(),
        "--num-hosts",
        "2",
        "--gpus-per-host",
        "1",
        "--order-seed",
        "5",
        "--out",
        plan.to_str().unwrap(),
    ]));

    let common = |out: &Path| {
        let mut c = bin();
        c.args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--num-hosts",
            "2",
            "--gpus-per-host",
            "1",
            "--order-seed",
            "5",
            "--epochs",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        c
    };
    let with_plan = tmp.path().join("with_plan");
    let in_process = tmp.path().join("in_process");
    run_ok(common(&with_plan).args(["--plan", plan.to_str().unwrap()]));
    run_ok(&mut common(&in_process));
    assert_eq!(
        read(&with_plan.join("metrics.csv")),
        read(&in_process.join("metrics.csv")),
        "plan file and in-process partitioning disagree"
    );
}

#[test]
fn epochs_zero_writes_header_only_csv() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    gen(&data, 120, 2);
    run_ok(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]));
    let metrics = read(&out.join("metrics.csv"));
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.starts_with("epoch,loss,"));
}

#[test]
fn single_worker_cache_off_sends_nothing() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    gen(&data, 120, 2);
    run_ok(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--cache",
        "false",
        "--epochs",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let metrics = read(&out.join("metrics.csv"));
    let header: Vec<&str> = metrics.lines().next().unwrap().split(',').collect();
    for line in metrics.lines().skip(1) {
        for (name, value) in header.iter().zip(line.split(',')) {
            if name.contains("sends") || name.contains("bytes") {
                assert_eq!(value, "0", "{name} nonzero in single-worker run: {line}");
            }
        }
    }
}

#[test]
fn oracle_train_writes_metrics() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    gen(&data, 120, 2);
    run_ok(bin().args([
        "oracle-train",
        "--data",
        data.to_str().unwrap(),
        "--epochs",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));
    let metrics = read(&out.join("metrics.csv"));
    assert_eq!(metrics.lines().next().unwrap(), "epoch,loss,train_acc,val_acc");
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn compare_exact_passes_and_absurd_tolerance_fails() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 300, 4);
    let base = |extra: &[&str]| {
        let mut c = bin();
        c.args([
            "compare",
            "--data",
            data.to_str().unwrap(),
            "--num-hosts",
            "2",
            "--gpus-per-host",
            "2",
            "--epochs",
            "6",
            "--exact",
        ]);
        c.args(extra);
        c
    };
    let out = run_ok(&mut base(&[]));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ok"].as_bool(), Some(true));
    assert!(report["max_grad_rel_err"].as_f64().unwrap() < 1e-8);

    // Multi-worker summation order differs from the oracle, so demanding
    // bitwise-level tolerance must fail with the comparison exit code.
    assert_eq!(exit_code(&mut base(&["--tol-grads", "1e-18"])), 1);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 120, 2);

    // Unknown config key.
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let code = exit_code(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);

    // Unknown flag (clap reports usage errors as 2 as well).
    assert_eq!(exit_code(bin().args(["train", "--no-such-flag"])), 2);
}

#[test]
fn missing_dataset_exits_3() {
    let tmp = tempdir().unwrap();
    let code = exit_code(bin().args([
        "train",
        "--data",
        tmp.path().join("nowhere").to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]));
    assert_eq!(code, 3);
}

#[test]
fn env_and_config_file_layering() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 120, 2);

    // Config file sets 7 epochs; environment overrides to 3; flag wins at 2.
    let cfg = tmp.path().join("train.cfg");
    fs::write(&cfg, "epochs = 7\n").unwrap();

    let out_env = tmp.path().join("run_env");
    run_ok(
        bin()
            .args([
                "train",
                "--data",
                data.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out_env.to_str().unwrap(),
            ])
            .env("CDFGNN_EPOCHS", "3"),
    );
    assert_eq!(read(&out_env.join("metrics.csv")).lines().count(), 4);

    let out_flag = tmp.path().join("run_flag");
    run_ok(
        bin()
            .args([
                "train",
                "--data",
                data.to_str().unwrap(),
                "--config",
                cfg.to_str().unwrap(),
                "--epochs",
                "2",
                "--out",
                out_flag.to_str().unwrap(),
            ])
            .env("CDFGNN_EPOCHS", "3"),
    );
    assert_eq!(read(&out_flag.join("metrics.csv")).lines().count(), 3);
}

#[test]
fn scheduling_jitter_does_not_change_results() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data, 300, 4);
    let run = |out: &Path, jitter: &str| {
        run_ok(bin().args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--num-hosts",
            "2",
            "--gpus-per-host",
            "2",
            "--epochs",
            "4",
            "--sched-jitter",
            jitter,
            "--out",
            out.to_str().unwrap(),
        ]));
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&a, "1");
    run(&b, "99");
    assert_eq!(
        read(&a.join("metrics.csv")),
        read(&b.join("metrics.csv")),
        "results depend on message scheduling"
    );
}

#[test]
fn quantized_f32_run_completes() {
    let tmp = tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    run_ok(bin().args([
        "gen-graph",
        "--vertices",
        "200",
        "--seed",
        "6",
        "--classes",
        "3",
        "--feature-dim",
        "8",
        "--precision",
        "f32",
        "--out",
        data.to_str().unwrap(),
    ]));
    run_ok(bin().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--precision",
        "f32",
        "--num-hosts",
        "2",
        "--gpus-per-host",
        "1",
        "--quant-bits",
        "8",
        "--epochs",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let summary: serde_json::Value =
        serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    assert!(summary["gather_sends"].as_u64().unwrap() > 0);
}
