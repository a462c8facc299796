use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use seqvi::data::SequenceDataset;
use serde_json::Value;

fn seqvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqvi"))
        .args(args)
        .env_remove("SEQVI_THREADS")
        .output()
        .expect("spawn seqvi")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> Output {
    let out = seqvi(args);
    assert_eq!(
        code(&out),
        0,
        "seqvi {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_lorenz(dir: &Path) {
    ok(&["gen-lorenz", "--out", p(dir), "--seed", "3", "--seqs", "5,3,3", "--len", "20"]);
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_lorenz_defaults_give_standard_split_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&["gen-lorenz", "--out", p(&out)]);
    for (name, n) in [("train.json", 50), ("val.json", 10), ("test.json", 10)] {
        let ds = SequenceDataset::load(out.join(name)).unwrap();
        assert_eq!(ds.len(), n);
        assert!(ds.lengths().iter().all(|&l| l == 100));
        assert!(ds.true_theta.is_some());
    }
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "gen-lorenz");
    assert_eq!(manifest["config"]["train"], 50);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
}

#[test]
fn gen_lorenz_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["gen-lorenz", "--out", p(dir), "--seed", "7", "--seqs", "4,2,2", "--len", "30"]);
    }
    for name in ["train.json", "val.json", "test.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seqvi(&["gen-lorenz", "--out", p(&tmp.path().join("x")), "--len", "0"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));

    let out = seqvi(&["train", "--out", p(&tmp.path().join("y"))]);
    assert_eq!(code(&out), 2);

    let out = seqvi(&["gen-lorenz", "--out", p(&tmp.path().join("z")), "--bogus"]);
    assert_eq!(code(&out), 2);

    assert_eq!(code(&seqvi(&["--help"])), 0);
}

#[test]
fn refuses_non_empty_out_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&["gen-lorenz", "--out", p(&out), "--seqs", "2,1,1", "--len", "5"]);
    let again = seqvi(&["gen-lorenz", "--out", p(&out), "--seqs", "2,1,1", "--len", "5"]);
    assert_eq!(code(&again), 2);
    ok(&["gen-lorenz", "--out", p(&out), "--seqs", "2,1,1", "--len", "5", "--force"]);
}

#[test]
fn config_file_sits_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"len": 7, "train": 3, "val": 1, "test": 1, "seed": 9}"#).unwrap();
    let out = tmp.path().join("d");
    ok(&["gen-lorenz", "--out", p(&out), "--config", p(&cfg), "--len", "4"]);
    let train = SequenceDataset::load(out.join("train.json")).unwrap();
    assert_eq!(train.len(), 3);
    assert_eq!(train.lengths(), vec![4; 3]);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["config"]["len"], 4);
}

#[test]
fn iwdkf_with_one_sample_matches_dkf_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_lorenz(&data);
    let common = ["--data", p(&data), "--epochs", "4", "--batch", "2", "--seed", "5", "--rnn-dim", "8"];
    let dkf = tmp.path().join("dkf");
    let iw = tmp.path().join("iw");
    ok(&[&["train", "--out", p(&dkf), "--bound", "dkf"][..], &common].concat());
    ok(&[&["train", "--out", p(&iw), "--bound", "iwdkf", "--K", "1"][..], &common].concat());
    let a = fs::read_to_string(dkf.join("metrics.csv")).unwrap();
    let b = fs::read_to_string(iw.join("metrics.csv")).unwrap();
    assert_eq!(a.lines().count(), 5);
    assert_eq!(a, b);
    for f in ["best.json", "last.json", "anneal.csv", "manifest.json"] {
        assert!(dkf.join(f).exists(), "{f}");
    }
}

#[test]
fn dkf_rejects_several_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_lorenz(&data);
    let out = seqvi(&["train", "--data", p(&data), "--out", p(&tmp.path().join("r")), "--K", "3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_reproduces_recorded_validation_ll() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_lorenz(&data);
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--bound", "iwdkf", "--K", "3", "--epochs", "3", "--seed", "11",
        "--rnn-dim", "8",
    ]);
    let best = read_json(&run.join("best.json"));
    let recorded = best["val_ll"].as_f64().unwrap();
    let rep = tmp.path().join("rep");
    ok(&["eval", "--ckpt", p(&run.join("best.json")), "--data", p(&data.join("val.json")), "--K-eval", "3", "--out", p(&rep)]);
    let report = read_json(&rep.join("report.json"));
    assert_eq!(report["ll_per_step"].as_f64().unwrap(), recorded);
    assert!(report["param_errors"].is_object());
    assert!(report["rmse_z"].is_number());
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert!(csv.starts_with("ll_per_step,kl_per_step,rmse_z,err_sigma"));
}

#[test]
fn more_eval_samples_give_a_higher_estimate_on_average() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_lorenz(&data);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "2", "--seed", "1", "--rnn-dim", "8"]);
    let ckpt = run.join("best.json");
    let mean = |k: &str| {
        let mut total = 0.0;
        for seed in 0..10 {
            let out = tmp.path().join(format!("e{k}_{seed}"));
            ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--K-eval", k, "--seed", &seed.to_string(), "--out", p(&out)]);
            total += read_json(&out.join("report.json"))["ll_per_step"].as_f64().unwrap();
        }
        total / 10.0
    };
    let one = mean("1");
    let many = mean("100");
    assert!(many >= one, "K=100 {many} < K=1 {one}");
}

#[test]
fn report_omits_param_errors_without_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("bin");
    ok(&["gen-binary", "--out", p(&data), "--dim", "4", "--len", "6", "--seqs", "4,2,2"]);
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--model", "gated-bernoulli", "--epochs", "2", "--latent-dim", "2",
        "--rnn-dim", "3", "--emission-hidden", "4",
    ]);
    let rep = tmp.path().join("rep");
    ok(&["eval", "--ckpt", p(&run.join("last.json")), "--data", p(&data), "--K-eval", "2", "--out", p(&rep)]);
    let report = read_json(&rep.join("report.json"));
    assert!(report["param_errors"].is_null());
    assert!(report["rmse_z"].is_null());
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().ends_with(",,,,"));
}

#[test]
fn eval_rejects_incompatible_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_lorenz(&data);
    let run = tmp.path().join("run");
    ok(&["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--rnn-dim", "4"]);
    let mut ckpt = read_json(&run.join("best.json"));
    ckpt["version"] = Value::from(99);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, ckpt.to_string()).unwrap();
    let out = seqvi(&["eval", "--ckpt", p(&bad), "--data", p(&data), "--out", p(&tmp.path().join("e"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn anneal_trace_is_written_per_minibatch_visit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_lorenz(&data);
    let run = tmp.path().join("run");
    ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--epochs", "3", "--batch", "2", "--anneal-updates", "4",
        "--rnn-dim", "4",
    ]);
    let trace = fs::read_to_string(run.join("anneal.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0], "update,anneal_coef");
    // 5 sequences in batches of 2: three visits per epoch.
    assert_eq!(rows.len(), 1 + 9);
    assert_eq!(rows[1], "0,0");
    assert_eq!(rows[3], "2,0.5");
    assert_eq!(rows[9], "8,1");
}

#[test]
fn oracle_check_passes_and_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let res = ok(&["oracle-check", "--K-list", "1,5,15", "--trials", "1000", "--seed", "0", "--out", p(&out)]);
    let report = read_json(&out.join("oracle.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let means: Vec<f64> = rows.iter().map(|r| r["mean"].as_f64().unwrap()).collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0]), "{means:?}");
    assert!(String::from_utf8_lossy(&res.stdout).contains("exact log-likelihood"));
}

#[test]
fn oracle_check_validates_trials_and_accepts_one_k() {
    assert_eq!(code(&seqvi(&["oracle-check", "--trials", "10"])), 2);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    ok(&["oracle-check", "--K-list", "1", "--trials", "200", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
