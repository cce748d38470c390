use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "train.epochs=1",
    "--set",
    "dataset.n_train=64",
    "--set",
    "dataset.n_val=64",
    "--set",
    "dataset.n_test=64",
    "--set",
    "sweep.seeds=[0]",
];

fn tocomm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tocomm")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "tocomm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(SMALL).copied().collect()
}

fn files_with(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn flops_prints_both_conventions() {
    let out = tocomm(&["flops", "--preset", "synthetic-dynamic"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let conv = v["conv_linear"]["exits"].as_array().unwrap();
    let all = v["all_layers"]["exits"].as_array().unwrap();
    assert_eq!(conv.len(), 3);
    for (c, a) in conv.iter().zip(all) {
        assert!(c.as_f64().unwrap() <= a.as_f64().unwrap());
    }
}

#[test]
fn unknown_override_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_tocomm"))
        .args(["flops", "--preset", "synthetic-static", "--set", "train.nope=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn sweep_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let args = with_small(&["sweep", "--preset", "synthetic-dynamic", "--set", "sweep.budget_points=2", "--out", out_dir]);
    tocomm(&args);
    for f in ["report.csv", "report.json", "config.json", "flops.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    // Header, one last-exit row and one row per budget.
    assert_eq!(csv.lines().count(), 1 + 1 + 2, "{csv}");
    assert!(!files_with(dir.path(), "csv").iter().all(|p| p.ends_with("report.csv")));

    let again = dir.path().join("again");
    let out = tocomm(&[
        "report",
        "--input",
        dir.path().join("report.csv").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));
    assert_eq!(std::fs::read_to_string(again.join("report.csv")).unwrap(), csv);
}

#[test]
fn train_calibrate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    tocomm(&with_small(&["train-dynamic", "--preset", "synthetic-dynamic", "--out", out_dir]));
    let ckpt = files_with(dir.path(), "ckpt");
    assert_eq!(ckpt.len(), 1);
    let ckpt = ckpt[0].to_str().unwrap();

    let flops: serde_json::Value =
        serde_json::from_slice(&tocomm(&["flops", "--preset", "synthetic-dynamic"]).stdout).unwrap();
    let top = flops["all_layers"]["exits"][2].as_f64().unwrap();
    let budget = (64.0 * top).to_string();
    let policy = dir.path().join("policy.json");
    let mut cal = with_small(&["calibrate", "--preset", "synthetic-dynamic", "--checkpoint", ckpt, "--budget", &budget]);
    cal.extend(["--policy", policy.to_str().unwrap()]);
    tocomm(&cal);
    assert!(policy.is_file());

    let mut ev = with_small(&["eval", "--preset", "synthetic-dynamic", "--checkpoint", ckpt]);
    ev.extend(["--policy", policy.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&tocomm(&ev).stdout).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let hist: u64 = v["exit_hist"].as_array().unwrap().iter().map(|h| h.as_u64().unwrap()).sum();
    assert_eq!(hist, 64);

    let plain = with_small(&["eval", "--preset", "synthetic-dynamic", "--checkpoint", ckpt]);
    let v: serde_json::Value = serde_json::from_slice(&tocomm(&plain).stdout).unwrap();
    assert_eq!(v["exit_accuracy"].as_array().unwrap().len(), 3);
}

#[test]
fn gen_data_writes_jsonl_splits() {
    let dir = tempfile::tempdir().unwrap();
    tocomm(&with_small(&["gen-data", "--preset", "synthetic-static", "--out", dir.path().to_str().unwrap()]));
    let text = std::fs::read_to_string(dir.path().join("seed0_test.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 64);
    let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(row["pixels"].as_array().unwrap().len(), 16 * 16);
    assert!(row["label"].as_u64().unwrap() < 4);
}
