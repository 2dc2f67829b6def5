use std::fs;
use std::path::Path;
use std::process::Command;

use gatcons::graphio::load_dataset;
use gatcons_cli::commands::{read_summaries, Aggregate, RunSummary, NORMS_HEADER};
use gatcons_cli::run;
use serde_json::Value;
use tempfile::TempDir;

fn gatcons(args: &[&str]) -> i32 {
    let mut v = vec!["gatcons"];
    v.extend_from_slice(args);
    run(v)
}

fn out_flag(dir: &Path) -> String {
    format!("--output_dir={}", dir.display())
}

fn short_train(dir: &Path, runs: usize, extra: &[&str]) -> i32 {
    let out = out_flag(dir);
    let runs = format!("--runs={runs}");
    let mut args = vec!["train", &out, &runs, "--network.hidden=8", "--train.max_epochs=30", "--train.diag_every=10"];
    args.extend_from_slice(extra);
    gatcons(&args)
}

#[test]
fn train_writes_per_run_outputs_and_aggregate() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(short_train(tmp.path(), 3, &["--jobs", "2", "--seed=4"]), 0);
    for r in 0..3 {
        let run = tmp.path().join(format!("run_{r}"));
        for f in ["history.csv", "diagnostics.csv", "summary.json", "checkpoint.json"] {
            assert!(run.join(f).is_file(), "{f}");
        }
        let history = fs::read_to_string(run.join("history.csv")).unwrap();
        assert_eq!(history.lines().next().unwrap(), "epoch,train_loss,train_acc,val_acc,test_acc");
        assert_eq!(history.lines().count(), 31);
        let s: RunSummary = serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
        assert_eq!(s.seed, 4 + r as u64);
    }
    let agg: Aggregate = serde_json::from_str(&fs::read_to_string(tmp.path().join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg.runs, 3);
    assert_eq!(Aggregate::from_runs(&read_summaries(tmp.path()).unwrap()), agg);
}

#[test]
fn single_run_reports_zero_interval() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(short_train(tmp.path(), 1, &[]), 0);
    let agg: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["test_acc"]["ci95"], Value::from(0.0));
    assert!(agg["test_acc"]["mean"].is_number());
}

fn strip_wall_time(text: &str) -> Value {
    let mut v: Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs");
    v
}

#[test]
fn train_is_idempotent() {
    let tmp = TempDir::new().unwrap();
    let snapshot = |dir: &Path| {
        let mut files = Vec::new();
        for entry in walk(dir) {
            let text = fs::read_to_string(&entry).unwrap();
            let rel = entry.strip_prefix(dir).unwrap().to_path_buf();
            files.push((rel, text));
        }
        files.sort();
        files
    };
    assert_eq!(short_train(tmp.path(), 2, &["--init.scheme=bal_llortho"]), 0);
    let first = snapshot(tmp.path());
    assert_eq!(short_train(tmp.path(), 2, &["--init.scheme=bal_llortho"]), 0);
    let second = snapshot(tmp.path());
    assert_eq!(first.len(), second.len());
    for ((p, a), (q, b)) in first.iter().zip(&second) {
        assert_eq!(p, q);
        if p.ends_with("summary.json") {
            assert_eq!(strip_wall_time(a), strip_wall_time(b));
        } else {
            assert_eq!(a, b, "{}", p.display());
        }
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn overrides_reach_the_saved_config() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(short_train(tmp.path(), 1, &["--train.lr=0.05", "--train.optimizer=adam"]), 0);
    let cfg: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["train"]["lr"], Value::from(0.05));
    assert_eq!(cfg["train"]["optimizer"], Value::from("adam"));
}

#[test]
fn config_file_is_merged_over_defaults() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("exp.json");
    fs::write(&cfg, r#"{"network": {"depth": 3, "hidden": 4}, "train": {"max_epochs": 5}}"#).unwrap();
    let out = out_flag(&tmp.path().join("out"));
    assert_eq!(gatcons(&["train", "--config", cfg.to_str().unwrap(), &out]), 0);
    let saved: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("out/config.json")).unwrap()).unwrap();
    assert_eq!(saved["network"]["depth"], Value::from(3));
    assert_eq!(saved["train"]["lr"], Value::from(0.1));
}

#[test]
fn config_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let missing = format!("--dataset={}", tmp.path().join("nope").display());
    assert_eq!(gatcons(&["train", &missing, &out_flag(tmp.path())]), 2);
    assert_eq!(gatcons(&["train", "--train.lr=-1", &out_flag(tmp.path())]), 2);
    assert_eq!(gatcons(&["train", "--network.nonsense=1", &out_flag(tmp.path())]), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(gatcons(&["train", "--config", bad.to_str().unwrap()]), 2);
    assert_eq!(gatcons(&["verify", "--config", tmp.path().join("absent.json").to_str().unwrap()]), 2);
}

#[test]
fn malformed_dataset_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path().join("ds");
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join("edges.tsv"), "0\tx\n").unwrap();
    let ds = format!("--dataset={}", d.display());
    assert_eq!(gatcons(&["train", &ds, &out_flag(tmp.path())]), 1);
}

const BAL_O_L5: [&str; 4] =
    ["--init.scheme=bal_llortho", "--network.depth=5", "--network.hidden=16", "--network.activation=relu"];

#[test]
fn verify_balanced_relu_passes() {
    assert_eq!(gatcons(&[&["verify"][..], &BAL_O_L5[..]].concat()), 0);
    assert_eq!(
        gatcons(&["verify", "--network.heads=2", "--network.weight_sharing=false", "--init.scheme=bal_xavier"]),
        0
    );
    assert_eq!(gatcons(&["verify", "--network.variant=gcn_mean", "--network.depth=3"]), 0);
}

#[test]
fn verify_skips_identity_checks_for_elu() {
    assert_eq!(gatcons(&["verify", "--init.scheme=bal_llortho", "--network.depth=4", "--network.activation=elu"]), 0);
}

#[test]
fn verify_detects_corrupted_gradient() {
    assert_eq!(gatcons(&[&["verify", "--corrupt-gradient"][..], &BAL_O_L5[..]].concat()), 3);
}

#[test]
fn gradcheck_passes_across_variants() {
    assert_eq!(gatcons(&["gradcheck"]), 0);
    assert_eq!(gatcons(&["gradcheck", "--network.heads=2", "--network.weight_sharing=false", "--seed=9"]), 0);
    assert_eq!(gatcons(&["gradcheck", "--network.heads=3", "--network.head_agg=average", "--network.depth=5"]), 0);
    assert_eq!(gatcons(&["gradcheck", "--network.activation={\"leaky_relu\":0.1}"]), 0);
}

#[test]
fn init_inspect_writes_norms() {
    let tmp = TempDir::new().unwrap();
    let out = out_flag(tmp.path());
    assert_eq!(gatcons(&[&["init-inspect", &out][..], &BAL_O_L5[..]].concat()), 0);
    let text = fs::read_to_string(tmp.path().join("norms.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), NORMS_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 4 hidden layers of 16 plus 2 output neurons.
    assert_eq!(rows.len(), 4 * 16 + 2);
    for r in &rows[..64] {
        assert!(r[6].parse::<f64>().unwrap().abs() < 1e-12);
    }
    for r in &rows[..16] {
        assert!((r[2].parse::<f64>().unwrap() - 2.0).abs() < 1e-12);
    }
    assert_eq!(rows[64][3], "");
}

#[test]
fn gen_writes_loadable_dataset_deterministically() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("sbm");
    let args = [
        "gen",
        "--out",
        out.to_str().unwrap(),
        "--blocks",
        "10,12",
        "--p-in",
        "0.5",
        "--p-out",
        "0.1",
        "--feat-dim",
        "4",
        "--seed",
        "3",
    ];
    assert_eq!(gatcons(&args), 0);
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.num_nodes(), 22);
    assert_eq!(ds.feature_dim(), 4);
    let before = fs::read_to_string(out.join("edges.tsv")).unwrap();
    assert_eq!(gatcons(&args), 0);
    assert_eq!(fs::read_to_string(out.join("edges.tsv")).unwrap(), before);
    assert_eq!(gatcons(&["gen", "--out", out.to_str().unwrap(), "--p-in", "1.5"]), 2);
}

#[test]
fn train_on_generated_directory() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("sbm");
    assert_eq!(gatcons(&["gen", "--out", data.to_str().unwrap(), "--blocks", "8,8", "--feat-dim", "4"]), 0);
    let ds = format!("--dataset={}", data.display());
    assert_eq!(short_train(&tmp.path().join("out"), 1, &[&ds]), 0);
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_gatcons");
    let status = |args: &[&str]| Command::new(exe).args(args).output().unwrap().status.code().unwrap();
    assert_eq!(status(&["gradcheck"]), 0);
    assert_eq!(status(&[&["verify", "--corrupt-gradient"][..], &BAL_O_L5[..]].concat()), 3);
    assert_eq!(status(&["train", "--dataset=/definitely/not/here"]), 2);
    assert_eq!(status(&["--help"]), 0);
}
