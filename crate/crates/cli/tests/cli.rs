use std::path::Path;
use std::process::{Command, Output};

use flame_core::data::synthetic::MarkovConfig;

fn flame(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flame"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn toy_log(dir: &Path) -> String {
    let cfg = MarkovConfig {
        num_items: 30,
        num_users: 60,
        min_len: 8,
        max_len: 14,
        ..MarkovConfig::default()
    };
    let path = dir.join("log.tsv");
    std::fs::write(&path, cfg.tsv(4)).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: [&str; 8] = [
    "--dim=8",
    "--layers=2",
    "--heads=2",
    "--max-len=6",
    "--epochs=3",
    "--patience=3",
    "--batch-size=16",
    "--eval-batch-size=32",
];

/// Ingests the toy log into `out` and returns the dataset path.
fn ingest(out: &Path) -> String {
    let log = toy_log(out);
    let data = out.join("data.bin");
    let o = flame(&[
        "ingest",
        "--input",
        &log,
        "--output",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--max-len=6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data.to_str().unwrap().to_string()
}

fn without_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').unwrap().0)
        .collect::<Vec<_>>()
        .join("\n")
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn ingest_reports_stats() {
    let dir = tempfile::tempdir().unwrap();
    let log = toy_log(dir.path());
    let o = flame(&[
        "ingest",
        "--input",
        &log,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("users\t60"), "{text}");
    for key in ["items", "interactions", "avg_seq_len", "sparsity"] {
        assert!(text.contains(key));
    }
    assert!(dir.path().join("dataset.bin").exists());
    assert!(read(&dir.path().join("manifest.txt")).starts_with("# command=ingest"));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = flame(&[
        "ingest",
        "--input",
        "/nonexistent/log.tsv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_log_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("bad.tsv");
    std::fs::write(&log, "u1\ti1\t5\nu1\ti2\n").unwrap();
    let o = flame(&[
        "ingest",
        "--input",
        log.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn unknown_key_is_a_config_error() {
    let o = flame(&["train", "--no-such-knob=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_knob"));
}

#[test]
fn flame_without_frozen_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest(dir.path());
    let mut args = vec!["train", "--out", dir.path().to_str().unwrap()];
    let d = format!("--data={data}");
    args.push(&d);
    args.push("--mode=flame");
    args.extend(SMALL);
    assert_eq!(flame(&args).status.code(), Some(1));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!("# toy run\ndata={data}\nmode=single\ndim=4\n"),
    )
    .unwrap();
    let out = dir.path().join("run");
    let mut args = vec![
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
    ];
    args.extend(SMALL);
    let o = flame(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read(&out.join("manifest.txt"));
    assert!(manifest.contains("\ndim=8\n"), "{manifest}");
    assert!(manifest.contains("\nseed=9\n"));
}

#[test]
fn training_is_reproducible_and_eval_matches() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest(dir.path());
    let d = format!("--data={data}");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "train",
            "--pretrain-first",
            "--deterministic",
            "--out",
            out.to_str().unwrap(),
            "--mode=flame",
        ];
        args.push(&d);
        args.extend(SMALL);
        let o = flame(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["metrics.csv", "pretrain_metrics.csv"] {
        let (x, y) = (read(&a.join(f)), read(&b.join(f)));
        assert_eq!(x.lines().count(), 4, "{f}");
        assert_eq!(without_wall(&x), without_wall(&y), "{f}");
    }
    assert_eq!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(b.join("model.ckpt")).unwrap()
    );
    assert!(read(&a.join("manifest.txt")).contains("# deterministic=true"));

    let train_valid = read(&a.join("eval_valid.csv"));
    let eval_dir = dir.path().join("eval");
    let ckpt = a.join("model.ckpt");
    let frozen = format!("--frozen={}", a.join("frozen.ckpt").display());
    let o = flame(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--split",
        "valid",
        "--all-paths",
        "--out",
        eval_dir.to_str().unwrap(),
        &d,
        &frozen,
        "--max-len=6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&eval_dir.join("eval_valid.csv")), train_valid);

    // The best validation NDCG@20 in the trace is the one the checkpoint reproduces.
    let best = read(&a.join("metrics.csv"))
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(10).unwrap().parse::<f64>().unwrap())
        .fold(f64::MIN, f64::max);
    let evaluated: f64 = train_valid
        .lines()
        .find(|l| l.starts_with("NDCG,20,"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(best, evaluated);

    let paths = read(&eval_dir.join("eval_paths_valid.csv"));
    for label in ["frz-frz", "frz-lrn", "lrn-frz", "lrn-lrn"] {
        assert!(paths.contains(&format!("\n{label},")), "{paths}");
    }
    let per = read(&eval_dir.join("per_valid.csv"));
    assert_eq!(per.lines().count(), 5);
}

#[test]
fn diagnose_writes_traces_for_each_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = ingest(dir.path());
    let d = format!("--data={data}");
    let mut args = vec!["diagnose", "--out", dir.path().to_str().unwrap(), &d];
    args.extend(SMALL);
    let o = flame(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for mode in ["single", "ensemble_scratch", "ensemble_guide"] {
        let trace = read(&dir.path().join(format!("trace_{mode}.csv")));
        assert!(trace.starts_with("epoch,lambda,train_loss"));
        assert_eq!(trace.lines().count(), 4);
        assert!(dir.path().join(format!("per_{mode}.csv")).exists());
    }
    assert!(dir
        .path()
        .join("partner_trace_ensemble_scratch.csv")
        .exists());
    assert!(dir.path().join("frozen.ckpt").exists());
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    assert_eq!(flame(&["--help"]).status.code(), Some(0));
    assert_eq!(flame(&["frobnicate"]).status.code(), Some(1));
}
