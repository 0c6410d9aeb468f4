use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "model": {"input_size": [16, 16, 3], "backbone": [4], "feature_channels": 4, "safa_filters": [6, 3]},
  "train": {"epochs": 2, "batch_size": 16}
}"#;

fn wagf(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wagf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn workdir() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn train_tiny(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec![
        "train",
        "--config",
        "tiny.json",
        "--synth-per-class",
        "10",
        "--out",
        out,
        "--threads",
        "1",
    ];
    args.extend_from_slice(extra);
    ok(&wagf(&args, dir));
    dir.join(out)
}

fn pgm_size(bytes: &[u8]) -> (usize, usize) {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]);
    let mut it = text.split_ascii_whitespace();
    assert_eq!(it.next(), Some("P5"));
    let w = it.next().unwrap().parse().unwrap();
    let h = it.next().unwrap().parse().unwrap();
    (w, h)
}

#[test]
fn smoke_run_writes_checkpoints_and_log() {
    let dir = workdir();
    let run = train_tiny(dir.path(), "run", &[]);
    for f in ["best.ckpt", "last.ckpt", "config.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["epoch"], 2);
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"], 2);
    assert_eq!(resolved["model"]["backbone"], serde_json::json!([4]));
}

#[test]
fn single_thread_runs_are_identical() {
    let dir = workdir();
    let a = train_tiny(dir.path(), "a", &["--seed", "3"]);
    let b = train_tiny(dir.path(), "b", &["--seed", "3"]);
    for f in ["metrics.jsonl", "last.ckpt", "best.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = train_tiny(dir.path(), "c", &["--seed", "4"]);
    assert_ne!(
        fs::read(a.join("last.ckpt")).unwrap(),
        fs::read(c.join("last.ckpt")).unwrap()
    );
}

#[test]
fn small_set_is_fitted_below_chance_loss() {
    let dir = workdir();
    let run = train_tiny(
        dir.path(),
        "fit",
        &[
            "--epochs",
            "40",
            "--batch-size",
            "8",
            "--val-fraction",
            "0.2",
            "--lr",
            "0.02",
        ],
    );
    let log = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    let loss = last["train_loss"].as_f64().unwrap();
    assert!(loss < 7f64.ln(), "train loss {loss}");
}

#[test]
fn eval_writes_consistent_reports() {
    let dir = workdir();
    let run = train_tiny(dir.path(), "run", &[]);
    let ckpt = run.join("best.ckpt");
    ok(&wagf(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--synth-per-class",
            "3",
            "--seed",
            "9",
            "--out",
            "ev",
        ],
        dir.path(),
    ));
    let ev = dir.path().join("ev");
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["samples"], 21);

    let mut reader = csv::Reader::from_path(ev.join("predictions.csv")).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.len(), 3 + 7);
    assert_eq!(&header[3], "p_akiec");
    let mut correct = 0;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let probs: Vec<f64> = (3..10).map(|i| rec[i].parse().unwrap()).collect();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        let best = (0..7).max_by(|&a, &b| probs[a].total_cmp(&probs[b])).unwrap();
        assert_eq!(&rec[2], &header[3 + best][2..]);
        correct += usize::from(rec[1] == rec[2]);
        rows += 1;
    }
    assert_eq!(rows, 21);
    let acc = metrics["metrics"]["accuracy"].as_f64().unwrap();
    assert!((acc - correct as f64 / 21.0).abs() < 1e-12);

    let confusion = fs::read_to_string(ev.join("confusion.csv")).unwrap();
    let total: u64 = confusion
        .lines()
        .skip(1)
        .flat_map(|l| {
            l.split(',')
                .skip(1)
                .map(|v| v.parse::<u64>().unwrap())
                .collect::<Vec<_>>()
        })
        .sum();
    assert_eq!(total, 21);

    ok(&wagf(
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--synth-per-class",
            "3",
            "--seed",
            "9",
            "--out",
            "ev2",
        ],
        dir.path(),
    ));
    for f in ["metrics.json", "confusion.csv", "predictions.csv"] {
        assert_eq!(
            fs::read(ev.join(f)).unwrap(),
            fs::read(dir.path().join("ev2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn predict_and_heatmap_on_generated_images() {
    let dir = workdir();
    let run = train_tiny(dir.path(), "run", &[]);
    let ckpt = run.join("best.ckpt");
    ok(&wagf(
        &["synth-data", "--per-class", "1", "--size", "24", "--out", "imgs"],
        dir.path(),
    ));
    let image = dir.path().join("imgs/04_mel_00000.ppm");

    let stdout = ok(&wagf(
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            image.to_str().unwrap(),
        ],
        dir.path(),
    ));
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    let probs: f64 = lines[1].split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-5);

    ok(&wagf(
        &[
            "heatmap",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            "hm",
            "--all-maps",
        ],
        dir.path(),
    ));
    for f in ["attn.pgm", "symmetry.pgm", "lstm.pgm"] {
        let bytes = fs::read(dir.path().join("hm").join(f)).unwrap();
        assert_eq!(pgm_size(&bytes), (24, 24), "{f}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("hm/heatmap.json")).unwrap()).unwrap();
    assert_eq!(meta["maps"][0]["map_height"], 8);
}

#[test]
fn synth_data_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(&wagf(
            &[
                "synth-data",
                "--per-class",
                "20",
                "--size",
                "16",
                "--seed",
                "2",
                "--out",
                out,
            ],
            dir.path(),
        ));
    }
    let a = dir.path().join("a");
    let ppm: Vec<PathBuf> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    assert_eq!(ppm.len(), 140);
    let labels = fs::read_to_string(a.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 141);
    for p in ppm.iter().chain([&a.join("labels.csv"), &a.join("spec.json")]) {
        let q = dir.path().join("b").join(p.file_name().unwrap());
        assert_eq!(fs::read(p).unwrap(), fs::read(q).unwrap(), "{}", p.display());
    }
}

#[test]
fn generated_data_trains_from_disk() {
    let dir = workdir();
    ok(&wagf(
        &["synth-data", "--per-class", "4", "--size", "16", "--out", "data"],
        dir.path(),
    ));
    ok(&wagf(
        &[
            "train",
            "--config",
            "tiny.json",
            "--images",
            "data",
            "--labels",
            "data/labels.csv",
            "--epochs",
            "1",
            "--out",
            "run",
        ],
        dir.path(),
    ));
    assert!(dir.path().join("run/last.ckpt").is_file());
}

#[test]
fn exit_codes() {
    let dir = workdir();
    let code = |args: &[&str]| wagf(args, dir.path()).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["train", "--no-such-flag"]), Some(1));
    assert_eq!(
        code(&["train", "--synth-per-class", "2", "--epochs", "0", "--out", "x"]),
        Some(1)
    );
    fs::write(dir.path().join("bad.json"), "{\"model\": {\"colour\": 1}}").unwrap();
    assert_eq!(
        code(&["train", "--config", "bad.json", "--synth-per-class", "2", "--out", "x"]),
        Some(1)
    );
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            "missing.ckpt",
            "--synth-per-class",
            "1",
            "--out",
            "x"
        ]),
        Some(2)
    );
    fs::write(dir.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["predict", "--checkpoint", "junk.ckpt", "junk.ckpt"]), Some(2));
    assert_eq!(
        code(&[
            "train",
            "--config",
            "tiny.json",
            "--synth-per-class",
            "4",
            "--lr",
            "1e38",
            "--epochs",
            "3",
            "--out",
            "x"
        ]),
        Some(3)
    );
}
