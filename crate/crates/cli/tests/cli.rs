//! End-to-end runs of the `lmad` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmad_core::checkpoint;
use lmad_core::config::{Preset, RunConfig};
use lmad_core::dataset::AFFORDANCES;
use lmad_core::encoder::EncoderConfig;
use lmad_core::head::HeadVariant;
use lmad_core::lm::LMConfig;
use lmad_core::model::{Model, ModelConfig};
use lmad_core::ply;
use lmad_core::text::Vocabulary;
use tempfile::TempDir;

fn lmad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmad"))
        .args(args)
        .env_remove("LMAD_THREADS")
        .output()
        .expect("lmad runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 40 samples of 64 points each.
fn small_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    let o = lmad(&["gen-data", "--out", s(&out), "--per-category", "10", "--points", "64", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.json")
}

/// A custom-preset configuration small enough to train in a second.
fn micro_config(dir: &Path) -> PathBuf {
    let vocab = Vocabulary::from_words(&AFFORDANCES[..]).unwrap();
    let cfg = RunConfig {
        preset: Preset::Custom,
        lm: Some(LMConfig::micro(vocab.len())),
        encoder: Some(EncoderConfig::micro(8)),
        epochs: 2,
        ..RunConfig::default()
    };
    let path = dir.join("micro.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_data_splits_and_reproduces() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = lmad(&["gen-data", "--out", s(out), "--per-category", "100", "--points", "64"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(text, std::fs::read_to_string(b.join("manifest.json")).unwrap());
    let m: serde_json::Value = serde_json::from_str(&text).unwrap();
    let len = |k: &str| m["splits"][k].as_array().unwrap().len();
    assert_eq!((len("train"), len("val"), len("test")), (280, 40, 80));
    assert_eq!(m["samples"].as_array().unwrap().len(), 400);

    let o = lmad(&["gen-data", "--out", s(&dir.path().join("c")), "--per-category", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("minimum 10"), "{}", stderr(&o));
}

#[test]
fn bad_head_and_thread_count_are_usage_errors() {
    let o = lmad(&["train", "--head", "bogus", "--out-ckpt", "x.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("aqm") && err.contains("xattn") && err.contains("cosine"), "{err}");

    let dir = TempDir::new().unwrap();
    let manifest = small_dataset(dir.path());
    let o = Command::new(env!("CARGO_BIN_EXE_lmad"))
        .args(["eval", "--oracle", "--manifest", s(&manifest)])
        .env("LMAD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_eval_scores_one() {
    let dir = TempDir::new().unwrap();
    let manifest = small_dataset(dir.path());
    for task in ["full", "partial"] {
        let o = lmad(&["eval", "--oracle", "--manifest", s(&manifest), "--task", task]);
        assert!(o.status.success(), "{}", stderr(&o));
        let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
        for k in ["miou", "acc", "macc"] {
            assert_eq!(r[k].as_f64(), Some(1.0), "{k}");
        }
    }
}

#[test]
fn train_eval_predict_round() {
    let dir = TempDir::new().unwrap();
    let manifest = small_dataset(dir.path());
    let config = micro_config(dir.path());
    let run = |name: &str| {
        let ckpt = dir.path().join(format!("{name}.ckpt"));
        let log = dir.path().join(format!("{name}.jsonl"));
        let o = lmad(&[
            "train", "--config", s(&config), "--manifest", s(&manifest), "--seed", "3", "--out-ckpt", s(&ckpt), "--log",
            s(&log),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        (ckpt, std::fs::read_to_string(log).unwrap())
    };
    let (ckpt, log_a) = run("a");
    let (ckpt_b, log_b) = run("b");
    assert_eq!(log_a, log_b);
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&ckpt_b).unwrap());
    let lines: Vec<serde_json::Value> = log_a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        let keys: Vec<&String> = l.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["loss", "step", "val_acc", "val_macc", "val_miou"]);
    }

    let eval = || lmad(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&manifest), "--split", "val"]);
    let (e1, e2) = (eval(), eval());
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert_eq!(e1.stdout, e2.stdout);

    let sample = dir.path().join("data/samples").read_dir().unwrap().next().unwrap().unwrap().path();
    let ply_path = dir.path().join("out.ply");
    let o = lmad(&["predict", "--ckpt", s(&ckpt), "--sample", s(&sample), "--word", "grasp", "--out-ply", s(&ply_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let mean = summary["mean_prob"].as_f64().unwrap();
    let vertices = ply::read_heatmap(&std::fs::read_to_string(&ply_path).unwrap()).unwrap();
    assert_eq!(vertices.len(), 64);
    assert!((0.0..=1.0).contains(&mean));
    assert!(summary["positive_count"].as_u64().unwrap() <= 64);

    let o = lmad(&["predict", "--ckpt", s(&ckpt), "--sample", s(&sample), "--word", "juggle", "--out-ply", s(&ply_path)]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("warning"));

    let o = lmad(&["predict", "--ckpt", s(&ckpt), "--sample", s(&manifest), "--word", "grasp", "--out-ply", s(&ply_path)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_rejects_checkpoint_missing_words() {
    let dir = TempDir::new().unwrap();
    let manifest = small_dataset(dir.path());
    let vocab = Vocabulary::from_words(&["grasp", "cut"]).unwrap();
    let ckpt = dir.path().join("narrow.ckpt");
    checkpoint::save(&Model::<f32>::new(ModelConfig::micro(vocab, HeadVariant::Aqm), 0).unwrap(), &ckpt).unwrap();
    let o = lmad(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&manifest)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("contain") && err.contains("wrap-grasp"), "{err}");
}

#[test]
fn gradcheck_exit_codes() {
    let o = lmad(&["gradcheck", "--scope", "ops"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r["passed"], true);

    let o = lmad(&["gradcheck", "--scope", "ops", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("faulty_square"));
}
