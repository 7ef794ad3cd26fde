use std::path::Path;
use std::process::{Command, Output};

use uses2::audio::{read_wav, write_wav, WavEncoding};
use uses2::datagen::Manifest;
use uses2::evalcli::EvalReport;
use uses2::model::load_checkpoint;

fn uses2(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uses2")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"{
  "model": {"variant": "comp", "blocks": 2, "channel_blocks": 1, "dim": 8, "channel_dim": 8,
            "tac_hidden": 16, "heads": 2, "mlp_ratio": 2, "window_f": 4, "window_t": 4},
  "train": {"warmup_steps": 2, "batch": 1, "chunk_seconds": 0.2, "max_steps": 2, "steps_per_epoch": 1,
            "loss": {"fft_sizes": [64, 128], "time_weight": 0.5}}
}"#;

#[test]
fn datagen_train_evaluate_enhance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let listing = ok(uses2(&["datagen", "--out", "data", "--seed", "4", "--train", "2", "--dev", "1", "--test", "1"], d));
    assert!(listing.contains("single/train"));
    let single = Manifest::read(d.join("data/single/train.jsonl")).unwrap();
    assert_eq!(single.records.len(), 2);
    assert!(single.records.iter().all(|r| r.channels == 1));
    let multi = Manifest::read(d.join("data/multi/test.jsonl")).unwrap();
    assert!(multi.records.iter().all(|r| r.channels >= 2));

    std::fs::write(d.join("tiny.json"), CONFIG).unwrap();
    let log = ok(uses2(
        &["train", "--stage", "1", "--config", "tiny.json", "--data", "data/single/train.jsonl", "--out", "s1"],
        d,
    ));
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    let (_, meta) = load_checkpoint(&d.join("s1")).unwrap();
    assert_eq!((meta.stage, meta.step), (1, 2));

    ok(uses2(
        &[
            "train", "--stage", "2", "--config", "tiny.json", "--data", "data/multi/train.jsonl",
            "--dev", "data/multi/dev.jsonl", "--resume", "s1", "--out", "s2",
        ],
        d,
    ));
    assert_eq!(load_checkpoint(&d.join("s2")).unwrap().1.stage, 2);

    ok(uses2(&["evaluate", "--ckpt", "s2", "--manifest", "data/multi/test.jsonl", "--report", "r.json"], d));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert!(report.model.unwrap().params > 0);

    let mix = &multi.records[0];
    let input = multi.resolve(&mix.mixture_path);
    ok(uses2(&["enhance", "--ckpt", "s2", "--in", input.to_str().unwrap(), "--out", "e.wav"], d));
    let (x, y) = (read_wav(&input).unwrap(), read_wav(d.join("e.wav")).unwrap());
    assert_eq!((y.channels(), y.len(), y.rate_hz()), (1, x.len(), x.rate_hz()));
}

#[test]
fn info_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(uses2(&["info", "--variant", "swin"], dir.path()));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["params"], uses2::model::param_count_for(&uses2::model::ModelConfig::swin()));
    assert!(v["macs_per_s_2ch"].as_f64().unwrap() > v["macs_per_s_1ch"].as_f64().unwrap());
}

#[test]
fn failures_exit_nonzero_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = uses2(&["train", "--stage", "3", "--data", "nowhere.jsonl"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(d.join("bad.json"), r#"{"train": {"bogus": 1}}"#).unwrap();
    let out = uses2(&["info", "--config", "bad.json"], d);
    assert!(!out.status.success());

    let w = uses2::audio::Waveform::mono(vec![0.1; 300], 11025).unwrap();
    write_wav(d.join("odd.wav"), &w, WavEncoding::Pcm16).unwrap();
    let out = uses2(&["enhance", "--ckpt", "missing", "--in", "odd.wav", "--out", "o.wav"], d);
    assert!(!out.status.success());
}
