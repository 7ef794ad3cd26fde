use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use uses2::audio::Waveform;
use uses2::model::{param_count_for, save_checkpoint, CheckpointMeta, Model, ModelConfig};
use uses2_ffi::*;

const TINY: &str = r#"{"variant": "comp", "blocks": 2, "channel_blocks": 1, "dim": 8, "channel_dim": 8,
    "tac_hidden": 16, "heads": 2, "mlp_ratio": 2, "window_f": 4, "window_t": 4}"#;

fn tiny_config() -> ModelConfig {
    ModelConfig::from_json(&serde_json::from_str(TINY).unwrap()).unwrap()
}

fn new_model(seed: u64) -> *mut Uses2Model {
    let cfg = CString::new(TINY).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { uses2_model_new(cfg.as_ptr(), seed, &mut h) }, Uses2Status::Ok);
    assert!(!h.is_null());
    h
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(uses2_last_error()) }.to_string_lossy().into_owned()
}

fn signal(channels: usize, len: usize) -> Vec<f32> {
    (0..channels * len).map(|i| ((i as f32) * 0.037).sin() * 0.3).collect()
}

#[test]
fn enhance_matches_the_rust_model() {
    let h = new_model(5);
    let input = signal(2, 1200);
    let mut out = vec![0f32; 1200];
    let s = unsafe { uses2_enhance(h, input.as_ptr(), 2, 1200, 8000, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, Uses2Status::Ok, "{}", last_error());
    let model = Model::new(tiny_config(), 5).unwrap();
    let expected = model.forward(&Waveform::new(input, 2, 8000).unwrap()).unwrap();
    assert_eq!(out, expected.samples());

    let mut n = 0usize;
    let mut macs = 0f64;
    unsafe {
        assert_eq!(uses2_model_param_count(h, &mut n), Uses2Status::Ok);
        assert_eq!(uses2_model_macs_per_second(h, 16000, 1, &mut macs), Uses2Status::Ok);
        uses2_model_free(h);
    }
    assert_eq!(n, param_count_for(&tiny_config()));
    assert!(macs > 0.0);
}

#[test]
fn checkpoints_load_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::new(tiny_config(), 9).unwrap();
    save_checkpoint(dir.path(), &model, &CheckpointMeta::default()).unwrap();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { uses2_model_load(path.as_ptr(), &mut h) }, Uses2Status::Ok);
    let input = signal(1, 900);
    let mut out = vec![0f32; 900];
    unsafe {
        assert_eq!(uses2_enhance(h, input.as_ptr(), 1, 900, 16000, out.as_mut_ptr(), 900), Uses2Status::Ok);
        uses2_model_free(h);
    }
    let expected = model.forward(&Waveform::mono(input, 16000).unwrap()).unwrap();
    assert_eq!(out, expected.samples());

    let missing = CString::new(dir.path().join("absent").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { uses2_model_load(missing.as_ptr(), &mut h) }, Uses2Status::Checkpoint);
    assert!(h.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn failures_return_codes_and_messages() {
    let h = new_model(1);
    let input = signal(1, 800);
    let mut out = vec![0f32; 800];
    unsafe {
        let s = uses2_enhance(h, input.as_ptr(), 1, 800, 8000, out.as_mut_ptr(), 799);
        assert_eq!(s, Uses2Status::BufferTooSmall);
        assert!(last_error().contains("799"));
        let s = uses2_enhance(h, input.as_ptr(), 1, 800, 11025, out.as_mut_ptr(), 800);
        assert_eq!(s, Uses2Status::UnsupportedRate);
        assert_eq!(uses2_enhance(h, ptr::null(), 1, 800, 8000, out.as_mut_ptr(), 800), Uses2Status::NullArgument);
        assert_eq!(uses2_enhance(h, input.as_ptr(), 0, 800, 8000, out.as_mut_ptr(), 800), Uses2Status::InvalidArgument);
        assert_eq!(
            uses2_enhance(ptr::null(), input.as_ptr(), 1, 800, 8000, out.as_mut_ptr(), 800),
            Uses2Status::NullArgument
        );
        let mut n = 0usize;
        assert_eq!(uses2_model_param_count(ptr::null(), &mut n), Uses2Status::NullArgument);
        uses2_model_free(h);
        uses2_model_free(ptr::null_mut());

        let bad = CString::new("{\"variant\": \"nope\"}").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(uses2_model_new(bad.as_ptr(), 0, &mut h), Uses2Status::Config);
        assert!(h.is_null());
        let s = CStr::from_ptr(uses2_status_string(Uses2Status::BufferTooSmall));
        assert_eq!(s.to_str().unwrap(), "buffer too small");
        assert_eq!(CStr::from_ptr(uses2_version()).to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/uses2.h")
}

#[test]
fn generated_header_declares_the_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct Uses2Model Uses2Model",
        "USES2_STATUS_BUFFER_TOO_SMALL = 8",
        "uses2_model_load",
        "uses2_model_new",
        "uses2_model_free",
        "uses2_model_param_count",
        "uses2_model_macs_per_second",
        "uses2_enhance",
        "uses2_last_error",
        "uses2_status_string",
    ] {
        assert!(text.contains(name), "missing {name}");
    }
}

/// Compiles a C program against the header and the static library, then runs it.
#[test]
fn c_program_links_and_enhances() {
    // Built alongside this test executable; the copy one level up is only refreshed by `cargo build`.
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().join("libuses2_ffi.a");
    assert!(lib.exists(), "{} not built", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        format!(
            r#"#include <stdio.h>
#include "uses2.h"
int main(void) {{
    const char *cfg = "{}";
    Uses2Model *m = NULL;
    float in[1600], out[1600];
    size_t i, n = 0;
    for (i = 0; i < 1600; i++) in[i] = (float)(i % 50) / 100.0f - 0.25f;
    if (uses2_model_new(cfg, 3, &m) != USES2_STATUS_OK) {{ puts(uses2_last_error()); return 1; }}
    if (uses2_enhance(m, in, 2, 800, 8000, out, 800) != USES2_STATUS_OK) {{ puts(uses2_last_error()); return 2; }}
    if (uses2_enhance(m, in, 1, 800, 8000, out, 10) != USES2_STATUS_BUFFER_TOO_SMALL) return 3;
    uses2_model_param_count(m, &n);
    uses2_model_free(m);
    printf("%zu\n", n);
    return 0;
}}
"#,
            TINY.replace('"', "\\\"").replace('\n', " ")
        ),
    )
    .unwrap();
    let bin = dir.path().join("main");
    let cc = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&bin)
        .output()
        .expect("cc");
    assert!(cc.status.success(), "{}", String::from_utf8_lossy(&cc.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stdout));
    let n: usize = String::from_utf8_lossy(&run.stdout).trim().parse().unwrap();
    assert_eq!(n, param_count_for(&tiny_config()));
}
