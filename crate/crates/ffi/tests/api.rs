use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use capalign::align::clip_loss_with_grads;
use capalign::fixture::{synthetic, FixtureSpec};
use capalign::matrix::Matrix;
use capalign::trainer::{train_manifest, Checkpoint, TrainConfig};
use capalign_ffi::*;

fn last_error() -> Option<String> {
    let p = cap_last_error_message();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

fn trained_checkpoint(dir: &Path) -> (PathBuf, Checkpoint) {
    let fx = synthetic(&FixtureSpec {
        train_per_class: 20,
        test_per_class: 2,
        ..FixtureSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seeds: vec![9],
        embed_dim: 8,
        bucket_count: 64,
        ..TrainConfig::default()
    };
    let run = train_manifest(&fx.manifest, &fx.pools, &config).unwrap().remove(0);
    let path = dir.join("seed_9.ckpt");
    run.best.save(&path).unwrap();
    (path, run.best)
}

#[test]
fn model_embeddings_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ckpt) = trained_checkpoint(dir.path());
    let encoder = ckpt.encoder().unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();

    let mut model = ptr::null_mut();
    assert_eq!(unsafe { cap_model_load(cpath.as_ptr(), &mut model) }, CapStatus::Ok);
    assert!(last_error().is_none());
    let dim = unsafe { cap_model_embed_dim(model) };
    assert_eq!(dim, 8);
    assert_eq!(unsafe { cap_model_image_dim(model) }, 32);
    assert_eq!(unsafe { cap_model_temperature(model) }, encoder.temperature());

    let text = CString::new("small polyp with smooth surface").unwrap();
    let mut out = vec![0.0; dim];
    let st = unsafe { cap_model_embed_text(model, text.as_ptr(), out.as_mut_ptr(), dim) };
    assert_eq!(st, CapStatus::Ok);
    assert_eq!(out, encoder.embed_text("small polyp with smooth surface").unwrap().into_inner());

    let features: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
    let st = unsafe { cap_model_embed_image(model, features.as_ptr(), 32, out.as_mut_ptr(), dim) };
    assert_eq!(st, CapStatus::Ok);
    assert_eq!(out, encoder.embed_image(&features).unwrap().into_inner());

    // Wrong buffer and feature sizes.
    let st = unsafe { cap_model_embed_image(model, features.as_ptr(), 31, out.as_mut_ptr(), dim) };
    assert_eq!(st, CapStatus::ShapeMismatch);
    assert!(last_error().unwrap().contains("31"));
    let st = unsafe { cap_model_embed_text(model, text.as_ptr(), out.as_mut_ptr(), dim - 1) };
    assert_eq!(st, CapStatus::ShapeMismatch);

    let empty = CString::new("?!").unwrap();
    let st = unsafe { cap_model_embed_text(model, empty.as_ptr(), out.as_mut_ptr(), dim) };
    assert_eq!(st, CapStatus::InvalidArgument);

    unsafe { cap_model_free(model) };
    unsafe { cap_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();

    let missing = CString::new(dir.path().join("nope.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cap_model_load(missing.as_ptr(), &mut model) }, CapStatus::Io);
    assert!(last_error().unwrap().contains("nope.ckpt"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cap_model_load(junk.as_ptr(), &mut model) }, CapStatus::BadCheckpoint);
    assert!(model.is_null());

    assert_eq!(unsafe { cap_model_load(ptr::null(), &mut model) }, CapStatus::NullPointer);
    assert_eq!(unsafe { cap_model_load(junk.as_ptr(), ptr::null_mut()) }, CapStatus::NullPointer);

    assert_eq!(unsafe { cap_model_embed_dim(ptr::null()) }, 0);
    assert!(unsafe { cap_model_temperature(ptr::null()) }.is_nan());
}

#[test]
fn clip_loss_matches_the_library() {
    let (n, d) = (4, 3);
    let unit = |seed: f64| -> Vec<f64> {
        let mut m = Vec::new();
        for i in 0..n {
            let row: Vec<f64> = (0..d).map(|j| ((i * d + j) as f64 + seed).cos()).collect();
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            m.extend(row.into_iter().map(|x| x / norm));
        }
        m
    };
    let (u, v) = (unit(0.3), unit(1.7));
    let s = (1.0f64 / 0.07).ln();
    let expected = clip_loss_with_grads(&Matrix::from_vec(n, d, u.clone()), &Matrix::from_vec(n, d, v.clone()), s).unwrap();

    let mut loss = 0.0;
    let (mut gu, mut gv, mut gs) = (vec![0.0; n * d], vec![0.0; n * d], 0.0);
    let st = unsafe {
        cap_clip_loss(u.as_ptr(), v.as_ptr(), n, d, s, &mut loss, gu.as_mut_ptr(), gv.as_mut_ptr(), &mut gs)
    };
    assert_eq!(st, CapStatus::Ok);
    assert_eq!(loss, expected.loss_total);
    assert_eq!(gu, expected.grad_u.as_slice());
    assert_eq!(gv, expected.grad_v.as_slice());
    assert_eq!(gs, expected.grad_log_inv_tau);

    // Gradients are optional.
    let st = unsafe {
        cap_clip_loss(u.as_ptr(), v.as_ptr(), n, d, s, &mut loss, ptr::null_mut(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(st, CapStatus::Ok);

    let st = unsafe {
        cap_clip_loss(u.as_ptr(), v.as_ptr(), 0, d, s, &mut loss, ptr::null_mut(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(st, CapStatus::InvalidArgument);
    let st = unsafe {
        cap_clip_loss(u.as_ptr(), v.as_ptr(), n, d, f64::NAN, &mut loss, ptr::null_mut(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(st, CapStatus::Numeric);
    let st = unsafe {
        cap_clip_loss(u.as_ptr(), v.as_ptr(), n, d, s, ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(st, CapStatus::NullPointer);
}

#[test]
fn ranking_and_curve_metrics() {
    let mut out = 0.0;
    // Relevant at ranks 1 and 3: (1/1 + 2/3) / 2.
    let rel = [1u8, 0, 1, 0];
    assert_eq!(unsafe { cap_average_precision(rel.as_ptr(), 4, 0, &mut out) }, CapStatus::Ok);
    assert!((out - 5.0 / 6.0).abs() < 1e-15);
    // A third relevant item never retrieved.
    assert_eq!(unsafe { cap_average_precision(rel.as_ptr(), 4, 3, &mut out) }, CapStatus::Ok);
    assert!((out - 5.0 / 9.0).abs() < 1e-15);
    let none = [0u8, 0];
    assert_eq!(unsafe { cap_average_precision(none.as_ptr(), 2, 0, &mut out) }, CapStatus::InvalidArgument);

    // One discordant pair out of four.
    let scores = [0.9, 0.6, 0.7, 0.1];
    let labels = [1u8, 1, 0, 0];
    assert_eq!(unsafe { cap_auroc(scores.as_ptr(), labels.as_ptr(), 4, &mut out) }, CapStatus::Ok);
    assert!((out - 0.75).abs() < 1e-15);
    assert_eq!(unsafe { cap_auprc(scores.as_ptr(), labels.as_ptr(), 4, &mut out) }, CapStatus::Ok);
    assert!(out > 0.75 && out <= 1.0);

    let single = [1u8, 1, 1, 1];
    assert_eq!(unsafe { cap_auroc(scores.as_ptr(), single.as_ptr(), 4, &mut out) }, CapStatus::InvalidArgument);
    assert!(last_error().is_some());
    assert_eq!(unsafe { cap_auroc(ptr::null(), labels.as_ptr(), 4, &mut out) }, CapStatus::NullPointer);

    let version = unsafe { CStr::from_ptr(cap_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/capalign.h")
}

#[test]
fn header_declares_the_exported_api() {
    let text = std::fs::read_to_string(header()).unwrap();
    for name in [
        "typedef struct CapModel CapModel;",
        "CAP_STATUS_OK = 0",
        "CAP_STATUS_PANIC = 7",
        "cap_last_error_message(void)",
        "cap_model_load(",
        "cap_model_free(",
        "cap_model_embed_text(",
        "cap_model_embed_image(",
        "cap_clip_loss(",
        "cap_average_precision(",
        "cap_auroc(",
        "cap_auprc(",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(header())
        .status()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(status.success());
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include "capalign.h"

int main(void) {
    double scores[4] = {0.9, 0.6, 0.7, 0.1};
    uint8_t labels[4] = {1, 1, 0, 0};
    double auc = 0.0;
    if (cap_auroc(scores, labels, 4, &auc) != CAP_STATUS_OK || fabs(auc - 0.75) > 1e-15) return 1;
    CapModel *model = NULL;
    if (cap_model_load("/nonexistent/model.ckpt", &model) != CAP_STATUS_IO) return 2;
    if (cap_last_error_message() == NULL || model != NULL) return 3;
    cap_model_free(model);
    printf("%s\n", cap_version());
    return 0;
}
"#;

#[test]
fn c_program_links_against_the_shared_library() {
    // Test binaries live in <profile>/deps; the cdylib sits in <profile>.
    let profile = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    if !profile.join("libcapalign_ffi.so").is_file() {
        eprintln!("shared library not built on this platform; skipped");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    let exe = dir.path().join("smoke");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let Ok(status) = Command::new("cc")
        .arg("-std=c99")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg("-o")
        .arg(&exe)
        .arg(format!("-L{}", profile.display()))
        .arg(format!("-Wl,-rpath,{}", profile.display()))
        .args(["-lcapalign_ffi", "-lm"])
        .status()
    else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
