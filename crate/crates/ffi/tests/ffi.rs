use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use gfpc::depth::{predict_depth, DecoderConfig, DepthNet};
use gfpc::encoder::EncoderConfig;
use gfpc::gradfield::{gradient_field, CannyParams, ColorImage};
use gfpc_ffi::*;

fn pattern(h: usize, w: usize) -> Vec<u8> {
    (0..h * w * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            let (r, col) = (p / w, p % w);
            if col >= w / 2 {
                200 - 30 * c as u8
            } else {
                20 + (r % 3) as u8
            }
        })
        .collect()
}

fn as_image(rgb: &[u8], h: usize, w: usize) -> ColorImage {
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = f64::from(rgb[3 * i + c]) / 255.0;
        }
    }
    ColorImage::new(3, h, w, data).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gfpc_last_error_message()) }.to_string_lossy().into_owned()
}

#[test]
fn gradient_field_matches_library() {
    let (h, w) = (12, 16);
    let rgb = pattern(h, w);
    let mut out = vec![0f32; h * w];
    let status = unsafe { gfpc_gradient_field(rgb.as_ptr(), h, w, ptr::null(), out.as_mut_ptr()) };
    assert_eq!(status, GfpcStatus::Ok);
    let expected = gradient_field(&as_image(&rgb, h, w), &CannyParams::default()).unwrap();
    for (a, b) in out.iter().zip(&expected.values) {
        assert_eq!(*a, *b as f32);
    }
    assert_eq!(out.iter().cloned().fold(0.0, f32::max), 1.0);

    let defaults = gfpc_canny_params_default();
    assert_eq!((defaults.sigma, defaults.kernel_size, defaults.low, defaults.high), (1.4, 5, 0.1, 0.2));
    let bad = GfpcCannyParams { low: 0.5, high: 0.2, ..defaults };
    let status = unsafe { gfpc_gradient_field(rgb.as_ptr(), h, w, &bad, out.as_mut_ptr()) };
    assert_eq!(status, GfpcStatus::InvalidArgument);
    assert!(last_error().contains("threshold"));
}

#[test]
fn null_pointers_are_reported() {
    let mut out = [0f32; 4];
    let s = unsafe { gfpc_gradient_field(ptr::null(), 2, 2, ptr::null(), out.as_mut_ptr()) };
    assert_eq!(s, GfpcStatus::NullPointer);
    assert!(last_error().contains("rgb"));
    let rgb = [0u8; 12];
    let s = unsafe { gfpc_gradient_field(rgb.as_ptr(), 2, 2, ptr::null(), ptr::null_mut()) };
    assert_eq!(s, GfpcStatus::NullPointer);
    let s = unsafe { gfpc_gradient_field(rgb.as_ptr(), 0, 2, ptr::null(), out.as_mut_ptr()) };
    assert_eq!(s, GfpcStatus::Dimension);
    let s = unsafe { gfpc_depthnet_predict(ptr::null(), rgb.as_ptr(), 2, 2, out.as_mut_ptr()) };
    assert_eq!(s, GfpcStatus::NullPointer);
    unsafe { gfpc_depthnet_free(ptr::null_mut()) };
}

fn saved_net(dir: &Path) -> (PathBuf, DepthNet<f32>) {
    let e = EncoderConfig::new(vec![4, 8], 1, 6, 3).unwrap();
    let net = DepthNet::<f32>::random(&e, &DecoderConfig::mirror(&e), 7).unwrap();
    let path = dir.join("depth.ckpt");
    net.save(&path).unwrap();
    (path, net)
}

#[test]
fn depthnet_handle_predicts_like_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, net) = saved_net(dir.path());
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { gfpc_depthnet_load(c_path.as_ptr(), &mut handle) }, GfpcStatus::Ok);
    assert!(!handle.is_null());

    let (h, w) = (16, 12);
    let (mut oh, mut ow) = (0, 0);
    assert_eq!(unsafe { gfpc_depthnet_output_size(handle, h, w, &mut oh, &mut ow) }, GfpcStatus::Ok);
    assert_eq!((oh, ow), (8, 6));
    assert_eq!(unsafe { gfpc_depthnet_output_size(handle, 10, w, &mut oh, &mut ow) }, GfpcStatus::Dimension);

    let rgb = pattern(h, w);
    let mut out = vec![0f32; 8 * 6];
    assert_eq!(unsafe { gfpc_depthnet_predict(handle, rgb.as_ptr(), h, w, out.as_mut_ptr()) }, GfpcStatus::Ok);
    let expected = predict_depth(&net, &as_image(&rgb, h, w)).unwrap();
    for (a, b) in out.iter().zip(&expected.data) {
        assert_eq!(*a, *b as f32);
    }
    assert!(out.iter().all(|&v| v > 0.0));
    unsafe { gfpc_depthnet_free(handle) };
}

#[test]
fn bad_checkpoints_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = CString::new(dir.path().join("missing.ckpt").to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { gfpc_depthnet_load(missing.as_ptr(), &mut handle) }, GfpcStatus::Io);
    assert!(handle.is_null());

    let (path, _) = saved_net(dir.path());
    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let cut = CString::new(cut.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { gfpc_depthnet_load(cut.as_ptr(), &mut handle) }, GfpcStatus::Checkpoint);
    assert!(last_error().contains("truncated"));
}

#[test]
fn evaluate_worked_examples() {
    let mut r = GfpcMetricReport::default();
    let (pred, truth) = ([1.0, 3.0], [2.0, 4.0]);
    let s = unsafe { gfpc_evaluate(pred.as_ptr(), truth.as_ptr(), ptr::null(), 1, 2, 1e-3, 0.0, &mut r) };
    assert_eq!(s, GfpcStatus::Ok);
    assert_eq!((r.rel, r.rms, r.pixels), (0.375, 1.0, 2));

    let (pred, truth) = ([10.0, 1.0], [80.0, 1.0]);
    let s = unsafe { gfpc_evaluate(pred.as_ptr(), truth.as_ptr(), ptr::null(), 1, 2, 1e-3, 70.0, &mut r) };
    assert_eq!(s, GfpcStatus::Ok);
    assert_eq!((r.pixels, r.delta1, r.rel), (1, 1.0, 0.0));

    let valid = [0u8, 0];
    let s = unsafe { gfpc_evaluate(pred.as_ptr(), truth.as_ptr(), valid.as_ptr(), 1, 2, 1e-3, 0.0, &mut r) };
    assert_eq!(s, GfpcStatus::Degenerate);
}

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let header_dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let lib = target_dir().join("libgfpc_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include "gfpc.h"
#include <stdio.h>
int main(void) {
    double pred[2] = {1.0, 3.0}, truth[2] = {2.0, 4.0};
    GfpcMetricReport r;
    if (gfpc_evaluate(pred, truth, NULL, 1, 2, 1e-3, 0.0, &r) != GFPC_STATUS_OK) return 1;
    GfpcDepthNet *net = NULL;
    if (gfpc_depthnet_load("/nonexistent.ckpt", &net) != GFPC_STATUS_IO || net != NULL) return 2;
    if (gfpc_last_error_message()[0] == '\0') return 3;
    printf("%.3f %.3f %llu\n", r.rel, r.rms, (unsigned long long)r.pixels);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "0.375 1.000 2");
}
