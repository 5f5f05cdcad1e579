use std::path::Path;
use std::process::{Command, Output};

fn gfpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfpc")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pngs(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    names
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gfpc(&[]).status.code(), Some(1));
    assert_eq!(gfpc(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(gfpc(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gfpc(&["--help"]).status.code(), Some(0));
    assert_eq!(gfpc(&["--version"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfpc(&["eval", "--data", s(&dir.path().join("missing")), "--ckpt", "x.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error kind="));

    let out = gfpc(&["synth", "--out", s(dir.path()), "--n", "2", "--seed", "0", "--size", "15"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=config"));
}

#[test]
fn synth_then_gradfield_writes_one_field_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let fields = dir.path().join("fields");
    assert!(gfpc(&["synth", "--out", s(&data), "--n", "4", "--seed", "1", "--size", "32"]).status.success());
    let out = gfpc(&["gradfield", "--in", s(&data.join("rgb")), "--out", s(&fields)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let names = pngs(&fields);
    assert_eq!(names, pngs(&data.join("rgb")));
    assert_eq!(names.len(), 4);
    for name in names {
        let img = image::open(fields.join(&name)).unwrap().into_luma8();
        assert_eq!(img.dimensions(), (32, 32));
        assert_eq!(img.pixels().map(|p| p.0[0]).max(), Some(255));
    }
}

#[test]
fn raw_gradfield_has_size_header() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gfpc(&["synth", "--out", s(&data), "--n", "1", "--seed", "2", "--size", "16", "--test-fraction", "0"])
        .status
        .success());
    let raw = dir.path().join("field.raw");
    let out = gfpc(&["gradfield", "--in", s(&data.join("rgb/00000.png")), "--out", s(&raw), "--raw"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = std::fs::read(&raw).unwrap();
    assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 16);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 16);
    assert_eq!(bytes.len(), 8 + 16 * 16 * 4);
    let max = bytes[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).fold(0.0, f32::max);
    assert_eq!(max, 1.0);
}

#[test]
fn finetune_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(gfpc(&["synth", "--out", s(&data), "--n", "8", "--seed", "4", "--size", "32"]).status.success());
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "encoder.widths = 4,8\nhead.hidden = 8\nhead.dim = 4\nfinetune.epochs = 1\n").unwrap();
    let ckpt = dir.path().join("depth.ckpt");
    let out = gfpc(&[
        "finetune",
        "--data",
        s(&data),
        "--init",
        "random",
        "--fraction",
        "1",
        "--out",
        s(&ckpt),
        "--log",
        s(&dir.path().join("ft.csv")),
        "--config",
        s(&cfg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(dir.path().join("ft.csv")).unwrap().starts_with("epoch,loss\n1,"));

    let pred = dir.path().join("pred.png");
    let out = gfpc(&["predict", "--in", s(&data.join("rgb/00007.png")), "--ckpt", s(&ckpt), "--out", s(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&pred).unwrap().into_luma16();
    assert_eq!(img.dimensions(), (16, 16));
    assert!(img.pixels().all(|p| p.0[0] > 0));

    let protocol = dir.path().join("proto.txt");
    std::fs::write(&protocol, "crop = eigen\nmax_depth = 70\n").unwrap();
    let report = dir.path().join("eval.csv");
    let out = gfpc(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--protocol", s(&protocol), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("delta1,delta2,delta3,rel,rms,log10"));
    assert_eq!(lines.next().unwrap().split(',').count(), 6);

    // a depth checkpoint is not a pretraining checkpoint for a different encoder
    let other = dir.path().join("other.cfg");
    std::fs::write(&other, "encoder.widths = 4,6\nhead.hidden = 8\nhead.dim = 4\n").unwrap();
    let out = gfpc(&[
        "finetune",
        "--data",
        s(&data),
        "--init",
        s(&ckpt),
        "--fraction",
        "1",
        "--out",
        s(&dir.path().join("x.ckpt")),
        "--config",
        s(&other),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = gfpc(&["pretrain", "--data", s(dir.path()), "--out", "x.ckpt", "--set", "temperature=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=config"));
}
