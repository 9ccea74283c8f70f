use std::path::Path;
use std::process::{Command, Output};

use depthscape::data::png_io;
use depthscape::{depth_order_valid, LabelSet};

const TINY: &str = r#"{"output_resolution":16,"base_latent_shape":[4,8,8],"z_dim":8,"mapping_hidden":8,"mapping_layers":2,"channels":[4,4],"optim":{"batch":2}}"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthscape"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn depthscape")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "depthscape {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn trained(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(dir, &["dataset", "build", "--out", "ds", "--count", "4", "--resolution", "16"]);
    for mode in ["s2d", "sd2i"] {
        ok(
            dir,
            &["train", "--mode", mode, "--config", "tiny.json", "--dataset", "ds", "--steps", "2", "--out", mode],
        );
    }
}

#[test]
fn infer_writes_candidates_selection_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let seg = std::fs::read_dir(d.join("ds/seg")).unwrap().next().unwrap().unwrap().path();
    ok(
        d,
        &[
            "infer", "--s2d", "s2d/checkpoint.dsck", "--sd2i", "sd2i/checkpoint.dsck", "--seg", seg.to_str().unwrap(),
            "--n-depths", "4", "--pick", "2", "--n-images", "4", "--out", "inf",
        ],
    );
    let mut pngs: Vec<String> = std::fs::read_dir(d.join("inf"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    pngs.sort();
    assert_eq!(
        pngs,
        [
            "depth_0.png", "depth_1.png", "depth_2.png", "depth_3.png", "depth_selected.png", "image_0.png", "image_1.png",
            "image_2.png", "image_3.png"
        ]
    );
    assert_eq!(
        std::fs::read(d.join("inf/depth_2.png")).unwrap(),
        std::fs::read(d.join("inf/depth_selected.png")).unwrap()
    );
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("inf/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 9);
}

#[test]
fn order_violating_shift_fails_with_one_line_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let seg_path = std::fs::read_dir(d.join("ds/seg")).unwrap().next().unwrap().unwrap().path();
    let base = [
        "infer", "--s2d", "s2d/checkpoint.dsck", "--sd2i", "sd2i/checkpoint.dsck", "--seg", seg_path.to_str().unwrap(),
        "--n-images", "1",
    ];
    ok(d, &[&base[..], &["--out", "plain"]].concat());
    let seg = png_io::decode_segmentation(&std::fs::read(&seg_path).unwrap(), &LabelSet::default()).unwrap();
    let depth = png_io::decode_depth(&std::fs::read(d.join("plain/depth_selected.png")).unwrap()).unwrap();
    let ranking = depth_order_valid(&depth, &seg).unwrap();
    assert!(ranking.len() >= 2);
    let nearest = LabelSet::default().name(ranking[0]).unwrap().to_string();
    let shift = format!("{nearest}:+1.0");
    let out = run(d, &[&base[..], &["--shift", &shift, "--out", "bad"]].concat());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error: "), "{err}");
    assert!(last.contains("edit 0"), "{last}");
    assert!(!d.join("bad/image_0.png").exists());
}

#[test]
fn resolution_mismatch_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(d, &["dataset", "build", "--out", "ds32", "--count", "2", "--resolution", "32"]);
    let out = run(
        d,
        &["train", "--mode", "sd2i", "--config", "tiny.json", "--dataset", "ds32", "--steps", "1", "--out", "t"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("resolution"), "{err}");
    assert!(!d.join("t/checkpoint.dsck").exists());
}

#[test]
fn unknown_flags_and_missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["train", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--frobnicate"));
    let out = run(dir.path(), &["eval", "--dataset", "nowhere", "--checkpoint", "none.dsck", "--out", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
    ok(dir.path(), &["dataset", "build", "--out", "ds", "--count", "2", "--resolution", "16"]);
    let out = run(dir.path(), &["eval", "--dataset", "ds", "--checkpoint", "none.dsck", "--out", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.dsck"));
}
