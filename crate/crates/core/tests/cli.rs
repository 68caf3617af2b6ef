use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sgfi::checkpoint::load_checkpoint;
use sgfi::data::read_ppm;

const TINY: &str = "\
# small enough for a test
seed = 3
frame_size = 16
train_count = 4
val_count = 2
widths = 4, 6
head_width = 4
epochs = 1
batch_size = 2
crop = none
sparsify_epochs = 2
sparsify_p_epochs = 1
lambda = 0.5
retrain_epochs = 1
enhance_epochs = 1
pyramid_widths = 2, 3
grid_rows = 2
grid_cols = 2
grid_widths = 4, 6
enhance_head_width = 4
";

fn sgfi(dir: &Path, args: &[&str]) -> Output {
    let mut full = vec!["--config", "tiny.cfg", "--out-dir", "out"];
    full.extend_from_slice(args);
    Command::new(env!("CARGO_BIN_EXE_sgfi"))
        .current_dir(dir)
        .args(&full)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = sgfi(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn every_subcommand_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();

    ok(d, &["gen-data", "--data", "data"]);
    assert!(d.join("data/train/00003/im2.ppm").exists());
    assert!(d.join("data/val/manifest.json").exists());

    ok(d, &["train", "--data", "data"]);
    let base = load_checkpoint(&d.join("out/baseline.sgfi")).unwrap();
    assert_eq!(base.metadata.stage, "train");
    assert_eq!(base.metadata.seed, 3);

    ok(d, &["sparsify", "--data", "data", "--ckpt", "out/baseline.sgfi"]);
    let csv = fs::read_to_string(d.join("out/trajectory.csv")).unwrap();
    assert!(csv.starts_with("epoch,density,loss,psnr\n1,"));
    assert_eq!(csv.lines().count(), 3);

    ok(d, &["profile", "--ckpt", "out/sparse.sgfi", "--out", "out/profile.json"]);
    let prof: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("out/profile.json")).unwrap()).unwrap();
    let layer = &prof["layers"][0];
    for key in ["layer", "K", "zeros", "sparsity", "density"] {
        assert!(layer.get(key).is_some(), "profile entry lacks {key}");
    }

    ok(d, &["reconstruct", "--ckpt", "out/sparse.sgfi", "--strategy", "max"]);
    let compact = load_checkpoint(&d.join("out/compact_init.sgfi")).unwrap();
    assert!(compact.model.param_count() <= base.model.param_count());

    ok(d, &["retrain", "--data", "data", "--ckpt", "out/compact_init.sgfi"]);
    ok(d, &["enhance", "--data", "data", "--ckpt", "out/compact.sgfi"]);
    let enh = load_checkpoint(&d.join("out/enhanced.sgfi")).unwrap();
    assert!(enh.model.is_enhanced());

    ok(
        d,
        &[
            "interpolate",
            "--in0",
            "data/val/00000/im1.ppm",
            "--in1",
            "data/val/00000/im3.ppm",
            "--ckpt",
            "out/enhanced.sgfi",
            "--out",
            "mid.ppm",
        ],
    );
    assert_eq!(read_ppm(&d.join("mid.ppm")).unwrap().shape(), &[3, 16, 16]);

    let line = ok(d, &["eval", "--ckpt", "out/enhanced.sgfi", "--data", "data/val", "--report", "r.json"]);
    assert!(line.contains("PSNR"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["params"].as_u64().unwrap() as usize, enh.model.param_count());
    assert_eq!(report["samples"].as_array().unwrap().len(), 2);

    ok(d, &["enhance", "--data", "data", "--ckpt", "out/compact.sgfi", "--baseline", "out/baseline.sgfi", "--ablation", "ablation.json"]);
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ablation.json")).unwrap()).unwrap();
    let labels: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["baseline", "compressed", "+FP", "+FP+1x1", "+FP+1x1+PS"]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();

    let o = sgfi(d, &["--bogus", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(sgfi(d, &["--set", "no_such_key=1", "gen-data"]).status.code(), Some(1));
    assert_eq!(sgfi(d, &["--set", "frame_size=banana", "gen-data"]).status.code(), Some(1));
    assert_eq!(sgfi(d, &["--help"]).status.code(), Some(0));

    let o = sgfi(d, &["eval", "--ckpt", "missing.sgfi", "--data", "nowhere", "--report", "r.json"]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(d.join("junk.sgfi"), b"not a checkpoint").unwrap();
    let o = sgfi(d, &["profile", "--ckpt", "junk.sgfi", "--out", "p.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad magic"));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(d, &["--seed", "9", "--set", "train_count=2", "--set", "val_count=1", "gen-data", "--data", "a"]);
    ok(d, &["--set", "seed=9", "--set", "train_count=2", "--set", "val_count=1", "gen-data", "--data", "b"]);
    assert!(!d.join("a/train/00002").exists());
    assert_eq!(
        fs::read(d.join("a/train/00001/im2.ppm")).unwrap(),
        fs::read(d.join("b/train/00001/im2.ppm")).unwrap()
    );
    ok(d, &["gen-data", "--data", "c"]);
    assert_ne!(
        fs::read(d.join("a/train/00001/im2.ppm")).unwrap(),
        fs::read(d.join("c/train/00001/im2.ppm")).unwrap()
    );
}
