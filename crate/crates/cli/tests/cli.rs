use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use treesplat::io::save_labelmap;
use treesplat::LabelMap;

const QUICK: &str = "global_steps = 300\nlocal_steps = 300\n";

fn treesplat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_treesplat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn treesplat")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("quick.cfg"), QUICK).unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "quick.cfg"];
        full.extend_from_slice(args);
        let o = treesplat(&full, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["synth", "--out-dir", "data"]);
    assert!(d.join("data/views.json").exists());
    run(&["train", "--data", "data", "--out-dir", "trained"]);
    assert!(d.join("trained/train_log.csv").exists());
    run(&[
        "cluster",
        "--data",
        "data",
        "--scene",
        "trained/scene.ply",
        "--out-dir",
        "clustered",
    ]);
    for f in ["scene.ply", "tree.jsonl", "csd.csv", "denoise.csv", "metrics.json"] {
        assert!(d.join("clustered").join(f).exists(), "{f}");
    }
    let o = run(&[
        "eval",
        "--data",
        "data",
        "--scene",
        "clustered/scene.ply",
        "--out-dir",
        "eval",
    ]);
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(m["ari"][0].as_f64().unwrap() >= 0.9);

    run(&["denoise", "--scene", "clustered/scene.ply", "--out-dir", "denoised"]);
    let csv = fs::read_to_string(d.join("denoised/denoise.csv")).unwrap();
    assert!(csv.starts_with("node,n,removed,restored,sigma_pos,sigma_feat\n"));
    assert_eq!(csv, fs::read_to_string(d.join("clustered/denoise.csv")).unwrap());

    run(&[
        "render",
        "--data",
        "data",
        "--scene",
        "clustered/scene.ply",
        "--view",
        "1",
        "--out-dir",
        "rendered",
    ]);
    assert!(d.join("rendered/render/view001.fmap").exists());
    assert!(d.join("rendered/render/view001_c5.pgm").exists());

    let o = run(&[
        "query",
        "--data",
        "data",
        "--scene",
        "clustered/scene.ply",
        "--view",
        "0",
        "--x",
        "0",
        "--y",
        "0",
    ]);
    let q: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(q["selection"].is_null());
}

#[test]
fn full_cluster_run_without_trained_scene() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("quick.cfg"), QUICK).unwrap();
    assert_eq!(code(&treesplat(&["synth", "--out-dir", "data"], d)), 0);
    let o = treesplat(
        &["--config", "quick.cfg", "cluster", "--data", "data", "--out-dir", "c"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("c/tree.jsonl").exists());
}

#[test]
fn seed_flag_controls_generation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (seed, out) in [("3", "a"), ("3", "b"), ("4", "c")] {
        assert_eq!(code(&treesplat(&["synth", "--seed", seed, "--out-dir", out], d)), 0);
    }
    let ply = |o: &str| fs::read(d.join(o).join("scene.ply")).unwrap();
    assert_eq!(ply("a"), ply("b"));
    assert_ne!(ply("a"), ply("c"));
}

#[test]
fn forest_refines_pgm_levels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("maps")).unwrap();
    let mut coarse = LabelMap::new(12, 12, 0);
    let mut fine = LabelMap::new(12, 12, 1);
    for h in 2..10 {
        for w in 2..10 {
            coarse.set(h, w, 1);
            fine.set(h, w, if w < 6 { 1 } else { 2 });
        }
    }
    save_labelmap(&coarse, d.join("maps/view0_l0.pgm")).unwrap();
    save_labelmap(&fine, d.join("maps/view0_l1.pgm")).unwrap();
    fs::write(d.join("f.cfg"), "min_mask_pixels = 1\n").unwrap();
    let o = treesplat(
        &["--config", "f.cfg", "forest", "--input", "maps", "--out-dir", "out"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(d.join("out/forest.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0]["parent"].is_null());
    assert_eq!(rows[1]["parent"], rows[0]["id"]);
    assert!(d.join("out/refined/view000_l1.pgm").exists());
}

#[test]
fn sweep_writes_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("s.cfg"),
        format!("{QUICK}sweep.seeds = 1\nsweep.taus = 0, 0.1\n"),
    )
    .unwrap();
    let o = treesplat(&["--config", "s.cfg", "sweep", "--out-dir", "sw"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("sw/sweep.csv")).unwrap();
    assert!(csv.starts_with("tau,arm,seed,ari,miou,runtime_s\n"));
    assert_eq!(csv.lines().count(), 5);
    assert!(fs::read_to_string(d.join("sw/sweep.svg"))
        .unwrap()
        .contains("<polyline"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&treesplat(&["frobnicate"], d)), 1);
    assert_eq!(code(&treesplat(&["train"], d)), 1);
    fs::write(d.join("bad.cfg"), "lr = 0.01\nwarp_factor = 9\n").unwrap();
    let o = treesplat(&["--config", "bad.cfg", "synth"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert_eq!(code(&treesplat(&["--config", "missing.cfg", "synth"], d)), 1);
    assert_eq!(code(&treesplat(&["--help"], d)), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&treesplat(&["train", "--data", "nowhere"], d)), 2);
    assert_eq!(code(&treesplat(&["synth", "--out-dir", "data"], d)), 0);
    // the raw dataset scene has no cluster ids
    let o = treesplat(&["eval", "--data", "data", "--scene", "data/scene.ply"], d);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    fs::write(d.join("data/scene.ply"), "ply\nformat ascii 1.0\nend_header\n").unwrap();
    assert_eq!(code(&treesplat(&["train", "--data", "data"], d)), 2);
}

#[test]
fn divergence_exits_three_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&treesplat(&["synth", "--out-dir", "data"], d)), 0);
    fs::write(d.join("nan.cfg"), "lr = 1e300\nglobal_steps = 20\n").unwrap();
    let o = treesplat(
        &["--config", "nan.cfg", "cluster", "--data", "data", "--out-dir", "c"],
        d,
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(d.join("c/train_log.csv").exists());
    assert!(!d.join("c/tree.jsonl").exists());
}
