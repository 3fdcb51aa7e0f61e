//! Runs the `stbn` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use stbn::io::{write_pfm_file, GrayImage};
use stbn::SampleTile;

fn stbn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stbn")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn optimize(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join(name);
    let mut args = vec![
        "optimize", "--tile", "16x16x8", "--kernel", "taa", "--batch", "64", "--quiet", "--out", p(&out),
    ];
    args.extend_from_slice(extra);
    let o = stbn(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

#[test]
fn optimize_writes_tile_log_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let tile = optimize(dir.path(), "t.stbn", &["--iters", "20"]);
    let log = dir.path().join("t.convergence.csv");
    let rows = csv_rows(&log);
    assert_eq!(rows.len(), 20);
    let header = csv::Reader::from_path(&log).unwrap().headers().unwrap().clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), ["iteration", "objective", "empty_subset_count", "wall_ms"]);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("t.meta.json")).unwrap()).unwrap();
    assert!(meta.is_object());
    let t = SampleTile::read_from(std::fs::File::open(tile).unwrap()).unwrap();
    assert_eq!(t.dims(), [16, 16, 8]);
}

#[test]
fn zero_iterations_keep_the_initial_tile() {
    let dir = tempfile::tempdir().unwrap();
    let init = dir.path().join("init.stbn");
    let tile = SampleTile::init_random([16, 16, 8], 1, 2, 5).unwrap();
    tile.write_to(std::fs::File::create(&init).unwrap()).unwrap();
    let out = optimize(dir.path(), "out.stbn", &["--iters", "0", "--init", p(&init)]);
    assert_eq!(std::fs::read(out).unwrap(), std::fs::read(&init).unwrap());
}

#[test]
fn constant_scene_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let tile = optimize(dir.path(), "t.stbn", &["--iters", "5"]);
    let csv = dir.path().join("m.csv");
    let o = stbn(&[
        "evaluate", "--tile", p(&tile), "--scene", "constant", "--width", "32", "--height", "32", "--frames", "16",
        "--out", p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&csv);
    assert_eq!(rows.len(), 16);
    for r in rows {
        assert!(r[1].parse::<f64>().unwrap().abs() < 1e-20);
        assert!(r[2].parse::<f64>().unwrap().abs() < 1e-20);
    }
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let tile = optimize(dir.path(), "t.stbn", &["--iters", "2"]);

    let frame = stbn(&["evaluate", "--tile", p(&tile), "--frames", "8", "--frame", "9", "--out", p(&dir.path().join("m.csv"))]);
    assert_eq!(code(&frame), 2);
    assert!(String::from_utf8_lossy(&frame.stderr).contains("1..=8"));

    let missing = stbn(&["evaluate", "--tile", p(&dir.path().join("nope.stbn"))]);
    assert_eq!(code(&missing), 3);

    let corrupt = dir.path().join("bad.stbn");
    std::fs::write(&corrupt, b"STBNTILE but not really").unwrap();
    assert_eq!(code(&stbn(&["info", p(&corrupt)])), 4);

    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"tile": "16x16x8", "no_such_key": 1}"#).unwrap();
    let unknown = stbn(&["optimize", "--config", p(&config)]);
    assert_eq!(code(&unknown), 2);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("no-such-key"));

    assert_eq!(code(&stbn(&["optimize", "--batch", "0", "--tile", "16x16x8"])), 2);
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"tile": "16x16x8", "kernel": "taa", "iters": 3, "batch": 32, "seed": 4}"#).unwrap();
    let out = dir.path().join("t.stbn");
    let o = stbn(&["optimize", "--config", p(&config), "--seed", "9", "--quiet", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let info = stbn(&["info", p(&out)]);
    let v: serde_json::Value = serde_json::from_slice(&info.stdout).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["dims"], serde_json::json!([16, 16, 8]));
}

#[test]
fn white_noise_band_ratio_tracks_the_area_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let mut ratios = Vec::new();
    let mut area = 0.0;
    for seed in 1..=4 {
        let prefix = format!("w{seed}");
        let o = stbn(&[
            "spectrum", "--white-noise", "32x32x8", "--seed", &seed.to_string(), "--scene", "ramp", "--frames",
            "32", "--radii", "0.5", "--out-dir", p(dir.path()), "--prefix", &prefix,
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(dir.path().join(format!("{prefix}_xy.png")).exists());
        assert!(dir.path().join(format!("{prefix}_xt.png")).exists());
        for r in csv_rows(&dir.path().join(format!("{prefix}_bands.csv"))) {
            ratios.push(r[2].parse::<f64>().unwrap());
            area = r[3].parse::<f64>().unwrap();
        }
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean / area - 1.0).abs() < 0.15, "mean ratio {mean}, area {area}");
}

#[test]
fn constant_error_has_an_empty_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let frames: Vec<String> = (0..4)
        .map(|t| {
            let path = dir.path().join(format!("e{t}.pfm"));
            write_pfm_file(&path, &GrayImage::new(16, 16, vec![0.25; 256]).unwrap()).unwrap();
            path.to_str().unwrap().to_string()
        })
        .collect();
    let mut args = vec!["spectrum", "--frame", "2", "--out-dir", p(dir.path())];
    for f in &frames {
        args.push("--error-pfm");
        args.push(f);
    }
    let o = stbn(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for r in csv_rows(&dir.path().join("spectrum_bands.csv")) {
        assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
    }
}
