use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blockfield::field::{load_checkpoint, FieldConfig, FieldParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CONFIG: &str = r#"
[palette]
blocks = ["stone", "sand", "gold_block"]

[field]
air_hidden = [16]
block_hidden = [16]
background_hidden = [8]

[train]
steps = 2
grid_size = 4
image_size = 8
views_per_step = 1
seed = 5

[turntable]
frames = 2
size = 8
"#;

fn blockfield(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockfield"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = blockfield(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    blockfield(args, cwd).status.code().expect("exited normally")
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (dir, cfg)
}

fn manifest_hash(path: &Path) -> String {
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v["hash"].as_str().unwrap().to_string()
}

#[test]
fn zero_steps_writes_the_initialization() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--steps", "0", "--out", "run"], d);
    let (params, extra) = load_checkpoint(&d.join("run/field.ckpt")).unwrap();
    let expected = FieldParams::new(
        FieldConfig {
            num_blocks: 3,
            air_hidden: vec![16],
            block_hidden: vec![16],
            background_hidden: vec![8],
            ..FieldConfig::default()
        },
        &mut ChaCha8Rng::seed_from_u64(5),
    );
    assert_eq!(params.config, expected.config);
    assert_eq!(params.flat(), expected.flat());
    assert_eq!(extra["step"], 0);
    assert_eq!(std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap(), "");
}

#[test]
fn generate_writes_every_artifact() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", "run"], d);
    for f in ["field.ckpt", "grid.bfs", "manifest.json", "turntable/rgb_000.png", "turntable/rgb_001.png", "turntable/views.json"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["train"]["grid_size"], 4);
    assert_eq!(m["palette_hash"].as_str().unwrap().len(), 64);
    assert!(m["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("run.toml")));
}

#[test]
fn identical_manifests_reproduce_identical_artifacts() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    ok(&["generate", "--config", c, "--steps", "0", "--out", "init"], d);
    ok(&["render", "--checkpoint", "init/field.ckpt", "--views", "3", "--size", "8", "--out", "targets"], d);
    for out in ["a", "b"] {
        ok(&["generate", "--config", c, "--target-views", "targets", "--seed", "9", "--out", out], d);
    }
    assert_eq!(manifest_hash(&d.join("a/manifest.json")), manifest_hash(&d.join("b/manifest.json")));
    for f in ["field.ckpt", "grid.bfs", "turntable/rgb_000.png"] {
        assert_eq!(std::fs::read(d.join("a").join(f)).unwrap(), std::fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    ok(&["generate", "--config", c, "--target-views", "targets", "--seed", "10", "--out", "c"], d);
    assert_ne!(manifest_hash(&d.join("a/manifest.json")), manifest_hash(&d.join("c/manifest.json")));
}

#[test]
fn export_then_import_gives_the_same_grid_hash() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", "run"], d);
    for (file, flags) in [("grid.bfs", &[][..]), ("grid.schem", &["--schem"][..])] {
        let mut args = vec!["export", "--checkpoint", "run/field.ckpt", "--out", file];
        args.extend_from_slice(flags);
        let exported = ok(&args, d).trim().to_string();
        let summary: serde_json::Value = serde_json::from_str(&ok(&["import", file], d)).unwrap();
        assert_eq!(summary["hash"], exported.as_str(), "{file}");
        assert_eq!(summary["size"], 4);
        assert!(d.join(format!("{file}.manifest.json")).is_file());
    }
}

#[test]
fn render_writes_rgb_and_depth_frames() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", "run"], d);
    ok(&["render", "--checkpoint", "run/field.ckpt", "--views", "3", "--size", "8", "--depth", "--out", "frames"], d);
    for i in 0..3 {
        assert!(d.join(format!("frames/rgb_{i:03}.png")).is_file());
        assert!(d.join(format!("frames/depth_{i:03}.png")).is_file());
    }
    let index: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("frames/views.json")).unwrap()).unwrap();
    assert_eq!(index["views"].as_array().unwrap().len(), 3);
}

#[test]
fn baseline_quantizes_a_synthetic_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("field.toml"),
        "[[shapes]]\nkind = \"box\"\nmin = [0.0, 0.0, 0.0]\nmax = [1.0, 0.5, 1.0]\ncolor = [0.5, 0.5, 0.5]\ndensity = 20.0\n",
    )
    .unwrap();
    let out = ok(&["baseline", "--field", "field.toml", "--threshold", "10", "--grid-size", "4", "--out", "base.bfs"], d);
    assert!(out.starts_with("32 solid cells"), "{out}");
    let summary: serde_json::Value = serde_json::from_str(&ok(&["import", "base.bfs"], d)).unwrap();
    assert_eq!(summary["solid"], 32);
    let none = ok(&["baseline", "--field", "field.toml", "--threshold", "25", "--grid-size", "4"], d);
    assert!(none.starts_with("0 solid cells"), "{none}");
}

#[test]
fn sweep_emits_nine_quantization_rows_with_two_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["sweep", "--axes", "quantization", "--steps", "1", "--image-size", "4", "--out", "sw"], d);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("quantization\t")).collect();
    assert_eq!(rows.len(), 9);
    for r in &rows {
        let cols: Vec<&str> = r.split('\t').collect();
        assert!(cols[4].parse::<f64>().is_ok() && cols[5].parse::<f64>().is_ok(), "{r}");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("sw/quantization.json")).unwrap()).unwrap();
    let json = json.as_array().unwrap();
    assert_eq!(json.len(), 9);
    let mut modes: Vec<(String, String)> = json
        .iter()
        .map(|r| {
            assert!(r["psnr_rgb"].is_number() && r["psnr_depth"].is_number());
            (r["block_mode"].as_str().unwrap().into(), r["air_mode"].as_str().unwrap().into())
        })
        .collect();
    modes.sort();
    modes.dedup();
    assert_eq!(modes.len(), 9);
}

#[test]
fn eval_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("scores.json"),
        r#"{"captions": ["a", "b"], "scores": [[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.4, 0.6]], "true_caption": [0, 1, 0, 0]}"#,
    )
    .unwrap();
    // Caption a: 2 of 3 render sets retrieve it; caption b: 1 of 1.
    let rp: f64 = ok(&["eval", "r-precision", "--scores", "scores.json"], d).trim().parse().unwrap();
    assert!((rp - (2.0 / 3.0 + 1.0) / 2.0 * 100.0).abs() < 0.01, "{rp}");

    let (dir2, cfg) = workspace();
    let d2 = dir2.path();
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--out", "run"], d2);
    assert_eq!(ok(&["eval", "psnr", "--a", "run/turntable/rgb_000.png", "--b", "run/turntable/rgb_000.png"], d2).trim(), "inf");
    let p: f64 = ok(&["eval", "psnr", "--a", "run/turntable/rgb_000.png", "--b", "run/turntable/rgb_001.png"], d2).trim().parse().unwrap();
    assert!(p.is_finite() && p > 0.0);
}

#[test]
fn exit_codes() {
    let (dir, cfg) = workspace();
    let d = dir.path();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&["render", "--checkpoint", "missing.ckpt"], d), 2);
    assert_eq!(code(&["render", "--checkpoint", "x", "--bogus"], d), 2);
    assert_eq!(code(&["eval", "psnr", "--a", "missing.png", "--b", "missing.png"], d), 2);
    assert_eq!(code(&["sweep", "--axes", "colour"], d), 2);

    std::fs::write(d.join("bad.toml"), "[train]\nsteps = \"many\"\n").unwrap();
    assert_eq!(code(&["generate", "--config", "bad.toml"], d), 2);
    std::fs::write(d.join("typo.toml"), "stpes = 3\n").unwrap();
    assert_eq!(code(&["generate", "--config", "typo.toml"], d), 2);
    assert_eq!(code(&["generate", "--config", c, "--grid-size", "0", "--out", "z"], d), 2);
    assert_eq!(code(&["generate", "--config", c, "--guidance-url", "http://127.0.0.1:9"], d), 2);

    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("http://127.0.0.1:{port}");
    assert_eq!(code(&["generate", "--config", c, "--guidance-url", &url, "--prompt", "a hut", "--out", "net"], d), 4);

    ok(&["generate", "--config", c, "--out", "run"], d);
    std::fs::write(d.join("file"), "").unwrap();
    assert_eq!(code(&["export", "--checkpoint", "run/field.ckpt", "--out", "file/grid.bfs"], d), 3);
    std::fs::write(d.join("garbage.ckpt"), "not a checkpoint").unwrap();
    assert_eq!(code(&["export", "--checkpoint", "garbage.ckpt", "--out", "g.bfs"], d), 2);
}
