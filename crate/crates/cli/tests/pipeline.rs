use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "seed = 3
humans = 10
robots = 6
d_model = 16
layers = 1
heads = 2
context = 4
pretrain_epochs = 2
finetune_epochs = 2
chains = 3
max_steps = 15
";

fn handmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_handmap")).current_dir(dir).env("RUST_LOG", "warn").args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = handmap(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    (tmp, dir)
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let (_t, d) = workspace();
    ok(&d, &["generate", "--config", "small.toml", "--out", "a"]);
    ok(&d, &["generate", "--config", "small.toml", "--out", "b"]);
    for f in ["humans.jsonl", "robots.jsonl"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    ok(&d, &["generate", "--config", "small.toml", "--seed", "4", "--out", "c"]);
    assert_ne!(fs::read(d.join("a/humans.jsonl")).unwrap(), fs::read(d.join("c/humans.jsonl")).unwrap());
}

#[test]
fn bad_output_or_config_fails_without_writing() {
    let (_t, d) = workspace();
    fs::write(d.join("taken"), "x").unwrap();
    fs::create_dir(d.join("full")).unwrap();
    fs::write(d.join("full/keep"), "x").unwrap();
    for out in ["taken", "full"] {
        let r = handmap(&d, &["generate", "--config", "small.toml", "--out", out]);
        assert!(!r.status.success());
    }
    assert_eq!(files(&d.join("full")), ["keep"]);
    let r = handmap(&d, &["generate", "--out", "noseed"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("seed"));
    let r = handmap(&d, &["generate", "--config", "small.toml", "--split", "nowhere", "--out", "x"]);
    assert!(!r.status.success());
    let r = handmap(&d, &["pretrain", "--config", "small.toml", "--episodes", "missing", "--out", "y"]);
    assert!(!r.status.success());
    assert_eq!(files(&d), ["full", "small.toml", "taken"]);
}

#[test]
fn pipeline_reruns_bit_identically_and_checks_fingerprints() {
    let (_t, d) = workspace();
    let c = ["--config", "small.toml"];
    let run = |args: &[&str]| ok(&d, &[args, &c[..]].concat());
    run(&["generate", "--out", "ep"]);
    run(&["pretrain", "--episodes", "ep", "--out", "pt"]);
    run(&["build-index", "--checkpoint", "pt", "--episodes", "ep", "--out", "ix"]);
    run(&["finetune", "--episodes", "ep", "--checkpoint", "pt", "--index", "ix", "--out", "ft"]);
    run(&["finetune", "--episodes", "ep", "--auxiliary", "none", "--seed", "5", "--out", "scratch"]);
    run(&["eval", "--checkpoint", "scratch", "--checkpoint", "ft", "--out", "ev"]);
    run(&["export-map", "--checkpoint", "ft", "--out", "map"]);
    run(&["retrieve", "--checkpoint", "pt", "--index", "ix", "--episodes", "ep", "--j", "2", "--out", "rt"]);

    assert_eq!(files(&d.join("ev")), ["manifest.json", "reports.csv", "trace_ft.csv", "trace_scratch.csv"]);
    let reports = fs::read_to_string(d.join("ev/reports.csv")).unwrap();
    assert_eq!(reports.lines().count(), 3);
    let hits = fs::read_to_string(d.join("rt/hits.csv")).unwrap();
    assert_eq!(hits.lines().count(), 1 + 6 * 2);

    let map = fs::read_to_string(d.join("map/map.csv")).unwrap();
    let rows: Vec<Vec<f64>> =
        map.lines().skip(1).map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for k in 0..rows[0].len() {
        let s: f64 = rows.iter().map(|r| r[k]).sum();
        assert!((s - 1.0).abs() < 1e-12, "column {k} sums to {s}");
    }

    ok(&d, &["rerun", "--manifest", "ft", "--out", "ft2"]);
    ok(&d, &["rerun", "--manifest", "ev/manifest.json", "--out", "ev2"]);
    for (a, b) in [("ft", "ft2"), ("ev", "ev2")] {
        for f in files(&d.join(a)).iter().filter(|f| *f != "manifest.json") {
            assert_eq!(fs::read(d.join(a).join(f)).unwrap(), fs::read(d.join(b).join(f)).unwrap(), "{a}/{f}");
        }
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ft/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 3);
    assert_eq!(m["stage"], "finetune");
    assert!(m["inputs"]["index"]["sha256"].as_str().unwrap().len() == 64);
    assert!(m["outputs"]["model.ckpt"].is_string());

    // An index built with another model's encoders is refused.
    let r = handmap(&d, &[&["finetune", "--episodes", "ep", "--checkpoint", "scratch", "--index", "ix", "--out", "bad"], &c[..]].concat());
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("does not match"), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(!d.join("bad").exists());

    // Changed inputs block a rerun.
    fs::write(d.join("ep/robots.jsonl"), "").unwrap();
    let r = handmap(&d, &["rerun", "--manifest", "ft", "--out", "ft3"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("changed"));
}
