use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

fn tsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsf")).args(args).args(["--log", "error"]).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = tsf(args);
    assert!(out.status.success(), "tsf {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
}

fn spec() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synth_spec.toml").display().to_string()
}

/// Synthetic data plus a quickly trained stage-1 checkpoint.
fn setup(dir: &Path) -> (String, String) {
    let p = |s: &str| dir.join(s).display().to_string();
    std::fs::write(dir.join("cfg.toml"), "[data]\npairs = 4\nsynthetic_count = 2\nsynthetic_length = 8\n[stage1]\nepochs = 1\nbatch_size = 2\n").unwrap();
    ok(&["synth", "--spec", &spec(), "--out", &p("data")]);
    ok(&["train", "--config", &p("cfg.toml"), "--stage", "1", "--out", &p("ck")]);
    (p("data"), p("ck/model.ckpt"))
}

fn column(jsonl: &str, key: &str) -> Vec<String> {
    jsonl
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()[key].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    assert_eq!(tsf(&["track", "--bogus"]).status.code(), Some(1));
    std::fs::write(dir.path().join("bad.toml"), "[stage1]\nepochz = 2\n").unwrap();
    let out = tsf(&["train", "--config", &p("bad.toml"), "--stage", "1", "--out", &p("o")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    let out = tsf(&["track", "--checkpoint", &p("missing.ckpt"), "--dataset", &p("d"), "--out", &p("o")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(tsf(&["train", "--stage", "2", "--out", &p("o")]).status.code(), Some(1));
    assert_eq!(tsf(&["track", "--checkpoint", "x", "--dataset", "d", "--out", "o", "--no-update", "--tsf-only"]).status.code(), Some(1));
}

#[test]
fn track_outputs_and_frozen_bank() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = setup(dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    ok(&["track", "--checkpoint", &ck, "--dataset", &data, "--out", &p("full"), "--debug-dump"]);
    ok(&["track", "--checkpoint", &ck, "--dataset", &data, "--out", &p("frozen"), "--debug-dump", "--no-update"]);

    let ids: BTreeSet<String> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(ids.len(), 2);
    for id in &ids {
        let frames = std::fs::read_to_string(dir.path().join("data").join(id).join("groundtruth.txt")).unwrap().lines().count();
        for run in ["full", "frozen"] {
            let txt = std::fs::read_to_string(dir.path().join(run).join(format!("{id}.txt"))).unwrap();
            assert_eq!(txt.lines().count(), frames, "{run}/{id}");
            let side: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join(run).join(format!("{id}.json"))).unwrap()).unwrap();
            let secs: f64 = side["seconds"].as_array().unwrap().iter().map(|s| s.as_f64().unwrap()).sum();
            let fps = side["fps"].as_f64().unwrap();
            assert!((fps * secs - frames as f64).abs() < 1e-6 * frames as f64, "fps inconsistent with per-frame times");
        }
        let frozen = std::fs::read_to_string(dir.path().join("frozen/debug").join(format!("{id}.jsonl"))).unwrap();
        let full = std::fs::read_to_string(dir.path().join("full/debug").join(format!("{id}.jsonl"))).unwrap();
        // frozen: the matching template never moves; z_cu is still extracted for inspection
        for key in ["z_in", "z_ac"] {
            let col = column(&frozen, key);
            assert!(col.windows(2).all(|w| w[0] == w[1]), "{key} changed without updates");
        }
        // a stage-1 checkpoint has zero update weights, so z_ac stays at z_in; z_cu still follows the target
        let cu = column(&full, "z_cu");
        assert!(cu.windows(2).any(|w| w[0] != w[1]), "current template never refreshed");
        assert_eq!(column(&full, "z_ac"), column(&full, "z_in"));
        let z_in = column(&full, "z_in");
        assert!(z_in.windows(2).all(|w| w[0] == w[1]), "initial template must stay fixed");
    }
    assert!(dir.path().join("full/manifest.json").is_file());
}

#[test]
fn eval_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ck) = setup(dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    ok(&["track", "--checkpoint", &ck, "--dataset", &data, "--out", &p("run")]);
    ok(&["eval", "--results", &p("run"), "--dataset", &data, "--out", &p("eval"), "--plots"]);
    let rep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval/report.json")).unwrap()).unwrap();
    let auc = rep["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(dir.path().join("eval/plots").is_dir());
    ok(&["compare", &p("eval/report.json"), &p("eval/report.json"), "--out", &p("cmp")]);
    let csv = std::fs::read_to_string(dir.path().join("cmp/comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    ok(&["overlay", "--results", &p("run"), "--dataset", &data, "--out", &p("ov")]);
    assert!(dir.path().join("ov/legend.json").is_file());
}
