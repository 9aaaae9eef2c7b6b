use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn lfr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lfr"))
        .args(args)
        .env("LFR_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lfr")
}

fn ok(args: &[&str]) -> Output {
    let out = lfr(args);
    assert!(
        out.status.success(),
        "lfr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    train_cfg: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let gen_cfg = root.join("gen.json");
    std::fs::write(&gen_cfg, r#"{"spec":{"height":16,"width":16,"seed":5},"n_train":6,"n_val":4}"#).unwrap();
    let train_cfg = root.join("train.json");
    std::fs::write(
        &train_cfg,
        r#"{
  "model": {"backbone": {"image_height":16,"image_width":16,"patch_size":4,"depth":4,"width":8,"heads":2,"mlp_ratio":2.0},
            "k": 2},
  "optim": {"epochs": 3, "batch_size": 2}
}"#,
    )
    .unwrap();
    let data = root.join("data");
    ok(&["generate", "--config", s(&gen_cfg), "--out", s(&data)]);
    Fixture {
        _dir: dir,
        root,
        data,
        train_cfg,
    }
}

#[test]
fn generate_train_eval_analyze_select() {
    let f = fixture();
    assert!(f.data.join("manifest.json").exists());
    let run = f.root.join("run");
    ok(&["train", "--config", s(&f.train_cfg), "--data", s(&f.data), "--out", s(&run), "--seed", "3"]);
    for file in ["config.json", "run_info.json", "train_log.jsonl", "best.ckpt", "final.ckpt", "final_metrics.json"] {
        assert!(run.join(file).exists(), "{file} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ev = f.root.join("eval");
    let ck = run.join("final.ckpt");
    ok(&["eval", "--data", s(&f.data), "--checkpoint", s(&ck), "--out", s(&ev), "--save-depth"]);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    for key in ["abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "silog", "d1", "d2", "d3", "n_valid"] {
        assert!(m.get(key).is_some(), "metrics.json lacks {key}");
    }
    let weights: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("level_weights.json")).unwrap()).unwrap();
    assert_eq!(weights.as_array().unwrap().len(), 4);
    for w in weights.as_array().unwrap() {
        let total: f64 = w["weights"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    assert!(ev.join("baseline.json").exists());
    let pgm = std::fs::read(ev.join("pred_00006.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n65535\n"));

    let an = f.root.join("analyze");
    ok(&["analyze", "--data", s(&f.data), "--checkpoint", s(&ck), "--out", s(&an)]);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(an.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["layers"].as_array().unwrap().len(), 4);
    assert!(an.join("anchor_layer01.pgm").exists() && an.join("anchor_layer04.pgm").exists());

    let sel = f.root.join("select");
    ok(&["select-stats", "--data", s(&f.data), "--checkpoint", s(&ck), "--out", s(&sel), "--strategy", "node-degree"]);
    let hist: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(sel.join("selection_hist.json")).unwrap()).unwrap();
    let total: f64 = hist["layers"].as_array().unwrap().iter().map(|l| l["fraction"].as_f64().unwrap()).sum();
    assert!((total - 2.0).abs() < 1e-12, "each sample selects K=2 layers");
}

#[test]
fn analyze_from_dumped_features_matches_on_the_fly() {
    let f = fixture();
    let a = f.root.join("a");
    let dumps = f.root.join("dumps");
    ok(&[
        "analyze", "--data", s(&f.data), "--config", s(&f.train_cfg), "--out", s(&a), "--dump-features", s(&dumps),
    ]);
    let b = f.root.join("b");
    ok(&["analyze", "--data", s(&f.data), "--features", s(&dumps), "--out", s(&b)]);
    let read = |p: PathBuf| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let (x, y) = (read(a.join("stats.json")), read(b.join("stats.json")));
    for (lx, ly) in x["layers"].as_array().unwrap().iter().zip(y["layers"].as_array().unwrap()) {
        for key in ["mean_rdm", "spearman_to_depth", "mean_r2"] {
            let (u, v) = (lx[key].as_f64().unwrap(), ly[key].as_f64().unwrap());
            assert!((u - v).abs() < 1e-6, "{key}: {u} vs {v}");
        }
    }
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    assert_eq!(lfr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lfr(&["train", "--bogus-flag"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none");
    let out = lfr(&["eval", "--data", s(&missing), "--checkpoint", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model":{"mode":"sideways"}}"#).unwrap();
    assert_eq!(lfr(&["train", "--config", s(&bad), "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(lfr(&["train", "--mode", "sideways", "--out", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn gradcheck_prints_one_line_per_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", s(dir.path())]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 20);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
    assert!(text.contains("pipeline"));
    assert!(dir.path().join("gradcheck.json").exists());
}
