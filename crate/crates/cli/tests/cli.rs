use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ndvr(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndvr"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small synthetic dataset; returns (data dir, truth file).
fn synth(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let v = ok(ndvr(
        &root.join("unused"),
        &[
            "synth", "--clusters", "4", "--videos", "3", "--frames", "30", "--dims", "16", "--noise", "0.05",
            "--seed", "3", "--out", data.to_str().unwrap(),
        ],
    ));
    assert_eq!(v["videos"], 12);
    assert_eq!(v["queries"], 4);
    let truth = data.join("truth.txt");
    (data, truth)
}

#[test]
fn query_before_index_is_an_ordering_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = synth(dir.path());
    let ws = dir.path().join("ws");
    let out = ndvr(&ws, &["query", "--video", "vid0000"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("requires output of stage `ingest`"), "{}", stderr(&out));

    ok(ndvr(&ws, &["ingest", data.to_str().unwrap()]));
    ok(ndvr(&ws, &["keyframes"]));
    let out = ndvr(&ws, &["query", "--video", "vid0000"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("requires output of stage `reduce`"), "{}", stderr(&out));
}

#[test]
fn stages_in_order_then_changed_config_is_stale() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = synth(dir.path());
    let ws = dir.path().join("ws");
    let report = ok(ndvr(&ws, &["ingest", data.to_str().unwrap()]));
    assert_eq!(report["stage"], "ingest");
    assert_eq!(report["counts"]["videos"], 12);

    let kf = ok(ndvr(&ws, &["keyframes", "--rate", "1.0"]));
    let videos = kf.as_array().unwrap();
    assert_eq!(videos.len(), 12);
    assert!(videos.iter().all(|v| v["video_id"].is_string() && !v["selected"].as_array().unwrap().is_empty()));

    // Non-default rate must be repeated for every later stage.
    let out = ndvr(&ws, &["reduce"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stale"), "{}", stderr(&out));
    ok(ndvr(&ws, &["keyframes"]));
    ok(ndvr(&ws, &["reduce"]));
    ok(ndvr(&ws, &["index", "--k", "3"]));

    let results = ok(ndvr(&ws, &["query", "--video", "vid0000", "--k", "3", "--levels", "fc,fused"]));
    let levels = &results[0]["levels"];
    assert!(levels.get("conv").is_none());
    let fused = levels["fused"].as_array().unwrap();
    assert_eq!(fused.len(), 11);
    assert_eq!(fused[0]["rank"], 1);
    assert!(fused.iter().all(|e| e["video_id"] != "vid0000"));

    let out = ndvr(&ws, &["query", "--video", "vid0000", "--k", "3", "--sso-k", "4"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("rerun `index`"), "{}", stderr(&out));

    // Evaluating needs every ground-truth query to have run.
    let out = ndvr(&ws, &["evaluate", "--truth", truth.to_str().unwrap(), "--k", "3", "--levels", "fc,fused"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("has no results"), "{}", stderr(&out));
}

#[test]
fn pipeline_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = synth(dir.path());
    let ws = dir.path().join("ws");
    let args = ["pipeline", data.to_str().unwrap(), "--truth", truth.to_str().unwrap(), "--k", "3"];
    let maps = ok(ndvr(&ws, &args));
    for level in ["fc", "conv", "fused"] {
        let m = maps[level].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m), "{level}: {m}");
    }

    let artifacts = [
        "keyframes/keyframes.json",
        "models/kpca_fc.model",
        "models/signatures_conv.ndsg",
        "index/index_fc.ndix",
        "index/neighbors_conv.json",
        "results/results.json",
        "results/evaluation.json",
    ];
    let before: Vec<Vec<u8>> = artifacts.iter().map(|a| std::fs::read(ws.join(a)).unwrap()).collect();
    assert!(ws.join("results/pr/fused").read_dir().unwrap().count() == 4);
    for s in ["ingest", "keyframes", "reduce", "index", "query", "evaluate"] {
        let r: Value = serde_json::from_slice(&std::fs::read(ws.join(format!("reports/{s}.json"))).unwrap()).unwrap();
        assert_eq!(r["stage"], s);
        assert!(r["seconds"].as_f64().unwrap() >= 0.0);
    }

    ok(ndvr(&ws, &args));
    for (a, bytes) in artifacts.iter().zip(&before) {
        assert_eq!(&std::fs::read(ws.join(a)).unwrap(), bytes, "{a} changed");
    }

    // A separate workspace with one worker thread agrees as well.
    let ws1 = dir.path().join("ws1");
    let mut single = args.to_vec();
    single.extend(["--threads", "1"]);
    ok(ndvr(&ws1, &single));
    assert_eq!(
        std::fs::read(ws1.join("results/results.json")).unwrap(),
        before[5]
    );
}

#[test]
fn external_query_and_external_results() {
    let dir = tempfile::tempdir().unwrap();
    let (data, truth) = synth(dir.path());
    let ws = dir.path().join("ws");
    ok(ndvr(&ws, &["pipeline", data.to_str().unwrap(), "--k", "3"]));

    // A gallery video given as a file is answered exactly like its id.
    let file = data.join("vid0000.ndvf");
    let by_path = ok(ndvr(&ws, &["query", "--video", file.to_str().unwrap(), "--k", "3"]));
    let by_id = ok(ndvr(&ws, &["query", "--video", "vid0000", "--k", "3"]));
    assert_eq!(by_path, by_id);
    assert_eq!(by_id[0]["levels"]["fc"].as_array().unwrap().len(), 11);

    ok(ndvr(&ws, &["query", "--k", "3"]));
    let copy = dir.path().join("copy.json");
    std::fs::copy(ws.join("results/results.json"), &copy).unwrap();
    let pr = dir.path().join("pr");
    let scores = ok(ndvr(
        &ws,
        &[
            "evaluate", "--results", copy.to_str().unwrap(), "--truth", truth.to_str().unwrap(), "--pr-out",
            pr.to_str().unwrap(),
        ],
    ));
    assert_eq!(scores["fc"]["per_query"].as_array().unwrap().len(), 4);
    let csv = std::fs::read_to_string(pr.join("conv").join("vid0000.csv")).unwrap();
    assert!(csv.starts_with("rank,precision,recall\n"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ndvr.toml");
    std::fs::write(&cfg, "knn_k = 7\nrate = 1.5\nsso_sigma = 0.25\n").unwrap();
    let out = ndvr(dir.path(), &["config", "--config", cfg.to_str().unwrap(), "--k", "9"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("knn_k = 9"));
    assert!(text.contains("rate = 1.5"));
    assert!(text.contains("sso_sigma = 0.25"));

    std::fs::write(&cfg, "knn_k = 0\n").unwrap();
    let out = ndvr(dir.path(), &["config", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("knn_k must be positive"));

    let out = ndvr(dir.path(), &["config", "--sso-sigma", "wide"]);
    assert!(!out.status.success());
}
