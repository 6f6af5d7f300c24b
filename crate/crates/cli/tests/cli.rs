use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lcdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcdet"))
        .args(args)
        .output()
        .expect("spawn lcdet")
}

fn ok(args: &[&str]) -> Output {
    let out = lcdet(args);
    assert!(
        out.status.success(),
        "lcdet {args:?} failed ({:?}):\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    lcdet(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// Small synthetic training run into `dir`.
fn train(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--synthetic", "24", "--epochs", "2", "--batch-size", "8", "--out", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("model.lcdt")
}

#[test]
fn train_is_deterministic_and_echoes_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(&tmp.path().join("a"), &[]);
    let b = train(&tmp.path().join("b"), &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(tmp.path().join("a/initial.lcdt")).unwrap());

    let cfg = json(&tmp.path().join("a/resolved_config.json"));
    assert_eq!(cfg["command"], "train");
    let t = &cfg["resolved"]["train"];
    assert_eq!(t["loss"]["lambda_coord"].as_f64(), Some(5.0));
    assert_eq!(t["loss"]["lambda_noobj"].as_f64(), Some(1.0));
    assert_eq!(t["seed"].as_u64(), Some(7));
    assert_eq!(t["optimizer"]["lr"].as_f64(), Some(1e-3));

    let loss = csv_rows(&tmp.path().join("a/loss.csv"));
    assert_eq!(loss.len(), 2);
    assert!(loss.iter().all(|r| r.len() == 6));

    let c = train(&tmp.path().join("c"), &["--seed", "8"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let m = train(&tmp.path().join("t"), &["--lr", "0"]);
    ok(&["init", "--out", p(&tmp.path().join("i"))]);
    let init = fs::read(tmp.path().join("i/model.lcdt")).unwrap();
    assert_eq!(fs::read(m).unwrap(), init);
    assert_eq!(fs::read(tmp.path().join("t/initial.lcdt")).unwrap(), init);
}

#[test]
fn divergence_exits_with_numeric_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    assert_eq!(
        code(&["train", "--synthetic", "16", "--epochs", "5", "--lr", "1e30", "--out", p(&out)]),
        3
    );
    assert!(out.join("model.lcdt").exists());
    assert!(out.join("loss.csv").exists());
}

#[test]
fn exit_codes_and_output_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("o");
    assert_eq!(code(&["train", "--out", p(&dir)]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["analyze", "--input", "640", "--out", p(&dir)]), 1);
    assert_eq!(code(&["init", "--profile", "nope", "--out", p(&dir)]), 1);
    assert_eq!(code(&["--help"]), 0);

    let junk = tmp.path().join("junk.lcdt");
    fs::write(&junk, b"not a model").unwrap();
    assert_eq!(code(&["infer", "--model", p(&junk), p(&junk), "--out", p(&dir)]), 2);
    let bad_cfg = tmp.path().join("bad.json");
    fs::write(&bad_cfg, "{ \"profile\": ").unwrap();
    assert_eq!(code(&["init", "--config", p(&bad_cfg), "--out", p(&dir)]), 2);

    ok(&["init", "--out", p(&dir)]);
    assert_eq!(code(&["init", "--seed", "3", "--out", p(&dir)]), 1);
    let before = fs::read(dir.join("model.lcdt")).unwrap();
    ok(&["init", "--seed", "3", "--force", "--out", p(&dir)]);
    assert_ne!(fs::read(dir.join("model.lcdt")).unwrap(), before);
    assert!(dir.join("resolved_config.json").exists());
}

#[test]
fn quantize_infer_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let model = train(&root.join("t"), &[]);
    ok(&["synth", "--count", "6", "--seed", "11", "--out", p(&root.join("data"))]);
    assert!(root.join("data/annotations.json").exists());

    let q = root.join("q");
    let out = ok(&["quantize", "--model", p(&model), "--calibration", p(&root.join("data")), "--out", p(&q)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains('%'));
    let ratio = fs::metadata(q.join("model.lcdt")).unwrap().len() as f64 / fs::metadata(&model).unwrap().len() as f64;
    assert!(ratio <= 0.26, "quantized/float size ratio {ratio}");
    assert!(json(&q.join("resolved_config.json"))["resolved"]["calibration_images"].as_u64() == Some(6));

    assert_eq!(
        code(&["quantize", "--model", p(&q.join("model.lcdt")), "--synthetic", "2", "--out", p(&root.join("q2"))]),
        1
    );
    fs::create_dir(root.join("empty")).unwrap();
    assert_eq!(
        code(&["quantize", "--model", p(&model), "--calibration", p(&root.join("empty")), "--out", p(&root.join("q3"))]),
        1
    );

    let qm = q.join("model.lcdt");
    let data = root.join("data");
    let run = |name: &str| {
        let dir = root.join(name);
        ok(&["infer", "--model", p(&qm), p(&data), "--score-threshold", "0.005", "--fddb", "--out", p(&dir)]);
        dir
    };
    let (i1, i2) = (run("i1"), run("i2"));
    let jsonl = fs::read(i1.join("detections.jsonl")).unwrap();
    assert_eq!(jsonl, fs::read(i2.join("detections.jsonl")).unwrap());
    assert!(!jsonl.is_empty());
    assert_eq!(json(&i1.join("resolved_config.json"))["resolved"]["mode"], "quantized");
    assert!(i1.join("detections.fddb.txt").exists());
    assert_eq!(
        code(&["infer", "--model", p(&model), p(&data), "--mode", "quantized", "--out", p(&root.join("i3"))]),
        1
    );

    let silent = root.join("i4");
    ok(&["infer", "--model", p(&qm), p(&data), "--score-threshold", "1", "--out", p(&silent)]);
    assert!(fs::read(silent.join("detections.jsonl")).unwrap().is_empty());

    let ev = root.join("ev");
    ok(&[
        "eval",
        "--detections",
        p(&i1.join("detections.jsonl")),
        "--ground-truth",
        p(&data),
        "--iou-sweep",
        "0.3,0.5,0.7",
        "--out",
        p(&ev),
    ]);
    for c in ["0.3", "0.5", "0.7"] {
        assert!(ev.join(format!("curve_iou{c}.csv")).exists());
    }
    let rates: Vec<f64> = csv_rows(&ev.join("sweep.csv")).iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(rates.len(), 3);
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
    for f in ["curve.csv", "tp_fp.svg", "pr.svg", "summary.json"] {
        assert!(ev.join(f).exists(), "{f}");
    }
}

#[test]
fn eval_reproduces_hand_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = tmp.path().join("gt.json");
    fs::write(
        &gt,
        r#"{"a.ppm": [{"box": [5, 5, 10, 10], "class_id": 0}, {"box": [25, 25, 10, 10], "class_id": 0}]}"#,
    )
    .unwrap();
    let dets = tmp.path().join("d.jsonl");
    let line = |s: f32, b: [f32; 4]| {
        format!(
            "{{\"image_id\":\"a.ppm\",\"class_id\":0,\"score\":{s},\"confidence\":{s},\"class_prob\":1.0,\"box\":[{},{},{},{}]}}\n",
            b[0], b[1], b[2], b[3]
        )
    };
    let text = [
        line(0.9, [5.0, 5.0, 10.0, 10.0]),
        line(0.8, [55.0, 55.0, 10.0, 10.0]),
        line(0.7, [25.0, 25.0, 10.0, 10.0]),
    ]
    .concat();
    fs::write(&dets, text).unwrap();
    let out = tmp.path().join("ev");
    ok(&["eval", "--detections", p(&dets), "--ground-truth", p(&gt), "--out", p(&out)]);
    let rows = csv_rows(&out.join("curve.csv"));
    let pts: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str(), r[2].as_str())).collect();
    assert_eq!(pts, vec![("0.9", "1", "0"), ("0.8", "1", "1"), ("0.7", "2", "1")]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["total_gt"].as_u64(), Some(2));
    assert_eq!(summary["fp_budget"].as_u64(), Some(1));
    assert_eq!(summary["tp_rate_at_fp_budget"].as_f64(), Some(1.0));

    let stray = tmp.path().join("stray.jsonl");
    fs::write(&stray, line(0.5, [1.0, 1.0, 1.0, 1.0]).replace("a.ppm", "b.ppm")).unwrap();
    assert_eq!(
        code(&["eval", "--detections", p(&stray), "--ground-truth", p(&gt), "--out", p(&tmp.path().join("e2"))]),
        2
    );
}

#[test]
fn analyze_reports_grid_heads_and_monotone_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("an");
    ok(&["analyze", "--profile", "paper", "--input", "448x448", "--mode", "quantized", "--out", p(&out)]);
    let s = json(&out.join("summary.json"));
    assert_eq!(s["output_grid"], serde_json::json!([7, 7, 16]));

    let heads = json(&out.join("head_params.json"));
    let params: Vec<u64> = heads["heads"].as_array().unwrap().iter().map(|h| h["params"].as_u64().unwrap()).collect();
    assert_eq!(params, vec![76_800, 212_545_536, 2_439_936]);

    let sweep = csv_rows(&out.join("fps_sweep.csv"));
    let limited: Vec<(f64, f64)> = sweep
        .iter()
        .filter(|r| r[0] != "inf")
        .map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap()))
        .collect();
    assert_eq!(limited.len(), 6);
    assert!(limited.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1), "{limited:?}");

    let traffic: u64 = csv_rows(&out.join("layers.csv")).iter().map(|r| r[9].parse::<u64>().unwrap()).sum();
    assert_eq!(Some(traffic), s["total_traffic_bytes"].as_u64());

    let wide = tmp.path().join("wide");
    ok(&["analyze", "--profile", "paper", "--input", "640x448", "--out", p(&wide)]);
    assert_eq!(json(&wide.join("summary.json"))["output_grid"], serde_json::json!([7, 10, 16]));
}

#[test]
fn sweep_reads_scenario_file() {
    let tmp = tempfile::tempdir().unwrap();
    let sc = tmp.path().join("s.json");
    fs::write(&sc, r#"{"compute_rate_ops": 2e11, "bandwidth_sweep_gbps": [6, 1, 3]}"#).unwrap();
    let out = tmp.path().join("sw");
    ok(&["sweep", "--scenario", p(&sc), "--mode", "u8", "--out", p(&out)]);
    let rows = csv_rows(&out.join("fps_sweep.csv"));
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3][0], "inf");
    let fps: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(fps[1] <= fps[2] && fps[2] <= fps[0] && fps[0] <= fps[3]);

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"compute_rate_ops": 1e9}"#).unwrap();
    assert_eq!(code(&["sweep", "--scenario", p(&bad), "--out", p(&tmp.path().join("x"))]), 2);
}

#[test]
fn paper_backbone_accepts_both_resolutions() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(&["init", "--profile", "paper-256", "--out", p(&root.join("m"))]);
    ok(&["synth", "--count", "1", "--size", "448x448", "--out", p(&root.join("sq"))]);
    ok(&["synth", "--count", "1", "--size", "640x448", "--out", p(&root.join("wide"))]);
    let model = root.join("m/model.lcdt");
    for d in ["sq", "wide"] {
        ok(&["infer", "--model", p(&model), p(&root.join(d)), "--out", p(&root.join(format!("i_{d}")))]);
    }
    ok(&["synth", "--count", "1", "--size", "450x448", "--out", p(&root.join("odd"))]);
    assert_eq!(
        code(&["infer", "--model", p(&model), p(&root.join("odd")), "--out", p(&root.join("i_odd"))]),
        1
    );
}
