//! Drive the installed binary end to end: every subcommand, the config
//! precedence rules, and the failure modes a user actually hits.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dfpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfpn"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok(args: &[&str]) -> (String, String) {
    let out = dfpn(args);
    assert!(
        out.status.success(),
        "dfpn {:?} failed\nstdout:\n{}\nstderr:\n{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (String::from_utf8_lossy(&out.stdout).into_owned(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn run_err(args: &[&str]) -> String {
    let out = dfpn(args);
    assert!(!out.status.success(), "dfpn {args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(!stderr.contains("panicked"), "crashed instead of erroring:\n{stderr}");
    stderr
}

fn first_png(dir: &Path) -> PathBuf {
    let mut pngs: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().map_or(false, |e| e == "png"))
        .collect();
    pngs.sort();
    pngs.into_iter().next().expect("dataset directory should contain png images")
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let s = |p: &Path| p.to_str().unwrap().to_string();

    // make-data
    let (stdout, _) = run_ok(&[
        "make-data", "--out", &s(&data), "--count", "8", "--seed", "5",
    ]);
    assert!(stdout.contains("resolved configuration:"), "banner missing:\n{stdout}");
    assert!(data.join("annotations.jsonl").exists());

    // train (small settings so the test stays fast)
    let (stdout, _) = run_ok(&[
        "train", "--data", &s(&data), "--out", &s(&run),
        "--epochs", "1", "--lr", "0.005", "--seed", "3",
        "--c-pyr", "8", "--head-depth", "1",
    ]);
    assert!(stdout.contains("epochs           = 1"), "banner wrong:\n{stdout}");
    let ckpt = run.join("epoch_0001.ckpt");
    assert!(ckpt.exists(), "missing checkpoint");
    assert!(run.join("model.manifest").exists(), "missing manifest");
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "iteration,class_loss,reg_loss,total,positive_anchor_count");
    assert_eq!(lines.len(), 9, "one row per training image:\n{log}");

    // eval
    let report_path = tmp.path().join("report.json");
    let (stdout, _) = run_ok(&[
        "eval", "--model", &s(&ckpt), "--data", &s(&data), "--out", &s(&report_path),
    ]);
    assert!(stdout.contains("mAP"), "no metric table:\n{stdout}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["map"].is_number() && report["map50"].is_number());

    // infer on a single file
    let image = first_png(&data);
    let dets_path = tmp.path().join("dets.jsonl");
    let annotated = tmp.path().join("annotated");
    run_ok(&[
        "infer", "--model", &s(&ckpt), "--image", &s(&image),
        "--out", &s(&dets_path), "--annotated-dir", &s(&annotated),
        "--score-threshold", "0.01",
    ]);
    for line in std::fs::read_to_string(&dets_path).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["score"].is_number() && v["image_id"].is_string());
    }
    assert!(
        std::fs::read_dir(&annotated).unwrap().count() > 0,
        "no annotated output written"
    );

    // infer on a directory covers every image inside it
    let dets_dir_path = tmp.path().join("dets_dir.jsonl");
    let (stdout, _) = run_ok(&[
        "infer", "--model", &s(&ckpt), "--image", &s(&data),
        "--out", &s(&dets_dir_path), "--score-threshold", "0.01",
    ]);
    for id in ["s5_00000", "s5_00007"] {
        assert!(stdout.contains(id), "directory infer skipped {id}:\n{stdout}");
    }

    // bench: the reported fps must be frames/total of the measured section
    let bench_path = tmp.path().join("bench.json");
    let (stdout, _) = run_ok(&[
        "bench", "--model", &s(&ckpt), "--image-size", "32",
        "--warmup", "1", "--frames", "5", "--out", &s(&bench_path),
    ]);
    assert!(stdout.contains("fps = "), "no fps line:\n{stdout}");
    let bench: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&bench_path).unwrap()).unwrap();
    let fps = bench["fps"].as_f64().unwrap();
    let total = bench["total_seconds"].as_f64().unwrap();
    assert!(fps > 0.0 && total > 0.0);
    assert!((fps - 5.0 / total).abs() / fps < 0.01, "fps {fps} vs 5/{total}");
    assert_eq!(bench["measured_frames"].as_u64(), Some(5));

    // resume from the first checkpoint and run one more epoch
    run_ok(&[
        "train", "--data", &s(&data), "--out", &s(&run), "--resume", &s(&ckpt),
        "--epochs", "2", "--lr", "0.005", "--seed", "3",
        "--c-pyr", "8", "--head-depth", "1",
    ]);
    assert!(run.join("epoch_0002.ckpt").exists(), "resume did not continue");

    // a manifest describing a different architecture must be refused
    let manifest = run.join("model.manifest");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let altered = text.replace("c_pyr = 8", "c_pyr = 16");
    assert_ne!(text, altered, "expected a c_pyr line to rewrite");
    let bad = tmp.path().join("bad.manifest");
    std::fs::write(&bad, altered).unwrap();
    let stderr = run_err(&[
        "eval", "--model", &s(&ckpt), "--manifest", &s(&bad), "--data", &s(&data),
    ]);
    assert!(stderr.contains("manifest mismatch"), "wrong refusal:\n{stderr}");
}

#[test]
fn flag_beats_config_file_beats_default() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 2\nlr = 0.5\n# comment\n").unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let (stdout, _) = run_ok(&[
        "make-data", "--out", &s(&out), "--count", "1",
        "--config", &s(&cfg), "--epochs", "1",
    ]);
    assert!(stdout.contains("epochs           = 1"), "flag must win:\n{stdout}");
    assert!(stdout.contains("lr               = 0.5"), "file must beat default:\n{stdout}");
    assert!(stdout.contains("nms_iou          = 0.5"), "default must show:\n{stdout}");

    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "epoch = 2\n").unwrap();
    let stderr = run_err(&[
        "make-data", "--out", &s(&out), "--count", "1", "--config", &s(&bad),
    ]);
    assert!(stderr.contains("unknown config key"), "wrong error:\n{stderr}");
}

#[test]
fn missing_inputs_fail_without_panicking() {
    let tmp = tempfile::tempdir().unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let ghost_ckpt = tmp.path().join("ghost.ckpt");
    let ghost_dir = tmp.path().join("ghost-data");

    let stderr = run_err(&["eval", "--model", &s(&ghost_ckpt), "--data", &s(&ghost_dir)]);
    assert!(!stderr.trim().is_empty());

    let stderr = run_err(&["train", "--data", &s(&ghost_dir), "--out", &s(&tmp.path().join("o"))]);
    assert!(!stderr.trim().is_empty());
}
