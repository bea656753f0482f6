use std::path::Path;
use std::process::{Command, Output};

fn cdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdc"))
        .args(args)
        .output()
        .expect("spawn cdc")
}

fn ok(args: &[&str]) -> String {
    let out = cdc(args);
    assert!(
        out.status.success(),
        "cdc {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small but complete run: every stage reads what the previous one wrote.
fn run_pipeline(root: &Path, workers: &str) {
    let data = root.join("data");
    ok(&[
        "gen-data",
        "--out",
        p(&data),
        "--train-videos",
        "2",
        "--test-videos",
        "1",
        "--size",
        "8",
    ]);
    ok(&[
        "train",
        "--workers",
        workers,
        "--data",
        p(&data.join("train")),
        "--out",
        p(&root.join("ckpt")),
        "--steps",
        "3",
        "--batch",
        "2",
        "--widths",
        "2,2,2",
        "--cdc-width",
        "4",
        "--window",
        "16",
        "--lr",
        "0.001",
        "--final-lr",
        "0.01",
    ]);
    ok(&[
        "predict",
        "--workers",
        workers,
        "--checkpoint",
        p(&root.join("ckpt")),
        "--data",
        p(&data.join("test")),
        "--out",
        p(&root.join("scores")),
        "--granularity",
        "8",
        "--diffs",
        p(&root.join("diffs.csv")),
    ]);
    ok(&[
        "refine",
        "--workers",
        workers,
        "--scores",
        p(&root.join("scores")),
        "--proposals",
        p(&data.join("test/proposals.jsonl")),
        "--out",
        p(&root.join("dets.jsonl")),
        "--alpha",
        "0.25",
    ]);
    ok(&[
        "eval-frame",
        "--scores",
        p(&root.join("scores")),
        "--annotations",
        p(&data.join("test/annotations.jsonl")),
        "--out",
        p(&root.join("frame.json")),
    ]);
    ok(&[
        "eval-loc",
        "--detections",
        p(&root.join("dets.jsonl")),
        "--annotations",
        p(&data.join("test/annotations.jsonl")),
        "--classes",
        "3",
        "--average",
        "--out",
        p(&root.join("loc.json")),
    ]);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn pipeline_closes_and_is_worker_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&a, "1");
    run_pipeline(&b, "2");

    for f in [
        "ckpt/manifest.txt",
        "ckpt/cdc8.weight.cdct",
        "ckpt/loss.csv",
        "scores/test_000.cdct",
        "diffs.csv",
        "dets.jsonl",
        "frame.json",
        "frame.txt",
        "loc.json",
    ] {
        assert_eq!(
            read(&a.join(f)),
            read(&b.join(f)),
            "{f} differs across worker counts"
        );
    }

    let loss = String::from_utf8(read(&a.join("ckpt/loss.csv"))).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss"));
    assert_eq!(loss.lines().count(), 4);
    let diffs = String::from_utf8(read(&a.join("diffs.csv"))).unwrap();
    // 3 classes + background over 255 frame pairs
    assert_eq!(diffs.lines().count(), 1 + 4 * 255);
    let frame = String::from_utf8(read(&a.join("frame.json"))).unwrap();
    assert!(frame.contains("\"metric\": \"per-frame\""));
}

#[test]
fn granularity_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    run_pipeline(root, "1");
    let out = cdc(&[
        "predict",
        "--checkpoint",
        p(&root.join("ckpt")),
        "--data",
        p(&root.join("data/test")),
        "--out",
        p(&root.join("s2")),
        "--granularity",
        "2",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: ") && err.contains("x8"), "{err}");
}

#[test]
fn errors_are_single_line() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"video\": \"v\", \"start\": 5, \"end\": 2, \"label\": 0}\n",
    )
    .unwrap();
    let out = cdc(&[
        "eval-loc",
        "--detections",
        p(&bad),
        "--annotations",
        p(&bad),
        "--classes",
        "1",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("bad.jsonl:1:"), "{err}");

    let out = cdc(&[
        "refine",
        "--scores",
        "nowhere",
        "--proposals",
        "nope",
        "--out",
        "x",
    ]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "train_videos = 1\ntest_videos = 1\nsize = 8\nclasses = 2\n",
    )
    .unwrap();
    let out = tmp.path().join("data");
    let stdout = ok(&[
        "--config",
        p(&cfg),
        "gen-data",
        "--out",
        p(&out),
        "--test-videos",
        "2",
    ]);
    assert!(stdout.contains("1 train and 2 test videos"), "{stdout}");
    let ds = cdc_core::data::Dataset::load(out.join("train")).unwrap();
    assert_eq!(ds.num_classes, 2);
}

#[test]
fn gradcheck_and_bench_report_tables() {
    let table = ok(&["gradcheck", "--instances", "2"]);
    assert_eq!(
        table.lines().filter(|l| l.ends_with("PASS")).count(),
        6,
        "{table}"
    );
    let bench = ok(&["bench", "--reps", "1", "--batch", "1"]);
    for name in [
        "cdc_forward",
        "cdc_backward",
        "conv3d_forward/im2col",
        "frames/s",
    ] {
        assert!(bench.contains(name), "{bench}");
    }
}
