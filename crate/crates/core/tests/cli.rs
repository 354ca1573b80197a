use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lstc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lstc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn lstc_threads(dir: &Path, threads: usize, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lstc"))
        .current_dir(dir)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const SMALL: &str = r#"{"n_videos": 4, "clips_per_video": 4, "seed": 5}"#;

/// synth -> train 1 -> train 2 -> infer -> eval in `dir`.
fn workflow(dir: &Path, threads: usize) -> (Vec<u8>, Vec<u8>) {
    fs::write(dir.join("synth.json"), SMALL).unwrap();
    let run = |args: &[&str]| ok(lstc_threads(dir, threads, args));
    run(&["synth", "--config", "synth.json", "--out", "data"]);
    run(&["train", "--stage", "1", "--data", "data", "--bank", "bank.lfb", "--out", "m1.bin", "--steps", "60"]);
    run(&[
        "train", "--stage", "2", "--data", "data", "--bank", "bank.lfb", "--init", "m1.bin", "--out", "m2.bin",
        "--steps", "60",
    ]);
    run(&["infer", "--model", "m2.bin", "--data", "data", "--bank", "bank.lfb", "--out", "det.csv"]);
    run(&["eval", "--gt", "data/gt.csv", "--det", "det.csv", "--deltas", "0.5,0.6,0.75", "--report", "report.json"]);
    (fs::read(dir.join("det.csv")).unwrap(), fs::read(dir.join("report.json")).unwrap())
}

#[test]
fn workflow_is_byte_identical_across_runs_and_thread_counts() {
    let runs: Vec<_> = [1, 1, 3]
        .into_iter()
        .map(|threads| {
            let dir = tempfile::tempdir().unwrap();
            workflow(dir.path(), threads)
        })
        .collect();
    assert!(!runs[0].0.is_empty());
    assert!(runs.iter().all(|r| r == &runs[0]));
}

#[test]
fn workflow_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (csv, report) = workflow(dir, 1);
    for f in ["data/dataset.json", "data/config.json", "data/gt.csv", "m1.loss.csv", "m2.loss.csv"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    // no header; 6-decimal fixed formatting
    let text = String::from_utf8(csv).unwrap();
    let first: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(first.len(), 8);
    assert_eq!(first[0], "vid000");
    assert!(first[2..6].iter().chain([&first[7]]).all(|v| v.split('.').nth(1).unwrap().len() == 6));
    let report: serde_json::Value = serde_json::from_slice(&report).unwrap();
    assert_eq!(report["deltas"].as_array().unwrap().len(), 3);
    let curve = fs::read_to_string(dir.join("m1.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 61);

    let table = ok(lstc(dir, &["eval", "--gt", "data/gt.csv", "--det", "det.csv", "--weighted"]));
    assert!(table.contains("mAP"));
    assert!(dir.join("eval_report.json").exists());

    fs::write(dir.join("classes.txt"), "0\n3\n").unwrap();
    let table = ok(lstc(dir, &["eval", "--gt", "data/gt.csv", "--det", "det.csv", "--classes", "classes.txt"]));
    let rows: Vec<&str> = table.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).collect();
    assert_eq!(rows.len(), 2, "{table}");
}

#[test]
fn bank_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    workflow(dir, 1);
    let summary = ok(lstc(dir, &["bank", "inspect", "bank.lfb"]));
    assert!(summary.starts_with("dim=16 videos=4 records=16"), "{summary}");
    let nd = ok(lstc(dir, &["bank", "export-ndjson", "bank.lfb"]));
    assert_eq!(nd.lines().count(), 16);
    for line in nd.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["dim"], 16);
        assert_eq!(v["feats"].as_array().unwrap().len() as u64, v["rows"].as_u64().unwrap());
    }
}

#[test]
fn heatmap_writes_one_image_and_table_per_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    workflow(dir, 1);
    let listed = ok(lstc(dir, &["heatmap", "--model", "m1.bin", "--data", "data", "--clip", "2", "--actor", "0", "--out", "hm"]));
    // default grid has 2 frames
    assert_eq!(listed.lines().count(), 4);
    let pgm = fs::read_to_string(dir.join("hm/heatmap_0_0.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n4 4\n65535\n"), "{pgm}");
    let grid = fs::read_to_string(dir.join("hm/heatmap_0_0.csv")).unwrap();
    assert_eq!(grid.lines().count(), 4);
    let out = lstc(dir, &["heatmap", "--model", "m1.bin", "--data", "data", "--clip", "999", "--out", "hm"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn oracle_prints_one_row_per_length() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(lstc(tmp.path(), &["oracle", "--trials", "20", "--max-l", "8"]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("L,time_full,time_decoupled,max_abs_diff"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 8);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1) as f64);
        assert!(r[3] < 1e-9);
    }
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(lstc(tmp.path(), &["gradcheck", "--seeds", "2"]));
    assert!(out.lines().count() > 20);
    assert!(out.contains("stage-2 loss"));
}

#[test]
fn sweep_prints_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("synth.json"), SMALL).unwrap();
    fs::write(dir.join("train.json"), r#"{"steps": 10}"#).unwrap();
    ok(lstc(dir, &["synth", "--config", "synth.json", "--out", "data"]));
    let out = ok(lstc(dir, &["sweep", "--data", "data", "--k", "1,2", "--m", "1,3", "--config", "train.json"]));
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "K,M,long_term_map");
    let cells: Vec<(String, String)> = rows[1..]
        .iter()
        .map(|r| {
            let f: Vec<&str> = r.split(',').collect();
            assert!(f[2].parse::<f64>().unwrap().is_finite());
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    let want: Vec<(String, String)> = [("1", "1"), ("1", "3"), ("2", "1"), ("2", "3")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    assert_eq!(cells, want);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("synth.json"), SMALL).unwrap();
    ok(lstc(dir, &["synth", "--config", "synth.json", "--out", "data"]));

    // config errors
    fs::write(dir.join("bad.json"), r#"{"clips_per_video": 1}"#).unwrap();
    assert_eq!(code(&lstc(dir, &["synth", "--config", "bad.json", "--out", "x"])), 2);
    fs::write(dir.join("typo.json"), r#"{"n_video": 3}"#).unwrap();
    assert_eq!(code(&lstc(dir, &["synth", "--config", "typo.json", "--out", "x"])), 2);
    let out = lstc(dir, &["train", "--stage", "2", "--data", "data", "--bank", "b.lfb", "--out", "m.bin"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));

    // numerical failure: divergence reports the step
    fs::write(dir.join("hot.json"), r#"{"learning_rate": 1e12}"#).unwrap();
    let out = lstc(dir, &["train", "--stage", "1", "--data", "data", "--bank", "b.lfb", "--out", "m.bin", "--config", "hot.json", "--steps", "50"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at step"));

    // format errors carry byte offsets
    ok(lstc(dir, &["train", "--stage", "1", "--data", "data", "--bank", "b.lfb", "--out", "m.bin", "--steps", "5"]));
    let mut bytes = fs::read(dir.join("m.bin")).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(dir.join("cut.bin"), &bytes).unwrap();
    let out = lstc(dir, &["infer", "--model", "cut.bin", "--data", "data", "--out", "d.csv"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("at byte"));
    let out = lstc(dir, &["infer", "--model", "b.lfb", "--data", "data", "--out", "d.csv"]);
    assert_eq!(code(&out), 4);
    fs::write(dir.join("bad.csv"), "v,0,0.5,0,0.2,1,0,0.9\n").unwrap();
    assert_eq!(code(&lstc(dir, &["eval", "--gt", "data/gt.csv", "--det", "bad.csv"])), 4);

    // missing file
    assert_eq!(code(&lstc(dir, &["bank", "inspect", "nope.lfb"])), 1);
}
