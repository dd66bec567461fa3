use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use vodet_core::io::{read_detections, read_truth};
use vodet_core::synth::evaluate;

fn vodet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vodet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn vodet")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vodet(dir, args);
    assert!(
        out.status.success(),
        "vodet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const MOVING: &str = r#"
num_frames = 30
height = 128
width = 192
seed = 5

[[objects]]
box = { x1 = 30.0, y1 = 20.0, x2 = 90.0, y2 = 84.0 }
velocity = [1.5, 0.5]
class_id = 1
"#;

const STATIC: &str = r#"
num_frames = 6
height = 128
width = 192
noise = 0.0

[[objects]]
box = { x1 = 40.0, y1 = 30.0, x2 = 120.0, y2 = 100.0 }
class_id = 2
"#;

fn setup(spec: &str) -> TempDir {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("seq.toml"), spec).unwrap();
    tmp
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn generate_writes_frames_and_truth() {
    let tmp = setup(MOVING);
    ok(tmp.path(), &["generate", "seq.toml", "-o", "frames"]);
    let frames = tmp.path().join("frames");
    let ppm = fs::read_dir(&frames)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert_eq!(ppm, 30);
    let truth = read_truth(fs::File::open(frames.join("truth.csv")).unwrap(), 30).unwrap();
    assert_eq!(truth.frames.len(), 30);
    assert!(truth.frames.iter().all(|f| f.len() == 1 && f[0].class_id == 1));
}

#[test]
fn generate_is_byte_identical() {
    let tmp = setup(MOVING);
    ok(tmp.path(), &["generate", "seq.toml", "-o", "a"]);
    ok(tmp.path(), &["generate", "seq.toml", "-o", "b"]);
    for name in ["frame_00000.ppm", "frame_00029.ppm", "truth.csv"] {
        let a = fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = fs::read(tmp.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn object_leaving_the_image_is_a_config_error() {
    let bad = MOVING.replace("x2 = 90.0", "x2 = 400.0");
    let tmp = setup(&bad);
    let out = vodet(tmp.path(), &["generate", "seq.toml", "-o", "frames"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("frames").exists());
}

#[test]
fn bad_run_files_exit_with_2() {
    let tmp = setup(MOVING);
    fs::write(tmp.path().join("typo.toml"), "ratio = 0.8\n").unwrap();
    for args in [
        &["detect", "-c", "typo.toml"][..],
        &["detect", "--sequence", "seq.toml", "-o", "o", "--refs", "15"],
        &["detect", "--sequence", "seq.toml"],
        &["detect", "-o", "o"],
        &["profile", "--sequence", "seq.toml", "-o", "o", "--repetitions", "2"],
        &["detect", "--sequence", "seq.toml", "-o", "o", "--pipeline", "fast"],
    ] {
        assert_eq!(vodet(tmp.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn baseline_on_a_static_scene_repeats_itself() {
    let tmp = setup(STATIC);
    ok(
        tmp.path(),
        &[
            "detect",
            "--sequence",
            "seq.toml",
            "--pipeline",
            "baseline",
            "-o",
            "out",
        ],
    );
    let dets = read_detections(fs::File::open(tmp.path().join("out/detections.csv")).unwrap(), 6).unwrap();
    assert!(!dets[0].is_empty());
    for f in &dets[1..] {
        assert_eq!(f, &dets[0]);
    }
}

#[test]
fn detect_writes_readable_outputs() {
    let tmp = setup(MOVING);
    ok(tmp.path(), &["generate", "seq.toml", "-o", "frames"]);
    ok(
        tmp.path(),
        &["detect", "--input", "frames", "--pipeline", "lpn", "-o", "out"],
    );
    let out = tmp.path().join("out");
    let dets = read_detections(fs::File::open(out.join("detections.csv")).unwrap(), 30).unwrap();
    let truth = read_truth(fs::File::open(tmp.path().join("frames/truth.csv")).unwrap(), 30).unwrap();
    let eval = evaluate(&dets, &truth, 0.5);
    let metrics: serde_json::Value = serde_json::from_str(&read(&out, "metrics.json")).unwrap();
    assert_eq!(metrics["recall"].as_f64().unwrap() as f32, eval.recall);
    assert_eq!(
        metrics["true_positives"].as_u64().unwrap() as usize,
        eval.true_positives
    );
    assert!(eval.recall > 0.9);
    assert_eq!(metrics["pipeline"], "lpn");
    assert_eq!(metrics["T"], 7);
    assert!(metrics["attention_macs"].as_u64().unwrap() > 0);
}

#[test]
fn detect_is_deterministic_apart_from_timing() {
    let tmp = setup(MOVING);
    for o in ["a", "b"] {
        ok(tmp.path(), &["detect", "--sequence", "seq.toml", "-o", o]);
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(read(&a, "detections.csv"), read(&b, "detections.csv"));
    assert_eq!(read(&a, "schedule.jsonl"), read(&b, "schedule.jsonl"));
    let strip = |dir: &Path| {
        let mut v: serde_json::Value = serde_json::from_str(&read(dir, "metrics.json")).unwrap();
        let m = v.as_object_mut().unwrap();
        m.remove("wall_seconds");
        m.remove("frames_per_second");
        v
    };
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn covering_masks_match_the_naive_run() {
    let tmp = setup(MOVING);
    ok(
        tmp.path(),
        &["detect", "--sequence", "seq.toml", "--pipeline", "naive", "-o", "naive"],
    );
    // a large enough r turns every box into the whole image
    ok(
        tmp.path(),
        &[
            "detect",
            "--sequence",
            "seq.toml",
            "--pipeline",
            "lpn",
            "--ratio-r",
            "50",
            "-o",
            "lpn",
        ],
    );
    let dir = tmp.path();
    assert_eq!(
        read(&dir.join("naive"), "detections.csv"),
        read(&dir.join("lpn"), "detections.csv")
    );
}

#[test]
fn schedule_trace_has_full_frames_every_eight() {
    let tmp = setup(MOVING);
    ok(
        tmp.path(),
        &[
            "detect",
            "--sequence",
            "seq.toml",
            "--pipeline",
            "lpn_spn",
            "--interval-t",
            "7",
            "-o",
            "out",
        ],
    );
    let full: Vec<u64> = read(&tmp.path().join("out"), "schedule.jsonl")
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|r| r["full"].as_bool().unwrap())
        .map(|r| r["frame_index"].as_u64().unwrap())
        .collect();
    assert_eq!(full, vec![0, 8, 16, 24]);
}

#[test]
fn zero_interval_equals_lpn_alone() {
    let tmp = setup(MOVING);
    ok(
        tmp.path(),
        &["detect", "--sequence", "seq.toml", "--pipeline", "lpn", "-o", "lpn"],
    );
    ok(
        tmp.path(),
        &[
            "detect",
            "--sequence",
            "seq.toml",
            "--pipeline",
            "lpn_spn",
            "--interval-t",
            "0",
            "-o",
            "spn",
        ],
    );
    let dir = tmp.path();
    assert_eq!(
        read(&dir.join("lpn"), "detections.csv"),
        read(&dir.join("spn"), "detections.csv")
    );
}

#[test]
fn run_file_paths_are_relative_to_it() {
    let tmp = setup(MOVING);
    fs::create_dir(tmp.path().join("conf")).unwrap();
    fs::write(
        tmp.path().join("conf/run.toml"),
        "pipeline = \"lpn\"\npreset = \"yolox-like\"\nr = 1.2\nrefs = 3\nsequence = \"../seq.toml\"\noutput = \"../out\"\n",
    )
    .unwrap();
    ok(tmp.path(), &["detect", "-c", "conf/run.toml", "--dump-masks", "pbm"]);
    let out = tmp.path().join("out");
    let metrics: serde_json::Value = serde_json::from_str(&read(&out, "metrics.json")).unwrap();
    assert_eq!(metrics["preset"], "yolox-like");
    assert_eq!(metrics["refs"], 3);
    assert!((metrics["r"].as_f64().unwrap() - 1.2).abs() < 1e-6);
    let pbm = read(&out.join("masks"), "frame_00001_level_0.pbm");
    assert!(pbm.starts_with("P1\n24 16\n"));
    assert!(pbm.contains('1'));
}

#[test]
fn rle_mask_dump() {
    let tmp = setup(MOVING);
    ok(
        tmp.path(),
        &[
            "detect",
            "--sequence",
            "seq.toml",
            "--pipeline",
            "lpn",
            "--dump-masks",
            "rle",
            "-o",
            "out",
        ],
    );
    let text = read(&tmp.path().join("out"), "masks.txt");
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("frame 0 none"));
    assert_eq!(lines.next(), Some("frame 1"));
    let level0 = lines.next().unwrap();
    assert!(level0.starts_with("level 0 stride 8 16x24: "));
    let runs: usize = level0
        .split(": ")
        .nth(1)
        .unwrap()
        .split(' ')
        .map(|r| r.parse::<usize>().unwrap())
        .sum();
    assert_eq!(runs, 16 * 24);
}

#[test]
fn profile_reports_head_parts() {
    let tmp = setup(MOVING);
    ok(
        tmp.path(),
        &["profile", "--sequence", "seq.toml", "--repetitions", "3", "-o", "fcos"],
    );
    let csv = read(&tmp.path().join("fcos"), "profile.csv");
    assert!(csv.starts_with("part,wall_ms,macs,ratio\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("head-level-")).count(), 5);
    assert!(csv.lines().any(|l| l.starts_with("attention,")));
    let partial = read(&tmp.path().join("fcos"), "profile_partial.csv");
    assert!(partial.lines().filter(|l| l.starts_with("head-level-")).count() < 5);
    let summary: serde_json::Value = serde_json::from_str(&read(&tmp.path().join("fcos"), "summary.json")).unwrap();
    assert_eq!(summary["nq"], 16 * 24 + 8 * 12 + 4 * 6 + 2 * 3 + 2);
    let share = summary["head_share"].as_f64().unwrap();
    assert!(share > 0.0 && share < 1.0);

    ok(
        tmp.path(),
        &[
            "profile",
            "--preset",
            "centernet-like",
            "--pipeline",
            "baseline",
            "--sequence",
            "seq.toml",
            "--repetitions",
            "3",
            "-o",
            "cn",
        ],
    );
    let csv = read(&tmp.path().join("cn"), "profile.csv");
    let heads: Vec<&str> = csv.lines().filter(|l| l.starts_with("head-level-")).collect();
    assert_eq!(heads.len(), 1);
    assert!(heads[0].starts_with("head-level-0,"));
}

#[test]
fn profile_fits_the_attention_exponent() {
    let tmp = setup(MOVING);
    let stdout = ok(
        tmp.path(),
        &[
            "profile",
            "--sequence",
            "seq.toml",
            "--pipeline",
            "baseline",
            "--repetitions",
            "3",
            "--nq-sweep",
            "128,256,512",
            "--channels",
            "32",
            "-o",
            "out",
        ],
    );
    assert!(stdout.contains("attention exponent"));
    let sweep: serde_json::Value =
        serde_json::from_str(&read(&tmp.path().join("out"), "attention_sweep.json")).unwrap();
    assert!((sweep["mac_exponent"].as_f64().unwrap() - 2.0).abs() < 0.05);
    assert_eq!(sweep["points"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_writes_one_row_per_value() {
    let tmp = setup(MOVING);
    ok(
        tmp.path(),
        &[
            "sweep",
            "--sequence",
            "seq.toml",
            "--param",
            "T",
            "--values",
            "0,7",
            "--runs",
            "1",
            "-o",
            "out",
        ],
    );
    let csv = read(&tmp.path().join("out"), "sweep_T.csv");
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("value,throughput_ratio,recall,precision,attention_macs,full_frames")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][5], "30");
    assert_eq!(rows[1][5], "4");
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() > 0.0));

    ok(
        tmp.path(),
        &[
            "sweep",
            "--sequence",
            "seq.toml",
            "--param",
            "r",
            "--values",
            "0.5,1.5",
            "--runs",
            "1",
            "--pipeline",
            "lpn",
            "-o",
            "out",
        ],
    );
    let csv = read(&tmp.path().join("out"), "sweep_r.csv");
    let macs: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    assert!(macs[0] < macs[1]);
}
