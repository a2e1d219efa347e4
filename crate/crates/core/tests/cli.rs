use std::fs;
use std::path::Path;
use std::process::Command;

use pcdan::association::read_tracks;
use pcdan::ingest::{IngestConfig, SequenceSource};
use pcdan::model::ModelWeights;

fn pcdan(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_pcdan"))
        .args(args)
        .env_remove("PCDAN_THREADS")
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_weights(dir: &Path) -> String {
    let w = dir.join("w.bin");
    ModelWeights::random_with_widths(&[3, 16, 32], &[16, 8, 8, 4, 1], 3).unwrap().save(&w).unwrap();
    p(&w).to_string()
}

#[test]
fn synth_populates_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let (code, _, _) = pcdan(&["synth", "--out", p(out), "--objects", "3", "--frames", "20", "--seed", "7"]);
        assert_eq!(code, 0);
    }
    let src = SequenceSource::open(&a, IngestConfig::default()).unwrap();
    assert_eq!(src.frame_count, 20);
    for f in 0..20 {
        for rel in [format!("frames/{f}.xyz"), format!("detections/{f}.csv")] {
            assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap());
        }
    }
}

#[test]
fn synth_without_out_is_usage_error() {
    let (code, out, err) = pcdan(&["synth", "--objects", "3"]);
    assert_eq!(code, 2);
    assert!(out.is_empty());
    assert!(err.contains("Usage"));
}

#[test]
fn synth_reads_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scene.cfg");
    fs::write(&cfg, "objects=2\nframes=6\nseed=3\nleave=3:0\n").unwrap();
    let out = dir.path().join("seq");
    assert_eq!(pcdan(&["synth", "--out", p(&out), "--config", p(&cfg)]).0, 0);
    let src = SequenceSource::open(&out, IngestConfig::default()).unwrap();
    assert_eq!(src.frame_count, 6);
    assert_eq!(src.load_frame(5).unwrap().detections.len(), 1);
}

#[test]
fn tracking_empty_sequence_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    assert_eq!(pcdan(&["synth", "--out", p(&seq), "--objects", "0", "--frames", "4"]).0, 0);
    let tracks = dir.path().join("t.csv");
    let w = small_weights(dir.path());
    let (code, out, _) = pcdan(&["track", "--seq", p(&seq), "--weights", &w, "--out", p(&tracks)]);
    assert_eq!(code, 0);
    assert!(out.contains("seconds_per_frame="));
    assert_eq!(fs::read_to_string(&tracks).unwrap(), "frame,track_id,cx,cy,cz,l,w,h,yaw,conf\n");
}

#[test]
fn full_confidence_threshold_filters_everything() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    assert_eq!(pcdan(&["synth", "--out", p(&seq), "--objects", "3", "--frames", "5"]).0, 0);
    let tracks = dir.path().join("t.csv");
    let w = small_weights(dir.path());
    let args = ["track", "--seq", p(&seq), "--weights", &w, "--out", p(&tracks), "--conf-threshold", "1.0"];
    assert_eq!(pcdan(&args).0, 0);
    assert_eq!(fs::read_to_string(&tracks).unwrap().lines().count(), 1);
}

#[test]
fn track_rows_match_admitted_detections() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    let args = ["synth", "--out", p(&seq), "--objects", "4", "--frames", "8", "--seed", "2", "--fp-rate", "0.5", "--fp-conf-max", "0.9"];
    assert_eq!(pcdan(&args).0, 0);
    let tracks = dir.path().join("t.csv");
    let w = small_weights(dir.path());
    assert_eq!(pcdan(&["track", "--seq", p(&seq), "--weights", &w, "--out", p(&tracks)]).0, 0);
    let src = SequenceSource::open(&seq, IngestConfig::default()).unwrap();
    let admitted: usize = (0..8).map(|f| src.load_admitted(f).unwrap().detections.len()).sum();
    let ts = read_tracks(&tracks).unwrap();
    assert_eq!(ts.entry_count(), admitted);
    assert_eq!(fs::read_to_string(&tracks).unwrap().lines().count() - 1, admitted);
}

#[test]
fn eval_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    assert_eq!(pcdan(&["synth", "--out", p(&seq), "--objects", "3", "--frames", "6"]).0, 0);
    let gt_csv = dir.path().join("gt.csv");
    let ts = pcdan::association::ground_truth_tracks(&SequenceSource::open(&seq, IngestConfig::default()).unwrap()).unwrap();
    pcdan::association::write_tracks(&ts, &gt_csv).unwrap();
    let (code, out, _) = pcdan(&["eval", "--gt", p(&seq), "--pred", p(&gt_csv)]);
    assert_eq!(code, 0);
    let table_mota: f64 = out.lines().next().unwrap().split_whitespace().last().unwrap().parse().unwrap();
    let json: serde_json::Value = serde_json::from_str(&out[out.find('{').unwrap()..]).unwrap();
    assert_eq!(table_mota, 1.0);
    assert_eq!(json["mota"].as_f64().unwrap(), table_mota);
}

#[test]
fn eval_rejects_frames_outside_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    assert_eq!(pcdan(&["synth", "--out", p(&seq), "--objects", "2", "--frames", "3"]).0, 0);
    let pred = dir.path().join("pred.csv");
    fs::write(&pred, "frame,track_id,cx,cy,cz,l,w,h,yaw,conf\n7,0,0,0,1,2,1,2,0,1\n").unwrap();
    let (code, out, err) = pcdan(&["eval", "--gt", p(&seq), "--pred", p(&pred)]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("frame 7"));
}

#[test]
fn losscheck_contract() {
    let (code, out, _) = pcdan(&["losscheck"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 5);
    assert_eq!(pcdan(&["losscheck", "--trials", "0"]).0, 2);
    assert_eq!(pcdan(&["losscheck", "--corrupt-gradient", "0.01"]).0, 1);
}

#[test]
fn unknown_flag_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    assert_eq!(pcdan(&["synth", "--out", p(&out), "--colour", "red"]).0, 2);
    assert!(!out.exists());
}
