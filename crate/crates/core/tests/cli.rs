use std::path::Path;
use std::process::{Command, Output};

use stereo_slam::lie::StereoCamera;
use stereo_slam::tracks::{frame_to_json, read_tracks};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereo-slam")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const LINE_SPEC: &str = "shape = line\nlength = 3\nframes = 20\npoints = 1500\nlines = 300\n";

#[test]
fn simulated_tracks_round_trip_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.txt", LINE_SPEC);
    let out = cli(dir.path(), &["simulate", "--spec", "spec.txt", "--seed", "3", "--out", "t.jsonl", "--gt", "gt.tum"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let frames = read_tracks(text.as_bytes(), &StereoCamera::default()).unwrap();
    assert_eq!(frames.len(), 20);
    let rewritten: String = frames.iter().map(|f| frame_to_json(f) + "\n").collect();
    assert_eq!(rewritten, text);
    let gt = std::fs::read_to_string(dir.path().join("gt.tum")).unwrap();
    assert_eq!(gt.lines().count(), 20);
}

#[test]
fn run_writes_every_artifact_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.txt", LINE_SPEC);
    assert!(cli(dir.path(), &["simulate", "--spec", "spec.txt", "--out", "t.jsonl", "--gt", "gt.tum"]).status.success());
    write(dir.path(), "run.cfg", "# points and lines\nmode = pl\nloop_enabled = false\n");
    let out = cli(
        dir.path(),
        &[
            "run", "--tracks", "t.jsonl", "--config", "run.cfg", "--traj", "est.tum", "--map", "map.json", "--metrics", "m.json",
            "--sim-matrix", "s.csv", "--events", "ev.jsonl", "--gt", "gt.tum",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(metrics["status"], "completed");
    let keyframes = metrics["keyframes"].as_u64().unwrap() as usize;
    assert!(metrics["evaluation"]["rpe_translation_rmse"].as_f64().unwrap() < 0.05);
    assert_eq!(std::fs::read_to_string(dir.path().join("est.tum")).unwrap().lines().count(), keyframes);
    assert_eq!(std::fs::read_to_string(dir.path().join("s.csv")).unwrap().lines().count(), keyframes + 1);
    let events = std::fs::read_to_string(dir.path().join("ev.jsonl")).unwrap();
    assert_eq!(events.lines().filter(|l| l.contains("\"event\":\"keyframe\"")).count(), keyframes);
    assert!(std::fs::read_to_string(dir.path().join("map.json")).unwrap().starts_with('{'));

    let out = cli(dir.path(), &["eval", "--gt", "gt.tum", "--est", "est.tum", "--lengths", "1,2", "--out", "e.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("e.json")).unwrap()).unwrap();
    assert_eq!(report["associated_poses"].as_u64().unwrap() as usize, keyframes);
    assert!(report["kitti"]["t_rel"].as_f64().unwrap() < 5.0);
}

#[test]
fn lost_tracking_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "sparse.txt", "points = 20\nlines = 800\n");
    let out = cli(dir.path(), &["run", "--sim", "sparse.txt", "--mode", "points", "--metrics", "m.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(metrics["status"], "tracking_lost");
}

#[test]
fn bad_input_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let desc = "0".repeat(64);
    write(dir.path(), "bad.jsonl", &format!("{{\"frame\":0,\"points\":[{{\"u\":1,\"v\":2,\"d\":3,\"desc\":\"{desc}\"}}]}}\n{{\"frame\":1,\"points\":[{{\"u\":1}}]}}\n"));
    let out = cli(dir.path(), &["run", "--tracks", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    assert_eq!(cli(dir.path(), &["run", "--tracks", "missing.jsonl"]).status.code(), Some(3));
    write(dir.path(), "bad.cfg", "no_such_key = 1\n");
    write(dir.path(), "ok.jsonl", &format!("{{\"frame\":0,\"points\":[{{\"u\":1,\"v\":2,\"d\":3,\"desc\":\"{desc}\"}}]}}\n"));
    assert_eq!(cli(dir.path(), &["run", "--tracks", "ok.jsonl", "--config", "bad.cfg"]).status.code(), Some(3));
    assert_eq!(cli(dir.path(), &["run", "--tracks", "ok.jsonl", "--mode", "both"]).status.code(), Some(3));
    write(dir.path(), "bad.tum", "0 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n");
    assert_eq!(cli(dir.path(), &["eval", "--gt", "bad.tum", "--est", "bad.tum"]).status.code(), Some(3));
    assert_eq!(cli(dir.path(), &["simulate", "--spec", "bad.cfg", "--out", "x.jsonl"]).status.code(), Some(3));
}

#[test]
fn depth_tracks_run_like_disparity_tracks() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "spec.txt", LINE_SPEC);
    assert!(cli(dir.path(), &["simulate", "--spec", "spec.txt", "--out", "t.jsonl"]).status.success());
    // Re-encode every disparity as depth Z = b·f / d.
    let cam = StereoCamera::default();
    let bf = cam.baseline * cam.fx;
    let text = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let mut depth = String::new();
    for line in text.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        for p in v["points"].as_array_mut().unwrap() {
            let d = p["d"].as_f64().unwrap();
            p.as_object_mut().unwrap().remove("d");
            p["z"] = (bf / d).into();
        }
        for l in v["lines"].as_array_mut().unwrap() {
            for (dk, zk) in [("dp", "zp"), ("dq", "zq")] {
                let d = l[dk].as_f64().unwrap();
                l.as_object_mut().unwrap().remove(dk);
                l[zk] = (bf / d).into();
            }
        }
        depth.push_str(&v.to_string());
        depth.push('\n');
    }
    write(dir.path(), "depth.jsonl", &depth);
    let a = read_tracks(text.as_bytes(), &cam).unwrap();
    let b = read_tracks(depth.as_bytes(), &cam).unwrap();
    for (fa, fb) in a.iter().zip(&b) {
        for (pa, pb) in fa.points.iter().zip(&fb.points) {
            assert!((pa.disparity - pb.disparity).abs() < 1e-9);
        }
    }
    for name in ["t.jsonl", "depth.jsonl"] {
        let out = cli(dir.path(), &["run", "--tracks", name, "--traj", &format!("{name}.tum")]);
        assert_eq!(out.status.code(), Some(0));
    }
}
