//! Runs the full pipeline around a circular loop twice, with and without loop
//! closure, and compares the final keyframe position error.

use std::time::Instant;

use stereo_slam::eval::{evaluate, DEFAULT_SUBSEQUENCE_LENGTHS};
use stereo_slam::pipeline::{run, Event, PipelineConfig, RunOutput};
use stereo_slam::sim::{simulate, Sequence, SimSpec, WorldSpec};

fn final_error(seq: &Sequence, out: &RunOutput) -> f64 {
    let last = out.map.last_keyframe().unwrap();
    let truth = &seq.poses[last.frame as usize] * &seq.poses[0].inverse();
    (last.pose.center() - truth.center()).norm()
}

fn main() {
    env_logger::init();
    let spec = SimSpec { world: WorldSpec { points: 1500, lines: 300, ..WorldSpec::default() }, ..SimSpec::default() };
    let seq = simulate(&spec);
    let cfg = PipelineConfig { camera: spec.camera, ..PipelineConfig::default() };

    let start = Instant::now();
    let out = run(&cfg, &seq.frames).expect("non-empty sequence");
    let elapsed = start.elapsed();
    let open = run(&PipelineConfig { loop_enabled: false, ..cfg.clone() }, &seq.frames).expect("non-empty sequence");

    let metrics = out.metrics();
    println!("{:?}: {} keyframes, {} points, {} lines in {elapsed:.2?}", metrics.status, metrics.keyframes, metrics.points, metrics.lines);
    for e in out.events.iter().filter(|e| !matches!(e, Event::Keyframe { .. })) {
        println!("{}", serde_json::to_string(e).unwrap());
    }

    // Ground truth in the first camera's frame, as camera-to-world poses.
    let origin = seq.poses[0];
    let gt: Vec<_> = out.map.keyframes().map(|k| (k.frame as f64, (&seq.poses[k.frame as usize] * &origin.inverse()).inverse())).collect();
    if let Ok(report) = evaluate(&gt, &out.trajectory(), &DEFAULT_SUBSEQUENCE_LENGTHS) {
        println!("{}", serde_json::to_string_pretty(&report).unwrap());
    }
    println!("final keyframe position error: {:.4} m without loop closure, {:.4} m with", final_error(&seq, &open), final_error(&seq, &out));
}
