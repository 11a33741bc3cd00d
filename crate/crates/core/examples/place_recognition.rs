//! Scores every keyframe of a circular run against the last one with the
//! fused point and line bag-of-words similarity, then runs loop detection.

use stereo_slam::loop_closure::detect_loop_candidate;
use stereo_slam::pipeline::{run, PipelineConfig};
use stereo_slam::sim::{simulate, SimSpec, WorldSpec};

fn main() {
    let spec = SimSpec { world: WorldSpec { points: 1500, lines: 300, ..WorldSpec::default() }, ..SimSpec::default() };
    let seq = simulate(&spec);
    let cfg = PipelineConfig { camera: spec.camera, loop_enabled: false, ..PipelineConfig::default() };
    let out = run(&cfg, &seq.frames).expect("non-empty sequence");

    let last = out.map.last_keyframe().unwrap().id;
    let mut scores: Vec<_> = out
        .database
        .keyframes()
        .filter(|&k| k != last)
        .map(|k| (out.database.score(last, k).unwrap(), k))
        .collect();
    scores.sort_by(|a, b| b.0.total_cmp(&a.0));
    println!("keyframe {} of {}; best matches:", last.0, out.database.len());
    for (s, k) in scores.iter().take(5) {
        println!("  keyframe {:3} (frame {:3})  score {s:.3}", k.0, out.map.keyframe(*k).unwrap().frame);
    }
    match detect_loop_candidate(&out.database, &out.map, last, &cfg.loop_closure) {
        Some(d) => println!("loop candidate: {} -> {} (score {:.3})", d.current.0, d.old.0, d.score),
        None => println!("no loop candidate"),
    }
}
