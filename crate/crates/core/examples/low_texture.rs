//! A corridor-like scene with very few points and many segments, tracked in
//! each feature mode.

use stereo_slam::eval::{relative_pose_errors, rmse, DEFAULT_ASSOCIATION_TOLERANCE};
use stereo_slam::pipeline::{run, FeatureMode, PipelineConfig, RunStatus};
use stereo_slam::sim::{simulate, SimSpec, WorldSpec};

fn main() {
    let spec = SimSpec { world: WorldSpec { points: 20, lines: 800, ..WorldSpec::default() }, ..SimSpec::default() };
    let seq = simulate(&spec);
    let max_points = seq.frames.iter().map(|f| f.points.len()).max().unwrap();
    let min_lines = seq.frames.iter().map(|f| f.lines.len()).min().unwrap();
    println!("at most {max_points} points and at least {min_lines} lines per frame");

    let origin = seq.poses[0];
    for mode in [FeatureMode::Points, FeatureMode::Lines, FeatureMode::PointsLines] {
        let cfg = PipelineConfig { camera: spec.camera, mode, ..PipelineConfig::default() };
        let out = run(&cfg, &seq.frames).expect("non-empty sequence");
        match out.status {
            RunStatus::TrackingLost { frame } => println!("{mode:?}: tracking lost at frame {frame}"),
            RunStatus::Completed => {
                let gt: Vec<_> = out.map.keyframes().map(|k| (k.frame as f64, (&seq.poses[k.frame as usize] * &origin.inverse()).inverse())).collect();
                let errors = relative_pose_errors(&gt, &out.trajectory(), DEFAULT_ASSOCIATION_TOLERANCE).unwrap();
                let t = rmse(&errors.iter().map(|e| e.0).collect::<Vec<_>>()).unwrap();
                println!("{mode:?}: completed, {} keyframes, relative translation RMSE {t:.4} m", out.map.keyframe_count());
            }
        }
    }
}
