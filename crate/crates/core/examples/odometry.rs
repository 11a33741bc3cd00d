//! Frame-to-frame motion from stereo point and line correspondences, with the
//! entropy ratio that drives keyframe selection.

use stereo_slam::lie::{compose_with_covariance, Tangent};
use stereo_slam::odometry::{entropy, estimate_motion, keyframe_decision, DEFAULT_ENTROPY_RATIO};
use stereo_slam::pipeline::{frame_pair, PipelineConfig};
use stereo_slam::sim::{simulate, Shape, SimSpec, TrajectorySpec};

fn main() {
    let spec = SimSpec { trajectory: TrajectorySpec { shape: Shape::Line, length: 3.0, frames: 31 }, ..SimSpec::default() };
    let seq = simulate(&spec);
    let cfg = PipelineConfig { camera: spec.camera, ..PipelineConfig::default() };

    // Motion accumulated since the last keyframe and the entropy of its first step.
    let mut span = None;
    let mut h_first = 0.0;
    println!("frame  points  lines  inliers  |t| (m)  ratio  keyframe");
    for k in 1..seq.frames.len() {
        let pair = frame_pair(&cfg.camera, &seq.frames[k - 1], &seq.frames[k], cfg.match_ratio, &cfg.line_filter);
        let motion = match estimate_motion(&cfg.camera, &pair, &cfg.odometry, &Tangent::zero()) {
            Ok(m) => m,
            Err(e) => {
                println!("{k:5}  {e}");
                continue;
            }
        };
        let total = match &span {
            None => {
                h_first = entropy(&motion.estimate.covariance).unwrap();
                motion.estimate
            }
            Some(s) => compose_with_covariance(&motion.estimate, s),
        };
        let h_span = entropy(&total.covariance).unwrap();
        let new_keyframe = keyframe_decision(h_span, h_first, DEFAULT_ENTROPY_RATIO);
        println!(
            "{k:5}  {:6}  {:5}  {:6.1}%  {:.4}  {:.3}  {}",
            pair.points.len(),
            pair.lines.len(),
            100.0 * motion.inlier_ratio,
            motion.estimate.mean.translation().norm(),
            h_span / h_first,
            if new_keyframe { "yes" } else { "" }
        );
        span = if new_keyframe { None } else { Some(total) };
    }
}
