//! A square of keyframe poses integrated from biased odometry, corrected by a
//! single loop edge back to the start.

use std::collections::BTreeMap;

use stereo_slam::lie::{Pose, Tangent, Vec3};
use stereo_slam::loop_closure::{optimize_pose_graph, PgoConfig, PoseEdge};
use stereo_slam::map::KeyFrameId;

fn main() {
    let turn = std::f64::consts::FRAC_PI_2;
    // Camera-to-world truth: four sides of five 1 m steps, turning left at each corner.
    let mut truth = vec![Pose::identity()];
    for k in 1..20 {
        let yaw = if k % 5 == 0 { turn } else { 0.0 };
        let step = Pose::exp(&Tangent::new(Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, yaw, 0.0)));
        truth.push(&truth[k - 1] * &step);
    }
    // Poses map world to camera.
    let truth: Vec<Pose> = truth.iter().map(Pose::inverse).collect();
    let bias = Pose::exp(&Tangent::new(Vec3::new(0.01, 0.0, 0.02), Vec3::new(0.0, 0.01, 0.0)));

    let mut poses = BTreeMap::new();
    let mut edges = Vec::new();
    let mut estimate = truth[0];
    poses.insert(KeyFrameId(0), estimate);
    for k in 1..truth.len() {
        let measured = &(&truth[k] * &truth[k - 1].inverse()) * &bias;
        estimate = &measured * &estimate;
        poses.insert(KeyFrameId(k as u64), estimate);
        // An edge i -> j measures T_i·T_j⁻¹.
        edges.push(PoseEdge { i: KeyFrameId(k as u64 - 1), j: KeyFrameId(k as u64), measurement: measured.inverse().log() });
    }
    let last = truth.len() - 1;
    edges.push(PoseEdge { i: KeyFrameId(0), j: KeyFrameId(last as u64), measurement: (&truth[0] * &truth[last].inverse()).log() });

    let error = |p: &BTreeMap<KeyFrameId, Pose>| (p[&KeyFrameId(last as u64)].center() - truth[last].center()).norm();
    println!("last keyframe position error before: {:.3} m", error(&poses));
    let result = optimize_pose_graph(&poses, &edges, KeyFrameId(0), &PgoConfig::default()).unwrap();
    println!("after {} iterations (cost {:.4} -> {:.2e}): {:.4} m", result.iterations, result.initial_cost, result.final_cost, error(&result.poses));
}
