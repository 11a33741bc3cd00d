//! Builds a map with the tracker, disturbs the local window around the newest
//! keyframe and lets local bundle adjustment pull it back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereo_slam::lie::Tangent;
use stereo_slam::mapping::{local_bundle_adjustment, LocalBaProblem};
use stereo_slam::pipeline::{run, PipelineConfig};
use stereo_slam::sim::{simulate, Shape, SimSpec, TrajectorySpec};

fn main() {
    let spec = SimSpec { trajectory: TrajectorySpec { shape: Shape::Line, length: 4.0, frames: 40 }, ..SimSpec::default() };
    let seq = simulate(&spec);
    let cfg = PipelineConfig { camera: spec.camera, loop_enabled: false, ..PipelineConfig::default() };
    let out = run(&cfg, &seq.frames).expect("non-empty sequence");
    let newest = out.map.last_keyframe().unwrap().id;

    let mut problem = LocalBaProblem::from_map(&out.map, newest).unwrap();
    println!(
        "local window: {} keyframes ({} fixed), {} points, {} lines, {} observations",
        problem.poses.len(),
        problem.fixed.len(),
        problem.points.len(),
        problem.lines.len(),
        problem.observations.len()
    );
    let before = problem.mean_residual(&cfg.camera);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in problem.free_keyframes() {
        let d = Tangent::from_slice(&std::array::from_fn(|_| rng.random_range(-5e-3..5e-3)));
        let pose = problem.poses.get_mut(&k).unwrap();
        *pose = pose.retract(&d);
    }
    for x in problem.points.values_mut() {
        x.iter_mut().for_each(|c| *c += rng.random_range(-0.02..0.02));
    }
    let disturbed = problem.mean_residual(&cfg.camera);

    let report = local_bundle_adjustment(&mut problem, &cfg.camera, &cfg.mapping.ba).unwrap();
    println!("mean residual: {before:.3} px as mapped, {disturbed:.3} px disturbed, {:.3} px refined", problem.mean_residual(&cfg.camera));
    println!("{:?} after {} iterations; cost {:.2} -> {:.2}", report.status, report.iterations, report.initial_cost, report.final_cost);
}
