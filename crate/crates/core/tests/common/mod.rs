//! Simulator-backed fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereo_slam::lie::{MotionEstimate, Pose, StereoCamera, Tangent, Vec3};
use stereo_slam::map::{KeyFrame, KeyFrameId, LineId, MapConfig, PointId, WorldMap};
use stereo_slam::mapping::{BaObservation, LocalBaProblem, Measurement};
use stereo_slam::sim::{simulate, NoiseModel, Sequence, Shape, SimSpec, TrajectorySpec, WorldSpec};

/// Straight walk through the default room, 0.1 m between frames.
pub fn line_sequence(frames: usize, noise: NoiseModel) -> (SimSpec, Sequence) {
    let spec = SimSpec {
        trajectory: TrajectorySpec { shape: Shape::Line, length: 0.1 * (frames - 1) as f64, frames },
        noise,
        world: WorldSpec { points: 2000, lines: 300, ..WorldSpec::default() },
        ..SimSpec::default()
    };
    let seq = simulate(&spec);
    (spec, seq)
}

/// Pose of frame `k` in the coordinates of the first camera, which is the
/// world frame every estimator in the crate uses.
pub fn truth_pose(seq: &Sequence, k: usize) -> Pose {
    &seq.poses[k] * &seq.poses[0].inverse()
}

pub fn truth_point(seq: &Sequence, x: &Vec3) -> Vec3 {
    seq.poses[0].transform_point(x)
}

pub fn random_tangent(rng: &mut ChaCha8Rng, scale: f64) -> Tangent {
    Tangent::from_slice(&std::array::from_fn(|_| rng.random_range(-scale..scale)))
}

pub fn random_vec3(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

/// Map whose keyframes sit at the true poses of `frames` and whose landmarks
/// are the true world elements, bound through the simulator labels.
pub struct TruthMap {
    pub map: WorldMap,
    pub points: BTreeMap<u64, PointId>,
    pub lines: BTreeMap<u64, LineId>,
}

impl TruthMap {
    pub fn new(seq: &Sequence, cam: &StereoCamera, frames: &[usize]) -> Self {
        let mut out = TruthMap { map: WorldMap::new(MapConfig::default()), points: BTreeMap::new(), lines: BTreeMap::new() };
        for &k in frames {
            out.insert(seq, cam, k, None);
        }
        out
    }

    /// Inserts frame `k` as keyframe `k`; `withhold` leaves one point label unbound.
    pub fn insert(&mut self, seq: &Sequence, cam: &StereoCamera, k: usize, withhold: Option<u64>) -> KeyFrameId {
        let id = KeyFrameId(k as u64);
        let frame = &seq.frames[k];
        let mut kf = KeyFrame::new(id, k as u64, truth_pose(seq, k), MotionEstimate::identity(), frame.points.clone(), frame.lines.clone());
        for (i, o) in frame.points.iter().enumerate() {
            let Some(h) = o.landmark_hint else { continue };
            if Some(h) == withhold {
                continue;
            }
            let lm = seq.world.points.iter().find(|p| p.id == h).expect("labelled point");
            let pid = *self.points.entry(h).or_insert_with(|| self.map.add_point(truth_point(seq, &lm.position), lm.signature, id));
            kf.point_bindings[i] = Some(pid);
        }
        for (i, o) in frame.lines.iter().enumerate() {
            let Some(h) = o.landmark_hint else { continue };
            let s = seq.world.segments.iter().find(|s| s.id == h).expect("labelled segment");
            let (p, q) = (truth_point(seq, &s.p), truth_point(seq, &s.q));
            let lid = *self.lines.entry(h).or_insert_with(|| self.map.add_line(p, q, s.signature, id));
            kf.line_bindings[i] = Some(lid);
        }
        self.map.insert_keyframe(kf, cam).expect("insert keyframe")
    }
}

/// Ground-truth local BA problem over `frames`, keeping at most `max_points`
/// points and `max_lines` segments seen at least twice. Keyframe ids are frame
/// indices; `fixed` lists the frames held constant.
pub fn truth_ba_problem(seq: &Sequence, frames: &[usize], fixed: &[usize], max_points: usize, max_lines: usize) -> LocalBaProblem {
    let mut problem = LocalBaProblem::default();
    for &k in frames {
        problem.poses.insert(KeyFrameId(k as u64), truth_pose(seq, k));
    }
    problem.fixed = fixed.iter().map(|&k| KeyFrameId(k as u64)).collect();

    let mut point_obs: BTreeMap<u64, Vec<BaObservation>> = BTreeMap::new();
    let mut line_obs: BTreeMap<u64, Vec<BaObservation>> = BTreeMap::new();
    for &k in frames {
        let kf = KeyFrameId(k as u64);
        for o in &seq.frames[k].points {
            if let Some(h) = o.landmark_hint {
                let m = Measurement::Point { id: PointId(h), pixel: o.pixel() };
                point_obs.entry(h).or_default().push(BaObservation { keyframe: kf, measurement: m });
            }
        }
        for o in &seq.frames[k].lines {
            if let (Some(h), Ok(coeffs)) = (o.landmark_hint, o.line_coeffs()) {
                let m = Measurement::Line { id: LineId(h), coeffs };
                line_obs.entry(h).or_default().push(BaObservation { keyframe: kf, measurement: m });
            }
        }
    }
    for (h, obs) in point_obs.into_iter().filter(|(_, o)| o.len() >= 2).take(max_points) {
        let lm = seq.world.points.iter().find(|p| p.id == h).expect("labelled point");
        problem.points.insert(PointId(h), truth_point(seq, &lm.position));
        problem.observations.extend(obs);
    }
    for (h, obs) in line_obs.into_iter().filter(|(_, o)| o.len() >= 2).take(max_lines) {
        let s = seq.world.segments.iter().find(|s| s.id == h).expect("labelled segment");
        problem.lines.insert(LineId(h), (truth_point(seq, &s.p), truth_point(seq, &s.q)));
        problem.observations.extend(obs);
    }
    problem
}

/// Moves free poses by up to `pose_scale` per tangent component and every
/// landmark coordinate by up to `landmark_scale`.
pub fn perturb(problem: &LocalBaProblem, pose_scale: f64, landmark_scale: f64, seed: u64) -> LocalBaProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = problem.clone();
    for k in problem.free_keyframes() {
        let pose = out.poses.get_mut(&k).unwrap();
        *pose = pose.retract(&random_tangent(&mut rng, pose_scale));
    }
    for x in out.points.values_mut() {
        *x += random_vec3(&mut rng, landmark_scale);
    }
    for (p, q) in out.lines.values_mut() {
        *p += random_vec3(&mut rng, landmark_scale);
        *q += random_vec3(&mut rng, landmark_scale);
    }
    out
}

/// Distance from `x` to the infinite line through `p` and `q`.
pub fn distance_to_line(x: &Vec3, p: &Vec3, q: &Vec3) -> f64 {
    let d = (q - p).normalize();
    let r = x - p;
    (r - d * r.dot(&d)).norm()
}

/// Largest deviation between two problems over the same variables: pose
/// tangent norms, point distances, and segment endpoint distances to the
/// reference infinite line.
pub fn problem_error(a: &LocalBaProblem, truth: &LocalBaProblem) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, pose) in &a.poses {
        worst = worst.max((pose * &truth.poses[k].inverse()).log().norm());
    }
    for (id, x) in &a.points {
        worst = worst.max((x - truth.points[id]).norm());
    }
    for (id, (p, q)) in &a.lines {
        let (tp, tq) = truth.lines[id];
        worst = worst.max(distance_to_line(p, &tp, &tq)).max(distance_to_line(q, &tp, &tq));
    }
    worst
}
