//! Deterministic synthetic stereo scenes.
//!
//! A box room (camera convention: `x` right, `y` down, `z` forward) holds point
//! landmarks on every face and line segments on the walls. Trajectories move in
//! the `x`–`z` plane with the camera looking along the direction of motion.
//! All randomness comes from ChaCha8 seeded with the run seed; frame `k` of a
//! rendering uses stream `k`, so frames can be produced independently.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BinaryDescriptor, LineObservation, PointObservation, DESCRIPTOR_BITS};
use crate::kv::{KeyValues, KvError};
use crate::lie::{Mat3, Pose, StereoCamera, Vec2, Vec3};
use crate::tracks::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    /// Room half extents in meters.
    pub half_x: f64,
    pub half_y: f64,
    pub half_z: f64,
    pub points: usize,
    pub lines: usize,
    pub min_segment: f64,
    pub max_segment: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self { half_x: 6.0, half_y: 2.0, half_z: 6.0, points: 3000, lines: 400, min_segment: 0.4, max_segment: 1.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark3 {
    pub id: u64,
    pub position: Vec3,
    pub signature: BinaryDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment3 {
    pub id: u64,
    pub p: Vec3,
    pub q: Vec3,
    pub signature: BinaryDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    pub seed: u64,
    pub points: Vec<Landmark3>,
    pub segments: Vec<Segment3>,
}

impl SyntheticWorld {
    pub fn contains(&self, x: &Vec3) -> bool {
        let s = &self.spec;
        let eps = 1e-9;
        x.x.abs() <= s.half_x + eps && x.y.abs() <= s.half_y + eps && x.z.abs() <= s.half_z + eps
    }
}

fn random_descriptor(rng: &mut ChaCha8Rng) -> BinaryDescriptor {
    BinaryDescriptor::from_words([rng.random(), rng.random(), rng.random(), rng.random()])
}

/// Wall `k ∈ 0..4` as (origin corner, unit horizontal direction, width, inward normal).
fn wall(spec: &WorldSpec, k: usize) -> (Vec3, Vec3, f64) {
    let (hx, hz) = (spec.half_x, spec.half_z);
    match k {
        0 => (Vec3::new(-hx, 0.0, hz), Vec3::x(), 2.0 * hx),
        1 => (Vec3::new(hx, 0.0, -hz), -Vec3::x(), 2.0 * hx),
        2 => (Vec3::new(-hx, 0.0, -hz), Vec3::z(), 2.0 * hz),
        _ => (Vec3::new(hx, 0.0, hz), -Vec3::z(), 2.0 * hz),
    }
}

/// Samples points on all six faces (area-weighted) and segments on the walls:
/// vertical, horizontal, and pieces of the floor and ceiling edges.
pub fn build_world(spec: &WorldSpec, seed: u64) -> SyntheticWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hx, hy, hz) = (spec.half_x, spec.half_y, spec.half_z);
    let areas = [2.0 * hx * 2.0 * hy, 2.0 * hx * 2.0 * hy, 2.0 * hz * 2.0 * hy, 2.0 * hz * 2.0 * hy, 4.0 * hx * hz, 4.0 * hx * hz];
    let total: f64 = areas.iter().sum();
    let mut points = Vec::with_capacity(spec.points);
    for id in 0..spec.points {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        while face < 5 && pick >= areas[face] {
            pick -= areas[face];
            face += 1;
        }
        let position = if face < 4 {
            let (origin, dir, width) = wall(spec, face);
            origin + dir * rng.random_range(0.0..width) + Vec3::y() * rng.random_range(-hy..hy)
        } else {
            let y = if face == 4 { hy } else { -hy };
            Vec3::new(rng.random_range(-hx..hx), y, rng.random_range(-hz..hz))
        };
        points.push(Landmark3 { id: id as u64, position, signature: random_descriptor(&mut rng) });
    }
    let mut segments = Vec::with_capacity(spec.lines);
    for id in 0..spec.lines {
        let (origin, dir, width) = wall(spec, rng.random_range(0..4));
        let len = rng.random_range(spec.min_segment..=spec.max_segment);
        let (p, q) = match rng.random_range(0..4) {
            // Vertical segment.
            0 | 1 => {
                let l = len.min(2.0 * hy);
                let s = rng.random_range(0.0..width);
                let y0 = rng.random_range(-hy..=hy - l);
                let base = origin + dir * s;
                (base + Vec3::y() * y0, base + Vec3::y() * (y0 + l))
            }
            // Horizontal segment on the wall.
            2 => {
                let l = len.min(width);
                let s = rng.random_range(0.0..=width - l);
                let y = rng.random_range(-hy..hy);
                let base = origin + Vec3::y() * y;
                (base + dir * s, base + dir * (s + l))
            }
            // Piece of the floor or ceiling edge.
            _ => {
                let l = len.min(width);
                let s = rng.random_range(0.0..=width - l);
                let y = if rng.random_bool(0.5) { hy } else { -hy };
                let base = origin + Vec3::y() * y;
                (base + dir * s, base + dir * (s + l))
            }
        };
        segments.push(Segment3 { id: id as u64, p, q, signature: random_descriptor(&mut rng) });
    }
    SyntheticWorld { spec: *spec, seed, points, segments }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Line,
    CircleLoop,
    FigureEight,
}

impl FromStr for Shape {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "line" => Ok(Shape::Line),
            "circle-loop" | "circle" => Ok(Shape::CircleLoop),
            "figure-eight" => Ok(Shape::FigureEight),
            other => Err(format!("unknown trajectory shape {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub shape: Shape,
    /// Path length in meters; consecutive positions are `length / (frames − 1)` apart.
    pub length: f64,
    pub frames: usize,
}

/// World-to-camera pose of a camera at `position` looking along `heading`
/// (horizontal), with image `y` pointing down the world `y` axis.
pub fn look_along(position: &Vec3, heading: &Vec3) -> Pose {
    let z = Vec3::new(heading.x, 0.0, heading.z).normalize();
    let y = Vec3::y();
    let x = y.cross(&z);
    let r_wc = Mat3::from_columns(&[x, y, z]);
    let r = r_wc.transpose();
    Pose::new(r, -(r * position))
}

/// Camera poses along the chosen shape.
///
/// * `line`: straight along `+z` through the room center.
/// * `circle-loop`: a regular polygon inscribed in a circle about the room
///   center; the last pose coincides with the first.
/// * `figure-eight`: a lemniscate walked with constant chord length.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Vec<Pose> {
    let n = spec.frames.max(2);
    let step = spec.length / (n - 1) as f64;
    match spec.shape {
        Shape::Line => {
            let start = Vec3::new(0.0, 0.0, -spec.length / 2.0);
            (0..n).map(|k| look_along(&(start + Vec3::z() * step * k as f64), &Vec3::z())).collect()
        }
        Shape::CircleLoop => {
            let dtheta = 2.0 * PI / (n - 1) as f64;
            let radius = step / (2.0 * (dtheta / 2.0).sin());
            (0..n)
                .map(|k| {
                    let th = if k == n - 1 { 0.0 } else { dtheta * k as f64 };
                    // Heading along the chord direction at this vertex (tangent of the circle).
                    let pos = Vec3::new(radius * th.cos(), 0.0, radius * th.sin());
                    look_along(&pos, &Vec3::new(-th.sin(), 0.0, th.cos()))
                })
                .collect()
        }
        Shape::FigureEight => {
            // Gerono lemniscate x = a sin t, z = a sin t cos t, scaled so its length matches.
            let curve = |t: f64, a: f64| Vec3::new(a * t.sin(), 0.0, a * t.sin() * t.cos());
            let dense = 20_000;
            let unit_len: f64 = (0..dense)
                .map(|i| {
                    let t0 = 2.0 * PI * i as f64 / dense as f64;
                    let t1 = 2.0 * PI * (i + 1) as f64 / dense as f64;
                    (curve(t1, 1.0) - curve(t0, 1.0)).norm()
                })
                .sum();
            let a = spec.length / unit_len;
            let mut positions = vec![curve(0.0, a)];
            let mut t = 0.0;
            while positions.len() < n {
                let cur = *positions.last().unwrap();
                // Bisection for the next parameter at Euclidean distance `step`.
                let (mut lo, mut hi) = (t, t + 0.5);
                while (curve(hi, a) - cur).norm() < step {
                    hi += 0.5;
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if (curve(mid, a) - cur).norm() < step {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                t = 0.5 * (lo + hi);
                positions.push(curve(t, a));
            }
            (0..n)
                .map(|k| {
                    let heading = if k + 1 < n { positions[k + 1] - positions[k] } else { positions[k] - positions[k - 1] };
                    look_along(&positions[k], &heading)
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Pixel noise standard deviation, applied independently in both views.
    pub sigma: f64,
    /// Each segment endpoint moves inward by `U(0, truncation)` of the visible length.
    pub truncation: f64,
    pub bit_flip: f64,
    /// Extra observations with random pixels and fresh descriptors, as a fraction of the visible ones.
    pub outlier_rate: f64,
    pub max_range: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { sigma: 0.5, truncation: 0.3, bit_flip: 0.05, outlier_rate: 0.0, max_range: 20.0 }
    }
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self { sigma: 0.0, truncation: 0.0, bit_flip: 0.0, outlier_rate: 0.0, max_range: 20.0 }
    }
}

fn noisy_descriptor(sig: &BinaryDescriptor, p: f64, rng: &mut ChaCha8Rng) -> BinaryDescriptor {
    let mut d = *sig;
    if p > 0.0 {
        for b in 0..DESCRIPTOR_BITS {
            if rng.random_bool(p) {
                d.flip(b);
            }
        }
    }
    d
}

/// Interval of `t ∈ [0, 1]` for which `pc + t·dc` lies inside the image frustum
/// (with a one-pixel margin) and in front of the `near` plane.
fn frustum_interval(cam: &StereoCamera, pc: &Vec3, dc: &Vec3, near: f64) -> Option<(f64, f64)> {
    let m = 1.0;
    let (w, h) = (cam.width as f64, cam.height as f64);
    // Each half-space is a·X ≥ 0 with X = pc + t·dc.
    let planes = [
        Vec3::new(0.0, 0.0, 1.0),
        Vec3::new(cam.fx, 0.0, cam.cx - m),
        Vec3::new(-cam.fx, 0.0, w - m - cam.cx),
        Vec3::new(0.0, cam.fy, cam.cy - m),
        Vec3::new(0.0, -cam.fy, h - m - cam.cy),
    ];
    let offsets = [-near, 0.0, 0.0, 0.0, 0.0];
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for (a, off) in planes.iter().zip(offsets) {
        let c0 = a.dot(pc) + off;
        let c1 = a.dot(dc);
        if c1.abs() < 1e-15 {
            if c0 < 0.0 {
                return None;
            }
        } else {
            let t = -c0 / c1;
            if c1 > 0.0 {
                lo = lo.max(t);
            } else {
                hi = hi.min(t);
            }
        }
    }
    (hi > lo).then_some((lo, hi))
}

/// Observations of the world from camera pose `pose` (world to camera).
pub fn render_observations(
    world: &SyntheticWorld,
    pose: &Pose,
    cam: &StereoCamera,
    noise: &NoiseModel,
    seed: u64,
    frame: u64,
) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame);
    let gauss = Normal::new(0.0, noise.sigma.max(0.0)).expect("finite sigma");
    let sample = |rng: &mut ChaCha8Rng| if noise.sigma > 0.0 { gauss.sample(rng) } else { 0.0 };
    let near = cam.min_depth.max(0.1);
    let mut out = Frame { index: frame, ..Frame::default() };

    for lm in &world.points {
        let pc = pose.transform_point(&lm.position);
        if pc.z <= near || pc.norm() > noise.max_range {
            continue;
        }
        let Ok(px) = cam.project_camera_point(&pc) else { continue };
        let Ok(d) = cam.disparity_of(&pc) else { continue };
        if !cam.in_image(&px) {
            continue;
        }
        let (nu, nv, nr) = (sample(&mut rng), sample(&mut rng), sample(&mut rng));
        let disparity = d + nu - nr;
        let u = px.x + nu;
        let v = px.y + nv;
        if disparity <= cam.min_disparity || !cam.in_image(&Vec2::new(u, v)) {
            continue;
        }
        let descriptor = noisy_descriptor(&lm.signature, noise.bit_flip, &mut rng);
        out.points.push(PointObservation { u, v, disparity, descriptor, landmark_hint: Some(lm.id) });
    }

    for seg in &world.segments {
        let pc = pose.transform_point(&seg.p);
        let qc = pose.transform_point(&seg.q);
        let Some((t0, t1)) = frustum_interval(cam, &pc, &(qc - pc), near) else { continue };
        let cut0 = rng.random_range(0.0..=1.0) * noise.truncation;
        let cut1 = rng.random_range(0.0..=1.0) * noise.truncation;
        let span = t1 - t0;
        let (a, b) = (t0 + cut0 * span, t1 - cut1 * span);
        let xa = pc + (qc - pc) * a;
        let xb = pc + (qc - pc) * b;
        if xa.norm() > noise.max_range || xb.norm() > noise.max_range {
            continue;
        }
        let (Ok(pa), Ok(pb)) = (cam.project_camera_point(&xa), cam.project_camera_point(&xb)) else { continue };
        let (Ok(da), Ok(db)) = (cam.disparity_of(&xa), cam.disparity_of(&xb)) else { continue };
        let mut n = [0.0; 6];
        for v in n.iter_mut() {
            *v = sample(&mut rng);
        }
        let p = Vec2::new(pa.x + n[0], pa.y + n[1]);
        let q = Vec2::new(pb.x + n[2], pb.y + n[3]);
        let (disp_p, disp_q) = (da + n[0] - n[4], db + n[2] - n[5]);
        if (q - p).norm() < 8.0 || disp_p <= cam.min_disparity || disp_q <= cam.min_disparity {
            continue;
        }
        let descriptor = noisy_descriptor(&seg.signature, noise.bit_flip, &mut rng);
        out.lines.push(LineObservation { p, q, disp_p, disp_q, descriptor, landmark_hint: Some(seg.id) });
    }

    if noise.outlier_rate > 0.0 {
        let (w, h) = (cam.width as f64, cam.height as f64);
        let n_pts = (noise.outlier_rate * out.points.len() as f64).round() as usize;
        for _ in 0..n_pts {
            out.points.push(PointObservation {
                u: rng.random_range(0.0..w),
                v: rng.random_range(0.0..h),
                disparity: rng.random_range(5.0..80.0),
                descriptor: random_descriptor(&mut rng),
                landmark_hint: None,
            });
        }
        let n_lines = (noise.outlier_rate * out.lines.len() as f64).round() as usize;
        for _ in 0..n_lines {
            let p = Vec2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
            let q = Vec2::new(rng.random_range(0.0..w), rng.random_range(0.0..h));
            out.lines.push(LineObservation {
                p,
                q,
                disp_p: rng.random_range(5.0..80.0),
                disp_q: rng.random_range(5.0..80.0),
                descriptor: random_descriptor(&mut rng),
                landmark_hint: None,
            });
        }
    }
    out
}

/// Everything needed to regenerate a synthetic sequence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub world: WorldSpec,
    pub trajectory: TrajectorySpec,
    pub noise: NoiseModel,
    pub camera: StereoCamera,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            trajectory: TrajectorySpec { shape: Shape::CircleLoop, length: 18.0, frames: 200 },
            noise: NoiseModel::default(),
            camera: StereoCamera::default(),
            seed: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("invalid simulation spec: {0}")]
    Invalid(String),
}

const SIM_KEYS: &[&str] = &[
    "seed", "shape", "length", "frames", "room_x", "room_y", "room_z", "points", "lines", "min_segment",
    "max_segment", "sigma", "truncation", "bit_flip", "outlier_rate", "max_range", "fx", "fy", "cx", "cy",
    "baseline", "width", "height",
];

impl SimSpec {
    /// Reads a `key = value` spec; missing keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, SimError> {
        let kv = KeyValues::parse(text)?;
        kv.check_known(SIM_KEYS)?;
        let mut s = SimSpec::default();
        kv.set("seed", &mut s.seed)?;
        if let Some(shape) = kv.get::<String>("shape")? {
            s.trajectory.shape = shape.parse().map_err(SimError::Invalid)?;
        }
        kv.set("length", &mut s.trajectory.length)?;
        kv.set("frames", &mut s.trajectory.frames)?;
        kv.set("room_x", &mut s.world.half_x)?;
        kv.set("room_y", &mut s.world.half_y)?;
        kv.set("room_z", &mut s.world.half_z)?;
        kv.set("points", &mut s.world.points)?;
        kv.set("lines", &mut s.world.lines)?;
        kv.set("min_segment", &mut s.world.min_segment)?;
        kv.set("max_segment", &mut s.world.max_segment)?;
        kv.set("sigma", &mut s.noise.sigma)?;
        kv.set("truncation", &mut s.noise.truncation)?;
        kv.set("bit_flip", &mut s.noise.bit_flip)?;
        kv.set("outlier_rate", &mut s.noise.outlier_rate)?;
        kv.set("max_range", &mut s.noise.max_range)?;
        crate::pipeline::read_camera(&kv, &mut s.camera)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.into()));
        if self.trajectory.frames < 2 {
            return bad("frames must be at least 2");
        }
        if !(self.trajectory.length > 0.0) {
            return bad("length must be positive");
        }
        for (name, p) in [("truncation", self.noise.truncation), ("bit_flip", self.noise.bit_flip), ("outlier_rate", self.noise.outlier_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.noise.sigma >= 0.0) {
            return bad("sigma must be non-negative");
        }
        let w = &self.world;
        if !(w.half_x > 0.0 && w.half_y > 0.0 && w.half_z > 0.0 && w.min_segment > 0.0 && w.max_segment >= w.min_segment) {
            return bad("room extents and segment lengths must be positive");
        }
        let c = &self.camera;
        if !(c.fx > 0.0 && c.fy > 0.0 && c.baseline > 0.0) {
            return bad("fx, fy and baseline must be positive");
        }
        Ok(())
    }
}

/// A rendered sequence with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub world: SyntheticWorld,
    pub poses: Vec<Pose>,
    pub frames: Vec<Frame>,
}

pub fn simulate(spec: &SimSpec) -> Sequence {
    let world = build_world(&spec.world, spec.seed);
    let poses = generate_trajectory(&spec.trajectory);
    let frames = poses
        .iter()
        .enumerate()
        .map(|(k, p)| render_observations(&world, p, &spec.camera, &spec.noise, spec.seed, k as u64))
        .collect();
    Sequence { world, poses, frames }
}
