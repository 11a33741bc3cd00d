//! Keyframe refinement, local-map data association, local bundle adjustment.

mod ba;

pub use ba::*;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::features::{filter_line_matches, match_descriptors, LineFilter, LineObservation, DEFAULT_MATCH_RATIO};
use crate::lie::{Pose, StereoCamera, Tangent, Vec2, Vec3};
use crate::map::{KeyFrame, KeyFrameId, LandmarkId, LineId, MapError, PointId, WorldMap};
use crate::odometry::{estimate_motion, FramePair, LinePair, MotionResult, OdometryError, PointPair, SolverConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MappingError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Odometry(#[from] OdometryError),
    #[error("an observation cannot be projected at the initial state")]
    Projection,
    #[error("no free variables in the local problem")]
    NothingToOptimize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    pub solver: SolverConfig,
    pub ba: BaConfig,
    pub line_filter: LineFilter,
    pub match_ratio: f64,
    /// Projection search radius for local-map association (pixels).
    pub window_px: f64,
    /// Largest Hamming distance accepted during association.
    pub max_descriptor_distance: u32,
    pub min_observations: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            ba: BaConfig::default(),
            line_filter: LineFilter::default(),
            match_ratio: DEFAULT_MATCH_RATIO,
            window_px: 15.0,
            max_descriptor_distance: 64,
            min_observations: 3,
        }
    }
}

/// Outcome of refining a new keyframe against the previous one.
#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub motion: MotionResult,
    /// Absolute pose of the new keyframe.
    pub pose: Pose,
    /// Landmarks of the previous keyframe re-observed by inlier matches.
    pub point_bindings: Vec<Option<PointId>>,
    pub line_bindings: Vec<Option<LineId>>,
}

/// Matches `cur` against keyframe `prev` and re-solves their relative motion
/// starting from `init` (previous-to-current).
///
/// The previous side uses landmark positions where bound, stereo
/// back-projection otherwise.
pub fn refine_relative_pose(
    map: &WorldMap,
    cam: &StereoCamera,
    prev: KeyFrameId,
    cur: &KeyFrame,
    init: &Tangent,
    cfg: &MappingConfig,
) -> Result<Refinement, MappingError> {
    let pk = map.keyframe(prev).ok_or(MapError::UnknownKeyFrame(prev))?;
    let pdesc: Vec<_> = pk.points.iter().map(|o| o.descriptor).collect();
    let cdesc: Vec<_> = cur.points.iter().map(|o| o.descriptor).collect();
    let pm = match_descriptors(&pdesc, &cdesc, cfg.match_ratio);
    let pldesc: Vec<_> = pk.lines.iter().map(|o| o.descriptor).collect();
    let cldesc: Vec<_> = cur.lines.iter().map(|o| o.descriptor).collect();
    let lm = filter_line_matches(&match_descriptors(&pldesc, &cldesc, cfg.match_ratio), &pk.lines, &cur.lines, &cfg.line_filter);

    let mut pair = FramePair::default();
    let mut point_src = Vec::new();
    for m in &pm {
        let x = match pk.point_bindings[m.index_a].and_then(|id| map.point(id)) {
            Some(l) => pk.pose.transform_point(&l.position),
            None => {
                let o = &pk.points[m.index_a];
                match cam.stereo_backproject(o.u, o.v, o.disparity) {
                    Ok(x) => x,
                    Err(_) => continue,
                }
            }
        };
        pair.points.push(PointPair { point: x, observation: cur.points[m.index_b].pixel() });
        point_src.push((m.index_a, m.index_b));
    }
    let mut line_src = Vec::new();
    for m in &lm {
        let Ok(coeffs) = cur.lines[m.index_b].line_coeffs() else { continue };
        let (p, q) = match pk.line_bindings[m.index_a].and_then(|id| map.line(id)) {
            Some(l) => (pk.pose.transform_point(&l.p), pk.pose.transform_point(&l.q)),
            None => {
                let o = &pk.lines[m.index_a];
                match (cam.stereo_backproject(o.p.x, o.p.y, o.disp_p), cam.stereo_backproject(o.q.x, o.q.y, o.disp_q)) {
                    (Ok(p), Ok(q)) => (p, q),
                    _ => continue,
                }
            }
        };
        pair.lines.push(LinePair { p, q, line: coeffs });
        line_src.push((m.index_a, m.index_b));
    }

    let motion = estimate_motion(cam, &pair, &cfg.solver, init)?;
    let mut point_bindings = vec![None; cur.points.len()];
    for (k, (a, b)) in point_src.iter().enumerate() {
        if motion.point_inliers[k] {
            point_bindings[*b] = pk.point_bindings[*a];
        }
    }
    let mut line_bindings = vec![None; cur.lines.len()];
    for (k, (a, b)) in line_src.iter().enumerate() {
        if motion.line_inliers[k] {
            line_bindings[*b] = pk.line_bindings[*a];
        }
    }
    let pose = &motion.estimate.pose() * &pk.pose;
    Ok(Refinement { motion, pose, point_bindings, line_bindings })
}

/// True when observation `index` of `kf` is unbound or bound only to a
/// landmark this keyframe created and nobody else sees.
fn is_unmatched(map: &WorldMap, kf: &KeyFrame, lm: Option<LandmarkId>) -> bool {
    match lm {
        None => true,
        Some(lm) => map.observation_count(lm) == 1 && map.observes(kf.id, lm),
    }
}

struct Proposal {
    distance: u32,
    landmark: LandmarkId,
    index: usize,
}

fn pick_distinctive(mut cands: Vec<(u32, usize)>, ratio: f64, max_distance: u32) -> Option<(u32, usize)> {
    cands.sort();
    let best = *cands.first()?;
    if best.0 > max_distance {
        return None;
    }
    match cands.get(1) {
        Some(second) if (best.0 as f64) * ratio >= second.0 as f64 => None,
        _ => Some(best),
    }
}

/// Binds unmatched observations of `kf` to landmarks of its local map that
/// project nearby and carry a similar descriptor. Returns the number of new bindings.
pub fn associate_unmatched(map: &mut WorldMap, cam: &StereoCamera, kf: KeyFrameId, cfg: &MappingConfig) -> Result<usize, MappingError> {
    let local = map.local_map_of(kf)?;
    let frame = map.keyframe(kf).ok_or(MapError::UnknownKeyFrame(kf))?.clone();
    let pose = frame.pose;
    let free_points: Vec<usize> = (0..frame.points.len())
        .filter(|i| is_unmatched(map, &frame, frame.point_bindings[*i].map(LandmarkId::Point)))
        .collect();
    let free_lines: Vec<usize> = (0..frame.lines.len())
        .filter(|i| is_unmatched(map, &frame, frame.line_bindings[*i].map(LandmarkId::Line)))
        .collect();

    let mut proposals = Vec::new();
    for &pid in &local.points {
        let lm = LandmarkId::Point(pid);
        if map.observes(kf, lm) {
            continue;
        }
        let landmark = map.point(pid).expect("local point exists");
        let Ok(px) = cam.project_point(&pose, &landmark.position) else { continue };
        if !cam.in_image(&px) {
            continue;
        }
        let cands: Vec<(u32, usize)> = free_points
            .iter()
            .filter(|&&i| (frame.points[i].pixel() - px).norm() <= cfg.window_px)
            .map(|&i| (frame.points[i].descriptor.distance(&landmark.descriptor), i))
            .collect();
        if let Some((distance, index)) = pick_distinctive(cands, cfg.match_ratio, cfg.max_descriptor_distance) {
            proposals.push(Proposal { distance, landmark: lm, index });
        }
    }
    for &lid in &local.lines {
        let lm = LandmarkId::Line(lid);
        if map.observes(kf, lm) {
            continue;
        }
        let landmark = map.line(lid).expect("local line exists");
        let Some(predicted) = predict_segment(cam, &pose, &landmark.p, &landmark.q) else { continue };
        let Ok(coeffs) = predicted.line_coeffs() else { continue };
        let dir = (predicted.q - predicted.p).normalize();
        let len = predicted.length();
        let cands: Vec<(u32, usize)> = free_lines
            .iter()
            .filter(|&&i| {
                let o = &frame.lines[i];
                let dist = |x: &Vec2| (coeffs.x * x.x + coeffs.y * x.y + coeffs.z).abs();
                let t = (o.midpoint() - predicted.p).dot(&dir);
                dist(&o.p) <= cfg.window_px
                    && dist(&o.q) <= cfg.window_px
                    && t >= -cfg.window_px
                    && t <= len + cfg.window_px
                    && cfg.line_filter.accepts(&predicted, &oriented_like(o, &dir))
            })
            .map(|&i| (frame.lines[i].descriptor.distance(&landmark.descriptor), i))
            .collect();
        if let Some((distance, index)) = pick_distinctive(cands, cfg.match_ratio, cfg.max_descriptor_distance) {
            proposals.push(Proposal { distance, landmark: lm, index });
        }
    }

    proposals.sort_by_key(|p| (p.distance, p.landmark, p.index));
    let mut used_obs: BTreeSet<(bool, usize)> = BTreeSet::new();
    let mut used_lm: BTreeSet<LandmarkId> = BTreeSet::new();
    let mut bound = 0;
    for p in proposals {
        let is_point = matches!(p.landmark, LandmarkId::Point(_));
        if used_lm.contains(&p.landmark) || !used_obs.insert((is_point, p.index)) {
            continue;
        }
        used_lm.insert(p.landmark);
        // The fresh landmark this observation created, if any, disappears with the unbind.
        map.unbind(kf, p.index, is_point)?;
        map.bind(kf, p.index, p.landmark)?;
        bound += 1;
    }
    Ok(bound)
}

/// Projection of a 3D segment as a line observation, or `None` when an
/// endpoint is not in front of the camera.
pub fn predict_segment(cam: &StereoCamera, pose: &Pose, p: &Vec3, q: &Vec3) -> Option<LineObservation> {
    let pc = pose.transform_point(p);
    let qc = pose.transform_point(q);
    Some(LineObservation {
        p: cam.project_camera_point(&pc).ok()?,
        q: cam.project_camera_point(&qc).ok()?,
        disp_p: cam.disparity_of(&pc).ok()?,
        disp_q: cam.disparity_of(&qc).ok()?,
        descriptor: Default::default(),
        landmark_hint: None,
    })
}

/// `o` with endpoints swapped when it points against `dir`.
fn oriented_like(o: &LineObservation, dir: &Vec2) -> LineObservation {
    if (o.q - o.p).dot(dir) >= 0.0 {
        o.clone()
    } else {
        LineObservation { p: o.q, q: o.p, disp_p: o.disp_q, disp_q: o.disp_p, ..o.clone() }
    }
}

/// Local BA around `kf` followed by culling of weak landmarks that left the window.
pub fn optimize_local_map(
    map: &mut WorldMap,
    cam: &StereoCamera,
    kf: KeyFrameId,
    cfg: &MappingConfig,
) -> Result<(BaReport, usize), MappingError> {
    let mut problem = LocalBaProblem::from_map(map, kf)?;
    let report = local_bundle_adjustment(&mut problem, cam, &cfg.ba)?;
    problem.write_back(map);
    let window = map.local_map_of(kf)?.keyframes;
    let culled = map.cull_landmarks(cfg.min_observations, &window);
    Ok((report, culled))
}
