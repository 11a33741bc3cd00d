//! Loop detection over the similarity database, loop transform validation and
//! map fusion after pose-graph correction.

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::features::{filter_line_matches, match_descriptors, BinaryDescriptor};
use crate::lie::{MotionEstimate, Pose, StereoCamera, Tangent};
use crate::map::{KeyFrame, KeyFrameId, LandmarkId, WorldMap};
use crate::mapping::{associate_unmatched, MappingConfig};
use crate::odometry::{estimate_motion, line_residual, point_residual, FramePair, LinePair, OdometryError, PointPair};

use super::{ImageSummary, PoseEdge, SimilarityDatabase, Vocabulary, WordBag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub min_database: usize,
    /// Most recent keyframes never considered as candidates.
    pub recent_window: usize,
    pub min_score: f64,
    pub sequence_length: usize,
    /// Neighbouring pairs must score at least `sequence_ratio · s_t`.
    pub sequence_ratio: f64,
    pub max_eigenvalue: f64,
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    pub min_inlier_ratio: f64,
    /// Largest reprojection residual (pixels) of a correspondence counted as
    /// an inlier by the inlier gate.
    pub inlier_threshold_px: f64,
    /// Disables the translation/rotation gate.
    pub skip_magnitude_gate: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            min_database: 20,
            recent_window: 10,
            min_score: 0.3,
            sequence_length: 3,
            sequence_ratio: 0.5,
            max_eigenvalue: 0.01,
            max_translation: 0.5,
            max_rotation_deg: 3.0,
            min_inlier_ratio: 0.5,
            inlier_threshold_px: 3.0,
            skip_magnitude_gate: false,
        }
    }
}

/// Bags and statistics of a keyframe as stored in the database.
pub fn summarize(vocabulary: &Vocabulary, kf: &KeyFrame) -> (WordBag, WordBag, ImageSummary) {
    let pb = vocabulary.bag(kf.points.iter().map(|o| &o.descriptor));
    let lb = vocabulary.bag(kf.lines.iter().map(|o| &o.descriptor));
    let pts: Vec<_> = kf.points.iter().map(|o| o.pixel()).collect();
    let mids: Vec<_> = kf.lines.iter().map(|o| o.midpoint()).collect();
    let summary = ImageSummary {
        n_points: kf.points.len(),
        n_lines: kf.lines.len(),
        point_dispersion: super::dispersion(&pts),
        line_dispersion: super::dispersion(&mids),
    };
    (pb, lb, summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub current: KeyFrameId,
    pub old: KeyFrameId,
    pub score: f64,
}

/// Best-scoring old keyframe that passes the score threshold and whose
/// preceding keyframes also resemble those preceding `cur`.
///
/// Sequence pairs that would run past the start of the database are skipped.
pub fn detect_loop_candidate(db: &SimilarityDatabase, map: &WorldMap, cur: KeyFrameId, cfg: &LoopConfig) -> Option<Detection> {
    if db.len() < cfg.min_database {
        return None;
    }
    let order: Vec<KeyFrameId> = db.keyframes().collect();
    let pos = order.iter().position(|k| *k == cur)?;
    let eligible_until = pos.saturating_sub(cfg.recent_window);
    let mut best: Option<(f64, KeyFrameId)> = None;
    for &cand in &order[..eligible_until] {
        if map.are_covisible(cur, cand) {
            continue;
        }
        let Ok(s) = db.score(cur, cand) else { continue };
        if best.is_none_or(|(b, _)| s > b) {
            best = Some((s, cand));
        }
    }
    let (score, old) = best?;
    if score < cfg.min_score {
        return None;
    }
    let cand_pos = order.iter().position(|k| *k == old)?;
    for i in 1..=cfg.sequence_length {
        let (Some(ci), Some(oi)) = (pos.checked_sub(i), cand_pos.checked_sub(i)) else { continue };
        let s = db.score(order[ci], order[oi]).unwrap_or(0.0);
        if s < cfg.sequence_ratio * score {
            log::debug!("loop {cur}->{old} fails sequence check at offset {i}: {s:.3} < {:.3}", cfg.sequence_ratio * score);
            return None;
        }
    }
    Some(Detection { current: cur, old, score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rejection {
    InsufficientMatches { found: usize },
    EigenvalueGate { max_eigenvalue: f64 },
    MagnitudeGate { translation: f64, rotation_deg: f64 },
    InlierGate { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopCandidate {
    pub current: KeyFrameId,
    pub old: KeyFrameId,
    pub score: f64,
    /// Motion from the old camera frame into the current one.
    pub motion: MotionEstimate,
    pub inlier_ratio: f64,
    pub max_eigenvalue: f64,
    /// Inlier landmark pairs `(current side, old side)`.
    pub landmark_pairs: Vec<(LandmarkId, LandmarkId)>,
}

impl LoopCandidate {
    /// Pose-graph edge with `i = old`, `j = current`.
    pub fn edge(&self) -> PoseEdge {
        PoseEdge { i: self.old, j: self.current, measurement: self.motion.pose().inverse().log() }
    }

    pub fn translation(&self) -> f64 {
        self.motion.pose().translation().norm()
    }

    pub fn rotation_deg(&self) -> f64 {
        self.motion.mean.rotation().norm().to_degrees()
    }
}

enum Source {
    Observation(usize),
    Landmark(LandmarkId),
}

/// Relative motion between `cur` and `old`, validated by the covariance,
/// magnitude and inlier gates.
///
/// Current-frame features are matched against the old keyframe's observations
/// and, for points left unmatched, against the landmarks of its local map.
pub fn estimate_loop_transform(
    map: &WorldMap,
    cam: &StereoCamera,
    detection: &Detection,
    cfg: &LoopConfig,
    mapping: &MappingConfig,
) -> Result<LoopCandidate, Rejection> {
    let none = Rejection::InsufficientMatches { found: 0 };
    let cur = map.keyframe(detection.current).ok_or(none.clone())?;
    let old = map.keyframe(detection.old).ok_or(none)?;

    let mut pair = FramePair::default();
    let mut point_src: Vec<(usize, Source)> = Vec::new();
    let mut line_src: Vec<(usize, Source)> = Vec::new();

    let od: Vec<BinaryDescriptor> = old.points.iter().map(|o| o.descriptor).collect();
    let cd: Vec<BinaryDescriptor> = cur.points.iter().map(|o| o.descriptor).collect();
    let mut matched_cur = vec![false; cur.points.len()];
    for m in match_descriptors(&od, &cd, mapping.match_ratio).iter() {
        let x = match old.point_bindings[m.index_a].and_then(|id| map.point(id)) {
            Some(l) => old.pose.transform_point(&l.position),
            None => {
                let o = &old.points[m.index_a];
                let Ok(x) = cam.stereo_backproject(o.u, o.v, o.disparity) else { continue };
                x
            }
        };
        matched_cur[m.index_b] = true;
        pair.points.push(PointPair { point: x, observation: cur.points[m.index_b].pixel() });
        point_src.push((m.index_b, Source::Observation(m.index_a)));
    }

    // Unmatched current points against the old side's local map.
    if let Ok(local) = map.local_map_of(old.id) {
        let observed: std::collections::BTreeSet<_> = old.point_bindings.iter().flatten().copied().collect();
        let ids: Vec<_> = local.points.iter().filter(|p| !observed.contains(p)).copied().collect();
        let ld: Vec<BinaryDescriptor> = ids.iter().map(|p| map.point(*p).unwrap().descriptor).collect();
        let free: Vec<usize> = (0..cur.points.len()).filter(|i| !matched_cur[*i]).collect();
        let fd: Vec<BinaryDescriptor> = free.iter().map(|i| cur.points[*i].descriptor).collect();
        for m in match_descriptors(&ld, &fd, mapping.match_ratio).iter() {
            if m.distance > mapping.max_descriptor_distance {
                continue;
            }
            let x = old.pose.transform_point(&map.point(ids[m.index_a]).unwrap().position);
            if x.z <= cam.min_depth {
                continue;
            }
            pair.points.push(PointPair { point: x, observation: cur.points[free[m.index_b]].pixel() });
            point_src.push((free[m.index_b], Source::Landmark(LandmarkId::Point(ids[m.index_a]))));
        }
    }

    let old_ld: Vec<BinaryDescriptor> = old.lines.iter().map(|o| o.descriptor).collect();
    let cur_ld: Vec<BinaryDescriptor> = cur.lines.iter().map(|o| o.descriptor).collect();
    let lm = filter_line_matches(&match_descriptors(&old_ld, &cur_ld, mapping.match_ratio), &old.lines, &cur.lines, &mapping.line_filter);
    for m in lm.iter() {
        let Ok(coeffs) = cur.lines[m.index_b].line_coeffs() else { continue };
        let (p, q) = match old.line_bindings[m.index_a].and_then(|id| map.line(id)) {
            Some(l) => (old.pose.transform_point(&l.p), old.pose.transform_point(&l.q)),
            None => {
                let o = &old.lines[m.index_a];
                match (cam.stereo_backproject(o.p.x, o.p.y, o.disp_p), cam.stereo_backproject(o.q.x, o.q.y, o.disp_q)) {
                    (Ok(p), Ok(q)) => (p, q),
                    _ => continue,
                }
            }
        };
        pair.lines.push(LinePair { p, q, line: coeffs });
        line_src.push((m.index_b, Source::Observation(m.index_a)));
    }

    let result = match estimate_motion(cam, &pair, &mapping.solver, &Tangent::zero()) {
        Ok(r) => r,
        Err(OdometryError::InsufficientMatches { found, .. }) => return Err(Rejection::InsufficientMatches { found }),
        Err(_) => return Err(Rejection::EigenvalueGate { max_eigenvalue: f64::INFINITY }),
    };
    let max_eigenvalue = SymmetricEigen::new(result.estimate.covariance).eigenvalues.max();
    if !(max_eigenvalue < cfg.max_eigenvalue) {
        return Err(Rejection::EigenvalueGate { max_eigenvalue });
    }
    let motion = result.estimate;
    let translation = motion.pose().translation().norm();
    let rotation_deg = motion.mean.rotation().norm().to_degrees();
    if !cfg.skip_magnitude_gate && (translation > cfg.max_translation || rotation_deg > cfg.max_rotation_deg) {
        return Err(Rejection::MagnitudeGate { translation, rotation_deg });
    }
    // The solver's median-based outlier cut always keeps at least half of the
    // correspondences, so the gate counts inliers with a fixed pixel threshold.
    let pose = motion.pose();
    let within = |r: Option<f64>| r.is_some_and(|r| r <= cfg.inlier_threshold_px);
    let point_inliers: Vec<bool> = pair
        .points
        .iter()
        .map(|pp| within(point_residual(cam, &pose, &pp.point, &pp.observation).ok().map(|r| r.residual.norm())))
        .collect();
    let line_inliers: Vec<bool> = pair
        .lines
        .iter()
        .map(|lp| within(line_residual(cam, &pose, &lp.p, &lp.q, &lp.line).ok().map(|r| r.residual.norm())))
        .collect();
    let inliers = point_inliers.iter().chain(&line_inliers).filter(|b| **b).count();
    let inlier_ratio = inliers as f64 / pair.len() as f64;
    if !(inlier_ratio > cfg.min_inlier_ratio) {
        return Err(Rejection::InlierGate { ratio: inlier_ratio });
    }

    let mut landmark_pairs = Vec::new();
    for ((ci, src), inlier) in point_src.iter().zip(&point_inliers) {
        let old_lm = match src {
            Source::Observation(oi) => old.point_bindings[*oi].map(LandmarkId::Point),
            Source::Landmark(lm) => Some(*lm),
        };
        if let (true, Some(c), Some(o)) = (*inlier, cur.point_bindings[*ci], old_lm) {
            landmark_pairs.push((LandmarkId::Point(c), o));
        }
    }
    for ((ci, src), inlier) in line_src.iter().zip(&line_inliers) {
        let Source::Observation(oi) = src else { continue };
        if let (true, Some(c), Some(o)) = (*inlier, cur.line_bindings[*ci], old.line_bindings[*oi]) {
            landmark_pairs.push((LandmarkId::Line(c), LandmarkId::Line(o)));
        }
    }
    Ok(LoopCandidate {
        current: detection.current,
        old: detection.old,
        score: detection.score,
        motion,
        inlier_ratio,
        max_eigenvalue,
        landmark_pairs,
    })
}

/// Moves keyframes to `corrected` and carries every landmark along with the
/// keyframe that created it.
pub fn apply_pose_correction(map: &mut WorldMap, corrected: &BTreeMap<KeyFrameId, Pose>) {
    let mut shift: BTreeMap<KeyFrameId, Pose> = BTreeMap::new();
    for (id, new) in corrected {
        if let Some(kf) = map.keyframe(*id) {
            // Maps old world coordinates to corrected world coordinates.
            shift.insert(*id, &new.inverse() * &kf.pose);
        }
    }
    let points: Vec<_> = map.points().map(|(id, l)| (id, l.origin, l.position)).collect();
    for (id, origin, x) in points {
        if let Some(s) = shift.get(&origin) {
            map.set_point_position(id, s.transform_point(&x));
        }
    }
    let lines: Vec<_> = map.lines().map(|(id, l)| (id, l.origin, l.p, l.q)).collect();
    for (id, origin, p, q) in lines {
        if let Some(s) = shift.get(&origin) {
            map.set_line_endpoints(id, s.transform_point(&p), s.transform_point(&q));
        }
    }
    for (id, new) in corrected {
        let _ = map.set_pose(*id, *new);
    }
    map.bump_generation();
}

/// Merges the landmark pairs found while validating the loop, keeping the
/// older landmark, then searches both sides for further projections.
/// Returns the number of landmarks merged plus new bindings.
pub fn fuse_loop_maps(map: &mut WorldMap, cam: &StereoCamera, candidate: &LoopCandidate, mapping: &MappingConfig) -> usize {
    let mut fused = 0;
    for (a, b) in &candidate.landmark_pairs {
        let origin = |lm: &LandmarkId| match lm {
            LandmarkId::Point(p) => map.point(*p).map(|l| l.origin),
            LandmarkId::Line(l) => map.line(*l).map(|l| l.origin),
        };
        let (Some(oa), Some(ob)) = (origin(a), origin(b)) else { continue };
        if a == b {
            continue;
        }
        let (keep, drop) = if (ob, *b) <= (oa, *a) { (*b, *a) } else { (*a, *b) };
        if map.merge_landmarks(keep, drop).is_ok() {
            fused += 1;
        }
    }
    for kf in [candidate.current, candidate.old] {
        fused += associate_unmatched(map, cam, kf, mapping).unwrap_or(0);
    }
    fused
}
