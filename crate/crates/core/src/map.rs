//! Persistent map: keyframes, point and line landmarks, and the keyframe graphs
//! derived from co-observed landmarks.
//!
//! Shared-landmark counts between keyframe pairs are maintained incrementally
//! on every observation change, so the covisibility graph (`count ≥ 20`) and the
//! essential graph (`count > 100`) are always exact functions of the bindings.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{BinaryDescriptor, LineObservation, PointObservation};
use crate::lie::{MotionEstimate, Pose, StereoCamera, Vec3};
use crate::loop_closure::WordBag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyFrameId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LineId(pub u64);

impl fmt::Display for KeyFrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "kf{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LandmarkId {
    Point(PointId),
    Line(LineId),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("keyframe {0} already exists")]
    DuplicateId(KeyFrameId),
    #[error("unknown keyframe {0}")]
    UnknownKeyFrame(KeyFrameId),
    #[error("unknown landmark {0:?}")]
    UnknownLandmark(LandmarkId),
    #[error("keyframe {0} already observes landmark {1:?}")]
    AlreadyObserved(KeyFrameId, LandmarkId),
    #[error("observation index {1} out of range in keyframe {0}")]
    BadObservation(KeyFrameId, usize),
    #[error("map document: {0}")]
    Document(String),
}

/// `(keyframe, observation index)` reference from a landmark back into a keyframe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ObservationRef {
    pub keyframe: KeyFrameId,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFrame {
    pub id: KeyFrameId,
    /// Frame index in the input stream.
    pub frame: u64,
    /// World-to-camera transform.
    pub pose: Pose,
    /// Motion from the previous keyframe's camera frame to this one.
    pub relative: MotionEstimate,
    pub points: Vec<PointObservation>,
    pub lines: Vec<LineObservation>,
    pub point_bindings: Vec<Option<PointId>>,
    pub line_bindings: Vec<Option<LineId>>,
    pub point_words: WordBag,
    pub line_words: WordBag,
}

impl KeyFrame {
    pub fn new(
        id: KeyFrameId,
        frame: u64,
        pose: Pose,
        relative: MotionEstimate,
        points: Vec<PointObservation>,
        lines: Vec<LineObservation>,
    ) -> Self {
        let (np, nl) = (points.len(), lines.len());
        Self {
            id,
            frame,
            pose,
            relative,
            points,
            lines,
            point_bindings: vec![None; np],
            line_bindings: vec![None; nl],
            point_words: WordBag::new(),
            line_words: WordBag::new(),
        }
    }

    pub fn landmarks(&self) -> impl Iterator<Item = LandmarkId> + '_ {
        self.point_bindings
            .iter()
            .flatten()
            .map(|p| LandmarkId::Point(*p))
            .chain(self.line_bindings.iter().flatten().map(|l| LandmarkId::Line(*l)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointLandmark {
    pub position: Vec3,
    pub observations: Vec<ObservationRef>,
    pub descriptor: BinaryDescriptor,
    /// Keyframe that created the landmark.
    pub origin: KeyFrameId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineLandmark {
    pub p: Vec3,
    pub q: Vec3,
    pub direction: Vec3,
    pub observations: Vec<ObservationRef>,
    pub descriptor: BinaryDescriptor,
    pub origin: KeyFrameId,
}

impl LineLandmark {
    pub fn new(p: Vec3, q: Vec3, descriptor: BinaryDescriptor, origin: KeyFrameId) -> Self {
        Self { p, q, direction: (q - p).normalize(), observations: Vec::new(), descriptor, origin }
    }

    pub fn set_endpoints(&mut self, p: Vec3, q: Vec3) {
        self.p = p;
        self.q = q;
        self.direction = (q - p).normalize();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub covisibility_min_shared: usize,
    /// Essential edges need strictly more shared landmarks than this.
    pub essential_min_shared: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self { covisibility_min_shared: 20, essential_min_shared: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub a: KeyFrameId,
    pub b: KeyFrameId,
    pub shared: usize,
}

/// Keyframe spanning tree as a parent map; the root has no parent.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SpanningTree {
    pub root: Option<KeyFrameId>,
    pub parent: BTreeMap<KeyFrameId, KeyFrameId>,
}

impl SpanningTree {
    pub fn edges(&self) -> Vec<(KeyFrameId, KeyFrameId)> {
        self.parent.iter().map(|(c, p)| (*p, *c)).collect()
    }

    /// True when every keyframe in `nodes` reaches the root by following parents.
    pub fn spans(&self, nodes: &BTreeSet<KeyFrameId>) -> bool {
        let Some(root) = self.root else { return nodes.is_empty() };
        if self.parent.len() + 1 != nodes.len() || !nodes.contains(&root) {
            return false;
        }
        nodes.iter().all(|&n| {
            let mut cur = n;
            for _ in 0..=nodes.len() {
                if cur == root {
                    return true;
                }
                match self.parent.get(&cur) {
                    Some(p) if nodes.contains(p) => cur = *p,
                    _ => return false,
                }
            }
            false
        })
    }
}

/// Keyframes around a query keyframe plus every landmark they observe.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LocalMap {
    pub keyframes: BTreeSet<KeyFrameId>,
    pub points: BTreeSet<PointId>,
    pub lines: BTreeSet<LineId>,
}

#[derive(Debug, Clone, Default)]
pub struct WorldMap {
    pub config: MapConfig,
    keyframes: BTreeMap<KeyFrameId, KeyFrame>,
    points: BTreeMap<PointId, PointLandmark>,
    lines: BTreeMap<LineId, LineLandmark>,
    next_point: u64,
    next_line: u64,
    shared: BTreeMap<(KeyFrameId, KeyFrameId), usize>,
    tree: SpanningTree,
    /// Incremented whenever keyframe poses are corrected globally.
    generation: u64,
}

fn ordered(a: KeyFrameId, b: KeyFrameId) -> (KeyFrameId, KeyFrameId) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl WorldMap {
    pub fn new(config: MapConfig) -> Self {
        Self { config, ..Self::default() }
    }

    pub fn keyframe(&self, id: KeyFrameId) -> Option<&KeyFrame> {
        self.keyframes.get(&id)
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &KeyFrame> {
        self.keyframes.values()
    }

    pub fn keyframe_ids(&self) -> BTreeSet<KeyFrameId> {
        self.keyframes.keys().copied().collect()
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn last_keyframe(&self) -> Option<&KeyFrame> {
        self.keyframes.values().next_back()
    }

    pub fn point(&self, id: PointId) -> Option<&PointLandmark> {
        self.points.get(&id)
    }

    pub fn line(&self, id: LineId) -> Option<&LineLandmark> {
        self.lines.get(&id)
    }

    pub fn points(&self) -> impl Iterator<Item = (PointId, &PointLandmark)> {
        self.points.iter().map(|(k, v)| (*k, v))
    }

    pub fn lines(&self) -> impl Iterator<Item = (LineId, &LineLandmark)> {
        self.lines.iter().map(|(k, v)| (*k, v))
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn bump_generation(&mut self) {
        self.generation += 1;
    }

    pub fn set_pose(&mut self, id: KeyFrameId, pose: Pose) -> Result<(), MapError> {
        self.keyframes.get_mut(&id).ok_or(MapError::UnknownKeyFrame(id))?.pose = pose;
        Ok(())
    }

    pub fn set_relative(&mut self, id: KeyFrameId, relative: MotionEstimate) -> Result<(), MapError> {
        self.keyframes.get_mut(&id).ok_or(MapError::UnknownKeyFrame(id))?.relative = relative;
        Ok(())
    }

    pub fn set_point_position(&mut self, id: PointId, position: Vec3) {
        if let Some(p) = self.points.get_mut(&id) {
            p.position = position;
        }
    }

    pub fn set_line_endpoints(&mut self, id: LineId, p: Vec3, q: Vec3) {
        if let Some(l) = self.lines.get_mut(&id) {
            if (q - p).norm() > 0.0 {
                l.set_endpoints(p, q);
            }
        }
    }

    pub fn set_word_bags(&mut self, id: KeyFrameId, points: WordBag, lines: WordBag) -> Result<(), MapError> {
        let kf = self.keyframes.get_mut(&id).ok_or(MapError::UnknownKeyFrame(id))?;
        kf.point_words = points;
        kf.line_words = lines;
        Ok(())
    }

    fn observers(&self, lm: LandmarkId) -> Option<&[ObservationRef]> {
        match lm {
            LandmarkId::Point(p) => self.points.get(&p).map(|l| l.observations.as_slice()),
            LandmarkId::Line(l) => self.lines.get(&l).map(|l| l.observations.as_slice()),
        }
    }

    pub fn observation_count(&self, lm: LandmarkId) -> usize {
        self.observers(lm).map_or(0, <[_]>::len)
    }

    pub fn observes(&self, kf: KeyFrameId, lm: LandmarkId) -> bool {
        self.observers(lm).is_some_and(|obs| obs.iter().any(|o| o.keyframe == kf))
    }

    pub fn shared_count(&self, a: KeyFrameId, b: KeyFrameId) -> usize {
        if a == b {
            return 0;
        }
        self.shared.get(&ordered(a, b)).copied().unwrap_or(0)
    }

    /// All keyframe pairs sharing at least one landmark.
    pub fn shared_counts(&self) -> &BTreeMap<(KeyFrameId, KeyFrameId), usize> {
        &self.shared
    }

    fn bump_shared(&mut self, kf: KeyFrameId, lm: LandmarkId, delta: isize) {
        let others: Vec<KeyFrameId> = self
            .observers(lm)
            .map(|o| o.iter().map(|r| r.keyframe).filter(|k| *k != kf).collect())
            .unwrap_or_default();
        for other in others {
            let key = ordered(kf, other);
            let entry = self.shared.entry(key).or_insert(0);
            *entry = (*entry as isize + delta) as usize;
            if *entry == 0 {
                self.shared.remove(&key);
            }
        }
    }

    fn descriptor_of(&self, obs: &ObservationRef, lm: LandmarkId) -> Option<BinaryDescriptor> {
        let kf = self.keyframes.get(&obs.keyframe)?;
        match lm {
            LandmarkId::Point(_) => kf.points.get(obs.index).map(|o| o.descriptor),
            LandmarkId::Line(_) => kf.lines.get(obs.index).map(|o| o.descriptor),
        }
    }

    /// Medoid of the observation descriptors; ties go to the earliest observation.
    fn refresh_descriptor(&mut self, lm: LandmarkId) {
        let Some(obs) = self.observers(lm) else { return };
        let descs: Vec<BinaryDescriptor> = obs.iter().filter_map(|o| self.descriptor_of(o, lm)).collect();
        let Some(best) = descs
            .iter()
            .enumerate()
            .map(|(i, d)| (descs.iter().map(|e| d.distance(e)).sum::<u32>(), i))
            .min()
            .map(|(_, i)| descs[i])
        else {
            return;
        };
        match lm {
            LandmarkId::Point(p) => self.points.get_mut(&p).unwrap().descriptor = best,
            LandmarkId::Line(l) => self.lines.get_mut(&l).unwrap().descriptor = best,
        }
    }

    /// Binds observation `index` of keyframe `kf` to landmark `lm`.
    pub fn bind(&mut self, kf: KeyFrameId, index: usize, lm: LandmarkId) -> Result<(), MapError> {
        let frame = self.keyframes.get(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let in_range = match lm {
            LandmarkId::Point(_) => index < frame.points.len(),
            LandmarkId::Line(_) => index < frame.lines.len(),
        };
        if !in_range {
            return Err(MapError::BadObservation(kf, index));
        }
        if self.observers(lm).is_none() {
            return Err(MapError::UnknownLandmark(lm));
        }
        if self.observes(kf, lm) {
            return Err(MapError::AlreadyObserved(kf, lm));
        }
        self.unbind(kf, index, matches!(lm, LandmarkId::Point(_)))?;
        self.bump_shared(kf, lm, 1);
        let r = ObservationRef { keyframe: kf, index };
        let frame = self.keyframes.get_mut(&kf).unwrap();
        match lm {
            LandmarkId::Point(p) => {
                frame.point_bindings[index] = Some(p);
                self.points.get_mut(&p).unwrap().observations.push(r);
            }
            LandmarkId::Line(l) => {
                frame.line_bindings[index] = Some(l);
                self.lines.get_mut(&l).unwrap().observations.push(r);
            }
        }
        self.refresh_descriptor(lm);
        Ok(())
    }

    /// Clears the binding of one observation. Landmarks left without
    /// observations are removed.
    pub fn unbind(&mut self, kf: KeyFrameId, index: usize, is_point: bool) -> Result<Option<LandmarkId>, MapError> {
        let frame = self.keyframes.get(&kf).ok_or(MapError::UnknownKeyFrame(kf))?;
        let current = if is_point {
            frame.point_bindings.get(index).ok_or(MapError::BadObservation(kf, index))?.map(LandmarkId::Point)
        } else {
            frame.line_bindings.get(index).ok_or(MapError::BadObservation(kf, index))?.map(LandmarkId::Line)
        };
        let Some(lm) = current else { return Ok(None) };
        self.bump_shared(kf, lm, -1);
        let frame = self.keyframes.get_mut(&kf).unwrap();
        let r = ObservationRef { keyframe: kf, index };
        let empty = match lm {
            LandmarkId::Point(p) => {
                frame.point_bindings[index] = None;
                let l = self.points.get_mut(&p).unwrap();
                l.observations.retain(|o| *o != r);
                l.observations.is_empty()
            }
            LandmarkId::Line(id) => {
                frame.line_bindings[index] = None;
                let l = self.lines.get_mut(&id).unwrap();
                l.observations.retain(|o| *o != r);
                l.observations.is_empty()
            }
        };
        if empty {
            match lm {
                LandmarkId::Point(p) => {
                    self.points.remove(&p);
                }
                LandmarkId::Line(l) => {
                    self.lines.remove(&l);
                }
            }
        } else {
            self.refresh_descriptor(lm);
        }
        Ok(Some(lm))
    }

    pub fn add_point(&mut self, position: Vec3, descriptor: BinaryDescriptor, origin: KeyFrameId) -> PointId {
        let id = PointId(self.next_point);
        self.next_point += 1;
        self.points.insert(id, PointLandmark { position, observations: Vec::new(), descriptor, origin });
        id
    }

    pub fn add_line(&mut self, p: Vec3, q: Vec3, descriptor: BinaryDescriptor, origin: KeyFrameId) -> LineId {
        let id = LineId(self.next_line);
        self.next_line += 1;
        self.lines.insert(id, LineLandmark::new(p, q, descriptor, origin));
        id
    }

    pub fn remove_landmark(&mut self, lm: LandmarkId) {
        let obs: Vec<ObservationRef> = self.observers(lm).map(<[_]>::to_vec).unwrap_or_default();
        let is_point = matches!(lm, LandmarkId::Point(_));
        for o in obs {
            let _ = self.unbind(o.keyframe, o.index, is_point);
        }
        match lm {
            LandmarkId::Point(p) => {
                self.points.remove(&p);
            }
            LandmarkId::Line(l) => {
                self.lines.remove(&l);
            }
        }
    }

    /// Inserts a keyframe. Bound observations extend existing landmarks; every
    /// unbound observation with a valid stereo back-projection starts a new landmark.
    pub fn insert_keyframe(&mut self, kf: KeyFrame, cam: &StereoCamera) -> Result<KeyFrameId, MapError> {
        let id = kf.id;
        if self.keyframes.contains_key(&id) {
            return Err(MapError::DuplicateId(id));
        }
        for lm in kf.landmarks() {
            if self.observers(lm).is_none() {
                return Err(MapError::UnknownLandmark(lm));
            }
        }
        let mut frame = kf;
        let wanted_points = std::mem::replace(&mut frame.point_bindings, vec![None; frame.points.len()]);
        let wanted_lines = std::mem::replace(&mut frame.line_bindings, vec![None; frame.lines.len()]);
        let cam_to_world = frame.pose.inverse();
        let new_points: Vec<(usize, Vec3, BinaryDescriptor)> = frame
            .points
            .iter()
            .enumerate()
            .filter(|(i, _)| wanted_points[*i].is_none())
            .filter_map(|(i, o)| {
                cam.stereo_backproject(o.u, o.v, o.disparity)
                    .ok()
                    .map(|x| (i, cam_to_world.transform_point(&x), o.descriptor))
            })
            .collect();
        let new_lines: Vec<(usize, Vec3, Vec3, BinaryDescriptor)> = frame
            .lines
            .iter()
            .enumerate()
            .filter(|(i, _)| wanted_lines[*i].is_none())
            .filter_map(|(i, o)| {
                let p = cam.stereo_backproject(o.p.x, o.p.y, o.disp_p).ok()?;
                let q = cam.stereo_backproject(o.q.x, o.q.y, o.disp_q).ok()?;
                ((q - p).norm() > 1e-9)
                    .then(|| (i, cam_to_world.transform_point(&p), cam_to_world.transform_point(&q), o.descriptor))
            })
            .collect();
        self.keyframes.insert(id, frame);

        for (i, lm) in wanted_points.iter().enumerate() {
            if let Some(p) = lm {
                if let Err(e) = self.bind(id, i, LandmarkId::Point(*p)) {
                    log::debug!("skipping binding of point observation {i} in {id}: {e}");
                }
            }
        }
        for (i, lm) in wanted_lines.iter().enumerate() {
            if let Some(l) = lm {
                if let Err(e) = self.bind(id, i, LandmarkId::Line(*l)) {
                    log::debug!("skipping binding of line observation {i} in {id}: {e}");
                }
            }
        }
        for (i, x, d) in new_points {
            let p = self.add_point(x, d, id);
            self.bind(id, i, LandmarkId::Point(p))?;
        }
        for (i, p, q, d) in new_lines {
            let l = self.add_line(p, q, d, id);
            self.bind(id, i, LandmarkId::Line(l))?;
        }

        // Parent in the spanning tree: most covisible earlier keyframe, lowest id on ties,
        // falling back to the latest keyframe when nothing is shared.
        if self.tree.root.is_none() {
            self.tree.root = Some(id);
        } else {
            let parent = self
                .keyframes
                .keys()
                .filter(|k| **k != id)
                .map(|k| (self.shared_count(id, *k), std::cmp::Reverse(*k)))
                .max()
                .filter(|(c, _)| *c > 0)
                .map(|(_, std::cmp::Reverse(k))| k)
                .or_else(|| self.keyframes.keys().filter(|k| **k != id).next_back().copied());
            if let Some(p) = parent {
                self.tree.parent.insert(id, p);
            }
        }
        Ok(id)
    }

    pub fn covisibility_neighbors(&self, kf: KeyFrameId) -> Vec<(KeyFrameId, usize)> {
        self.shared
            .iter()
            .filter(|(_, c)| **c >= self.config.covisibility_min_shared)
            .filter_map(|((a, b), c)| {
                if *a == kf {
                    Some((*b, *c))
                } else if *b == kf {
                    Some((*a, *c))
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn are_covisible(&self, a: KeyFrameId, b: KeyFrameId) -> bool {
        self.shared_count(a, b) >= self.config.covisibility_min_shared
    }

    pub fn covisibility_edges(&self) -> Vec<Edge> {
        self.shared
            .iter()
            .filter(|(_, c)| **c >= self.config.covisibility_min_shared)
            .map(|((a, b), c)| Edge { a: *a, b: *b, shared: *c })
            .collect()
    }

    pub fn essential_edges(&self) -> Vec<Edge> {
        self.shared
            .iter()
            .filter(|(_, c)| **c > self.config.essential_min_shared)
            .map(|((a, b), c)| Edge { a: *a, b: *b, shared: *c })
            .collect()
    }

    pub fn spanning_tree(&self) -> &SpanningTree {
        &self.tree
    }

    pub fn local_map_of(&self, kf: KeyFrameId) -> Result<LocalMap, MapError> {
        if !self.keyframes.contains_key(&kf) {
            return Err(MapError::UnknownKeyFrame(kf));
        }
        let mut local = LocalMap::default();
        local.keyframes.insert(kf);
        local.keyframes.extend(self.covisibility_neighbors(kf).into_iter().map(|(k, _)| k));
        for k in &local.keyframes {
            for lm in self.keyframes[k].landmarks() {
                match lm {
                    LandmarkId::Point(p) => local.points.insert(p),
                    LandmarkId::Line(l) => local.lines.insert(l),
                };
            }
        }
        Ok(local)
    }

    /// Removes landmarks with fewer than `min_obs` observations whose origin
    /// keyframe is outside `window`.
    pub fn cull_landmarks(&mut self, min_obs: usize, window: &BTreeSet<KeyFrameId>) -> usize {
        let doomed: Vec<LandmarkId> = self
            .points
            .iter()
            .filter(|(_, l)| l.observations.len() < min_obs && !window.contains(&l.origin))
            .map(|(id, _)| LandmarkId::Point(*id))
            .chain(
                self.lines
                    .iter()
                    .filter(|(_, l)| l.observations.len() < min_obs && !window.contains(&l.origin))
                    .map(|(id, _)| LandmarkId::Line(*id)),
            )
            .collect();
        for lm in &doomed {
            self.remove_landmark(*lm);
        }
        doomed.len()
    }

    /// Merges `drop` into `keep`: observations move over unless the keyframe
    /// already observes `keep`, and `keep`'s geometry is retained.
    pub fn merge_landmarks(&mut self, keep: LandmarkId, drop: LandmarkId) -> Result<usize, MapError> {
        if keep == drop {
            return Ok(0);
        }
        let is_point = match (keep, drop) {
            (LandmarkId::Point(_), LandmarkId::Point(_)) => true,
            (LandmarkId::Line(_), LandmarkId::Line(_)) => false,
            _ => return Err(MapError::UnknownLandmark(drop)),
        };
        if self.observers(keep).is_none() {
            return Err(MapError::UnknownLandmark(keep));
        }
        let obs = self.observers(drop).ok_or(MapError::UnknownLandmark(drop))?.to_vec();
        let mut moved = 0;
        for o in obs {
            self.unbind(o.keyframe, o.index, is_point)?;
            if !self.observes(o.keyframe, keep) {
                self.bind(o.keyframe, o.index, keep)?;
                moved += 1;
            }
        }
        Ok(moved)
    }

    /// Checks bidirectional landmark/keyframe references and the incremental shared counts.
    pub fn check_integrity(&self) -> Result<(), String> {
        for (id, kf) in &self.keyframes {
            for (i, b) in kf.point_bindings.iter().enumerate() {
                if let Some(p) = b {
                    let lm = self.points.get(p).ok_or(format!("{id} binds missing point {p:?}"))?;
                    if !lm.observations.contains(&ObservationRef { keyframe: *id, index: i }) {
                        return Err(format!("point {p:?} lacks back-reference to {id}:{i}"));
                    }
                }
            }
            for (i, b) in kf.line_bindings.iter().enumerate() {
                if let Some(l) = b {
                    let lm = self.lines.get(l).ok_or(format!("{id} binds missing line {l:?}"))?;
                    if !lm.observations.contains(&ObservationRef { keyframe: *id, index: i }) {
                        return Err(format!("line {l:?} lacks back-reference to {id}:{i}"));
                    }
                }
            }
        }
        for (p, lm) in &self.points {
            if lm.observations.is_empty() {
                return Err(format!("point {p:?} has no observations"));
            }
            for o in &lm.observations {
                let kf = self.keyframes.get(&o.keyframe).ok_or(format!("point {p:?} observed by missing kf"))?;
                if kf.point_bindings.get(o.index) != Some(&Some(*p)) {
                    return Err(format!("point {p:?} observation {o:?} not bound"));
                }
            }
        }
        for (l, lm) in &self.lines {
            if ((lm.q - lm.p).normalize() - lm.direction).norm() > 1e-9 {
                return Err(format!("line {l:?} direction out of date"));
            }
            for o in &lm.observations {
                let kf = self.keyframes.get(&o.keyframe).ok_or(format!("line {l:?} observed by missing kf"))?;
                if kf.line_bindings.get(o.index) != Some(&Some(*l)) {
                    return Err(format!("line {l:?} observation {o:?} not bound"));
                }
            }
        }
        let mut recount: BTreeMap<(KeyFrameId, KeyFrameId), usize> = BTreeMap::new();
        let observer_sets = self
            .points
            .values()
            .map(|l| &l.observations)
            .chain(self.lines.values().map(|l| &l.observations));
        for obs in observer_sets {
            for (i, a) in obs.iter().enumerate() {
                for b in &obs[i + 1..] {
                    *recount.entry(ordered(a.keyframe, b.keyframe)).or_insert(0) += 1;
                }
            }
        }
        if recount != self.shared {
            return Err("incremental shared counts diverged from recomputation".into());
        }
        Ok(())
    }

    pub fn to_document(&self) -> MapDocument {
        MapDocument {
            keyframes: self.keyframes.values().cloned().collect(),
            points: self.points.iter().map(|(id, l)| (*id, l.clone())).collect(),
            lines: self.lines.iter().map(|(id, l)| (*id, l.clone())).collect(),
            covisibility_edges: self.covisibility_edges(),
            essential_edges: self.essential_edges(),
            spanning_tree: self.tree.edges(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("map serializes")
    }

    pub fn from_document(doc: MapDocument, config: MapConfig) -> Result<Self, MapError> {
        let mut map = WorldMap::new(config);
        for kf in doc.keyframes {
            if map.keyframes.insert(kf.id, kf.clone()).is_some() {
                return Err(MapError::DuplicateId(kf.id));
            }
        }
        map.next_point = doc.points.iter().map(|(id, _)| id.0 + 1).max().unwrap_or(0);
        map.next_line = doc.lines.iter().map(|(id, _)| id.0 + 1).max().unwrap_or(0);
        map.points = doc.points.into_iter().collect();
        map.lines = doc.lines.into_iter().collect();
        for obs in map.points.values().map(|l| &l.observations).chain(map.lines.values().map(|l| &l.observations)) {
            for (i, a) in obs.iter().enumerate() {
                for b in &obs[i + 1..] {
                    *map.shared.entry(ordered(a.keyframe, b.keyframe)).or_insert(0) += 1;
                }
            }
        }
        map.tree.root = map.keyframes.keys().next().copied();
        for (p, c) in doc.spanning_tree {
            map.tree.parent.insert(c, p);
        }
        map.check_integrity().map_err(MapError::Document)?;
        Ok(map)
    }

    pub fn from_json(s: &str, config: MapConfig) -> Result<Self, MapError> {
        let doc: MapDocument = serde_json::from_str(s).map_err(|e| MapError::Document(e.to_string()))?;
        Self::from_document(doc, config)
    }
}

/// JSON layout of a saved map.
///
/// Poses store `rotation` as nine column-major entries and `translation` as three;
/// they map world coordinates into the keyframe's camera frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub keyframes: Vec<KeyFrame>,
    pub points: Vec<(PointId, PointLandmark)>,
    pub lines: Vec<(LineId, LineLandmark)>,
    pub covisibility_edges: Vec<Edge>,
    pub essential_edges: Vec<Edge>,
    /// `(parent, child)` pairs.
    pub spanning_tree: Vec<(KeyFrameId, KeyFrameId)>,
}
