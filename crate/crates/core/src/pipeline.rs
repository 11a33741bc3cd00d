//! End-to-end runs: frame-to-frame tracking, keyframe mapping and loop closure.
//!
//! The default schedule is sequential and fully deterministic. The concurrent
//! schedule runs tracking, mapping and loop closure on three threads that share
//! the map behind a lock.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::{mpsc, Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::TrajectorySeries;
use crate::features::{filter_line_matches, match_descriptors, LineFilter, DEFAULT_MATCH_RATIO};
use crate::kv::{KeyValues, KvError};
use crate::lie::{compose_with_covariance, Mat6, MotionEstimate, Pose, StereoCamera, Tangent};
use crate::loop_closure::{
    apply_pose_correction, detect_loop_candidate, estimate_loop_transform, fuse_loop_maps, pose_graph_optimize,
    summarize, ImageSummary, LoopConfig, PgoConfig, PoseEdge, Rejection, SimilarityDatabase, Vocabulary, WordBag,
    DEFAULT_VOCABULARY_BITS, DEFAULT_VOCABULARY_SEED,
};
use crate::map::{KeyFrame, KeyFrameId, MapConfig, WorldMap};
use crate::mapping::{associate_unmatched, optimize_local_map, refine_relative_pose, MappingConfig};
use crate::odometry::{entropy, estimate_motion, keyframe_decision, FramePair, LinePair, PointPair, SolverConfig, DEFAULT_ENTROPY_RATIO};
use crate::tracks::Frame;

/// Which feature types take part in tracking, mapping and place recognition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Points,
    Lines,
    #[serde(rename = "pl")]
    PointsLines,
}

impl FeatureMode {
    pub fn uses_points(self) -> bool {
        self != FeatureMode::Lines
    }

    pub fn uses_lines(self) -> bool {
        self != FeatureMode::Points
    }
}

impl FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "points" => Ok(Self::Points),
            "lines" => Ok(Self::Lines),
            "pl" => Ok(Self::PointsLines),
            other => Err(format!("unknown mode {other:?} (expected points, lines or pl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub camera: StereoCamera,
    pub mode: FeatureMode,
    pub odometry: SolverConfig,
    pub match_ratio: f64,
    pub line_filter: LineFilter,
    pub entropy_ratio: f64,
    /// A keyframe is inserted at the latest after this many frames.
    pub max_keyframe_gap: usize,
    /// Consecutive tracking failures tolerated before giving up.
    pub max_tracking_failures: usize,
    pub mapping: MappingConfig,
    pub map: MapConfig,
    pub loop_closure: LoopConfig,
    pub loop_enabled: bool,
    pub pgo: PgoConfig,
    pub vocabulary_bits: u32,
    pub vocabulary_seed: u64,
    pub deterministic: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            camera: StereoCamera::default(),
            mode: FeatureMode::PointsLines,
            odometry: SolverConfig::default(),
            match_ratio: DEFAULT_MATCH_RATIO,
            line_filter: LineFilter::default(),
            entropy_ratio: DEFAULT_ENTROPY_RATIO,
            max_keyframe_gap: 15,
            max_tracking_failures: 5,
            mapping: MappingConfig::default(),
            map: MapConfig::default(),
            loop_closure: LoopConfig::default(),
            loop_enabled: true,
            pgo: PgoConfig::default(),
            vocabulary_bits: DEFAULT_VOCABULARY_BITS,
            vocabulary_seed: DEFAULT_VOCABULARY_SEED,
            deterministic: true,
        }
    }
}

const CAMERA_KEYS: &[&str] = &["fx", "fy", "cx", "cy", "baseline", "width", "height"];

const PIPELINE_KEYS: &[&str] = &[
    "mode",
    "deterministic",
    "match_ratio",
    "angle_tol_deg",
    "length_tol",
    "disp_tol",
    "entropy_ratio",
    "max_keyframe_gap",
    "max_tracking_failures",
    "huber_delta",
    "outlier_k",
    "outlier_floor",
    "min_correspondences",
    "window_px",
    "max_descriptor_distance",
    "min_observations",
    "ba_max_iterations",
    "covisibility_min_shared",
    "essential_min_shared",
    "loop_enabled",
    "loop_min_database",
    "loop_recent_window",
    "loop_min_score",
    "loop_sequence_length",
    "loop_sequence_ratio",
    "loop_max_eigenvalue",
    "loop_max_translation",
    "loop_max_rotation_deg",
    "loop_min_inlier_ratio",
    "loop_inlier_threshold_px",
    "vocabulary_bits",
    "vocabulary_seed",
];

/// Reads the stereo intrinsics keys `fx fy cx cy baseline width height`.
pub fn read_camera(kv: &KeyValues, cam: &mut StereoCamera) -> Result<(), KvError> {
    kv.set("fx", &mut cam.fx)?;
    kv.set("fy", &mut cam.fy)?;
    kv.set("cx", &mut cam.cx)?;
    kv.set("cy", &mut cam.cy)?;
    kv.set("baseline", &mut cam.baseline)?;
    kv.set("width", &mut cam.width)?;
    kv.set("height", &mut cam.height)?;
    Ok(())
}

impl PipelineConfig {
    /// Reads a `key = value` configuration; absent keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, KvError> {
        let kv = KeyValues::parse(text)?;
        let known: Vec<&str> = PIPELINE_KEYS.iter().chain(CAMERA_KEYS).copied().collect();
        kv.check_known(&known)?;
        let mut c = Self::default();
        read_camera(&kv, &mut c.camera)?;
        if let Some(m) = kv.get::<String>("mode")? {
            c.mode = m.parse().map_err(|_| KvError::Value { key: "mode".into(), value: m })?;
        }
        kv.set("deterministic", &mut c.deterministic)?;
        kv.set("match_ratio", &mut c.match_ratio)?;
        if let Some(deg) = kv.get::<f64>("angle_tol_deg")? {
            c.line_filter.angle_tol = deg.to_radians();
        }
        kv.set("length_tol", &mut c.line_filter.length_tol)?;
        kv.set("disp_tol", &mut c.line_filter.disp_tol)?;
        kv.set("entropy_ratio", &mut c.entropy_ratio)?;
        kv.set("max_keyframe_gap", &mut c.max_keyframe_gap)?;
        kv.set("max_tracking_failures", &mut c.max_tracking_failures)?;
        kv.set("huber_delta", &mut c.odometry.huber_delta)?;
        kv.set("outlier_k", &mut c.odometry.outlier_k)?;
        kv.set("outlier_floor", &mut c.odometry.outlier_floor)?;
        kv.set("min_correspondences", &mut c.odometry.min_correspondences)?;
        kv.set("window_px", &mut c.mapping.window_px)?;
        kv.set("max_descriptor_distance", &mut c.mapping.max_descriptor_distance)?;
        kv.set("min_observations", &mut c.mapping.min_observations)?;
        kv.set("ba_max_iterations", &mut c.mapping.ba.max_iterations)?;
        kv.set("covisibility_min_shared", &mut c.map.covisibility_min_shared)?;
        kv.set("essential_min_shared", &mut c.map.essential_min_shared)?;
        kv.set("loop_enabled", &mut c.loop_enabled)?;
        let l = &mut c.loop_closure;
        kv.set("loop_min_database", &mut l.min_database)?;
        kv.set("loop_recent_window", &mut l.recent_window)?;
        kv.set("loop_min_score", &mut l.min_score)?;
        kv.set("loop_sequence_length", &mut l.sequence_length)?;
        kv.set("loop_sequence_ratio", &mut l.sequence_ratio)?;
        kv.set("loop_max_eigenvalue", &mut l.max_eigenvalue)?;
        kv.set("loop_max_translation", &mut l.max_translation)?;
        kv.set("loop_max_rotation_deg", &mut l.max_rotation_deg)?;
        kv.set("loop_min_inlier_ratio", &mut l.min_inlier_ratio)?;
        kv.set("loop_inlier_threshold_px", &mut l.inlier_threshold_px)?;
        kv.set("vocabulary_bits", &mut c.vocabulary_bits)?;
        kv.set("vocabulary_seed", &mut c.vocabulary_seed)?;
        if !(1..=32).contains(&c.vocabulary_bits) {
            return Err(KvError::Value { key: "vocabulary_bits".into(), value: c.vocabulary_bits.to_string() });
        }
        c.mapping.solver = c.odometry;
        c.mapping.match_ratio = c.match_ratio;
        c.mapping.line_filter = c.line_filter;
        Ok(c)
    }
}

/// Progress record, written one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Keyframe { frame: u64, keyframe: KeyFrameId, refined: bool, ba_cost: Option<f64>, culled: usize },
    TrackingFailure { frame: u64, reason: String },
    TrackingLost { frame: u64 },
    LoopCandidate { current: KeyFrameId, old: KeyFrameId, score: f64 },
    LoopRejected { current: KeyFrameId, old: KeyFrameId, reason: Rejection },
    LoopAccepted { current: KeyFrameId, old: KeyFrameId, max_eigenvalue: f64, inlier_ratio: f64, translation: f64, rotation_deg: f64 },
    PoseGraph { loop_edges: usize, initial_cost: f64, final_cost: f64, iterations: usize, fused: usize },
    PoseGraphFailed { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    TrackingLost { frame: u64 },
}

/// Pose of the loop-closing keyframe before and after the correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopRecord {
    pub current: KeyFrameId,
    pub old: KeyFrameId,
    pub before: Pose,
    /// Pose right after the pose-graph solve.
    pub corrected: Pose,
    /// Pose once the loop has been fully applied.
    pub after: Pose,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no frames to process")]
    NoFrames,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub status: RunStatus,
    pub map: WorldMap,
    pub events: Vec<Event>,
    pub loops: Vec<LoopRecord>,
    pub database: SimilarityDatabase,
    pub frames_processed: usize,
}

impl RunOutput {
    /// Keyframe poses as camera-to-world, stamped with their frame index.
    pub fn trajectory(&self) -> TrajectorySeries {
        self.map.keyframes().map(|k| (k.frame as f64, k.pose.inverse())).collect()
    }

    pub fn events_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("events serialize"));
            s.push('\n');
        }
        s
    }

    /// Fused similarity of every keyframe (rows) against every other (columns).
    pub fn similarity_csv(&self) -> String {
        let ids: Vec<KeyFrameId> = self.database.keyframes().collect();
        let mut s = String::from("keyframe");
        for id in &ids {
            let _ = write!(s, ",{}", id.0);
        }
        s.push('\n');
        for q in &ids {
            let _ = write!(s, "{}", q.0);
            for o in &ids {
                let v = if q == o { 1.0 } else { self.database.score(*q, *o).unwrap_or(0.0) };
                let _ = write!(s, ",{v:.6}");
            }
            s.push('\n');
        }
        s
    }

    pub fn metrics(&self) -> RunMetrics {
        let count = |f: fn(&Event) -> bool| self.events.iter().filter(|e| f(e)).count();
        RunMetrics {
            status: self.status,
            frames: self.frames_processed,
            keyframes: self.map.keyframe_count(),
            points: self.map.points().count(),
            lines: self.map.lines().count(),
            tracking_failures: count(|e| matches!(e, Event::TrackingFailure { .. })),
            loop_candidates: count(|e| matches!(e, Event::LoopCandidate { .. })),
            loops_accepted: count(|e| matches!(e, Event::LoopAccepted { .. })),
            loops_rejected: count(|e| matches!(e, Event::LoopRejected { .. })),
            evaluation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    #[serde(flatten)]
    pub status: RunStatus,
    pub frames: usize,
    pub keyframes: usize,
    pub points: usize,
    pub lines: usize,
    pub tracking_failures: usize,
    pub loop_candidates: usize,
    pub loops_accepted: usize,
    pub loops_rejected: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<crate::eval::EvalReport>,
}

/// Drops the feature types the mode does not use.
pub fn restrict_frame(frame: &Frame, mode: FeatureMode) -> Frame {
    Frame {
        index: frame.index,
        points: if mode.uses_points() { frame.points.clone() } else { Vec::new() },
        lines: if mode.uses_lines() { frame.lines.clone() } else { Vec::new() },
    }
}

/// Correspondences between consecutive frames, with the earlier frame back-projected.
pub fn frame_pair(cam: &StereoCamera, prev: &Frame, cur: &Frame, ratio: f64, filter: &LineFilter) -> FramePair {
    let mut pair = FramePair::default();
    let pd: Vec<_> = prev.points.iter().map(|o| o.descriptor).collect();
    let cd: Vec<_> = cur.points.iter().map(|o| o.descriptor).collect();
    for m in match_descriptors(&pd, &cd, ratio).iter() {
        let o = &prev.points[m.index_a];
        if let Ok(x) = cam.stereo_backproject(o.u, o.v, o.disparity) {
            pair.points.push(PointPair { point: x, observation: cur.points[m.index_b].pixel() });
        }
    }
    let pl: Vec<_> = prev.lines.iter().map(|o| o.descriptor).collect();
    let cl: Vec<_> = cur.lines.iter().map(|o| o.descriptor).collect();
    for m in filter_line_matches(&match_descriptors(&pl, &cl, ratio), &prev.lines, &cur.lines, filter).iter() {
        let o = &prev.lines[m.index_a];
        let (Ok(p), Ok(q)) = (cam.stereo_backproject(o.p.x, o.p.y, o.disp_p), cam.stereo_backproject(o.q.x, o.q.y, o.disp_q))
        else {
            continue;
        };
        if let Ok(line) = cur.lines[m.index_b].line_coeffs() {
            pair.lines.push(LinePair { p, q, line });
        }
    }
    pair
}

/// Covariance assigned to a motion prior used in place of a failed estimate.
const PRIOR_VARIANCE: f64 = 1e-2;

/// A keyframe request from tracking: the frame and its motion relative to the
/// previous keyframe.
#[derive(Debug, Clone)]
pub struct KeyframeJob {
    pub frame: Frame,
    pub span: MotionEstimate,
}

/// Frame-to-frame visual odometry with entropy-based keyframe selection.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: PipelineConfig,
    prev: Option<Frame>,
    span: MotionEstimate,
    h_first: Option<f64>,
    velocity: Tangent,
    failures: usize,
    since_keyframe: usize,
}

pub enum TrackOutcome {
    Keyframe(KeyframeJob),
    Tracked,
    Lost,
}

impl Tracker {
    pub fn new(cfg: PipelineConfig) -> Self {
        Self {
            cfg,
            prev: None,
            span: MotionEstimate::identity(),
            h_first: None,
            velocity: Tangent::zero(),
            failures: 0,
            since_keyframe: 0,
        }
    }

    /// Tracks `frame`. The first frame, the last one (`is_last`) and frames
    /// chosen by the entropy test become keyframes.
    pub fn track(&mut self, frame: Frame, is_last: bool, events: &mut Vec<Event>) -> TrackOutcome {
        let frame = restrict_frame(&frame, self.cfg.mode);
        let Some(prev) = self.prev.take() else {
            self.prev = Some(frame.clone());
            return TrackOutcome::Keyframe(KeyframeJob { frame, span: MotionEstimate::identity() });
        };
        let pair = frame_pair(&self.cfg.camera, &prev, &frame, self.cfg.match_ratio, &self.cfg.line_filter);
        let motion = match estimate_motion(&self.cfg.camera, &pair, &self.cfg.odometry, &self.velocity) {
            Ok(r) => {
                self.failures = 0;
                self.velocity = r.estimate.mean;
                r.estimate
            }
            Err(e) => {
                self.failures += 1;
                events.push(Event::TrackingFailure { frame: frame.index, reason: e.to_string() });
                if self.failures >= self.cfg.max_tracking_failures {
                    events.push(Event::TrackingLost { frame: frame.index });
                    return TrackOutcome::Lost;
                }
                MotionEstimate::new(self.velocity, Mat6::identity() * PRIOR_VARIANCE)
            }
        };
        self.span = compose_with_covariance(&motion, &self.span);
        let h_first = *self.h_first.get_or_insert_with(|| entropy(&motion.covariance).unwrap_or(f64::NAN));
        let h_span = entropy(&self.span.covariance).unwrap_or(f64::NAN);
        self.since_keyframe += 1;
        self.prev = Some(frame.clone());
        let insert = is_last
            || self.since_keyframe >= self.cfg.max_keyframe_gap
            || keyframe_decision(h_span, h_first, self.cfg.entropy_ratio);
        if !insert {
            return TrackOutcome::Tracked;
        }
        let job = KeyframeJob { frame, span: self.span };
        self.span = MotionEstimate::identity();
        self.h_first = None;
        self.since_keyframe = 0;
        TrackOutcome::Keyframe(job)
    }
}

/// Everything the loop-closure stage needs about a new keyframe.
#[derive(Debug, Clone)]
pub struct LoopJob {
    pub keyframe: KeyFrameId,
    pub point_bag: WordBag,
    pub line_bag: WordBag,
    pub summary: ImageSummary,
}

/// Inserts a keyframe: refinement against the previous keyframe, local-map
/// association, local bundle adjustment.
pub fn map_keyframe(map: &mut WorldMap, cfg: &PipelineConfig, vocabulary: &Vocabulary, job: KeyframeJob, events: &mut Vec<Event>) -> LoopJob {
    let cam = &cfg.camera;
    let id = KeyFrameId(map.keyframe_ids().last().map_or(0, |k| k.0 + 1));
    let prev = map.last_keyframe().map(|k| (k.id, k.pose));
    let pose = match prev {
        Some((_, p)) => &job.span.pose() * &p,
        None => Pose::identity(),
    };
    let mut kf = KeyFrame::new(id, job.frame.index, pose, job.span, job.frame.points, job.frame.lines);
    let mut refined = false;
    if let Some((pid, _)) = prev {
        match refine_relative_pose(map, cam, pid, &kf, &job.span.mean, &cfg.mapping) {
            Ok(r) => {
                kf.pose = r.pose;
                kf.relative = r.motion.estimate;
                kf.point_bindings = r.point_bindings;
                kf.line_bindings = r.line_bindings;
                refined = true;
            }
            Err(e) => log::debug!("keyframe {id}: refinement failed ({e}), keeping odometry pose"),
        }
    }
    let (point_bag, line_bag, summary) = summarize(vocabulary, &kf);
    kf.point_words = point_bag.clone();
    kf.line_words = line_bag.clone();
    let id = map.insert_keyframe(kf, cam).expect("fresh keyframe id");
    let mut ba_cost = None;
    let mut culled = 0;
    if prev.is_some() {
        if let Err(e) = associate_unmatched(map, cam, id, &cfg.mapping) {
            log::debug!("keyframe {id}: association failed ({e})");
        }
        match optimize_local_map(map, cam, id, &cfg.mapping) {
            Ok((report, c)) => {
                ba_cost = Some(report.final_cost);
                culled = c;
            }
            Err(e) => log::debug!("keyframe {id}: local BA skipped ({e})"),
        }
    }
    events.push(Event::Keyframe { frame: job.frame.index, keyframe: id, refined, ba_cost, culled });
    LoopJob { keyframe: id, point_bag, line_bag, summary }
}

/// Place-recognition database plus the accepted loop edges.
#[derive(Debug, Clone, Default)]
pub struct LoopState {
    pub database: SimilarityDatabase,
    pub edges: Vec<PoseEdge>,
    pub records: Vec<LoopRecord>,
}

/// Result of checking one keyframe for a loop, computed against a read-only map.
pub enum LoopProposal {
    None,
    Accepted { candidate: crate::loop_closure::LoopCandidate, poses: BTreeMap<KeyFrameId, Pose>, cost: (f64, f64, usize) },
}

/// Detection, validation and pose-graph solve for `job.keyframe`; does not modify the map.
pub fn propose_loop(map: &WorldMap, cfg: &PipelineConfig, state: &mut LoopState, job: LoopJob, events: &mut Vec<Event>) -> LoopProposal {
    state.database.insert(job.keyframe, job.point_bag, job.line_bag, job.summary);
    if !cfg.loop_enabled {
        return LoopProposal::None;
    }
    let Some(det) = detect_loop_candidate(&state.database, map, job.keyframe, &cfg.loop_closure) else {
        return LoopProposal::None;
    };
    events.push(Event::LoopCandidate { current: det.current, old: det.old, score: det.score });
    let candidate = match estimate_loop_transform(map, &cfg.camera, &det, &cfg.loop_closure, &cfg.mapping) {
        Ok(c) => c,
        Err(reason) => {
            events.push(Event::LoopRejected { current: det.current, old: det.old, reason });
            return LoopProposal::None;
        }
    };
    events.push(Event::LoopAccepted {
        current: candidate.current,
        old: candidate.old,
        max_eigenvalue: candidate.max_eigenvalue,
        inlier_ratio: candidate.inlier_ratio,
        translation: candidate.translation(),
        rotation_deg: candidate.rotation_deg(),
    });
    let mut edges = state.edges.clone();
    edges.push(candidate.edge());
    match pose_graph_optimize(map, &edges, &cfg.pgo) {
        Ok(r) => {
            state.edges = edges;
            LoopProposal::Accepted { candidate, poses: r.poses, cost: (r.initial_cost, r.final_cost, r.iterations) }
        }
        Err(e) => {
            events.push(Event::PoseGraphFailed { reason: e.to_string() });
            LoopProposal::None
        }
    }
}

/// Applies an accepted proposal: keyframes and landmarks move, matched
/// landmarks are fused.
pub fn apply_loop(map: &mut WorldMap, cfg: &PipelineConfig, state: &mut LoopState, proposal: LoopProposal, events: &mut Vec<Event>) {
    let LoopProposal::Accepted { candidate, poses, cost } = proposal else { return };
    let before = map.keyframe(candidate.current).map(|k| k.pose);
    // Keyframes missing from the solution (inserted meanwhile) follow the newest solved one.
    let mut corrected = BTreeMap::new();
    let mut shift = Pose::identity();
    for kf in map.keyframes() {
        match poses.get(&kf.id) {
            Some(p) => {
                shift = &p.inverse() * &kf.pose;
                corrected.insert(kf.id, *p);
            }
            None => {
                corrected.insert(kf.id, &kf.pose * &shift.inverse());
            }
        }
    }
    apply_pose_correction(map, &corrected);
    let solved = map.keyframe(candidate.current).map(|k| k.pose);
    let fused = fuse_loop_maps(map, &cfg.camera, &candidate, &cfg.mapping);
    events.push(Event::PoseGraph { loop_edges: state.edges.len(), initial_cost: cost.0, final_cost: cost.1, iterations: cost.2, fused });
    if let (Some(before), Some(corrected), Some(after)) = (before, solved, map.keyframe(candidate.current).map(|k| k.pose)) {
        state.records.push(LoopRecord { current: candidate.current, old: candidate.old, before, corrected, after });
    }
}

/// Runs the whole sequence with the schedule selected by `cfg.deterministic`.
pub fn run(cfg: &PipelineConfig, frames: &[Frame]) -> Result<RunOutput, PipelineError> {
    if frames.is_empty() {
        return Err(PipelineError::NoFrames);
    }
    if cfg.deterministic {
        Ok(run_sequential(cfg, frames))
    } else {
        Ok(run_concurrent(cfg, frames))
    }
}

fn run_sequential(cfg: &PipelineConfig, frames: &[Frame]) -> RunOutput {
    let vocabulary = Vocabulary::new(cfg.vocabulary_bits, cfg.vocabulary_seed);
    let mut map = WorldMap::new(cfg.map);
    let mut tracker = Tracker::new(*cfg);
    let mut state = LoopState::default();
    let mut events = Vec::new();
    let mut status = RunStatus::Completed;
    let mut processed = 0;
    for (i, frame) in frames.iter().enumerate() {
        processed += 1;
        match tracker.track(frame.clone(), i + 1 == frames.len(), &mut events) {
            TrackOutcome::Tracked => {}
            TrackOutcome::Lost => {
                status = RunStatus::TrackingLost { frame: frame.index };
                break;
            }
            TrackOutcome::Keyframe(job) => {
                let lj = map_keyframe(&mut map, cfg, &vocabulary, job, &mut events);
                let proposal = propose_loop(&map, cfg, &mut state, lj, &mut events);
                apply_loop(&mut map, cfg, &mut state, proposal, &mut events);
            }
        }
    }
    RunOutput { status, map, events, loops: state.records, database: state.database, frames_processed: processed }
}

/// Tracking on the calling thread, mapping and loop closure on workers.
///
/// Keyframes arriving while the mapper is busy wait in its queue. The loop
/// worker solves the pose graph on a snapshot and applies the correction under
/// the write lock.
fn run_concurrent(cfg: &PipelineConfig, frames: &[Frame]) -> RunOutput {
    let map = Arc::new(RwLock::new(WorldMap::new(cfg.map)));
    let events = Arc::new(Mutex::new(Vec::new()));
    let (kf_tx, kf_rx) = mpsc::channel::<KeyframeJob>();
    let (loop_tx, loop_rx) = mpsc::channel::<LoopJob>();
    let cfg = *cfg;

    let mapper = {
        let map = Arc::clone(&map);
        let events = Arc::clone(&events);
        std::thread::spawn(move || {
            let vocabulary = Vocabulary::new(cfg.vocabulary_bits, cfg.vocabulary_seed);
            for job in kf_rx {
                let mut local = Vec::new();
                let lj = map_keyframe(&mut map.write().expect("map lock"), &cfg, &vocabulary, job, &mut local);
                events.lock().expect("event lock").extend(local);
                if loop_tx.send(lj).is_err() {
                    break;
                }
            }
        })
    };
    let closer = {
        let map = Arc::clone(&map);
        let events = Arc::clone(&events);
        std::thread::spawn(move || {
            let mut state = LoopState::default();
            for job in loop_rx {
                let mut local = Vec::new();
                let proposal = propose_loop(&map.read().expect("map lock"), &cfg, &mut state, job, &mut local);
                if matches!(proposal, LoopProposal::Accepted { .. }) {
                    apply_loop(&mut map.write().expect("map lock"), &cfg, &mut state, proposal, &mut local);
                }
                events.lock().expect("event lock").extend(local);
            }
            state
        })
    };

    let mut tracker = Tracker::new(cfg);
    let mut status = RunStatus::Completed;
    let mut processed = 0;
    for (i, frame) in frames.iter().enumerate() {
        processed += 1;
        let mut local = Vec::new();
        let outcome = tracker.track(frame.clone(), i + 1 == frames.len(), &mut local);
        events.lock().expect("event lock").extend(local);
        match outcome {
            TrackOutcome::Tracked => {}
            TrackOutcome::Lost => {
                status = RunStatus::TrackingLost { frame: frame.index };
                break;
            }
            TrackOutcome::Keyframe(job) => {
                if kf_tx.send(job).is_err() {
                    break;
                }
            }
        }
    }
    drop(kf_tx);
    mapper.join().expect("mapping worker panicked");
    let state = closer.join().expect("loop worker panicked");
    let map = Arc::try_unwrap(map).expect("workers finished").into_inner().expect("map lock");
    let events = Arc::try_unwrap(events).expect("workers finished").into_inner().expect("event lock");
    RunOutput { status, map, events, loops: state.records, database: state.database, frames_processed: processed }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let c = PipelineConfig::from_kv("mode = lines\nfx = 500\nloop_min_score = 0.4\nangle_tol_deg = 5\n").unwrap();
        assert_eq!(c.mode, FeatureMode::Lines);
        assert_eq!(c.camera.fx, 500.0);
        assert_eq!(c.loop_closure.min_score, 0.4);
        assert!((c.mapping.line_filter.angle_tol - 5f64.to_radians()).abs() < 1e-15);
        assert!(matches!(PipelineConfig::from_kv("bogus = 1"), Err(KvError::UnknownKey(_))));
        assert!(matches!(PipelineConfig::from_kv("mode = both"), Err(KvError::Value { .. })));
        assert_eq!(PipelineConfig::from_kv("").unwrap(), PipelineConfig::default());
    }

    #[test]
    fn mode_restriction() {
        let f = crate::sim::simulate(&crate::sim::SimSpec {
            trajectory: crate::sim::TrajectorySpec { shape: crate::sim::Shape::Line, length: 1.0, frames: 2 },
            ..Default::default()
        })
        .frames
        .remove(0);
        assert!(!f.points.is_empty() && !f.lines.is_empty());
        let p = restrict_frame(&f, FeatureMode::Points);
        assert!(p.lines.is_empty() && p.points.len() == f.points.len());
        let l = restrict_frame(&f, FeatureMode::Lines);
        assert!(l.points.is_empty() && l.lines.len() == f.lines.len());
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(run(&PipelineConfig::default(), &[]), Err(PipelineError::NoFrames)));
    }
}
