//! Levenberg-Marquardt bundle adjustment over a local map.
//!
//! Variables are the free keyframe poses (left-perturbed), point positions and
//! segment endpoints. The linear system is reduced with a Schur complement on
//! the landmarks, which keeps the dense part at `6 × free poses`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix6, Matrix6x3};

use crate::lie::{Mat3, Mat6, Pose, StereoCamera, Tangent, Vec2, Vec3, Vec6};
use crate::map::{KeyFrameId, LandmarkId, LineId, PointId, WorldMap};
use crate::odometry::{line_residual, point_residual, PseudoHuber};

use super::MappingError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaConfig {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub step_tolerance: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_lambda: f64,
    /// Tikhonov weight on segment endpoints; their along-line position is unobservable.
    pub endpoint_damping: f64,
    pub huber_delta: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 25,
            relative_cost_tolerance: 1e-9,
            step_tolerance: 1e-8,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_lambda: 1e8,
            endpoint_damping: 1e-6,
            huber_delta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Measurement {
    Point { id: PointId, pixel: Vec2 },
    /// Normalized image line of the observed segment.
    Line { id: LineId, coeffs: Vec3 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaObservation {
    pub keyframe: KeyFrameId,
    pub measurement: Measurement,
}

impl BaObservation {
    pub fn landmark(&self) -> LandmarkId {
        match self.measurement {
            Measurement::Point { id, .. } => LandmarkId::Point(id),
            Measurement::Line { id, .. } => LandmarkId::Line(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalBaProblem {
    pub poses: BTreeMap<KeyFrameId, Pose>,
    pub fixed: BTreeSet<KeyFrameId>,
    pub points: BTreeMap<PointId, Vec3>,
    pub lines: BTreeMap<LineId, (Vec3, Vec3)>,
    pub observations: Vec<BaObservation>,
}

/// Residual and Jacobian blocks of one observation.
#[derive(Debug, Clone, Copy)]
pub struct ObservationBlocks {
    pub residual: Vec2,
    pub d_pose: Matrix2x6<f64>,
    /// `2×3` for points; for lines the first three columns act on `P`, the last three on `Q`.
    pub d_landmark: LandmarkJacobian,
}

#[derive(Debug, Clone, Copy)]
pub enum LandmarkJacobian {
    Point(Matrix2x3<f64>),
    Line(Matrix2x3<f64>, Matrix2x3<f64>),
}

impl LocalBaProblem {
    /// Local map of `kf` with every observation of its landmarks.
    ///
    /// Keyframes outside the local map that observe local landmarks enter as
    /// fixed; so does the oldest local keyframe, and the second oldest when
    /// nothing else is fixed. Landmarks seen fewer than twice are left out.
    pub fn from_map(map: &WorldMap, kf: KeyFrameId) -> Result<Self, MappingError> {
        let local = map.local_map_of(kf)?;
        let mut problem = LocalBaProblem::default();
        for &id in &local.keyframes {
            problem.poses.insert(id, map.keyframe(id).expect("local keyframe exists").pose);
        }
        if let Some(oldest) = local.keyframes.iter().next() {
            problem.fixed.insert(*oldest);
        }
        for &pid in &local.points {
            let lm = map.point(pid).expect("local point exists");
            if lm.observations.len() < 2 {
                continue;
            }
            problem.points.insert(pid, lm.position);
            for o in &lm.observations {
                let frame = map.keyframe(o.keyframe).expect("observer exists");
                problem.add_observer(o.keyframe, frame.pose, &local.keyframes);
                problem.observations.push(BaObservation {
                    keyframe: o.keyframe,
                    measurement: Measurement::Point { id: pid, pixel: frame.points[o.index].pixel() },
                });
            }
        }
        for &lid in &local.lines {
            let lm = map.line(lid).expect("local line exists");
            if lm.observations.len() < 2 {
                continue;
            }
            let mut coeffs = Vec::new();
            for o in &lm.observations {
                let frame = map.keyframe(o.keyframe).expect("observer exists");
                if let Ok(c) = frame.lines[o.index].line_coeffs() {
                    coeffs.push((o.keyframe, frame.pose, c));
                }
            }
            if coeffs.len() < 2 {
                continue;
            }
            problem.lines.insert(lid, (lm.p, lm.q));
            for (k, pose, c) in coeffs {
                problem.add_observer(k, pose, &local.keyframes);
                problem.observations.push(BaObservation { keyframe: k, measurement: Measurement::Line { id: lid, coeffs: c } });
            }
        }
        // Reprojection residuals leave scale free, so a second keyframe is
        // held fixed when no outside observer does it.
        if problem.fixed.len() < 2 {
            if let Some(second) = local.keyframes.iter().nth(1) {
                problem.fixed.insert(*second);
            }
        }
        Ok(problem)
    }

    /// Drops observations that cannot be projected, then landmarks left with
    /// fewer than two observations.
    pub fn prune(&mut self, cam: &StereoCamera) {
        let keep: Vec<bool> = self.observations.iter().map(|o| self.blocks(cam, o).is_some()).collect();
        let mut k = keep.iter();
        self.observations.retain(|_| *k.next().unwrap());
        let mut counts: BTreeMap<LandmarkId, usize> = BTreeMap::new();
        for o in &self.observations {
            *counts.entry(o.landmark()).or_insert(0) += 1;
        }
        let enough = |lm: LandmarkId| counts.get(&lm).copied().unwrap_or(0) >= 2;
        self.points.retain(|id, _| enough(LandmarkId::Point(*id)));
        self.lines.retain(|id, _| enough(LandmarkId::Line(*id)));
        let (points, lines) = (&self.points, &self.lines);
        self.observations.retain(|o| match o.measurement {
            Measurement::Point { id, .. } => points.contains_key(&id),
            Measurement::Line { id, .. } => lines.contains_key(&id),
        });
    }

    fn add_observer(&mut self, kf: KeyFrameId, pose: Pose, local: &BTreeSet<KeyFrameId>) {
        if !local.contains(&kf) {
            self.fixed.insert(kf);
        }
        self.poses.entry(kf).or_insert(pose);
    }

    pub fn free_keyframes(&self) -> Vec<KeyFrameId> {
        self.poses.keys().copied().filter(|k| !self.fixed.contains(k)).collect()
    }

    /// Residual and Jacobians of observation `o` at the current state.
    pub fn blocks(&self, cam: &StereoCamera, o: &BaObservation) -> Option<ObservationBlocks> {
        let pose = self.poses.get(&o.keyframe)?;
        match o.measurement {
            Measurement::Point { id, pixel } => {
                let r = point_residual(cam, pose, self.points.get(&id)?, &pixel).ok()?;
                Some(ObservationBlocks { residual: r.residual, d_pose: r.d_pose, d_landmark: LandmarkJacobian::Point(r.d_point) })
            }
            Measurement::Line { id, coeffs } => {
                let (p, q) = self.lines.get(&id)?;
                let r = line_residual(cam, pose, p, q, &coeffs).ok()?;
                Some(ObservationBlocks { residual: r.residual, d_pose: r.d_pose, d_landmark: LandmarkJacobian::Line(r.d_p, r.d_q) })
            }
        }
    }

    /// Robust cost; `None` when some observation can no longer be projected.
    pub fn cost(&self, cam: &StereoCamera, loss: &PseudoHuber) -> Option<f64> {
        let mut c = 0.0;
        for o in &self.observations {
            c += loss.cost(self.blocks(cam, o)?.residual.norm_squared());
        }
        Some(c)
    }

    /// Mean residual norm in pixels.
    pub fn mean_residual(&self, cam: &StereoCamera) -> f64 {
        let norms: Vec<f64> = self.observations.iter().filter_map(|o| self.blocks(cam, o)).map(|b| b.residual.norm()).collect();
        if norms.is_empty() {
            0.0
        } else {
            norms.iter().sum::<f64>() / norms.len() as f64
        }
    }

    /// Pseudo-Huber IRLS weights at the current state.
    pub fn robust_weights(&self, cam: &StereoCamera, loss: &PseudoHuber) -> Vec<f64> {
        self.observations
            .iter()
            .map(|o| self.blocks(cam, o).map_or(0.0, |b| loss.weight(b.residual.norm_squared())))
            .collect()
    }

    /// Stacked residuals and dense Jacobian, columns ordered as free poses,
    /// points, then lines (`P` before `Q`).
    pub fn dense_system(&self, cam: &StereoCamera) -> (DMatrix<f64>, DVector<f64>) {
        let layout = Layout::new(self);
        let mut j = DMatrix::zeros(2 * self.observations.len(), layout.total);
        let mut e = DVector::zeros(2 * self.observations.len());
        for (k, o) in self.observations.iter().enumerate() {
            let Some(b) = self.blocks(cam, o) else { continue };
            e.rows_mut(2 * k, 2).copy_from(&b.residual);
            if let Some(s) = layout.pose.get(&o.keyframe) {
                j.view_mut((2 * k, 6 * s), (2, 6)).copy_from(&b.d_pose);
            }
            match (o.measurement, b.d_landmark) {
                (Measurement::Point { id, .. }, LandmarkJacobian::Point(dp)) => {
                    j.view_mut((2 * k, layout.point[&id]), (2, 3)).copy_from(&dp);
                }
                (Measurement::Line { id, .. }, LandmarkJacobian::Line(dp, dq)) => {
                    let c = layout.line[&id];
                    j.view_mut((2 * k, c), (2, 3)).copy_from(&dp);
                    j.view_mut((2 * k, c + 3), (2, 3)).copy_from(&dq);
                }
                _ => unreachable!("measurement and Jacobian kinds agree"),
            }
        }
        (j, e)
    }

    /// Applies `⊞`: exponential-map update for poses, vector addition for landmarks.
    fn apply(&self, step: &Step) -> LocalBaProblem {
        let mut out = self.clone();
        for (k, d) in &step.poses {
            let pose = out.poses.get_mut(k).expect("free pose");
            *pose = pose.retract(&Tangent(*d));
        }
        for (id, d) in &step.points {
            *out.points.get_mut(id).expect("point") += d;
        }
        for (id, d) in &step.lines {
            let (p, q) = out.lines.get_mut(id).expect("line");
            *p += d.fixed_rows::<3>(0);
            *q += d.fixed_rows::<3>(3);
        }
        out
    }

    /// Writes poses and landmark positions back into the map.
    pub fn write_back(&self, map: &mut WorldMap) {
        for k in self.free_keyframes() {
            let _ = map.set_pose(k, self.poses[&k]);
        }
        for (id, x) in &self.points {
            map.set_point_position(*id, *x);
        }
        for (id, (p, q)) in &self.lines {
            map.set_line_endpoints(*id, *p, *q);
        }
    }

    pub fn landmark_ids(&self) -> Vec<LandmarkId> {
        self.points.keys().map(|p| LandmarkId::Point(*p)).chain(self.lines.keys().map(|l| LandmarkId::Line(*l))).collect()
    }
}

struct Layout {
    pose: BTreeMap<KeyFrameId, usize>,
    point: BTreeMap<PointId, usize>,
    line: BTreeMap<LineId, usize>,
    total: usize,
}

impl Layout {
    fn new(p: &LocalBaProblem) -> Self {
        let pose: BTreeMap<KeyFrameId, usize> = p.free_keyframes().into_iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut col = 6 * pose.len();
        let mut point = BTreeMap::new();
        for id in p.points.keys() {
            point.insert(*id, col);
            col += 3;
        }
        let mut line = BTreeMap::new();
        for id in p.lines.keys() {
            line.insert(*id, col);
            col += 6;
        }
        Self { pose, point, line, total: col }
    }
}

/// `H = JᵀWJ` and `g = JᵀWe` stored by blocks. There is no point–line block:
/// no residual involves both a point and a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHessian {
    pub free: Vec<KeyFrameId>,
    pub pose_pose: DMatrix<f64>,
    pub pose_point: BTreeMap<(usize, PointId), Matrix6x3<f64>>,
    pub pose_line: BTreeMap<(usize, LineId), Matrix6<f64>>,
    pub point: BTreeMap<PointId, Mat3>,
    pub line: BTreeMap<LineId, Mat6>,
    pub g_pose: DVector<f64>,
    pub g_point: BTreeMap<PointId, Vec3>,
    pub g_line: BTreeMap<LineId, Vec6>,
}

impl BlockHessian {
    /// Dense `H` in the column order of [`LocalBaProblem::dense_system`].
    pub fn to_dense(&self, problem: &LocalBaProblem) -> DMatrix<f64> {
        let layout = Layout::new(problem);
        let mut h = DMatrix::zeros(layout.total, layout.total);
        h.view_mut((0, 0), self.pose_pose.shape()).copy_from(&self.pose_pose);
        for ((s, id), b) in &self.pose_point {
            let c = layout.point[id];
            h.view_mut((6 * s, c), (6, 3)).copy_from(b);
            h.view_mut((c, 6 * s), (3, 6)).copy_from(&b.transpose());
        }
        for ((s, id), b) in &self.pose_line {
            let c = layout.line[id];
            h.view_mut((6 * s, c), (6, 6)).copy_from(b);
            h.view_mut((c, 6 * s), (6, 6)).copy_from(&b.transpose());
        }
        for (id, b) in &self.point {
            let c = layout.point[id];
            h.view_mut((c, c), (3, 3)).copy_from(b);
        }
        for (id, b) in &self.line {
            let c = layout.line[id];
            h.view_mut((c, c), (6, 6)).copy_from(b);
        }
        h
    }
}

/// Accumulates every observation's contribution into its blocks.
pub fn assemble_hessian(problem: &LocalBaProblem, cam: &StereoCamera, weights: &[f64]) -> BlockHessian {
    let free = problem.free_keyframes();
    let slot: BTreeMap<KeyFrameId, usize> = free.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let n = 6 * free.len();
    let mut h = BlockHessian {
        free: free.clone(),
        pose_pose: DMatrix::zeros(n, n),
        pose_point: BTreeMap::new(),
        pose_line: BTreeMap::new(),
        point: problem.points.keys().map(|id| (*id, Mat3::zeros())).collect(),
        line: problem.lines.keys().map(|id| (*id, Mat6::zeros())).collect(),
        g_pose: DVector::zeros(n),
        g_point: problem.points.keys().map(|id| (*id, Vec3::zeros())).collect(),
        g_line: problem.lines.keys().map(|id| (*id, Vec6::zeros())).collect(),
    };
    for (o, w) in problem.observations.iter().zip(weights) {
        let Some(b) = problem.blocks(cam, o) else { continue };
        let s = slot.get(&o.keyframe).copied();
        let e = b.residual * *w;
        if let Some(s) = s {
            let jp = b.d_pose;
            let mut pp = h.pose_pose.view_mut((6 * s, 6 * s), (6, 6));
            pp += jp.transpose() * jp * *w;
            let mut gp = h.g_pose.rows_mut(6 * s, 6);
            gp += jp.transpose() * e;
        }
        match (o.measurement, b.d_landmark) {
            (Measurement::Point { id, .. }, LandmarkJacobian::Point(jl)) => {
                *h.point.get_mut(&id).unwrap() += jl.transpose() * jl * *w;
                *h.g_point.get_mut(&id).unwrap() += jl.transpose() * e;
                if let Some(s) = s {
                    *h.pose_point.entry((s, id)).or_insert_with(Matrix6x3::zeros) += b.d_pose.transpose() * jl * *w;
                }
            }
            (Measurement::Line { id, .. }, LandmarkJacobian::Line(jp, jq)) => {
                let mut jl = Matrix2x6::zeros();
                jl.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
                jl.fixed_view_mut::<2, 3>(0, 3).copy_from(&jq);
                *h.line.get_mut(&id).unwrap() += jl.transpose() * jl * *w;
                *h.g_line.get_mut(&id).unwrap() += jl.transpose() * e;
                if let Some(s) = s {
                    *h.pose_line.entry((s, id)).or_insert_with(Matrix6::zeros) += b.d_pose.transpose() * jl * *w;
                }
            }
            _ => unreachable!("measurement and Jacobian kinds agree"),
        }
    }
    h
}

#[derive(Debug, Clone, Default)]
struct Step {
    poses: BTreeMap<KeyFrameId, Vec6>,
    points: BTreeMap<PointId, Vec3>,
    lines: BTreeMap<LineId, Vec6>,
}

impl Step {
    fn norm(&self) -> f64 {
        let s: f64 = self.poses.values().map(|v| v.norm_squared()).sum::<f64>()
            + self.points.values().map(|v| v.norm_squared()).sum::<f64>()
            + self.lines.values().map(|v| v.norm_squared()).sum::<f64>();
        s.sqrt()
    }
}

fn damp<const D: usize>(m: &nalgebra::SMatrix<f64, D, D>, lambda: f64, extra: f64) -> nalgebra::SMatrix<f64, D, D> {
    let mut out = *m;
    for i in 0..D {
        out[(i, i)] += lambda * m[(i, i)] + extra;
    }
    out
}

/// Solves `(H + λ·diag(H)) Δ = −g` by eliminating the landmarks first.
fn solve_schur(h: &BlockHessian, lambda: f64, endpoint_damping: f64) -> Option<Step> {
    let n = h.pose_pose.nrows();
    let mut s = h.pose_pose.clone();
    for i in 0..n {
        s[(i, i)] += lambda * h.pose_pose[(i, i)];
    }
    let mut b = -h.g_pose.clone();

    let mut point_cross: BTreeMap<PointId, Vec<(usize, Matrix6x3<f64>)>> = BTreeMap::new();
    for ((slot, id), blk) in &h.pose_point {
        point_cross.entry(*id).or_default().push((*slot, *blk));
    }
    let mut line_cross: BTreeMap<LineId, Vec<(usize, Matrix6<f64>)>> = BTreeMap::new();
    for ((slot, id), blk) in &h.pose_line {
        line_cross.entry(*id).or_default().push((*slot, *blk));
    }

    let mut point_inv = BTreeMap::new();
    for (id, hll) in &h.point {
        let inv = damp(hll, lambda, 1e-12).try_inverse()?;
        let gl = h.g_point[id];
        for (sa, wa) in point_cross.get(id).into_iter().flatten() {
            let wa_inv = wa * inv;
            let mut bv = b.rows_mut(6 * sa, 6);
            bv += wa_inv * gl;
            for (sb, wb) in point_cross.get(id).into_iter().flatten() {
                let mut sv = s.view_mut((6 * sa, 6 * sb), (6, 6));
                sv -= wa_inv * wb.transpose();
            }
        }
        point_inv.insert(*id, inv);
    }
    let mut line_inv = BTreeMap::new();
    for (id, hll) in &h.line {
        let inv = damp(hll, lambda, endpoint_damping).try_inverse()?;
        let gl = h.g_line[id];
        for (sa, wa) in line_cross.get(id).into_iter().flatten() {
            let wa_inv = wa * inv;
            let mut bv = b.rows_mut(6 * sa, 6);
            bv += wa_inv * gl;
            for (sb, wb) in line_cross.get(id).into_iter().flatten() {
                let mut sv = s.view_mut((6 * sa, 6 * sb), (6, 6));
                sv -= wa_inv * wb.transpose();
            }
        }
        line_inv.insert(*id, inv);
    }

    let dx = if n > 0 { s.cholesky()?.solve(&b) } else { DVector::zeros(0) };
    let mut step = Step::default();
    for (i, k) in h.free.iter().enumerate() {
        step.poses.insert(*k, Vec6::from_iterator(dx.rows(6 * i, 6).iter().copied()));
    }
    for (id, inv) in &point_inv {
        let mut rhs = -h.g_point[id];
        for (sa, wa) in point_cross.get(id).into_iter().flatten() {
            rhs -= wa.transpose() * Vec6::from_iterator(dx.rows(6 * sa, 6).iter().copied());
        }
        step.points.insert(*id, inv * rhs);
    }
    for (id, inv) in &line_inv {
        let mut rhs = -h.g_line[id];
        for (sa, wa) in line_cross.get(id).into_iter().flatten() {
            rhs -= wa.transpose() * Vec6::from_iterator(dx.rows(6 * sa, 6).iter().copied());
        }
        step.lines.insert(*id, inv * rhs);
    }
    Some(step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaStatus {
    Converged,
    MaxIterations,
    /// The reduced pose system could not be factorized; the best iterate is kept.
    IllConditioned,
    /// λ grew past its limit without an accepted step; the best iterate is kept.
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaReport {
    pub status: BaStatus,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub first_step_norm: f64,
}

/// Runs LM in place on `problem`.
pub fn local_bundle_adjustment(
    problem: &mut LocalBaProblem,
    cam: &StereoCamera,
    cfg: &BaConfig,
) -> Result<BaReport, MappingError> {
    problem.prune(cam);
    if problem.free_keyframes().is_empty() && problem.points.is_empty() && problem.lines.is_empty() {
        return Err(MappingError::NothingToOptimize);
    }
    let loss = PseudoHuber::new(cfg.huber_delta);
    let mut cost = problem.cost(cam, &loss).ok_or(MappingError::Projection)?;
    let mut report = BaReport {
        status: BaStatus::MaxIterations,
        initial_cost: cost,
        final_cost: cost,
        iterations: 0,
        cost_history: vec![cost],
        first_step_norm: f64::NAN,
    };
    let mut lambda = cfg.lambda_init;
    'outer: while report.iterations < cfg.max_iterations {
        report.iterations += 1;
        let weights = problem.robust_weights(cam, &loss);
        let h = assemble_hessian(problem, cam, &weights);
        loop {
            let Some(step) = solve_schur(&h, lambda, cfg.endpoint_damping) else {
                report.status = BaStatus::IllConditioned;
                break 'outer;
            };
            let step_norm = step.norm();
            if report.first_step_norm.is_nan() {
                report.first_step_norm = step_norm;
            }
            if step_norm < cfg.step_tolerance {
                report.status = BaStatus::Converged;
                break 'outer;
            }
            let trial = problem.apply(&step);
            match trial.cost(cam, &loss) {
                Some(c) if c < cost => {
                    let rel = (cost - c) / cost;
                    *problem = trial;
                    cost = c;
                    report.cost_history.push(c);
                    lambda = (lambda * cfg.lambda_down).max(1e-15);
                    if rel < cfg.relative_cost_tolerance {
                        report.status = BaStatus::Converged;
                        break 'outer;
                    }
                    break;
                }
                _ => {
                    lambda *= cfg.lambda_up;
                    if lambda > cfg.max_lambda {
                        report.status = BaStatus::Diverged;
                        break 'outer;
                    }
                }
            }
        }
    }
    report.final_cost = cost;
    Ok(report)
}
