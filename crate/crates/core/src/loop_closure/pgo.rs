//! Pose-graph optimization over keyframe poses.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use crate::lie::{se3_left_jacobian_inv, se3_right_jacobian_inv, Mat6, Pose, Tangent, Vec6};
use crate::map::{KeyFrameId, WorldMap};

use super::LoopError;

/// Relative-pose constraint: `measurement` maps camera `j` coordinates into camera `i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseEdge {
    pub i: KeyFrameId,
    pub j: KeyFrameId,
    pub measurement: Tangent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgoConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_lambda: f64,
    pub step_tolerance: f64,
    pub relative_cost_tolerance: f64,
}

impl Default for PgoConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_lambda: 1e8,
            step_tolerance: 1e-10,
            relative_cost_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgoResult {
    pub poses: BTreeMap<KeyFrameId, Pose>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Edge residual `r = log(exp(ξ̂)·T_j·T_i⁻¹)` and its Jacobians with respect to
/// left perturbations of `T_i` and `T_j`.
pub fn pgo_residual(measurement: &Tangent, ti: &Pose, tj: &Pose) -> (Vec6, Mat6, Mat6) {
    let a = Pose::exp(measurement);
    let r = (&(&a * tj) * &ti.inverse()).log();
    let d_i = -se3_right_jacobian_inv(&r);
    let d_j = se3_left_jacobian_inv(&r) * a.adjoint();
    (r.0, d_i, d_j)
}

fn total_cost(poses: &BTreeMap<KeyFrameId, Pose>, edges: &[PoseEdge]) -> f64 {
    edges
        .iter()
        .map(|e| pgo_residual(&e.measurement, &poses[&e.i], &poses[&e.j]).0.norm_squared())
        .sum()
}

fn connected(nodes: &BTreeSet<KeyFrameId>, edges: &[PoseEdge]) -> bool {
    let Some(&start) = nodes.iter().next() else { return true };
    let mut adj: BTreeMap<KeyFrameId, Vec<KeyFrameId>> = BTreeMap::new();
    for e in edges {
        adj.entry(e.i).or_default().push(e.j);
        adj.entry(e.j).or_default().push(e.i);
    }
    let mut seen = BTreeSet::from([start]);
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        for m in adj.get(&n).into_iter().flatten() {
            if seen.insert(*m) {
                stack.push(*m);
            }
        }
    }
    seen.len() == nodes.len()
}

/// Levenberg-Marquardt over all poses except `fixed`, with unit information on every edge.
pub fn optimize_pose_graph(
    poses: &BTreeMap<KeyFrameId, Pose>,
    edges: &[PoseEdge],
    fixed: KeyFrameId,
    cfg: &PgoConfig,
) -> Result<PgoResult, LoopError> {
    let nodes: BTreeSet<KeyFrameId> = poses.keys().copied().collect();
    for e in edges {
        for id in [e.i, e.j] {
            if !nodes.contains(&id) {
                return Err(LoopError::UnknownKeyFrame(id));
            }
        }
    }
    if !nodes.contains(&fixed) {
        return Err(LoopError::UnknownKeyFrame(fixed));
    }
    if !connected(&nodes, edges) {
        return Err(LoopError::Disconnected);
    }
    let free: Vec<KeyFrameId> = nodes.iter().copied().filter(|k| *k != fixed).collect();
    let slot: BTreeMap<KeyFrameId, usize> = free.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let n = 6 * free.len();

    let mut current = poses.clone();
    let mut cost = total_cost(&current, edges);
    let initial_cost = cost;
    let mut history = vec![cost];
    let mut lambda = cfg.lambda_init;
    let mut iterations = 0;

    while iterations < cfg.max_iterations && n > 0 && cost > 0.0 {
        iterations += 1;
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut g = DVector::<f64>::zeros(n);
        for e in edges {
            let (r, ji, jj) = pgo_residual(&e.measurement, &current[&e.i], &current[&e.j]);
            let blocks = [(slot.get(&e.i), ji), (slot.get(&e.j), jj)];
            for (sa, ja) in &blocks {
                let Some(&a) = sa else { continue };
                let jr = ja.transpose() * r;
                let mut gv = g.rows_mut(6 * a, 6);
                gv += jr;
                for (sb, jb) in &blocks {
                    let Some(&b) = sb else { continue };
                    let hab = ja.transpose() * jb;
                    let mut view = h.view_mut((6 * a, 6 * b), (6, 6));
                    view += hab;
                }
            }
        }
        let accepted = loop {
            let mut damped = h.clone();
            for d in 0..n {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= cfg.lambda_up;
                if lambda > cfg.max_lambda {
                    return Err(LoopError::Diverged);
                }
                continue;
            };
            let mut trial = current.clone();
            for (k, s) in &slot {
                let delta = Tangent(Vec6::from_iterator(step.rows(6 * s, 6).iter().copied()));
                trial.insert(*k, current[k].retract(&delta));
            }
            let trial_cost = total_cost(&trial, edges);
            if trial_cost < cost {
                lambda = (lambda * cfg.lambda_down).max(1e-12);
                break Some((trial, trial_cost, step.norm()));
            }
            lambda *= cfg.lambda_up;
            if lambda > cfg.max_lambda {
                break None;
            }
        };
        let Some((trial, trial_cost, step_norm)) = accepted else {
            // No descent direction left: the current iterate is a minimum to working precision.
            break;
        };
        let rel = (cost - trial_cost) / cost.max(f64::MIN_POSITIVE);
        current = trial;
        cost = trial_cost;
        history.push(cost);
        if step_norm < cfg.step_tolerance || rel < cfg.relative_cost_tolerance {
            break;
        }
    }
    if !cost.is_finite() {
        return Err(LoopError::Diverged);
    }
    Ok(PgoResult { poses: current, initial_cost, final_cost: cost, iterations, cost_history: history })
}

/// Edges of the spanning tree and essential graph with measurements taken from
/// the current poses, so their residuals start at zero.
pub fn map_edges(map: &WorldMap) -> Vec<PoseEdge> {
    let mut pairs: BTreeSet<(KeyFrameId, KeyFrameId)> = map.spanning_tree().edges().into_iter().collect();
    pairs.extend(map.essential_edges().into_iter().map(|e| (e.a, e.b)));
    pairs
        .into_iter()
        .filter_map(|(i, j)| {
            let ti = map.keyframe(i)?.pose;
            let tj = map.keyframe(j)?.pose;
            Some(PoseEdge { i, j, measurement: (&ti * &tj.inverse()).log() })
        })
        .collect()
}

/// Corrects every keyframe pose with the map's graph edges plus `loop_edges`.
/// The first keyframe stays fixed.
pub fn pose_graph_optimize(map: &WorldMap, loop_edges: &[PoseEdge], cfg: &PgoConfig) -> Result<PgoResult, LoopError> {
    if loop_edges.is_empty() {
        return Err(LoopError::NoLoopEdges);
    }
    let poses: BTreeMap<KeyFrameId, Pose> = map.keyframes().map(|k| (k.id, k.pose)).collect();
    let fixed = *poses.keys().next().ok_or(LoopError::Disconnected)?;
    let mut edges = map_edges(map);
    edges.extend_from_slice(loop_edges);
    optimize_pose_graph(&poses, &edges, fixed, cfg)
}
