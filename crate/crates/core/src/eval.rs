//! Trajectory error metrics and TUM trajectory files.
//!
//! Poses here are camera-to-world, the TUM convention. Timestamps are seconds
//! (the pipeline writes frame indices).

use std::fmt::Write as _;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{Pose, Vec3};

pub type TrajectorySeries = Vec<(f64, Pose)>;

pub const DEFAULT_ASSOCIATION_TOLERANCE: f64 = 0.01;
pub const DEFAULT_SUBSEQUENCE_LENGTHS: [f64; 3] = [5.0, 10.0, 20.0];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("fewer than two poses could be associated by timestamp")]
    NoAssociation,
    #[error("empty error series")]
    EmptySeries,
    #[error("trajectory length {length:.3} m is shorter than the longest subsequence {required:.3} m")]
    TrajectoryTooShort { length: f64, required: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Pairs of (ground truth, estimate) poses matched by nearest timestamp within `tolerance`.
pub fn associate(gt: &[(f64, Pose)], est: &[(f64, Pose)], tolerance: f64) -> Vec<(f64, Pose, Pose)> {
    let mut out = Vec::new();
    for (t, e) in est {
        let nearest = gt
            .iter()
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()));
        if let Some((tg, g)) = nearest {
            if (tg - t).abs() <= tolerance {
                out.push((*tg, *g, *e));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.dedup_by(|a, b| a.0 == b.0);
    out
}

/// Per consecutive associated pair, the translational and rotational norms of
/// `log((G_k⁻¹ G_{k+1})⁻¹ (E_k⁻¹ E_{k+1}))`.
pub fn relative_pose_errors(gt: &[(f64, Pose)], est: &[(f64, Pose)], tolerance: f64) -> Result<Vec<(f64, f64)>, EvalError> {
    let pairs = associate(gt, est, tolerance);
    if pairs.len() < 2 {
        return Err(EvalError::NoAssociation);
    }
    Ok(pairs
        .windows(2)
        .map(|w| {
            let rel_gt = &w[0].1.inverse() * &w[1].1;
            let rel_est = &w[0].2.inverse() * &w[1].2;
            let err = (&rel_gt.inverse() * &rel_est).log();
            (err.translation().norm(), err.rotation().norm())
        })
        .collect())
}

pub fn rmse(errors: &[f64]) -> Result<f64, EvalError> {
    if errors.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KittiMetrics {
    /// Mean translational error in percent of distance travelled.
    pub t_rel: f64,
    /// Mean rotational error in degrees per 100 m.
    pub r_rel: f64,
    pub subsequences: usize,
}

/// Cumulative path length along a pose series.
pub fn path_distances(poses: &[Pose]) -> Vec<f64> {
    let mut d = vec![0.0; poses.len()];
    for k in 1..poses.len() {
        d[k] = d[k - 1] + (poses[k].translation() - poses[k - 1].translation()).norm();
    }
    d
}

/// Subsequence errors averaged over every start index and every length.
///
/// A subsequence runs from a start index to the first index at least `L`
/// meters further along the ground-truth path; its errors are normalized by
/// the ground-truth distance it covers.
pub fn kitti_metrics(gt: &[(f64, Pose)], est: &[(f64, Pose)], lengths: &[f64], tolerance: f64) -> Result<KittiMetrics, EvalError> {
    let pairs = associate(gt, est, tolerance);
    if pairs.len() < 2 {
        return Err(EvalError::NoAssociation);
    }
    let g: Vec<Pose> = pairs.iter().map(|p| p.1).collect();
    let e: Vec<Pose> = pairs.iter().map(|p| p.2).collect();
    let dist = path_distances(&g);
    let total = *dist.last().unwrap();
    let required = lengths.iter().copied().fold(0.0, f64::max);
    if total < required {
        return Err(EvalError::TrajectoryTooShort { length: total, required });
    }
    let (mut t_sum, mut r_sum, mut n) = (0.0, 0.0, 0usize);
    for i in 0..g.len() {
        for &len in lengths {
            let Some(j) = (i + 1..g.len()).find(|&j| dist[j] - dist[i] >= len) else { continue };
            let covered = dist[j] - dist[i];
            let err = &(&g[i].inverse() * &g[j]).inverse() * &(&e[i].inverse() * &e[j]);
            t_sum += err.translation().norm() / covered;
            r_sum += err.log().rotation().norm() / covered;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptySeries);
    }
    Ok(KittiMetrics { t_rel: 100.0 * t_sum / n as f64, r_rel: 100.0 * (r_sum / n as f64).to_degrees(), subsequences: n })
}

/// Metrics written by the `eval` command and by pipeline runs with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub associated_poses: usize,
    pub rpe_translation_rmse: f64,
    pub rpe_rotation_rmse: f64,
    pub kitti: Option<KittiMetrics>,
    pub lengths: Vec<f64>,
}

pub fn evaluate(gt: &[(f64, Pose)], est: &[(f64, Pose)], lengths: &[f64]) -> Result<EvalReport, EvalError> {
    let errs = relative_pose_errors(gt, est, DEFAULT_ASSOCIATION_TOLERANCE)?;
    let t: Vec<f64> = errs.iter().map(|e| e.0).collect();
    let r: Vec<f64> = errs.iter().map(|e| e.1).collect();
    let kitti = match kitti_metrics(gt, est, lengths, DEFAULT_ASSOCIATION_TOLERANCE) {
        Ok(k) => Some(k),
        Err(EvalError::TrajectoryTooShort { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        associated_poses: errs.len() + 1,
        rpe_translation_rmse: rmse(&t)?,
        rpe_rotation_rmse: rmse(&r)?,
        kitti,
        lengths: lengths.to_vec(),
    })
}

/// Parses `timestamp tx ty tz qx qy qz qw` lines; `#` lines are comments.
pub fn read_tum(text: &str) -> Result<TrajectorySeries, EvalError> {
    let mut out: TrajectorySeries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| EvalError::Parse { line: n + 1, message };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", vals.len())));
        }
        if let Some((t, _)) = out.last() {
            if vals[0] <= *t {
                return Err(err("timestamps must be strictly increasing".into()));
            }
        }
        let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
        if !(q.norm() > 0.0) {
            return Err(err("zero quaternion".into()));
        }
        let pose = Pose::from_quaternion(Vec3::new(vals[1], vals[2], vals[3]), &UnitQuaternion::from_quaternion(q));
        out.push((vals[0], pose));
    }
    Ok(out)
}

pub fn write_tum(series: &[(f64, Pose)]) -> String {
    let mut s = String::new();
    for (t, p) in series {
        let q = p.quaternion();
        let x = p.translation();
        writeln!(s, "{} {} {} {} {} {} {} {}", t, x.x, x.y, x.z, q.i, q.j, q.k, q.w).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{Mat3, Tangent, Vec6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn straight(n: usize, step: f64) -> TrajectorySeries {
        (0..n).map(|k| (k as f64, Pose::from_translation(Vec3::new(0.0, 0.0, step * k as f64)))).collect()
    }

    fn wiggly(n: usize, rng: &mut ChaCha8Rng) -> TrajectorySeries {
        let mut pose = Pose::identity();
        (0..n)
            .map(|k| {
                let inc = Tangent::new(
                    Vec3::new(rng.random_range(-0.02..0.02), 0.0, 0.3),
                    Vec3::new(0.0, rng.random_range(-0.05..0.05), 0.0),
                );
                let out = (k as f64, pose);
                pose = &pose * &Pose::exp(&inc);
                out
            })
            .collect()
    }

    fn drifted(gt: &TrajectorySeries, drift: &Tangent) -> TrajectorySeries {
        let mut out = vec![gt[0]];
        for w in gt.windows(2) {
            let rel = &w[0].1.inverse() * &w[1].1;
            let prev = out.last().unwrap().1;
            out.push((w[1].0, &(&prev * &rel) * &Pose::exp(drift)));
        }
        out
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = wiggly(80, &mut rng);
        let errs = relative_pose_errors(&gt, &gt, 0.01).unwrap();
        assert!(errs.iter().all(|e| e.0 < 1e-12 && e.1 < 1e-12));
        let k = kitti_metrics(&gt, &gt, &DEFAULT_SUBSEQUENCE_LENGTHS, 0.01).unwrap();
        assert!(k.t_rel.abs() < 1e-9 && k.r_rel.abs() < 1e-9);
    }

    #[test]
    fn global_rigid_transform_leaves_relative_errors_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = wiggly(80, &mut rng);
        let g = Pose::exp(&Tangent(Vec6::new(1.0, -2.0, 0.5, 0.3, -0.2, 1.1)));
        let est: TrajectorySeries = gt.iter().map(|(t, p)| (*t, &g * p)).collect();
        assert!(relative_pose_errors(&gt, &est, 0.01).unwrap().iter().all(|e| e.0 < 1e-9 && e.1 < 1e-9));
        let k = kitti_metrics(&gt, &est, &DEFAULT_SUBSEQUENCE_LENGTHS, 0.01).unwrap();
        assert!(k.t_rel < 1e-7 && k.r_rel < 1e-7);
    }

    #[test]
    fn one_centimeter_drift_per_pair() {
        let gt = straight(30, 0.5);
        let est = drifted(&gt, &Tangent::new(Vec3::new(0.01, 0.0, 0.0), Vec3::zeros()));
        let errs = relative_pose_errors(&gt, &est, 0.01).unwrap();
        let mean = errs.iter().map(|e| e.0).sum::<f64>() / errs.len() as f64;
        assert!((mean - 0.01).abs() < 1e-9);
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[0.0; 4]).unwrap(), 0.0);
        assert!((rmse(&[3.0, 4.0]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(rmse(&[]), Err(EvalError::EmptySeries));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..1000).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut acc = 0.0;
        for x in &xs {
            acc += x * x;
        }
        assert!((rmse(&xs).unwrap() - (acc / xs.len() as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pure_scale_error_gives_one_percent() {
        let gt = straight(201, 0.1);
        let est: TrajectorySeries = gt.iter().map(|(t, p)| (*t, Pose::from_translation(p.translation() * 1.01))).collect();
        let k = kitti_metrics(&gt, &est, &DEFAULT_SUBSEQUENCE_LENGTHS, 0.01).unwrap();
        assert!((k.t_rel - 1.0).abs() < 1e-6, "{}", k.t_rel);
        assert!(k.r_rel.abs() < 1e-9);
    }

    #[test]
    fn doubling_drift_doubles_t_rel_on_a_line() {
        let gt = straight(120, 0.25);
        let d1 = drifted(&gt, &Tangent::new(Vec3::new(0.002, 0.0, 0.001), Vec3::zeros()));
        let d2 = drifted(&gt, &Tangent::new(Vec3::new(0.004, 0.0, 0.002), Vec3::zeros()));
        let a = kitti_metrics(&gt, &d1, &DEFAULT_SUBSEQUENCE_LENGTHS, 0.01).unwrap();
        let b = kitti_metrics(&gt, &d2, &DEFAULT_SUBSEQUENCE_LENGTHS, 0.01).unwrap();
        assert!(b.t_rel >= 2.0 * a.t_rel - 1e-12);
    }

    #[test]
    fn too_short_and_unassociated() {
        let gt = straight(10, 0.1);
        assert!(matches!(kitti_metrics(&gt, &gt, &[5.0], 0.01), Err(EvalError::TrajectoryTooShort { .. })));
        let shifted: TrajectorySeries = gt.iter().map(|(t, p)| (t + 0.5, *p)).collect();
        assert_eq!(relative_pose_errors(&gt, &shifted, 0.01), Err(EvalError::NoAssociation));
    }

    #[test]
    fn tum_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let series = wiggly(20, &mut rng);
        let back = read_tum(&write_tum(&series)).unwrap();
        for ((ta, a), (tb, b)) in series.iter().zip(&back) {
            assert_eq!(ta, tb);
            assert!((a.rotation() - b.rotation()).norm() < 1e-12);
            assert!((a.translation() - b.translation()).norm() < 1e-12);
        }
        assert!(matches!(read_tum("0 1 2 3\n"), Err(EvalError::Parse { line: 1, .. })));
        assert!(matches!(read_tum("1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n"), Err(EvalError::Parse { line: 2, .. })));
        let id = read_tum("# header\n0 0 0 0 0 0 0 1\n").unwrap();
        assert!((id[0].1.rotation() - Mat3::identity()).norm() < 1e-15);
    }
}
