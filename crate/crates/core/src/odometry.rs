//! Frame-to-frame motion estimation from point and line correspondences.
//!
//! Points from the earlier frame are back-projected with their stereo disparity
//! and re-projected into the later frame. Lines contribute the signed distances
//! of their two projected 3D endpoints to the observed infinite line. The pose
//! is solved by damped Gauss-Newton with Pseudo-Huber weights, outliers are
//! classified with a scaled-MAD cutoff, and the inliers are solved again.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3x6, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lie::{skew, GeometryError, Mat3, Mat6, MotionEstimate, Pose, StereoCamera, Tangent, Vec2, Vec3, Vec6};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Pseudo-Huber scale in pixels.
    pub huber_delta: f64,
    /// Outlier cutoff in units of the scaled median absolute residual.
    pub outlier_k: f64,
    /// Lower bound on the outlier cutoff in pixels, so that near-zero residuals
    /// on clean data do not turn inliers into outliers.
    pub outlier_floor: f64,
    pub lambda_init: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub min_correspondences: usize,
    pub max_condition: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            step_tolerance: 1e-8,
            huber_delta: 1.0,
            outlier_k: 2.0,
            outlier_floor: 1.0,
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.1,
            min_correspondences: 10,
            max_condition: 1e12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum OdometryError {
    #[error("only {found} correspondences, at least {required} required")]
    InsufficientMatches { found: usize, required: usize },
    #[error("solver diverged: cost increased on every attempted step")]
    SolverDiverged,
    #[error("Hessian condition number {condition:e} exceeds the limit")]
    IllConditioned { condition: f64 },
    #[error("covariance determinant is not positive")]
    SingularCovariance,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Pseudo-Huber loss on a squared residual norm `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoHuber {
    pub delta: f64,
}

impl PseudoHuber {
    pub fn new(delta: f64) -> Self {
        Self { delta }
    }

    pub fn cost(&self, s: f64) -> f64 {
        let d2 = self.delta * self.delta;
        2.0 * d2 * ((1.0 + s / d2).sqrt() - 1.0)
    }

    /// `dρ/ds`, the iteratively reweighted least-squares weight.
    pub fn weight(&self, s: f64) -> f64 {
        1.0 / (1.0 + s / (self.delta * self.delta)).sqrt()
    }
}

/// `∂X_c/∂δ` for `X_c = exp(δ)·T·X_w` evaluated at `δ = 0`.
fn point_motion_jacobian(pc: &Vec3) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Mat3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(pc)));
    j
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointResidual {
    pub residual: Vec2,
    pub d_pose: Matrix2x6<f64>,
    pub d_point: Matrix2x3<f64>,
}

/// `e = x − π(T, X)` with Jacobians for a left pose perturbation and for the world point.
pub fn point_residual(cam: &StereoCamera, pose: &Pose, xw: &Vec3, obs: &Vec2) -> Result<PointResidual, GeometryError> {
    let pc = pose.transform_point(xw);
    let px = cam.project_camera_point(&pc)?;
    let jp = cam.projection_jacobian(&pc);
    Ok(PointResidual {
        residual: obs - px,
        d_pose: -(jp * point_motion_jacobian(&pc)),
        d_point: -(jp * pose.rotation()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineResidual {
    pub residual: Vec2,
    pub d_pose: Matrix2x6<f64>,
    pub d_p: Matrix2x3<f64>,
    pub d_q: Matrix2x3<f64>,
}

/// Signed pixel distances from the projected endpoints `P`, `Q` to the
/// normalized image line `l`.
pub fn line_residual(
    cam: &StereoCamera,
    pose: &Pose,
    p: &Vec3,
    q: &Vec3,
    line: &Vec3,
) -> Result<LineResidual, GeometryError> {
    let row = nalgebra::RowVector2::new(line.x, line.y);
    let mut out = LineResidual {
        residual: Vec2::zeros(),
        d_pose: Matrix2x6::zeros(),
        d_p: Matrix2x3::zeros(),
        d_q: Matrix2x3::zeros(),
    };
    for (k, xw) in [p, q].into_iter().enumerate() {
        let pc = pose.transform_point(xw);
        let px = cam.project_camera_point(&pc)?;
        out.residual[k] = line.x * px.x + line.y * px.y + line.z;
        let de_dpc = row * cam.projection_jacobian(&pc);
        out.d_pose.set_row(k, &(de_dpc * point_motion_jacobian(&pc)));
        let de_dxw = de_dpc * pose.rotation();
        if k == 0 {
            out.d_p.set_row(0, &de_dxw);
        } else {
            out.d_q.set_row(1, &de_dxw);
        }
    }
    Ok(out)
}

/// A 3D point in the earlier frame and its pixel in the later frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub point: Vec3,
    pub observation: Vec2,
}

/// 3D segment endpoints in the earlier frame and the normalized line observed in the later frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinePair {
    pub p: Vec3,
    pub q: Vec3,
    pub line: Vec3,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramePair {
    pub points: Vec<PointPair>,
    pub lines: Vec<LinePair>,
}

impl FramePair {
    pub fn len(&self) -> usize {
        self.points.len() + self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionResult {
    /// Transform taking earlier-frame coordinates to later-frame coordinates, with covariance.
    pub estimate: MotionEstimate,
    pub inlier_ratio: f64,
    pub point_inliers: Vec<bool>,
    pub line_inliers: Vec<bool>,
    pub iterations: usize,
    /// Norm of the very first Gauss-Newton step of the first stage.
    pub first_step_norm: f64,
    /// Robust cost after every accepted step of the first stage, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

struct Linearization {
    cost: f64,
    hessian: Mat6,
    gradient: Vec6,
}

struct Stage {
    pose: Pose,
    hessian: Mat6,
    iterations: usize,
    first_step_norm: f64,
    cost_history: Vec<f64>,
}

struct Problem<'a> {
    cam: &'a StereoCamera,
    pair: &'a FramePair,
    loss: PseudoHuber,
    point_mask: Vec<bool>,
    line_mask: Vec<bool>,
}

impl Problem<'_> {
    fn residual_norms(&self, pose: &Pose) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
        let pts = self
            .pair
            .points
            .iter()
            .map(|pp| point_residual(self.cam, pose, &pp.point, &pp.observation).ok().map(|r| r.residual.norm()))
            .collect();
        let lns = self
            .pair
            .lines
            .iter()
            .map(|lp| line_residual(self.cam, pose, &lp.p, &lp.q, &lp.line).ok().map(|r| r.residual.norm()))
            .collect();
        (pts, lns)
    }

    fn cost(&self, pose: &Pose) -> Option<f64> {
        let mut cost = 0.0;
        for (pp, _) in self.pair.points.iter().zip(&self.point_mask).filter(|(_, m)| **m) {
            let r = point_residual(self.cam, pose, &pp.point, &pp.observation).ok()?;
            cost += self.loss.cost(r.residual.norm_squared());
        }
        for (lp, _) in self.pair.lines.iter().zip(&self.line_mask).filter(|(_, m)| **m) {
            let r = line_residual(self.cam, pose, &lp.p, &lp.q, &lp.line).ok()?;
            cost += self.loss.cost(r.residual.norm_squared());
        }
        Some(cost)
    }

    fn linearize(&self, pose: &Pose) -> Option<Linearization> {
        let mut lin = Linearization { cost: 0.0, hessian: Mat6::zeros(), gradient: Vec6::zeros() };
        let mut add = |e: &Vec2, j: &Matrix2x6<f64>| {
            let s = e.norm_squared();
            let w = self.loss.weight(s);
            lin.cost += self.loss.cost(s);
            lin.hessian += j.transpose() * j * w;
            lin.gradient += j.transpose() * e * w;
        };
        for (pp, _) in self.pair.points.iter().zip(&self.point_mask).filter(|(_, m)| **m) {
            let r = point_residual(self.cam, pose, &pp.point, &pp.observation).ok()?;
            add(&r.residual, &r.d_pose);
        }
        for (lp, _) in self.pair.lines.iter().zip(&self.line_mask).filter(|(_, m)| **m) {
            let r = line_residual(self.cam, pose, &lp.p, &lp.q, &lp.line).ok()?;
            add(&r.residual, &r.d_pose);
        }
        Some(lin)
    }

    fn active(&self) -> usize {
        self.point_mask.iter().filter(|m| **m).count() + self.line_mask.iter().filter(|m| **m).count()
    }

    fn solve(&self, init: Pose, cfg: &SolverConfig) -> Result<Stage, OdometryError> {
        let mut pose = init;
        let mut lambda = cfg.lambda_init;
        let mut lin = self.linearize(&pose).ok_or(OdometryError::SolverDiverged)?;
        let mut stage = Stage {
            pose,
            hessian: lin.hessian,
            iterations: 0,
            first_step_norm: f64::NAN,
            cost_history: vec![lin.cost],
        };
        let mut rejected = 0;
        while stage.iterations < cfg.max_iterations {
            stage.iterations += 1;
            let mut damped = lin.hessian;
            for i in 0..6 {
                damped[(i, i)] += lambda * lin.hessian[(i, i)];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= cfg.lambda_up;
                rejected += 1;
                if rejected >= cfg.max_iterations {
                    return Err(OdometryError::SolverDiverged);
                }
                continue;
            };
            let step = -chol.solve(&lin.gradient);
            let norm = step.norm();
            if stage.first_step_norm.is_nan() {
                stage.first_step_norm = norm;
            }
            if norm < cfg.step_tolerance {
                break;
            }
            let candidate = pose.retract(&Tangent(step));
            match self.cost(&candidate) {
                Some(c) if c <= lin.cost => {
                    pose = candidate;
                    lambda = (lambda * cfg.lambda_down).max(1e-12);
                    let Some(next) = self.linearize(&pose) else { break };
                    lin = next;
                    stage.cost_history.push(lin.cost);
                }
                _ => {
                    lambda *= cfg.lambda_up;
                    rejected += 1;
                    if rejected >= cfg.max_iterations {
                        return Err(OdometryError::SolverDiverged);
                    }
                }
            }
        }
        stage.pose = pose;
        stage.hessian = lin.hessian;
        if stage.first_step_norm.is_nan() {
            stage.first_step_norm = 0.0;
        }
        Ok(stage)
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Eigenvalue ratio of a symmetric matrix; infinite when it is not positive definite.
pub fn condition_number(h: &Mat6) -> f64 {
    let eig = SymmetricEigen::new(*h).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Two-stage robust motion estimate between two stereo frames.
pub fn estimate_motion(
    cam: &StereoCamera,
    pair: &FramePair,
    cfg: &SolverConfig,
    init: &Tangent,
) -> Result<MotionResult, OdometryError> {
    if pair.len() < cfg.min_correspondences.max(3) {
        return Err(OdometryError::InsufficientMatches { found: pair.len(), required: cfg.min_correspondences.max(3) });
    }
    let init_pose = Pose::exp(init);
    let mut problem = Problem {
        cam,
        pair,
        loss: PseudoHuber::new(cfg.huber_delta),
        point_mask: vec![true; pair.points.len()],
        line_mask: vec![true; pair.lines.len()],
    };
    // Correspondences that cannot be projected at the initial guess are left out.
    let (pn, ln) = problem.residual_norms(&init_pose);
    problem.point_mask = pn.iter().map(Option::is_some).collect();
    problem.line_mask = ln.iter().map(Option::is_some).collect();
    if problem.active() < 3 {
        return Err(OdometryError::InsufficientMatches { found: problem.active(), required: 3 });
    }

    let first = problem.solve(init_pose, cfg)?;

    let (pn, ln) = problem.residual_norms(&first.pose);
    let mut norms: Vec<f64> = pn
        .iter()
        .zip(&problem.point_mask)
        .chain(ln.iter().zip(&problem.line_mask))
        .filter_map(|(n, m)| if *m { *n } else { None })
        .collect();
    let cutoff = (cfg.outlier_k * 1.4826 * median(&mut norms)).max(cfg.outlier_floor);
    let keep = |n: &Option<f64>, m: &bool| *m && n.is_some_and(|n| n <= cutoff);
    problem.point_mask = pn.iter().zip(&problem.point_mask).map(|(n, m)| keep(n, m)).collect();
    problem.line_mask = ln.iter().zip(&problem.line_mask).map(|(n, m)| keep(n, m)).collect();
    let inliers = problem.active();
    if inliers < 3 {
        return Err(OdometryError::InsufficientMatches { found: inliers, required: 3 });
    }

    let second = problem.solve(first.pose, cfg)?;
    let condition = condition_number(&second.hessian);
    if !(condition <= cfg.max_condition) {
        return Err(OdometryError::IllConditioned { condition });
    }
    let cov = second.hessian.try_inverse().ok_or(OdometryError::IllConditioned { condition })?;
    let covariance = (cov + cov.transpose()) * 0.5;

    Ok(MotionResult {
        estimate: MotionEstimate::new(second.pose.log(), covariance),
        inlier_ratio: inliers as f64 / pair.len() as f64,
        point_inliers: problem.point_mask,
        line_inliers: problem.line_mask,
        iterations: first.iterations + second.iterations,
        first_step_norm: first.first_step_norm,
        cost_history: first.cost_history,
    })
}

/// Differential entropy of a 6-D Gaussian, `3(1 + ln 2π) + ½ ln|Σ|`.
pub fn entropy(cov: &Mat6) -> Result<f64, OdometryError> {
    let det = cov.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return Err(OdometryError::SingularCovariance);
    }
    Ok(3.0 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + 0.5 * det.ln())
}

/// Default entropy-ratio threshold for keyframe insertion.
pub const DEFAULT_ENTROPY_RATIO: f64 = 0.9;

/// Inserts a keyframe when `h_span / h_first` falls below `threshold`.
///
/// Entropies are usually negative for well-constrained estimates; the ratio then
/// shrinks as the accumulated uncertainty grows. A zero or non-finite `h_first`
/// cannot be used as a reference and forces an insertion.
pub fn keyframe_decision(h_span: f64, h_first: f64, threshold: f64) -> bool {
    if h_first == 0.0 || !h_first.is_finite() || !h_span.is_finite() {
        log::warn!("degenerate entropy reference (h_first = {h_first}, h_span = {h_span}); forcing keyframe");
        return true;
    }
    h_span / h_first < threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{compose_with_covariance, se3_exp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> StereoCamera {
        StereoCamera::new(450.0, 450.0, 320.0, 240.0, 0.5, 640, 480)
    }

    fn random_tangent(rng: &mut ChaCha8Rng, t: f64, r: f64) -> Tangent {
        Tangent::new(
            Vec3::new(rng.random_range(-t..t), rng.random_range(-t..t), rng.random_range(-t..t)),
            Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r)),
        )
    }

    /// Central finite differences of `f` with respect to a left pose perturbation.
    fn fd_pose<const R: usize>(
        pose: &Pose,
        f: impl Fn(&Pose) -> nalgebra::SVector<f64, R>,
    ) -> nalgebra::SMatrix<f64, R, 6> {
        let h = 1e-6;
        let mut j = nalgebra::SMatrix::<f64, R, 6>::zeros();
        for k in 0..6 {
            let mut d = Vec6::zeros();
            d[k] = h;
            let plus = f(&pose.retract(&Tangent(d)));
            let minus = f(&pose.retract(&Tangent(-d)));
            j.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        j
    }

    fn fd_point<const R: usize>(x: &Vec3, f: impl Fn(&Vec3) -> nalgebra::SVector<f64, R>) -> nalgebra::SMatrix<f64, R, 3> {
        let h = 1e-6;
        let mut j = nalgebra::SMatrix::<f64, R, 3>::zeros();
        for k in 0..3 {
            let mut d = Vec3::zeros();
            d[k] = h;
            j.set_column(k, &((f(&(x + d)) - f(&(x - d))) / (2.0 * h)));
        }
        j
    }

    fn assert_close<const R: usize, const C: usize>(a: &nalgebra::SMatrix<f64, R, C>, b: &nalgebra::SMatrix<f64, R, C>) {
        let scale = 1.0 + a.amax().max(b.amax());
        assert!((a - b).amax() / scale < 1e-4, "analytic {a} vs numeric {b}");
    }

    #[test]
    fn point_residual_examples() {
        let c = cam();
        let x = Vec3::new(0.3, -0.2, 4.0);
        let obs = c.project_point(&Pose::identity(), &x).unwrap();
        assert_eq!(point_residual(&c, &Pose::identity(), &x, &obs).unwrap().residual, Vec2::zeros());
        let x = Vec3::new(0.0, 0.0, 3.0);
        let r = point_residual(&c, &Pose::identity(), &x, &Vec2::new(321.0, 240.0)).unwrap();
        assert_eq!(r.residual, Vec2::new(1.0, 0.0));
    }

    #[test]
    fn line_residual_examples() {
        let c = StereoCamera::new(1.0, 1.0, 0.0, 0.0, 1.0, 10, 10);
        let l = Vec3::new(0.0, 1.0, 0.0);
        let r = line_residual(&c, &Pose::identity(), &Vec3::new(1.0, 2.0, 1.0), &Vec3::new(-3.0, -2.0, 1.0), &l).unwrap();
        assert_eq!(r.residual, Vec2::new(2.0, -2.0));
        let r = line_residual(&c, &Pose::identity(), &Vec3::new(1.0, 0.0, 1.0), &Vec3::new(-3.0, 0.0, 2.0), &l).unwrap();
        assert_eq!(r.residual, Vec2::zeros());
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let c = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let pose = se3_exp(&random_tangent(&mut rng, 0.5, 0.3));
            let inv = pose.inverse();
            let sample = |rng: &mut ChaCha8Rng| {
                inv.transform_point(&Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(2.0..10.0)))
            };
            let x = sample(&mut rng);
            let obs = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
            let r = point_residual(&c, &pose, &x, &obs).unwrap();
            assert_close(&r.d_pose, &fd_pose(&pose, |p| point_residual(&c, p, &x, &obs).unwrap().residual));
            assert_close(&r.d_point, &fd_point(&x, |y| point_residual(&c, &pose, y, &obs).unwrap().residual));

            let (p, q) = (sample(&mut rng), sample(&mut rng));
            let line = crate::features::infinite_line_coeffs(
                &Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
                &Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)),
            )
            .unwrap();
            let r = line_residual(&c, &pose, &p, &q, &line).unwrap();
            assert_close(&r.d_pose, &fd_pose(&pose, |t| line_residual(&c, t, &p, &q, &line).unwrap().residual));
            assert_close(&r.d_p, &fd_point(&p, |y| line_residual(&c, &pose, y, &q, &line).unwrap().residual));
            assert_close(&r.d_q, &fd_point(&q, |y| line_residual(&c, &pose, &p, y, &line).unwrap().residual));
        }
    }

    /// Noiseless correspondences generated from a known motion.
    fn synthetic_pair(rng: &mut ChaCha8Rng, motion: &Pose, n_points: usize, n_lines: usize) -> FramePair {
        let c = cam();
        let mut pair = FramePair::default();
        while pair.points.len() < n_points {
            let x = Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(3.0..12.0));
            if let Ok(px) = c.project_point(motion, &x) {
                pair.points.push(PointPair { point: x, observation: px });
            }
        }
        while pair.lines.len() < n_lines {
            let p = Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(3.0..12.0));
            let q = p + Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
            // The observed segment is a truncated piece of the same 3D line.
            let (a, b) = (p + (q - p) * 0.2, p + (q - p) * 0.7);
            let (Ok(pa), Ok(pb)) = (c.project_point(motion, &a), c.project_point(motion, &b)) else { continue };
            if (pa - pb).norm() < 8.0 || q.z < 1.0 {
                continue;
            }
            let line = crate::features::infinite_line_coeffs(&pa, &pb).unwrap();
            pair.lines.push(LinePair { p, q, line });
        }
        pair
    }

    #[test]
    fn exact_on_noiseless_data_in_every_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for (np, nl) in [(40, 0), (0, 30), (30, 20), (8, 4)] {
            let truth = random_tangent(&mut rng, 0.2, 0.05);
            let pair = synthetic_pair(&mut rng, &se3_exp(&truth), np, nl);
            let res = estimate_motion(&cam(), &pair, &SolverConfig::default(), &Tangent::zero()).unwrap();
            assert!((res.estimate.mean.0 - truth.0).norm() < 1e-6, "{np}/{nl}: {:?}", res.estimate.mean);
            assert_eq!(res.inlier_ratio, 1.0);
            let cov = res.estimate.covariance;
            assert!((cov - cov.transpose()).amax() < 1e-10);
            assert!(SymmetricEigen::new(cov).eigenvalues.min() > -1e-12);
            for w in res.cost_history.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn zero_motion_gives_zero_first_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pair = synthetic_pair(&mut rng, &Pose::identity(), 30, 10);
        let res = estimate_motion(&cam(), &pair, &SolverConfig::default(), &Tangent::zero()).unwrap();
        assert!(res.first_step_norm < 1e-12);
        assert!(res.estimate.mean.norm() < 1e-12);
    }

    #[test]
    fn rejects_gross_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let truth = random_tangent(&mut rng, 0.2, 0.05);
        let mut pair = synthetic_pair(&mut rng, &se3_exp(&truth), 80, 20);
        let mut outliers = Vec::new();
        for (i, pp) in pair.points.iter_mut().enumerate() {
            if i % 5 == 0 {
                pp.observation = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                outliers.push(i);
            }
        }
        let res = estimate_motion(&cam(), &pair, &SolverConfig::default(), &Tangent::zero()).unwrap();
        assert!((res.estimate.mean.0 - truth.0).norm() < 1e-4);
        for i in outliers {
            // A random pixel can land close to the true projection by chance.
            let true_px = cam().project_point(&se3_exp(&truth), &pair.points[i].point).unwrap();
            if (true_px - pair.points[i].observation).norm() > 5.0 {
                assert!(!res.point_inliers[i], "outlier {i} kept");
            }
        }
        assert!(res.inlier_ratio > 0.75 && res.inlier_ratio < 0.9);
    }

    #[test]
    fn too_few_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let pair = synthetic_pair(&mut rng, &Pose::identity(), 5, 2);
        assert!(matches!(
            estimate_motion(&cam(), &pair, &SolverConfig::default(), &Tangent::zero()),
            Err(OdometryError::InsufficientMatches { found: 7, required: 10 })
        ));
    }

    #[test]
    fn degenerate_geometry_is_ill_conditioned() {
        // Every point on the optical axis: rotation about z is unobservable.
        let c = cam();
        let pair = FramePair {
            points: (0..12)
                .map(|i| {
                    let x = Vec3::new(0.0, 0.0, 2.0 + i as f64);
                    PointPair { point: x, observation: c.project_point(&Pose::identity(), &x).unwrap() }
                })
                .collect(),
            lines: vec![],
        };
        assert!(matches!(
            estimate_motion(&c, &pair, &SolverConfig::default(), &Tangent::zero()),
            Err(OdometryError::IllConditioned { .. }) | Err(OdometryError::SolverDiverged)
        ));
    }

    #[test]
    fn entropy_examples() {
        let base = 3.0 * (1.0 + (2.0 * std::f64::consts::PI).ln());
        assert!((entropy(&Mat6::identity()).unwrap() - base).abs() < 1e-12);
        assert!((base - 8.51363).abs() < 1e-5);
        for c in [0.01, 2.5, 100.0] {
            let diff = entropy(&(Mat6::identity() * c)).unwrap() - base;
            assert!((diff - 3.0 * f64::ln(c)).abs() < 1e-12);
        }
        assert!(matches!(entropy(&Mat6::zeros()), Err(OdometryError::SingularCovariance)));
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..20 {
            let a = Mat6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let spd = a * a.transpose() + Mat6::identity() * 0.1;
            let logdet: f64 = SymmetricEigen::new(spd).eigenvalues.iter().map(|e| e.ln()).sum();
            assert!((entropy(&spd).unwrap() - (base + 0.5 * logdet)).abs() < 1e-9);
        }
    }

    #[test]
    fn keyframe_decision_examples() {
        assert!(!keyframe_decision(-30.0, -30.0, DEFAULT_ENTROPY_RATIO));
        assert!(!keyframe_decision(5.0, 5.0, DEFAULT_ENTROPY_RATIO));
        assert!(keyframe_decision(0.89, 1.0, DEFAULT_ENTROPY_RATIO));
        assert!(keyframe_decision(1.0, 0.0, DEFAULT_ENTROPY_RATIO));
    }

    #[test]
    fn drift_drives_entropy_ratio_until_insertion() {
        let inc = MotionEstimate::new(
            Tangent::new(Vec3::new(0.0, 0.0, 0.1), Vec3::new(0.0, 0.01, 0.0)),
            Mat6::from_diagonal(&Vec6::new(1e-6, 1e-6, 4e-6, 1e-7, 1e-7, 1e-7)),
        );
        let h_first = entropy(&inc.covariance).unwrap();
        let mut span = inc;
        let mut last_alpha = 1.0;
        let mut fired = None;
        for u in 2..100 {
            span = compose_with_covariance(&inc, &span);
            let h_span = entropy(&span.covariance).unwrap();
            let alpha = h_span / h_first;
            assert!(alpha < last_alpha, "ratio must fall monotonically");
            assert!(h_span >= h_first);
            last_alpha = alpha;
            if keyframe_decision(h_span, h_first, DEFAULT_ENTROPY_RATIO) {
                fired = Some(u);
                break;
            }
        }
        let u = fired.expect("keyframe never inserted");
        assert!(u > 2 && u < 20, "fired at {u}");
    }
}
