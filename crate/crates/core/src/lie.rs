//! Rigid-body geometry on SE(3), first-order uncertainty propagation, and the
//! rectified stereo camera model.
//!
//! Conventions used throughout the crate:
//!
//! * A tangent vector is ordered `[v, ω]`: translational part first (meters),
//!   rotational part second (radians).
//! * Perturbations are applied on the left, `T ← exp(δ)·T`. Every analytic
//!   Jacobian in the crate is the derivative with respect to such a `δ`.
//! * A keyframe pose maps world coordinates into the camera frame
//!   (`X_c = R·X_w + t`).

use std::ops::Mul;

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Vector2, Vector3, Vector6, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat6 = Matrix6<f64>;

/// Below this rotation angle the trigonometric coefficients switch to their
/// Taylor expansions.
const SMALL_ANGLE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("point depth {depth} is not above the minimum depth")]
    NonPositiveDepth { depth: f64 },
    #[error("disparity {disparity} px is below the minimum disparity")]
    DegenerateDisparity { disparity: f64 },
}

pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Coefficients of the Rodrigues-type series: `sinθ/θ`, `(1−cosθ)/θ²`, `(θ−sinθ)/θ³`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        (
            1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

pub fn so3_exp(w: &Vec3) -> Mat3 {
    let (a, b, _) = rodrigues_coeffs(w.norm());
    let wx = skew(w);
    Mat3::identity() + wx * a + wx * wx * b
}

/// Rotation logarithm on the canonical branch `θ ∈ [0, π]`.
///
/// Near `θ = π` the axis is recovered from the symmetric part of `R`. At exactly
/// `θ = π` the sign of the axis is ambiguous; the axis whose largest-magnitude
/// component is positive is returned.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_axis = vee(r);
    let sin = sin_axis.norm();
    let theta = sin.atan2(cos);
    if theta < SMALL_ANGLE {
        let (a, _, _) = rodrigues_coeffs(theta);
        return sin_axis / a;
    }
    if cos > -0.9 {
        return sin_axis * (theta / sin);
    }
    // kkᵀ = (sym(R) − cosθ·I) / (1 − cosθ)
    let sym = (r + r.transpose()) * 0.5;
    let outer = (sym - Mat3::identity() * cos) / (1.0 - cos);
    let (col, _) = (0..3)
        .map(|i| (i, outer[(i, i)]))
        .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best });
    let mut axis: Vec3 = outer.column(col).into_owned();
    axis /= axis.norm();
    let dot = axis.dot(&sin_axis);
    if dot < 0.0 || (dot == 0.0 && axis[axis.iamax()] < 0.0) {
        axis = -axis;
    }
    axis * theta
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(w: &Vec3) -> Mat3 {
    let (_, b, c) = rodrigues_coeffs(w.norm());
    let wx = skew(w);
    Mat3::identity() + wx * b + wx * wx * c
}

pub fn so3_left_jacobian_inv(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let d = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1209600.0
    } else {
        let (a, b, _) = rodrigues_coeffs(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let wx = skew(w);
    Mat3::identity() - wx * 0.5 + wx * wx * d
}

/// The off-diagonal block `Q(v, ω)` of the SE(3) left Jacobian.
fn se3_q_block(v: &Vec3, w: &Vec3) -> Mat3 {
    let theta = w.norm();
    let (c1, c2, c3) = if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        (
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0 - t6 / 362880.0,
            1.0 / 24.0 - t2 / 720.0 + t4 / 40320.0 - t6 / 3628800.0,
            1.0 / 120.0 - t2 / 2520.0 + t4 / 120960.0 - t6 / 9979200.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let t3 = t2 * theta;
        (
            (theta - s) / t3,
            (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t3),
        )
    };
    let vx = skew(v);
    let wx = skew(w);
    let wv = wx * vx;
    let vw = vx * wx;
    let wvw = wv * wx;
    vx * 0.5 + (wv + vw + wvw) * c1 + (wx * wv + vw * wx - wvw * 3.0) * c2
        + (wvw * wx + wx * wvw) * c3
}

/// Left Jacobian of SE(3): `exp(ξ + δ) ≈ exp(J_l(ξ)·δ)·exp(ξ)`.
pub fn se3_left_jacobian(xi: &Tangent) -> Mat6 {
    let v = xi.translation();
    let w = xi.rotation();
    let j = so3_left_jacobian(&w);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&se3_q_block(&v, &w));
    out
}

pub fn se3_left_jacobian_inv(xi: &Tangent) -> Mat6 {
    let v = xi.translation();
    let w = xi.rotation();
    let jinv = so3_left_jacobian_inv(&w);
    let q = se3_q_block(&v, &w);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jinv * q * jinv));
    out
}

/// Right Jacobian of SE(3): `exp(ξ + δ) ≈ exp(ξ)·exp(J_r(ξ)·δ)`.
pub fn se3_right_jacobian(xi: &Tangent) -> Mat6 {
    se3_left_jacobian(&Tangent(-xi.0))
}

pub fn se3_right_jacobian_inv(xi: &Tangent) -> Mat6 {
    se3_left_jacobian_inv(&Tangent(-xi.0))
}

/// Element of se(3) ordered `[v, ω]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tangent(pub Vec6);

impl Tangent {
    pub fn zero() -> Self {
        Self(Vec6::zeros())
    }

    pub fn new(translation: Vec3, rotation: Vec3) -> Self {
        Self(Vec6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn from_slice(v: &[f64; 6]) -> Self {
        Self(Vec6::from_column_slice(v))
    }

    pub fn translation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vec3 {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn as_vector(&self) -> &Vec6 {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Rigid transform `X ↦ R·X + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Mat3::identity(), translation: Vec3::zeros() }
    }

    /// The rotation must be orthonormal with determinant +1; it is not re-projected.
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Mat3::identity(), translation }
    }

    pub fn from_quaternion(translation: Vec3, q: &UnitQuaternion<f64>) -> Self {
        Self { rotation: *q.to_rotation_matrix().matrix(), translation }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn exp(xi: &Tangent) -> Self {
        se3_exp(xi)
    }

    pub fn log(&self) -> Tangent {
        se3_log(self)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Position of the frame origin expressed in the parent frame, `−Rᵀt`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Adjoint for `[v, ω]` ordering: `exp(Ad_T·δ) = T·exp(δ)·T⁻¹`.
    pub fn adjoint(&self) -> Mat6 {
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * self.rotation));
        ad
    }

    /// Left-multiplicative update `exp(δ)·self`.
    pub fn retract(&self, delta: &Tangent) -> Pose {
        se3_exp(delta).compose(self)
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Mat3::identity()).norm()
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn se3_exp(xi: &Tangent) -> Pose {
    let w = xi.rotation();
    let v = xi.translation();
    let (a, b, c) = rodrigues_coeffs(w.norm());
    let wx = skew(&w);
    let wx2 = wx * wx;
    let rotation = Mat3::identity() + wx * a + wx2 * b;
    let jac = Mat3::identity() + wx * b + wx2 * c;
    Pose { rotation, translation: jac * v }
}

pub fn se3_log(t: &Pose) -> Tangent {
    let w = so3_log(&t.rotation);
    let v = so3_left_jacobian_inv(&w) * t.translation;
    Tangent::new(v, w)
}

/// A pose increment together with its 6×6 covariance in tangent coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionEstimate {
    pub mean: Tangent,
    pub covariance: Mat6,
}

impl MotionEstimate {
    pub fn new(mean: Tangent, covariance: Mat6) -> Self {
        Self { mean, covariance }
    }

    pub fn identity() -> Self {
        Self { mean: Tangent::zero(), covariance: Mat6::zeros() }
    }

    pub fn pose(&self) -> Pose {
        se3_exp(&self.mean)
    }
}

/// Jacobians of `c = log(exp(a)·exp(b))` with respect to additive changes of `a` and `b`.
pub fn composition_jacobians(a: &Tangent, b: &Tangent) -> (Tangent, Mat6, Mat6) {
    let c = se3_log(&(se3_exp(a) * se3_exp(b)));
    let ja = se3_left_jacobian_inv(&c) * se3_left_jacobian(a);
    let jb = se3_right_jacobian_inv(&c) * se3_right_jacobian(b);
    (c, ja, jb)
}

/// First-order Gaussian propagation through pose composition.
pub fn compose_with_covariance(a: &MotionEstimate, b: &MotionEstimate) -> MotionEstimate {
    let (mean, ja, jb) = composition_jacobians(&a.mean, &b.mean);
    let cov = ja * a.covariance * ja.transpose() + jb * b.covariance * jb.transpose();
    MotionEstimate { mean, covariance: (cov + cov.transpose()) * 0.5 }
}

/// Rectified stereo pair; the right camera sits at `+baseline` along the left camera's x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StereoCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    pub width: u32,
    pub height: u32,
    /// Smallest camera-frame depth accepted by the projection (meters).
    pub min_depth: f64,
    /// Smallest disparity accepted by back-projection (pixels).
    pub min_disparity: f64,
}

impl Default for StereoCamera {
    fn default() -> Self {
        Self {
            fx: 450.0,
            fy: 450.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.5,
            width: 640,
            height: 480,
            min_depth: 1e-3,
            min_disparity: 0.1,
        }
    }
}

impl StereoCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, baseline: f64, width: u32, height: u32) -> Self {
        Self { fx, fy, cx, cy, baseline, width, height, ..Self::default() }
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_camera_point(&self, pc: &Vec3) -> Result<Vec2, GeometryError> {
        if pc.z <= self.min_depth {
            return Err(GeometryError::NonPositiveDepth { depth: pc.z });
        }
        Ok(Vec2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy))
    }

    /// Derivative of the pinhole projection with respect to the camera-frame point.
    pub fn projection_jacobian(&self, pc: &Vec3) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }

    pub fn project_point(&self, pose: &Pose, xw: &Vec3) -> Result<Vec2, GeometryError> {
        self.project_camera_point(&pose.transform_point(xw))
    }

    /// Disparity a camera-frame point produces in the rectified pair.
    pub fn disparity_of(&self, pc: &Vec3) -> Result<f64, GeometryError> {
        if pc.z <= self.min_depth {
            return Err(GeometryError::NonPositiveDepth { depth: pc.z });
        }
        Ok(self.baseline * self.fx / pc.z)
    }

    pub fn stereo_backproject(&self, u: f64, v: f64, disparity: f64) -> Result<Vec3, GeometryError> {
        if !(disparity > self.min_disparity) {
            return Err(GeometryError::DegenerateDisparity { disparity });
        }
        let z = self.baseline * self.fx / disparity;
        Ok(Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z))
    }

    pub fn in_image(&self, px: &Vec2) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }
}

/// Converts a depth reading into the disparity a virtual stereo rig with
/// `baseline` and focal length `focal` would produce, `d = b·f / Z`.
pub fn depth_to_disparity(depth: f64, baseline: f64, focal: f64) -> Result<f64, GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    Ok(baseline * focal / depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn random_tangent(rng: &mut ChaCha8Rng, max_angle: f64) -> Tangent {
        let v = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let angle = rng.random_range(0.0..max_angle);
        Tangent::new(v, axis * angle)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = se3_exp(&Tangent::zero());
        assert_eq!(p, Pose::identity());
        assert_eq!(se3_log(&Pose::identity()), Tangent::zero());
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = se3_exp(&Tangent::new(Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2)));
        let expected = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(*p.rotation(), expected, epsilon = 1e-15);
        assert_relative_eq!(p.translation().norm(), 0.0);
    }

    #[test]
    fn small_angle_log() {
        let xi = Tangent::new(Vec3::new(0.3, -0.2, 0.1), Vec3::new(1e-8, 0.0, 0.0));
        let back = se3_log(&se3_exp(&xi));
        assert_relative_eq!(back.0, xi.0, epsilon = 1e-15);
    }

    #[test]
    fn round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let xi = random_tangent(&mut rng, 3.0);
            let back = se3_log(&se3_exp(&xi));
            assert!((back.0 - xi.0).norm() < 1e-9, "{xi:?} -> {back:?}");
        }
    }

    #[test]
    fn log_at_pi_is_stable() {
        let xi = Tangent::new(Vec3::new(0.5, 1.0, -0.25), Vec3::new(0.0, PI, 0.0));
        let p = se3_exp(&xi);
        let back = se3_log(&p);
        assert_relative_eq!(back.rotation().norm(), PI, epsilon = 1e-12);
        // Both signs of the axis describe the same pose.
        let again = se3_exp(&back);
        assert_relative_eq!(*again.rotation(), *p.rotation(), epsilon = 1e-12);
        assert_relative_eq!(*again.translation(), *p.translation(), epsilon = 1e-9);
        // Just below π the branch recovers the input exactly.
        let xi = Tangent::new(Vec3::new(0.5, 1.0, -0.25), Vec3::new(0.3, PI - 1e-7, 0.1).normalize() * (PI - 1e-7));
        assert!((se3_log(&se3_exp(&xi)).0 - xi.0).norm() < 1e-6);
    }

    #[test]
    fn group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = se3_exp(&random_tangent(&mut rng, 3.0));
            let b = se3_exp(&random_tangent(&mut rng, 3.0));
            let c = se3_exp(&random_tangent(&mut rng, 3.0));
            let lhs = (a * b) * c;
            let rhs = a * (b * c);
            assert_relative_eq!(*lhs.rotation(), *rhs.rotation(), epsilon = 1e-12);
            assert_relative_eq!(*lhs.translation(), *rhs.translation(), epsilon = 1e-12);
            let id = a * a.inverse();
            assert_relative_eq!(*id.rotation(), Mat3::identity(), epsilon = 1e-9);
            assert!(id.translation().norm() < 1e-9);
            assert_eq!(Pose::identity() * a, a);
            assert!(a.orthonormality_error() < 1e-9);
            assert!((a.rotation().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn adjoint_conjugates_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = se3_exp(&random_tangent(&mut rng, 2.0));
        let d = random_tangent(&mut rng, 1.0);
        let lhs = se3_exp(&Tangent(t.adjoint() * d.0));
        let rhs = t * se3_exp(&d) * t.inverse();
        assert_relative_eq!(*lhs.rotation(), *rhs.rotation(), epsilon = 1e-12);
        assert_relative_eq!(*lhs.translation(), *rhs.translation(), epsilon = 1e-12);
    }

    #[test]
    fn left_jacobian_inverse_matches_numeric_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for max in [1e-3, 0.09, 2.5] {
            let xi = random_tangent(&mut rng, max);
            let j = se3_left_jacobian(&xi);
            let jinv = se3_left_jacobian_inv(&xi);
            assert_relative_eq!(j * jinv, Mat6::identity(), epsilon = 1e-10);
        }
    }

    #[test]
    fn composition_with_zero_increment() {
        let a = MotionEstimate::new(
            Tangent::new(Vec3::new(0.1, 0.2, 0.3), Vec3::new(0.05, -0.1, 0.02)),
            Mat6::identity() * 1e-3,
        );
        let c = compose_with_covariance(&a, &MotionEstimate::identity());
        assert_relative_eq!(c.mean.0, a.mean.0, epsilon = 1e-12);
        assert_relative_eq!(c.covariance, a.covariance, epsilon = 1e-12);
    }

    #[test]
    fn composition_at_identity_adds_covariances() {
        let mut s = Mat6::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 * 0.01);
        s = s * s.transpose() + Mat6::identity() * 0.01;
        let a = MotionEstimate::new(Tangent::zero(), s);
        let c = compose_with_covariance(&a, &a);
        assert_relative_eq!(c.covariance, s * 2.0, epsilon = 1e-14);
    }

    #[test]
    fn pinhole_examples() {
        let cam = StereoCamera::new(1.0, 1.0, 0.0, 0.0, 1.0, 10, 10);
        let px = cam.project_point(&Pose::identity(), &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(px, Vec2::zeros());
        let cam = StereoCamera::new(500.0, 500.0, 320.0, 240.0, 1.0, 640, 480);
        let px = cam.project_point(&Pose::identity(), &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(px, Vec2::new(320.0, 240.0));
        assert!(matches!(
            cam.project_point(&Pose::identity(), &Vec3::new(0.0, 0.0, 1e-4)),
            Err(GeometryError::NonPositiveDepth { .. })
        ));
    }

    #[test]
    fn backprojection_examples() {
        let cam = StereoCamera::new(500.0, 500.0, 320.0, 240.0, 1.0, 640, 480);
        let p = cam.stereo_backproject(320.0, 240.0, 250.0).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 2.0));
        assert!(matches!(
            cam.stereo_backproject(10.0, 10.0, 0.05),
            Err(GeometryError::DegenerateDisparity { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let (u, v, d) = (rng.random_range(0.0..640.0), rng.random_range(0.0..480.0), rng.random_range(0.5..200.0));
            let x = cam.stereo_backproject(u, v, d).unwrap();
            let px = cam.project_camera_point(&x).unwrap();
            assert!((px - Vec2::new(u, v)).norm() < 1e-9);
            assert_relative_eq!(cam.disparity_of(&x).unwrap(), d, max_relative = 1e-12);
            let x2 = cam.stereo_backproject(px.x, px.y, cam.disparity_of(&x).unwrap()).unwrap();
            assert!((x2 - x).norm() < 1e-9);
        }
    }

    #[test]
    fn depth_disparity_examples() {
        assert_eq!(depth_to_disparity(2.0, 1.0, 500.0).unwrap(), 250.0);
        assert_eq!(depth_to_disparity(500.0, 1.0, 500.0).unwrap(), 1.0);
        assert!(depth_to_disparity(0.0, 1.0, 500.0).is_err());
        let cam = StereoCamera::new(500.0, 500.0, 320.0, 240.0, 0.3, 640, 480);
        for z in [0.7, 2.0, 13.5] {
            let d = depth_to_disparity(z, cam.baseline, cam.fx).unwrap();
            assert!((cam.stereo_backproject(100.0, 100.0, d).unwrap().z - z).abs() < 1e-12);
        }
    }
}
