//! SE(3) exponential and logarithm, and first-order propagation of a motion
//! covariance through a chain of compositions.

use stereo_slam::lie::{compose_with_covariance, se3_exp, se3_log, Mat6, MotionEstimate, Tangent, Vec3};
use stereo_slam::odometry::entropy;

fn main() {
    let xi = Tangent::new(Vec3::new(0.3, -0.1, 1.2), Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
    let pose = se3_exp(&xi);
    println!("exp(xi) rotation:{:.4}translation: {:.4?}", pose.rotation(), pose.translation().as_slice());
    println!("log(exp(xi)) - xi = {:.2e}", (se3_log(&pose).0 - xi.0).norm());

    // Ten identical frame-to-frame steps, each uncertain by 1 cm and 0.1 degrees.
    let step_cov = Mat6::from_diagonal(&nalgebra::Vector6::new(1e-4, 1e-4, 1e-4, 3e-6, 3e-6, 3e-6));
    let step = MotionEstimate::new(Tangent::new(Vec3::new(0.0, 0.0, 0.1), Vec3::new(0.0, 0.02, 0.0)), step_cov);
    let mut total = step;
    println!("\nsteps  trace(cov)     entropy");
    for k in 1..=10 {
        if k > 1 {
            total = compose_with_covariance(&total, &step);
        }
        println!("{k:5}  {:.3e}  {:9.3}", total.covariance.trace(), entropy(&total.covariance).unwrap());
    }
    let end = total.pose();
    println!("\nchained pose translation {:.4?}", end.translation().as_slice());
}
