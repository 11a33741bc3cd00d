//! Trajectory metrics on a straight path estimated with a 1% scale error and
//! on a winding path with accumulated rotational drift.

use stereo_slam::eval::{evaluate, TrajectorySeries};
use stereo_slam::lie::{Pose, Tangent, Vec3};

fn report(name: &str, gt: &TrajectorySeries, est: &TrajectorySeries) {
    let r = evaluate(gt, est, &[5.0, 10.0, 20.0]).unwrap();
    let k = r.kitti.unwrap();
    println!(
        "{name}: relative RMSE {:.4} m / {:.5} rad, t_rel {:.3}%, r_rel {:.3} deg/100 m over {} subsequences",
        r.rpe_translation_rmse, r.rpe_rotation_rmse, k.t_rel, k.r_rel, k.subsequences
    );
}

fn main() {
    let gt: TrajectorySeries = (0..=300).map(|k| (k as f64, Pose::from_translation(Vec3::new(0.0, 0.0, 0.1 * k as f64)))).collect();
    let scaled: TrajectorySeries = gt.iter().map(|(t, p)| (*t, Pose::from_translation(p.translation() * 1.01))).collect();
    report("1% scale", &gt, &scaled);

    let step = Pose::exp(&Tangent::new(Vec3::new(0.0, 0.0, 0.1), Vec3::new(0.0, 0.01, 0.0)));
    let drift = Pose::exp(&Tangent::new(Vec3::zeros(), Vec3::new(0.0, 2e-4, 0.0)));
    let (mut g, mut e) = (Pose::identity(), Pose::identity());
    let (mut gt, mut est) = (vec![(0.0, g)], vec![(0.0, e)]);
    for k in 1..=300 {
        g = &g * &step;
        e = &(&e * &step) * &drift;
        gt.push((k as f64, g));
        est.push((k as f64, e));
    }
    report("yaw drift", &gt, &est);
}
