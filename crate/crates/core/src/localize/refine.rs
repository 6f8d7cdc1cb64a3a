//! Levenberg-Marquardt refinement of a pose on 2D-3D correspondences.
//!
//! The increment is `(w, d)`: rotation `exp(w)` applied on the left of the
//! current rotation and `d` added to the translation.

use nalgebra::{DMatrix, DVector, Matrix6, UnitQuaternion, Vector6};
use serde::{Deserialize, Serialize};

use super::Correspondence;
use crate::geometry::{CameraIntrinsics, Pose, Vec3, Z_MIN};

/// Squared-pixel cost charged for a point behind the camera.
const BEHIND_PENALTY: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub max_iters: usize,
    /// Stops once an accepted step is shorter than this.
    pub convergence_tol: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            convergence_tol: 1e-12,
        }
    }
}

pub fn apply_increment(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let w = Vec3::new(delta[0], delta[1], delta[2]);
    let d = Vec3::new(delta[3], delta[4], delta[5]);
    let r = UnitQuaternion::from_scaled_axis(w);
    Pose::from_parts(r * pose.rotation(), r * pose.translation() + d)
}

/// Total squared reprojection error.
pub fn reprojection_cost(pose: &Pose, corrs: &[Correspondence], intr: &CameraIntrinsics) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let pc = pose.transform(&c.world);
            match intr.project(&pc) {
                Some(px) => (px.u - c.pixel.u).powi(2) + (px.v - c.pixel.v).powi(2),
                None => BEHIND_PENALTY,
            }
        })
        .sum()
}

/// Residuals (projected minus observed, two per correspondence) and their
/// Jacobian with respect to the increment. Rows of points behind the camera are zero.
pub fn reprojection_jacobian(pose: &Pose, corrs: &[Correspondence], intr: &CameraIntrinsics) -> (DVector<f64>, DMatrix<f64>) {
    let n = corrs.len();
    let mut r = DVector::zeros(2 * n);
    let mut j = DMatrix::zeros(2 * n, 6);
    for (i, c) in corrs.iter().enumerate() {
        let pc = pose.transform(&c.world);
        if pc.z <= Z_MIN {
            continue;
        }
        let (x, y, z) = (pc.x, pc.y, pc.z);
        r[2 * i] = intr.fx * x / z + intr.cx - c.pixel.u;
        r[2 * i + 1] = intr.fy * y / z + intr.cy - c.pixel.v;
        // d(pixel)/d(camera point)
        let du = [intr.fx / z, 0.0, -intr.fx * x / (z * z)];
        let dv = [0.0, intr.fy / z, -intr.fy * y / (z * z)];
        // d(camera point)/dw = -[pc]x, d(camera point)/dd = I
        let skew = [[0.0, z, -y], [-z, 0.0, x], [y, -x, 0.0]];
        for k in 0..3 {
            j[(2 * i, k)] = (0..3).map(|m| du[m] * skew[m][k]).sum();
            j[(2 * i + 1, k)] = (0..3).map(|m| dv[m] * skew[m][k]).sum();
            j[(2 * i, 3 + k)] = du[k];
            j[(2 * i + 1, 3 + k)] = dv[k];
        }
    }
    (r, j)
}

/// Damped Gauss-Newton on the total squared reprojection error. Steps that do
/// not lower the cost are rejected, so the result never costs more than `initial`.
pub fn refine_pose(initial: &Pose, corrs: &[Correspondence], intr: &CameraIntrinsics, config: &RefineConfig) -> Pose {
    if corrs.len() < 3 {
        return *initial;
    }
    let mut pose = *initial;
    let mut cost = reprojection_cost(&pose, corrs, intr);
    let mut lambda = 1e-4;
    let mut iter = 0;
    while iter < config.max_iters && cost > 0.0 {
        iter += 1;
        let (r, j) = reprojection_jacobian(&pose, corrs, intr);
        let jt = j.transpose();
        let h: Matrix6<f64> = (&jt * &j).fixed_view::<6, 6>(0, 0).into_owned();
        let g: Vector6<f64> = (&jt * &r).fixed_view::<6, 1>(0, 0).into_owned();
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = apply_increment(&pose, &step);
            let trial_cost = reprojection_cost(&trial, corrs, intr);
            if trial_cost < cost {
                pose = trial;
                cost = trial_cost;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if step.norm() < config.convergence_tol {
                    return pose;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_error, Pixel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn scene(rng: &mut impl Rng, truth: &Pose, n: usize) -> Vec<Correspondence> {
        let k = intr();
        (0..n)
            .map(|_| {
                let px = Pixel::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0));
                Correspondence {
                    pixel: px,
                    world: truth.inverse().transform(&k.backproject(&px, rng.gen_range(1.0..10.0))),
                }
            })
            .collect()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let w = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Pose::from_parts(UnitQuaternion::from_scaled_axis(w), Vec3::new(rng.gen(), rng.gen(), rng.gen()))
    }

    #[test]
    fn optimum_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_pose(&mut rng);
        let corrs = scene(&mut rng, &truth, 40);
        let out = refine_pose(&truth, &corrs, &intr(), &RefineConfig::default());
        let e = pose_error(&out, &truth);
        assert!(e.translation_m < 1e-10 && e.rotation_deg < 1e-10, "{e:?}");
    }

    #[test]
    fn recovers_from_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            let corrs = scene(&mut rng, &truth, 50);
            let axis = Vec3::new(rng.gen(), rng.gen(), rng.gen()).normalize();
            let dir = Vec3::new(rng.gen(), rng.gen(), rng.gen()).normalize();
            let mut delta = Vector6::zeros();
            delta.fixed_rows_mut::<3>(0).copy_from(&(axis * 2f64.to_radians()));
            delta.fixed_rows_mut::<3>(3).copy_from(&(dir * 0.05));
            let start = apply_increment(&truth, &delta);
            let out = refine_pose(&start, &corrs, &intr(), &RefineConfig::default());
            let e = pose_error(&out, &truth);
            assert!(e.translation_m < 1e-6 && e.rotation_deg < 1e-5, "{e:?}");
            assert!(reprojection_cost(&out, &corrs, &intr()) <= reprojection_cost(&start, &corrs, &intr()));
        }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let truth = random_pose(&mut rng);
            let mut corrs = scene(&mut rng, &truth, 10);
            let pose = apply_increment(&truth, &Vector6::from_fn(|_, _| rng.gen_range(-0.05..0.05)));
            for c in &mut corrs {
                c.pixel.u += rng.gen_range(-3.0..3.0);
            }
            let (_, j) = reprojection_jacobian(&pose, &corrs, &intr());
            let h = 1e-6;
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let (rp, _) = reprojection_jacobian(&apply_increment(&pose, &e), &corrs, &intr());
                let (rm, _) = reprojection_jacobian(&apply_increment(&pose, &-e), &corrs, &intr());
                let fd = (rp - rm) / (2.0 * h);
                let col = j.column(k);
                let rel = (&fd - col).norm() / col.norm().max(1e-12);
                assert!(rel < 1e-5, "column {k}: relative error {rel}");
            }
        }
    }

    #[test]
    fn never_increases_cost_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            let mut corrs = scene(&mut rng, &truth, 30);
            for c in corrs.iter_mut().take(10) {
                c.world += Vec3::new(rng.gen(), rng.gen(), rng.gen());
            }
            let start = apply_increment(&truth, &Vector6::from_fn(|_, _| rng.gen_range(-0.2..0.2)));
            let out = refine_pose(&start, &corrs, &intr(), &RefineConfig::default());
            assert!(reprojection_cost(&out, &corrs, &intr()) <= reprojection_cost(&start, &corrs, &intr()));
        }
    }
}
