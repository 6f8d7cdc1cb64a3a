//! Minimal pose from three 2D-3D correspondences (Grunert's formulation).
//!
//! With depths `s2 = u s1` and `s3 = v s1`, the law of cosines on the three
//! rays reduces to a quartic in `v`. Its real roots give the camera-frame
//! triangle, and the pose is the rigid alignment of the world triangle onto it.

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose, Vec3};

/// Candidates reprojecting worse than this are discarded.
pub const P3P_TOLERANCE_PX: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum P3pError {
    #[error("degenerate P3P input: {0}")]
    Degenerate(&'static str),
}

/// Polynomial coefficients, lowest degree first.
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64], scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; a.len().max(b.len())];
    for (i, x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, y) in b.iter().enumerate() {
        out[i] += scale * y;
    }
    out
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn poly_derivative(p: &[f64]) -> Vec<f64> {
    p.iter().enumerate().skip(1).map(|(i, c)| i as f64 * c).collect()
}

/// Real roots through the companion matrix, each polished by Newton steps.
fn real_roots(p: &[f64]) -> Vec<f64> {
    let scale = p.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut coeffs: Vec<f64> = p.iter().map(|c| c / scale).collect();
    while coeffs.len() > 1 && coeffs.last().unwrap().abs() < 1e-14 {
        coeffs.pop();
    }
    let n = coeffs.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    let lead = coeffs[n];
    let mut companion = DMatrix::zeros(n, n);
    for i in 1..n {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..n {
        companion[(i, n - 1)] = -coeffs[i] / lead;
    }
    let dp = poly_derivative(&coeffs);
    let mut roots = Vec::new();
    for z in companion.complex_eigenvalues().iter() {
        // Double roots split into a conjugate pair with an imaginary part of
        // roughly the square root of the rounding error.
        if z.im.abs() > 1e-4 * (1.0 + z.re.abs()) {
            continue;
        }
        let mut x = z.re;
        let mut fx = poly_eval(&coeffs, x).abs();
        for _ in 0..8 {
            let d = poly_eval(&dp, x);
            if d == 0.0 || fx == 0.0 {
                break;
            }
            // Near a double root the derivative vanishes too; keep only steps that help.
            let next = x - poly_eval(&coeffs, x) / d;
            let fn_ = poly_eval(&coeffs, next).abs();
            if !(fn_ < fx) {
                break;
            }
            x = next;
            fx = fn_;
        }
        roots.push(x);
    }
    roots
}

/// Gauss-Newton on the three law-of-cosines equations in the depths.
fn polish_depths(s: &mut Vector3<f64>, cos: &[f64; 3], sq: &[f64; 3]) {
    // Pairs (j, k) and the squared side length between their points.
    const PAIRS: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];
    for _ in 0..5 {
        let mut r = Vector3::zeros();
        let mut j = Matrix3::zeros();
        for (row, &(a, b)) in PAIRS.iter().enumerate() {
            r[row] = s[a] * s[a] + s[b] * s[b] - 2.0 * s[a] * s[b] * cos[row] - sq[row];
            j[(row, a)] = 2.0 * s[a] - 2.0 * s[b] * cos[row];
            j[(row, b)] = 2.0 * s[b] - 2.0 * s[a] * cos[row];
        }
        match j.lu().solve(&r) {
            Some(step) if step.iter().all(|v| v.is_finite()) => {
                *s -= step;
                if step.norm() <= 1e-15 * s.norm() {
                    break;
                }
            }
            _ => break,
        }
    }
}

/// Rotation and translation with `cam[i] = R world[i] + t` in the least-squares sense.
pub fn kabsch(world: &[Point3], cam: &[Point3]) -> Pose {
    let n = world.len() as f64;
    let cw = world.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let cc = cam.iter().fold(Vec3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (w.coords - cw) * (c.coords - cc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = UnitQuaternion::from_matrix(&r);
    Pose::from_parts(rotation, cc - rotation * cw)
}

/// All poses consistent with three unit bearings and their world points,
/// without any reprojection filter.
pub fn p3p_bearings(bearings: &[Vec3; 3], world: &[Point3; 3]) -> Result<Vec<Pose>, P3pError> {
    let e1 = world[1] - world[0];
    let e2 = world[2] - world[0];
    let scale = e1.norm_squared().max(e2.norm_squared()).max((world[2] - world[1]).norm_squared());
    if !(scale > 0.0) || e1.cross(&e2).norm() <= 1e-10 * scale {
        return Err(P3pError::Degenerate("world points are collinear"));
    }
    let f: Vec<Vec3> = bearings.iter().map(|b| b.normalize()).collect();
    if f.iter().any(|b| !b.iter().all(|v| v.is_finite())) {
        return Err(P3pError::Degenerate("bearing is not finite"));
    }
    let a2 = (world[1] - world[2]).norm_squared();
    let b2 = (world[0] - world[2]).norm_squared();
    let c2 = (world[0] - world[1]).norm_squared();
    let (ca, cb, cg) = (f[1].dot(&f[2]), f[0].dot(&f[2]), f[0].dot(&f[1]));

    let k = (a2 - c2) / b2;
    let w = [1.0, -2.0 * cb, 1.0];
    let num = [k + 1.0, -2.0 * k * cb, k - 1.0];
    let den = [2.0 * cg, -2.0 * ca];
    let d2 = poly_mul(&den, &den);
    let quartic = poly_add(
        &poly_add(&poly_add(&d2, &poly_mul(&num, &num), 1.0), &poly_mul(&num, &den), -2.0 * cg),
        &poly_mul(&w, &d2),
        -c2 / b2,
    );

    let cos = [ca, cb, cg];
    let sq = [a2, b2, c2];
    let mut poses: Vec<Pose> = Vec::new();
    for v in real_roots(&quartic) {
        let wv = poly_eval(&w, v);
        if v <= 0.0 || wv <= 0.0 {
            continue;
        }
        let s1 = (b2 / wv).sqrt();
        let dv = poly_eval(&den, v);
        let us: Vec<f64> = if dv.abs() > 1e-9 {
            vec![poly_eval(&num, v) / dv]
        } else {
            // Symmetric configuration: u comes from the (1, 2) equation alone.
            let disc = cg * cg - 1.0 + c2 * wv / b2;
            if disc < -1e-12 {
                continue;
            }
            let r = disc.max(0.0).sqrt();
            vec![cg + r, cg - r]
        };
        for u in us {
            if u <= 0.0 {
                continue;
            }
            let mut s = Vector3::new(s1, u * s1, v * s1);
            polish_depths(&mut s, &cos, &sq);
            if s.iter().any(|&x| !(x > 0.0)) {
                continue;
            }
            let consistent = [(1, 2, a2, ca), (0, 2, b2, cb), (0, 1, c2, cg)]
                .iter()
                .all(|&(i, j, d, c)| (s[i] * s[i] + s[j] * s[j] - 2.0 * s[i] * s[j] * c - d).abs() <= 1e-8 * d);
            if !consistent {
                continue;
            }
            let cam: Vec<Point3> = (0..3).map(|i| Point3::from(f[i] * s[i])).collect();
            let pose = kabsch(world, &cam);
            let duplicate = poses.iter().any(|p| {
                (p.translation() - pose.translation()).norm() < 1e-9 * (1.0 + pose.translation().norm())
                    && p.rotation().angle_to(pose.rotation()) < 1e-9
            });
            if !duplicate {
                poses.push(pose);
            }
        }
    }
    Ok(poses)
}

/// Up to four poses that reproject the three world points onto their pixels
/// within [`P3P_TOLERANCE_PX`].
pub fn solve_p3p(pixels: &[Pixel; 3], world: &[Point3; 3], intr: &CameraIntrinsics) -> Result<Vec<Pose>, P3pError> {
    let bearings = [intr.bearing(&pixels[0]), intr.bearing(&pixels[1]), intr.bearing(&pixels[2])];
    let mut poses = p3p_bearings(&bearings, world)?;
    poses.retain(|pose| {
        world.iter().zip(pixels).all(|(p, px)| {
            crate::geometry::project_world(pose, intr, p).is_some_and(|q| q.distance(px) <= P3P_TOLERANCE_PX)
        })
    });
    Ok(poses)
}
