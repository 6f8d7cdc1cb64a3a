//! Mutual nearest-neighbour matching and epipolar filtering.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use super::{Descriptors, FeatureError, FeatureSet};
use crate::geometry::{CameraIntrinsics, Pixel, Pose};

/// Baselines shorter than this (meters) make the epipolar test meaningless.
pub const MIN_BASELINE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub distance: f32,
}

/// Nearest and second-nearest distance from row `i` of `from` into `to`.
/// The nearest index is the lowest among equal distances.
fn two_nearest(from: &Descriptors, i: usize, to: &Descriptors) -> (usize, f32, f32) {
    let mut best = (usize::MAX, f32::INFINITY);
    let mut second = f32::INFINITY;
    for j in 0..to.len() {
        let d = from.distance(i, to, j);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, second)
}

fn nearest_all(from: &Descriptors, to: &Descriptors) -> Vec<(usize, f32, f32)> {
    (0..from.len()).into_par_iter().map(|i| two_nearest(from, i, to)).collect()
}

fn passes_ratio(d1: f32, d2: f32, ratio: f64) -> bool {
    d2.is_infinite() || (d1 as f64) < ratio * d2 as f64
}

/// Descriptor-level matching: mutual nearest neighbours that also pass the ratio
/// test in both directions. Output is sorted by the index into `a`.
pub fn match_descriptors(a: &Descriptors, b: &Descriptors, ratio: f64) -> Result<Vec<Match>, FeatureError> {
    a.check_compatible(b)?;
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    let ab = nearest_all(a, b);
    let ba = nearest_all(b, a);
    Ok(ab
        .iter()
        .enumerate()
        .filter_map(|(i, &(j, d1, d2))| {
            let (back, e1, e2) = ba[j];
            (back == i && passes_ratio(d1, d2, ratio) && passes_ratio(e1, e2, ratio)).then_some(Match {
                a: i,
                b: j,
                distance: d1,
            })
        })
        .collect())
}

pub fn match_features(a: &FeatureSet, b: &FeatureSet, ratio: f64) -> Result<Vec<Match>, FeatureError> {
    match_descriptors(&a.descriptors, &b.descriptors, ratio)
}

/// Fundamental matrix with `x_bᵀ F x_a = 0` for homogeneous pixels, or `None` for
/// a (near) zero baseline.
pub fn fundamental_matrix(a_pose: &Pose, b_pose: &Pose, a_intr: &CameraIntrinsics, b_intr: &CameraIntrinsics) -> Option<Matrix3<f64>> {
    let rel = b_pose.compose(&a_pose.inverse());
    let t = rel.translation();
    if t.norm() < MIN_BASELINE {
        return None;
    }
    let e = t.cross_matrix() * rel.rotation_matrix();
    let ka_inv = a_intr.matrix().try_inverse()?;
    let kb_inv = b_intr.matrix().try_inverse()?;
    Some(kb_inv.transpose() * e * ka_inv)
}

fn line_distance(line: &Vector3<f64>, p: &Pixel) -> f64 {
    let n = (line.x * line.x + line.y * line.y).sqrt();
    if n == 0.0 {
        return f64::INFINITY;
    }
    (line.x * p.u + line.y * p.v + line.z).abs() / n
}

/// Larger of the two point-to-epipolar-line distances, in pixels.
pub fn symmetric_epipolar_distance(f: &Matrix3<f64>, pa: &Pixel, pb: &Pixel) -> f64 {
    let xa = Vector3::new(pa.u, pa.v, 1.0);
    let xb = Vector3::new(pb.u, pb.v, 1.0);
    line_distance(&(f * xa), pb).max(line_distance(&(f.transpose() * xb), pa))
}

/// Keeps the matches consistent with the known relative pose. Zero-baseline pairs
/// keep every match.
#[allow(clippy::too_many_arguments)]
pub fn epipolar_inliers(
    matches: &[Match],
    a: &FeatureSet,
    b: &FeatureSet,
    a_pose: &Pose,
    b_pose: &Pose,
    a_intr: &CameraIntrinsics,
    b_intr: &CameraIntrinsics,
    threshold_px: f64,
) -> Vec<Match> {
    let Some(f) = fundamental_matrix(a_pose, b_pose, a_intr, b_intr) else {
        return matches.to_vec();
    };
    matches
        .iter()
        .filter(|m| {
            symmetric_epipolar_distance(&f, &a.keypoints[m.a].position, &b.keypoints[m.b].position) < threshold_px
        })
        .copied()
        .collect()
}
