//! Seeded RANSAC around the P3P solver.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::p3p::solve_p3p;
use super::refine::{refine_pose, RefineConfig};
use super::Correspondence;
use crate::geometry::{project_world, CameraIntrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub threshold_px: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub min_inliers: usize,
    pub refine: RefineConfig,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 3.0,
            max_iters: 10_000,
            confidence: 0.999,
            min_inliers: 12,
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PnpError {
    #[error("robust PnP needs at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("best hypothesis has {found} inliers, {required} required")]
    TooFewInliers { found: usize, required: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpEstimate {
    pub pose: Pose,
    /// Indices into the input, ascending; each reprojects under `pose` within the threshold.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

fn reprojection_error(pose: &Pose, c: &Correspondence, intr: &CameraIntrinsics) -> f64 {
    project_world(pose, intr, &c.world).map_or(f64::INFINITY, |px| px.distance(&c.pixel))
}

/// Inlier indices and their summed squared error.
pub fn score(pose: &Pose, corrs: &[Correspondence], intr: &CameraIntrinsics, threshold_px: f64) -> (Vec<usize>, f64) {
    let mut inliers = Vec::new();
    let mut sse = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = reprojection_error(pose, c, intr);
        if e < threshold_px {
            inliers.push(i);
            sse += e * e;
        }
    }
    (inliers, sse)
}

/// Iterations needed to draw one all-inlier triple with the given confidence.
fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let p = inlier_ratio.powi(3);
    if p >= 1.0 {
        return 1;
    }
    if p <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

pub fn ransac_pnp(
    corrs: &[Correspondence],
    intr: &CameraIntrinsics,
    config: &RansacConfig,
    seed: u64,
) -> Result<PnpEstimate, PnpError> {
    let n = corrs.len();
    if n < 4 {
        return Err(PnpError::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Pose, Vec<usize>, f64)> = None;
    let mut needed = config.max_iters;
    let mut iterations = 0;
    while iterations < needed.min(config.max_iters) {
        iterations += 1;
        let idx = sample(&mut rng, n, 3);
        let (a, b, c) = (&corrs[idx.index(0)], &corrs[idx.index(1)], &corrs[idx.index(2)]);
        let Ok(poses) = solve_p3p(&[a.pixel, b.pixel, c.pixel], &[a.world, b.world, c.world], intr) else {
            continue;
        };
        for pose in poses {
            let (inliers, sse) = score(&pose, corrs, intr, config.threshold_px);
            let better = match &best {
                None => true,
                Some((_, bi, bs)) => inliers.len() > bi.len() || (inliers.len() == bi.len() && sse < *bs),
            };
            if better {
                needed = required_iterations(inliers.len() as f64 / n as f64, config.confidence, config.max_iters);
                best = Some((pose, inliers, sse));
            }
        }
    }
    let Some((pose, inliers, _)) = best else {
        return Err(PnpError::TooFewInliers {
            found: 0,
            required: config.min_inliers,
        });
    };
    // Refine on the consensus set and re-score, until the set stops changing.
    // The least-squares pose replaces the minimal-sample one even when a few
    // borderline inliers fall out, since the latter fits only three points.
    let (mut pose, mut inliers) = (pose, inliers);
    for _ in 0..3 {
        if inliers.len() < 3 {
            break;
        }
        let subset: Vec<Correspondence> = inliers.iter().map(|&i| corrs[i]).collect();
        pose = refine_pose(&pose, &subset, intr, &config.refine);
        let (next, _) = score(&pose, corrs, intr, config.threshold_px);
        let settled = next == inliers;
        inliers = next;
        if settled {
            break;
        }
    }
    if inliers.len() < config.min_inliers.max(4) {
        return Err(PnpError::TooFewInliers {
            found: inliers.len(),
            required: config.min_inliers,
        });
    }
    Ok(PnpEstimate {
        pose,
        inliers,
        iterations,
    })
}
