//! Reference image reduction.
//!
//! Reference cameras are bucketed by the grid cell of their center. Inside a
//! cell, a pair is redundant when its viewing directions are nearly parallel
//! (cosine above `cos_threshold`) and it shares at least `min_inliers`
//! epipolar-consistent matches. Redundant pairs are visited by descending cosine
//! and the member with fewer keypoints is dropped. A pair whose member was
//! already dropped is skipped, so every drop is justified by a partner that
//! was still kept at that moment.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{epipolar_inliers, match_features, FeatureSet};
use crate::geometry::{CameraIntrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RirConfig {
    pub grid_cell_m: f64,
    pub cos_threshold: f64,
    pub min_inliers: usize,
    pub match_ratio: f64,
    pub epipolar_threshold_px: f64,
}

impl Default for RirConfig {
    fn default() -> Self {
        Self {
            grid_cell_m: 5.0,
            cos_threshold: 0.95,
            min_inliers: 100,
            match_ratio: 0.8,
            epipolar_threshold_px: 3.0,
        }
    }
}

/// One reference image as seen by the reducer.
#[derive(Clone, Copy, Debug)]
pub struct RirView<'a> {
    pub id: u32,
    pub pose: &'a Pose,
    pub intrinsics: &'a CameraIntrinsics,
    pub features: &'a FeatureSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRecord {
    pub id: u32,
    pub partner: u32,
    pub cosine: f64,
    pub inliers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub config: RirConfig,
    pub kept: Vec<u32>,
    /// In the order the drops were decided.
    pub dropped: Vec<DropRecord>,
    /// Pairs sharing a cell whose cosine passed, i.e. pairs that needed matching.
    pub pairs_matched: usize,
}

impl ReductionReport {
    pub fn dropped_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.dropped.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        ids
    }
}

/// Cosine between the two viewing directions.
pub fn global_similarity(a: &Pose, b: &Pose) -> f64 {
    a.viewing_direction().dot(&b.viewing_direction()).clamp(-1.0, 1.0)
}

pub type GridKey = (i64, i64, i64);

/// Cell of each view's camera center, keyed in sorted order.
pub fn grid_index(poses: &[(u32, &Pose)], cell_m: f64) -> BTreeMap<GridKey, Vec<u32>> {
    let mut grid: BTreeMap<GridKey, Vec<u32>> = BTreeMap::new();
    for &(id, pose) in poses {
        let c = pose.center();
        let key = ((c.x / cell_m).floor() as i64, (c.y / cell_m).floor() as i64, (c.z / cell_m).floor() as i64);
        grid.entry(key).or_default().push(id);
    }
    grid
}

/// Epipolar inlier count between two posed feature sets.
pub fn pair_inliers(a: &RirView, b: &RirView, config: &RirConfig) -> usize {
    let Ok(matches) = match_features(a.features, b.features, config.match_ratio) else {
        return 0;
    };
    epipolar_inliers(
        &matches,
        a.features,
        b.features,
        a.pose,
        b.pose,
        a.intrinsics,
        b.intrinsics,
        config.epipolar_threshold_px,
    )
    .len()
}

pub fn reduce(views: &[RirView], config: &RirConfig) -> ReductionReport {
    reduce_with(views, config, |a, b| pair_inliers(a, b, config))
}

/// Same as [`reduce`] with a caller-supplied inlier count, which is only
/// evaluated for same-cell pairs whose cosine passes.
pub fn reduce_with<F>(views: &[RirView], config: &RirConfig, inliers: F) -> ReductionReport
where
    F: Fn(&RirView, &RirView) -> usize + Sync,
{
    let by_id: BTreeMap<u32, &RirView> = views.iter().map(|v| (v.id, v)).collect();
    let keyed: Vec<(u32, &Pose)> = views.iter().map(|v| (v.id, v.pose)).collect();
    let grid = grid_index(&keyed, config.grid_cell_m);

    let mut candidates = Vec::new();
    for ids in grid.values() {
        for (k, &i) in ids.iter().enumerate() {
            for &j in &ids[k + 1..] {
                let (i, j) = (i.min(j), i.max(j));
                let c = global_similarity(by_id[&i].pose, by_id[&j].pose);
                if c > config.cos_threshold {
                    candidates.push((i, j, c));
                }
            }
        }
    }
    let pairs_matched = candidates.len();
    let mut redundant: Vec<(u32, u32, f64, usize)> = candidates
        .par_iter()
        .map(|&(i, j, c)| (i, j, c, inliers(by_id[&i], by_id[&j])))
        .filter(|&(_, _, _, f)| f >= config.min_inliers)
        .collect();
    redundant.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));

    let mut gone = HashSet::new();
    let mut dropped = Vec::new();
    for (i, j, cosine, f) in redundant {
        if gone.contains(&i) || gone.contains(&j) {
            continue;
        }
        let (ki, kj) = (by_id[&i].features.len(), by_id[&j].features.len());
        // Fewer keypoints loses; on a tie the larger id (always j here) loses.
        let (drop, keep) = if ki < kj { (i, j) } else { (j, i) };
        gone.insert(drop);
        dropped.push(DropRecord {
            id: drop,
            partner: keep,
            cosine,
            inliers: f,
        });
    }
    let kept = by_id.keys().copied().filter(|id| !gone.contains(id)).collect();
    ReductionReport {
        config: *config,
        kept,
        dropped,
        pairs_matched,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{DescriptorKind, Keypoint};
    use crate::geometry::{Pixel, Point3, Vec3};
    use proptest::prelude::*;

    fn features(n: usize) -> FeatureSet {
        let mut f = FeatureSet::empty(0, DescriptorKind::Binary, 32);
        f.keypoints = vec![
            Keypoint {
                position: Pixel::new(1.0, 1.0),
                response: 1.0
            };
            n
        ];
        f
    }

    fn pose_at(x: f64, yaw_deg: f64) -> Pose {
        let yaw = yaw_deg.to_radians();
        let eye = Point3::new(x, 1.0, 1.0);
        Pose::look_at(&eye, &(eye + Vec3::new(yaw.sin(), 0.0, yaw.cos())), &-Vec3::y())
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn similarity_examples() {
        let a = pose_at(0.0, 0.0);
        assert!((global_similarity(&a, &a) - 1.0).abs() < 1e-12);
        assert!(global_similarity(&a, &pose_at(0.0, 90.0)).abs() < 1e-12);
        assert!((global_similarity(&a, &pose_at(0.0, 180.0)) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_pair_drops_fewer_keypoints() {
        let p = pose_at(1.0, 0.0);
        let (fa, fb) = (features(50), features(80));
        let k = intr();
        let views = [
            RirView { id: 0, pose: &p, intrinsics: &k, features: &fa },
            RirView { id: 1, pose: &p, intrinsics: &k, features: &fb },
        ];
        let r = reduce_with(&views, &RirConfig::default(), |_, _| 500);
        assert_eq!(r.kept, vec![1]);
        assert_eq!(r.dropped, vec![DropRecord { id: 0, partner: 1, cosine: 1.0, inliers: 500 }]);
        // Tie on keypoints: larger id goes.
        let views = [
            RirView { id: 4, pose: &p, intrinsics: &k, features: &fa },
            RirView { id: 2, pose: &p, intrinsics: &k, features: &fa },
        ];
        assert_eq!(reduce_with(&views, &RirConfig::default(), |_, _| 500).kept, vec![2]);
    }

    #[test]
    fn different_cells_never_drop() {
        let (pa, pb) = (pose_at(1.0, 0.0), pose_at(6.0, 0.0));
        let f = features(10);
        let k = intr();
        let views = [
            RirView { id: 0, pose: &pa, intrinsics: &k, features: &f },
            RirView { id: 1, pose: &pb, intrinsics: &k, features: &f },
        ];
        let r = reduce_with(&views, &RirConfig::default(), |_, _| 10_000);
        assert!(r.dropped.is_empty());
        assert_eq!(r.pairs_matched, 0);
    }

    #[test]
    fn three_way_cascade() {
        let poses = [pose_at(1.0, 0.0), pose_at(1.1, 1.0), pose_at(1.2, 2.0)];
        let f = [features(100), features(200), features(300)];
        let k = intr();
        let views: Vec<RirView> = (0..3)
            .map(|i| RirView { id: i as u32, pose: &poses[i], intrinsics: &k, features: &f[i] })
            .collect();
        let r = reduce_with(&views, &RirConfig::default(), |_, _| 1000);
        assert_eq!(r.kept, vec![2]);
        assert_eq!(r.dropped_ids(), vec![0, 1]);
    }

    #[test]
    fn raising_inlier_threshold_can_unblock_a_cascade() {
        // A-V is weakly matched; V-W1 and V-W2 strongly. A has the most keypoints.
        let poses = [pose_at(1.0, 0.0), pose_at(1.0, 1.0), pose_at(1.0, 40.0), pose_at(1.0, -40.0)];
        let f = [features(400), features(300), features(100), features(100)];
        let k = intr();
        let views: Vec<RirView> = (0..4)
            .map(|i| RirView { id: i as u32, pose: &poses[i], intrinsics: &k, features: &f[i] })
            .collect();
        let config = RirConfig { cos_threshold: 0.5, ..RirConfig::default() };
        let inl = |a: &RirView, b: &RirView| match (a.id.min(b.id), a.id.max(b.id)) {
            (0, 1) => 150,
            (1, 2) | (1, 3) => 500,
            _ => 0,
        };
        let low = reduce_with(&views, &RirConfig { min_inliers: 100, ..config }, inl);
        let high = reduce_with(&views, &RirConfig { min_inliers: 200, ..config }, inl);
        assert_eq!(low.dropped_ids(), vec![1]);
        assert_eq!(high.dropped_ids(), vec![2, 3]);
    }

    proptest! {
        #[test]
        fn report_properties(
            spec in prop::collection::vec((0.0f64..14.0, -30.0f64..30.0, 1usize..500), 1..12),
            inlier_seed in any::<u64>(),
            c1 in 0.8f64..0.99,
            dc in 0.0f64..0.05,
        ) {
            let poses: Vec<Pose> = spec.iter().map(|&(x, yaw, _)| pose_at(x, yaw)).collect();
            let feats: Vec<FeatureSet> = spec.iter().map(|&(_, _, n)| features(n)).collect();
            let k = intr();
            let views: Vec<RirView> = (0..spec.len())
                .map(|i| RirView { id: i as u32, pose: &poses[i], intrinsics: &k, features: &feats[i] })
                .collect();
            let inl = |a: &RirView, b: &RirView| {
                let h = (a.id.min(b.id) as u64 * 31 + a.id.max(b.id) as u64).wrapping_mul(inlier_seed | 1);
                (h >> 40) as usize % 300
            };
            let base = RirConfig { cos_threshold: c1, ..RirConfig::default() };
            let r = reduce_with(&views, &base, inl);
            prop_assert_eq!(&r, &reduce_with(&views, &base, inl));

            let mut all: Vec<u32> = r.kept.clone();
            all.extend(r.dropped_ids());
            all.sort_unstable();
            prop_assert_eq!(all, (0..spec.len() as u32).collect::<Vec<_>>());

            let keyed: Vec<(u32, &Pose)> = views.iter().map(|v| (v.id, v.pose)).collect();
            for ids in grid_index(&keyed, base.grid_cell_m).values() {
                prop_assert!(ids.iter().any(|id| r.kept.contains(id)));
            }
            for d in &r.dropped {
                prop_assert!(d.cosine > base.cos_threshold && d.inliers >= base.min_inliers);
            }

            let stricter = reduce_with(&views, &RirConfig { cos_threshold: c1 + dc, ..base }, inl);
            prop_assert!(stricter.dropped.len() <= r.dropped.len());
        }
    }
}
