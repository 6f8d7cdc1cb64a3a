//! Query localization: retrieve, match, lift to 2D-3D, robust PnP.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use image::GrayImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ransac::{ransac_pnp, RansacConfig};
use super::retrieval::{global_descriptor, RetrievalIndex};
use super::Correspondence;
use crate::features::{detect_and_describe, match_features, DetectorConfig, FeatureSet};
use crate::geometry::{CameraIntrinsics, Point3, Pose, PoseError};
use crate::refmap::ReferenceMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub top_k: usize,
    pub match_ratio: f64,
    pub ransac: RansacConfig,
    pub detector: DetectorConfig,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            match_ratio: 0.8,
            ransac: RansacConfig::default(),
            detector: DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryTimings {
    pub retrieve_s: f64,
    pub match_s: f64,
    pub pnp_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    pub query_id: u32,
    pub name: String,
    /// `None` when the query could not be localized.
    pub pose: Option<Pose>,
    pub correspondences: usize,
    pub inliers: usize,
    pub retrieved: Vec<u32>,
    /// Filled in when ground truth is known.
    pub error: Option<PoseError>,
    pub passes: Vec<bool>,
    /// Wall-clock timings vary run to run, so they stay out of serialized results.
    #[serde(skip)]
    pub timings: QueryTimings,
}

pub struct Query {
    pub id: u32,
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub features: FeatureSet,
    pub global_descriptor: Vec<f32>,
}

impl Query {
    pub fn from_image(id: u32, name: &str, intrinsics: CameraIntrinsics, image: &GrayImage, detector: &DetectorConfig) -> Self {
        Self {
            id,
            name: name.to_string(),
            intrinsics,
            features: detect_and_describe(image, id, detector),
            global_descriptor: global_descriptor(image),
        }
    }
}

pub fn index_map(map: &ReferenceMap) -> RetrievalIndex {
    let mut index = RetrievalIndex::new();
    for r in &map.records {
        index.insert(r.image_id, r.global_descriptor.clone());
    }
    index
}

/// Per-query RANSAC seed, independent of how queries are scheduled.
fn query_seed(seed: u64, id: u32) -> u64 {
    let mut z = seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// 2D-3D correspondences for a query against the given records, at most one
/// per query keypoint (the smallest descriptor distance wins, ties by record
/// order then keypoint row). Sorted by query keypoint.
pub fn correspondences(map: &ReferenceMap, retrieved: &[u32], query: &FeatureSet, match_ratio: f64) -> Vec<(usize, Correspondence)> {
    let by_id: HashMap<u32, usize> = map.records.iter().enumerate().map(|(i, r)| (r.image_id, i)).collect();
    let mut best: BTreeMap<usize, (f32, usize, usize, Point3)> = BTreeMap::new();
    for (rank, id) in retrieved.iter().enumerate() {
        let record = &map.records[by_id[id]];
        let Ok(matches) = match_features(query, &record.features, match_ratio) else {
            continue;
        };
        for m in matches {
            let Some(a) = record.assignments[m.b] else { continue };
            let candidate = (m.distance, rank, m.b, a.world_position);
            best.entry(m.a)
                .and_modify(|cur| {
                    if (candidate.0, candidate.1, candidate.2) < (cur.0, cur.1, cur.2) {
                        *cur = candidate;
                    }
                })
                .or_insert(candidate);
        }
    }
    best.into_iter()
        .map(|(a, (_, _, _, world))| {
            (
                a,
                Correspondence {
                    pixel: query.keypoints[a].position,
                    world,
                },
            )
        })
        .collect()
}

pub fn localize_query(map: &ReferenceMap, index: &RetrievalIndex, query: &Query, config: &LocalizeConfig, seed: u64) -> LocalizationResult {
    let t0 = Instant::now();
    let retrieved = index.retrieve(&query.global_descriptor, config.top_k);
    let t1 = Instant::now();
    let corrs: Vec<Correspondence> = correspondences(map, &retrieved, &query.features, config.match_ratio)
        .into_iter()
        .map(|(_, c)| c)
        .collect();
    let t2 = Instant::now();
    let estimate = ransac_pnp(&corrs, &query.intrinsics, &config.ransac, query_seed(seed, query.id));
    let t3 = Instant::now();
    let (pose, inliers) = match estimate {
        Ok(e) => (Some(e.pose), e.inliers.len()),
        Err(_) => (None, 0),
    };
    LocalizationResult {
        query_id: query.id,
        name: query.name.clone(),
        pose,
        correspondences: corrs.len(),
        inliers,
        retrieved,
        error: None,
        passes: Vec::new(),
        timings: QueryTimings {
            retrieve_s: (t1 - t0).as_secs_f64(),
            match_s: (t2 - t1).as_secs_f64(),
            pnp_s: (t3 - t2).as_secs_f64(),
            total_s: (t3 - t0).as_secs_f64(),
        },
    }
}

/// Localizes every query in parallel; output order follows the input.
pub fn localize_all(map: &ReferenceMap, queries: &[Query], config: &LocalizeConfig, seed: u64) -> Vec<LocalizationResult> {
    let index = index_map(map);
    queries
        .par_iter()
        .map(|q| localize_query(map, &index, q, config, seed))
        .collect()
}
