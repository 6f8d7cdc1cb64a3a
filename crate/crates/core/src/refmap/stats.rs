//! Per-image assignment statistics and the map validator.

use std::collections::HashSet;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use super::ReferenceMap;
use crate::geometry::project_world;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub image_id: u32,
    pub name: String,
    pub keypoints: usize,
    pub assigned: usize,
    /// `assigned / keypoints`, zero for an image without keypoints.
    pub ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub images: Vec<ImageStats>,
    /// Means over images; zero for an empty map.
    pub mean_keypoints: f64,
    pub mean_assigned: f64,
    pub mean_ratio: f64,
}

pub fn map_statistics(map: &ReferenceMap) -> MapStats {
    let images: Vec<ImageStats> = map
        .records
        .iter()
        .map(|r| {
            let (keypoints, assigned) = (r.keypoint_count(), r.assigned_count());
            ImageStats {
                image_id: r.image_id,
                name: r.name.clone(),
                keypoints,
                assigned,
                ratio: if keypoints == 0 { 0.0 } else { assigned as f64 / keypoints as f64 },
            }
        })
        .collect();
    if images.is_empty() {
        return MapStats::default();
    }
    let n = images.len() as f64;
    MapStats {
        mean_keypoints: images.iter().map(|s| s.keypoints as f64).sum::<f64>() / n,
        mean_assigned: images.iter().map(|s| s.assigned as f64).sum::<f64>() / n,
        mean_ratio: images.iter().map(|s| s.ratio).sum::<f64>() / n,
        images,
    }
}

impl MapStats {
    /// One row per image followed by a `mean` row.
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "image_id,name,keypoints,assigned,ratio")?;
        for s in &self.images {
            writeln!(out, "{},{},{},{},{:.6}", s.image_id, s.name, s.keypoints, s.assigned, s.ratio)?;
        }
        writeln!(
            out,
            ",mean,{:.3},{:.3},{:.6}",
            self.mean_keypoints, self.mean_assigned, self.mean_ratio
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ValidationIssue {
    DuplicateImageId(u32),
    /// Assignment list and keypoint list differ in length.
    LengthMismatch { image_id: u32 },
    NonFinite { image_id: u32, index: usize },
    /// The stored 3D point reprojects too far from its keypoint.
    Reprojection { image_id: u32, index: usize, error_px: f64 },
}

/// Checks id uniqueness, finiteness and that every map point reprojects within
/// `search_radius + 0.5` px of its keypoint. An empty result means valid.
pub fn validate_map(map: &ReferenceMap, search_radius: f64) -> Vec<ValidationIssue> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for r in &map.records {
        if !seen.insert(r.image_id) {
            issues.push(ValidationIssue::DuplicateImageId(r.image_id));
        }
        if r.assignments.len() != r.features.len() || r.features.descriptors.len() != r.features.len() {
            issues.push(ValidationIssue::LengthMismatch { image_id: r.image_id });
            continue;
        }
        for m in r.map_points() {
            if !m.world_position.iter().all(|v| v.is_finite()) {
                issues.push(ValidationIssue::NonFinite {
                    image_id: r.image_id,
                    index: m.index,
                });
                continue;
            }
            let error_px = project_world(&r.pose, &r.intrinsics, &m.world_position)
                .map_or(f64::INFINITY, |px| px.distance(&m.keypoint));
            if error_px > search_radius + 0.5 {
                issues.push(ValidationIssue::Reprojection {
                    image_id: r.image_id,
                    index: m.index,
                    error_px,
                });
            }
        }
    }
    issues
}
