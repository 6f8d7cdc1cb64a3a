//! The 3D reference map: every reference image's keypoints and descriptors,
//! with the keypoints that landed on the LiDAR virtual image carrying the
//! original 3D position of the cloud point found there.

pub mod container;
pub mod degrade;
pub mod stats;

use std::path::Path;
use std::time::Instant;

use image::GrayImage;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{detect_and_describe, load_gray, DetectorConfig, FeatureSet};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};
use crate::hpr::{hidden_point_removal, HprConfig, HprError};
use crate::localize::retrieval::global_descriptor;
use crate::manifest::DatasetManifest;
use crate::virtualimage::{lookup_3d, render_virtual_image, VirtualImageConfig, VirtualImageError};

pub use container::{load_map, read_map, save_map, write_map, MapFormatError, MAGIC};
pub use degrade::{degrade_reduce_keypoints, degrade_shift_positions};
pub use stats::{map_statistics, validate_map, ImageStats, MapStats, ValidationIssue};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("reference `{name}`: cannot load image: {source}")]
    Image {
        name: String,
        #[source]
        source: image::ImageError,
    },
    #[error("reference `{name}`: hidden point removal failed: {source}")]
    Hpr {
        name: String,
        #[source]
        source: HprError,
    },
    #[error("reference `{name}`: {source}")]
    VirtualImage {
        name: String,
        #[source]
        source: VirtualImageError,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub point_id: u32,
    pub world_position: Point3,
}

/// A keypoint lifted to 3D, viewed through its record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapPoint {
    pub image_id: u32,
    /// Row of the keypoint (and its descriptor) in the record's feature set.
    pub index: usize,
    pub keypoint: Pixel,
    pub point_id: u32,
    pub world_position: Point3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceRecord {
    pub image_id: u32,
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub global_descriptor: Vec<f32>,
    pub features: FeatureSet,
    /// Parallel to `features.keypoints`; `None` marks an unassigned keypoint.
    pub assignments: Vec<Option<Assignment>>,
}

impl ReferenceRecord {
    pub fn keypoint_count(&self) -> usize {
        self.features.len()
    }

    pub fn assigned_count(&self) -> usize {
        self.assignments.iter().filter(|a| a.is_some()).count()
    }

    pub fn unassigned_count(&self) -> usize {
        self.keypoint_count() - self.assigned_count()
    }

    pub fn map_points(&self) -> impl Iterator<Item = MapPoint> + '_ {
        self.assignments.iter().enumerate().filter_map(move |(index, a)| {
            a.map(|a| MapPoint {
                image_id: self.image_id,
                index,
                keypoint: self.features.keypoints[index].position,
                point_id: a.point_id,
                world_position: a.world_position,
            })
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub hpr: HprConfig,
    /// With HPR off every cloud point is a z-buffer candidate.
    pub use_hpr: bool,
    /// Runs HPR only on points projecting within this many pixels of the image.
    /// Occluders of in-image points lie on the same rays, so this only perturbs
    /// results near the image border while cutting hull size several-fold.
    pub frustum_crop_px: Option<f64>,
    pub detector: DetectorConfig,
    pub virtual_image: VirtualImageConfig,
    /// Abort on the first failing image instead of skipping it.
    pub strict: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            hpr: HprConfig::default(),
            use_hpr: true,
            frustum_crop_px: None,
            detector: DetectorConfig::default(),
            virtual_image: VirtualImageConfig::default(),
            strict: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub image: String,
    pub detect_s: f64,
    pub hpr_s: f64,
    pub render_s: f64,
    pub assign_s: f64,
    pub total_s: f64,
    /// CPU time of the building thread; unlike `total_s` it excludes time the
    /// thread spent descheduled.
    #[serde(default)]
    pub cpu_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapMetadata {
    pub generator: String,
    pub build: Option<BuildConfig>,
    pub cloud_points: usize,
    pub started_unix_s: f64,
    pub build_wall_s: f64,
    pub timings: Vec<StageTimings>,
    pub skipped: Vec<String>,
    /// Human-readable log of degradations applied after the build.
    pub degradations: Vec<String>,
}

impl MapMetadata {
    /// Sum of per-image build times, insensitive to how many workers ran.
    pub fn summed_image_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.total_s).sum()
    }

    /// Sum of per-image CPU times; steadier than wall time on a shared machine.
    pub fn summed_image_cpu_seconds(&self) -> f64 {
        self.timings.iter().map(|t| t.cpu_s).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceMap {
    pub metadata: MapMetadata,
    pub records: Vec<ReferenceRecord>,
}

impl ReferenceMap {
    pub fn record(&self, image_id: u32) -> Option<&ReferenceRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn map_point_count(&self) -> usize {
        self.records.iter().map(|r| r.assigned_count()).sum()
    }
}

pub struct ReferenceInput {
    pub image_id: u32,
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
    pub image: GrayImage,
    /// Externally computed features replace the built-in detector.
    pub features: Option<FeatureSet>,
}

fn crop_ids(cloud: &[Point3], pose: &Pose, intr: &CameraIntrinsics, margin: f64) -> Vec<usize> {
    cloud
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let pc = pose.transform(p);
            pc.z > crate::geometry::Z_MIN
                && intr.project(&pc).is_some_and(|px| {
                    px.u >= -margin
                        && px.v >= -margin
                        && px.u <= intr.width as f64 + margin
                        && px.v <= intr.height as f64 + margin
                })
        })
        .map(|(i, _)| i)
        .collect()
}

/// Visibility mask used for one reference camera.
pub fn visibility_mask(cloud: &[Point3], pose: &Pose, intr: &CameraIntrinsics, config: &BuildConfig) -> Result<Vec<bool>, HprError> {
    if !config.use_hpr {
        return Ok(vec![true; cloud.len()]);
    }
    match config.frustum_crop_px {
        None => hidden_point_removal(cloud, pose, &config.hpr),
        Some(margin) => {
            let ids = crop_ids(cloud, pose, intr, margin);
            let mut mask = vec![false; cloud.len()];
            if ids.len() < 3 {
                return Ok(mask);
            }
            let subset: Vec<Point3> = ids.iter().map(|&i| cloud[i]).collect();
            let sub_mask = hidden_point_removal(&subset, pose, &config.hpr)?;
            for (k, &i) in ids.iter().enumerate() {
                mask[i] = sub_mask[k];
            }
            Ok(mask)
        }
    }
}

/// CPU seconds consumed by the calling thread.
#[cfg(unix)]
fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid timespec and the clock id is a constant the platform defines.
    if unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) } != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

#[cfg(not(unix))]
fn thread_cpu_seconds() -> f64 {
    0.0
}

/// Builds the record for one reference image.
pub fn build_record(
    input: &ReferenceInput,
    cloud: &[Point3],
    config: &BuildConfig,
) -> Result<(ReferenceRecord, StageTimings), BuildError> {
    let t0 = Instant::now();
    let cpu0 = thread_cpu_seconds();
    let features = match &input.features {
        Some(f) => FeatureSet {
            image_id: input.image_id,
            ..f.clone()
        },
        None => detect_and_describe(&input.image, input.image_id, &config.detector),
    };
    let global = global_descriptor(&input.image);
    let t1 = Instant::now();
    let mask = visibility_mask(cloud, &input.pose, &input.intrinsics, config).map_err(|source| BuildError::Hpr {
        name: input.name.clone(),
        source,
    })?;
    let t2 = Instant::now();
    let vimg_err = |source| BuildError::VirtualImage {
        name: input.name.clone(),
        source,
    };
    let vimg = render_virtual_image(cloud, &mask, &input.pose, &input.intrinsics, config.virtual_image.splat_radius)
        .map_err(vimg_err)?;
    let t3 = Instant::now();
    let assignments = features
        .keypoints
        .iter()
        .map(|k| {
            lookup_3d(&vimg, &k.position, config.virtual_image.search_radius).map(|hit| {
                hit.map(|(point_id, world_position)| Assignment {
                    point_id,
                    world_position,
                })
            })
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(vimg_err)?;
    let t4 = Instant::now();
    let timings = StageTimings {
        image: input.name.clone(),
        detect_s: (t1 - t0).as_secs_f64(),
        hpr_s: (t2 - t1).as_secs_f64(),
        render_s: (t3 - t2).as_secs_f64(),
        assign_s: (t4 - t3).as_secs_f64(),
        total_s: (t4 - t0).as_secs_f64(),
        cpu_s: thread_cpu_seconds() - cpu0,
    };
    Ok((
        ReferenceRecord {
            image_id: input.image_id,
            name: input.name.clone(),
            intrinsics: input.intrinsics,
            pose: input.pose,
            global_descriptor: global,
            features,
            assignments,
        },
        timings,
    ))
}

fn assemble(
    results: Vec<(String, Result<(ReferenceRecord, StageTimings), BuildError>)>,
    cloud_points: usize,
    config: &BuildConfig,
    started: std::time::SystemTime,
    wall: Instant,
) -> Result<ReferenceMap, BuildError> {
    let mut map = ReferenceMap {
        metadata: MapMetadata {
            generator: concat!("lidarmap ", env!("CARGO_PKG_VERSION")).to_string(),
            build: Some(*config),
            cloud_points,
            started_unix_s: started
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            ..MapMetadata::default()
        },
        records: Vec::new(),
    };
    for (name, result) in results {
        match result {
            Ok((record, timings)) => {
                map.records.push(record);
                map.metadata.timings.push(timings);
            }
            Err(e) if !config.strict => {
                warn!("skipping {name}: {e}");
                map.metadata.skipped.push(name);
            }
            Err(e) => return Err(e),
        }
    }
    map.metadata.build_wall_s = wall.elapsed().as_secs_f64();
    info!(
        "built map: {} records, {} map points, {:.2}s",
        map.records.len(),
        map.map_point_count(),
        map.metadata.build_wall_s
    );
    Ok(map)
}

/// Builds a map from in-memory reference images, in parallel across images.
pub fn build_reference_map(cloud: &[Point3], inputs: &[ReferenceInput], config: &BuildConfig) -> Result<ReferenceMap, BuildError> {
    let started = std::time::SystemTime::now();
    let wall = Instant::now();
    let results = inputs
        .par_iter()
        .map(|input| (input.name.clone(), build_record(input, cloud, config)))
        .collect();
    assemble(results, cloud.len(), config, started, wall)
}

/// Builds a map from a dataset manifest. `subset` selects reference indices
/// (for instance the images kept by reduction); image ids are manifest indices.
/// `features_dir`, when given, supplies `<image name>.feat` containers that
/// replace detection.
pub fn build_from_manifest(
    manifest: &DatasetManifest,
    cloud: &[Point3],
    config: &BuildConfig,
    subset: Option<&[usize]>,
    features_dir: Option<&Path>,
) -> Result<ReferenceMap, BuildError> {
    let started = std::time::SystemTime::now();
    let wall = Instant::now();
    let ids: Vec<usize> = match subset {
        Some(s) => s.to_vec(),
        None => (0..manifest.references.len()).collect(),
    };
    let results = ids
        .par_iter()
        .map(|&i| {
            let rec = &manifest.references[i];
            let run = || {
                let image = load_gray(&rec.path).map_err(|source| BuildError::Image {
                    name: rec.name.clone(),
                    source,
                })?;
                let features = features_dir.and_then(|dir| {
                    let path = dir.join(format!("{}.feat", rec.name));
                    path.is_file().then(|| crate::features::import_features(&path)).and_then(|r| {
                        r.map_err(|e| warn!("ignoring {}: {e}", path.display())).ok()
                    })
                });
                let input = ReferenceInput {
                    image_id: i as u32,
                    name: rec.name.clone(),
                    intrinsics: rec.intrinsics,
                    pose: manifest.reference_pose(i),
                    image,
                    features,
                };
                build_record(&input, cloud, config)
            };
            (rec.name.clone(), run())
        })
        .collect();
    assemble(results, cloud.len(), config, started, wall)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::features::{DescriptorKind, Descriptors, Keypoint};
    use crate::geometry::Vec3;
    use image::Luma;
    use nalgebra::{Quaternion, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random map with `images` records of `kps` keypoints, about 70% assigned.
    pub(crate) fn sample_map(seed: u64, images: usize, kps: usize) -> ReferenceMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        let mut timings = Vec::new();
        for id in 0..images as u32 {
            let q = Quaternion::new(rng.gen(), rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5);
            let pose = Pose::from_parts(
                UnitQuaternion::from_quaternion(q),
                Vec3::new(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)),
            );
            let intrinsics = CameraIntrinsics::new(rng.gen_range(50.0..500.0), 300.0, 320.5, 240.25, 640, 480).unwrap();
            let mut features = FeatureSet::empty(id, DescriptorKind::Binary, 32);
            let mut assignments = Vec::new();
            for _ in 0..kps {
                features.keypoints.push(Keypoint {
                    position: Pixel::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)),
                    response: rng.gen(),
                });
                if let Descriptors::Binary { data, .. } = &mut features.descriptors {
                    data.extend((0..32).map(|_| rng.gen::<u8>()));
                }
                assignments.push(rng.gen_bool(0.7).then(|| Assignment {
                    point_id: rng.gen(),
                    world_position: Point3::new(rng.gen(), rng.gen::<f64>() * 1e3, -rng.gen::<f64>()),
                }));
            }
            timings.push(StageTimings {
                image: format!("ref_{id}.png"),
                detect_s: rng.gen(),
                total_s: rng.gen(),
                ..Default::default()
            });
            records.push(ReferenceRecord {
                image_id: id,
                name: format!("ref_{id}.png"),
                intrinsics,
                pose,
                global_descriptor: (0..16).map(|_| rng.gen()).collect(),
                features,
                assignments,
            });
        }
        ReferenceMap {
            metadata: MapMetadata {
                generator: "test".into(),
                build: Some(BuildConfig {
                    frustum_crop_px: Some(rng.gen()),
                    ..BuildConfig::default()
                }),
                cloud_points: rng.gen_range(0..1000),
                started_unix_s: rng.gen::<f64>() * 1e9,
                build_wall_s: rng.gen(),
                timings,
                skipped: vec!["broken.png".into()],
                degradations: vec![],
            },
            records,
        }
    }

    pub(crate) fn wall_cloud(z: f64, step: f64, half: f64) -> Vec<Point3> {
        let n = (2.0 * half / step) as i64;
        let mut pts = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                pts.push(Point3::new(-half + i as f64 * step, -half + j as f64 * step, z));
            }
        }
        pts
    }

    fn checker(w: u32, h: u32) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([if ((x / 16) + (y / 16)) % 2 == 0 { 40 } else { 210 }]))
    }

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 80.0, 60.0, 160, 120).unwrap()
    }

    #[test]
    fn textureless_image_gives_empty_record() {
        let cloud = wall_cloud(3.0, 0.05, 3.0);
        let input = ReferenceInput {
            image_id: 0,
            name: "flat".into(),
            intrinsics: intr(),
            pose: Pose::identity(),
            image: GrayImage::from_pixel(160, 120, Luma([100])),
            features: None,
        };
        let map = build_reference_map(&cloud, &[input], &BuildConfig::default()).unwrap();
        assert_eq!(map.records[0].keypoint_count(), 0);
        assert_eq!(map.records[0].assigned_count(), 0);
    }

    #[test]
    fn occluded_wall_receives_no_assignments() {
        // Near wall at z=2 spans the whole view; far wall at z=4 sits behind it.
        let mut cloud = wall_cloud(2.0, 0.01, 1.6);
        let near = cloud.len();
        cloud.extend(wall_cloud(4.0, 0.02, 3.0));
        let input = ReferenceInput {
            image_id: 0,
            name: "c".into(),
            intrinsics: intr(),
            pose: Pose::identity(),
            image: checker(160, 120),
            features: None,
        };
        let map = build_reference_map(&cloud, &[input], &BuildConfig::default()).unwrap();
        let rec = &map.records[0];
        assert!(rec.keypoint_count() > 10);
        assert!(rec.assigned_count() > 0);
        assert!(rec.map_points().all(|m| (m.point_id as usize) < near));
    }

    #[test]
    fn strict_and_lenient_modes() {
        // Camera center coincides with a cloud point: HPR rejects the cloud.
        let cloud = vec![Point3::origin(), Point3::new(0.0, 0.0, 1.0), Point3::new(1.0, 0.0, 2.0)];
        let mk = || ReferenceInput {
            image_id: 0,
            name: "bad".into(),
            intrinsics: intr(),
            pose: Pose::identity(),
            image: checker(160, 120),
            features: None,
        };
        assert!(matches!(
            build_reference_map(&cloud, &[mk()], &BuildConfig::default()),
            Err(BuildError::Hpr { .. })
        ));
        let lenient = BuildConfig {
            strict: false,
            ..BuildConfig::default()
        };
        let map = build_reference_map(&cloud, &[mk()], &lenient).unwrap();
        assert!(map.records.is_empty());
        assert_eq!(map.metadata.skipped, vec!["bad".to_string()]);
    }

    #[test]
    fn frustum_crop_agrees_with_full_hpr_inside_image() {
        let mut cloud = wall_cloud(2.0, 0.02, 0.5);
        cloud.extend(wall_cloud(4.0, 0.04, 4.0));
        cloud.extend(wall_cloud(-3.0, 0.1, 4.0));
        let pose = Pose::look_at(&Point3::new(0.1, 0.0, 0.0), &Point3::new(0.0, 0.0, 1.0), &-Vec3::y());
        let full = visibility_mask(&cloud, &pose, &intr(), &BuildConfig::default()).unwrap();
        let cropped = visibility_mask(
            &cloud,
            &pose,
            &intr(),
            &BuildConfig {
                frustum_crop_px: Some(20.0),
                ..BuildConfig::default()
            },
        )
        .unwrap();
        let (mut same, mut total) = (0, 0);
        for (i, p) in cloud.iter().enumerate() {
            if crate::geometry::project_world(&pose, &intr(), p).is_some_and(|px| intr().contains(&px)) {
                total += 1;
                same += (full[i] == cropped[i]) as usize;
            }
        }
        assert!(same as f64 >= 0.99 * total as f64, "{same}/{total}");
    }
}
