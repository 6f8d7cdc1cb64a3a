//! Dataset-level drivers shared by the command line and the acceptance suite.

pub mod config;
pub mod run;
pub mod svg;

use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConfigError, PipelineConfig};
pub use run::{artifact, artifacts, load_run_manifest, Artifact, RunManifest, RunRecorder, Stage};

use crate::features::{detect_and_describe, import_features, load_gray, DetectorConfig, FeatureSet};
use crate::geometry::Pose;
use crate::localize::{evaluate, localize_all, Evaluation, LocalizationResult, Query, ThresholdSet};
use crate::manifest::{load_manifest, DatasetManifest, ManifestError};
use crate::pointcloud::{load_ply_with_report, PlyError, PointCloud};
use crate::refmap::{build_from_manifest, map_statistics, BuildError, MapStats, ReferenceMap};
use crate::rir::{reduce, ReductionReport, RirView};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("point cloud {path}: {source}")]
    Cloud {
        path: PathBuf,
        #[source]
        source: PlyError,
    },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error("query `{0}` has no ground-truth pose")]
    MissingTruth(String),
    #[error("results name queries that are not in the manifest: {0}")]
    UnknownQuery(String),
}

/// A loaded manifest together with its point cloud.
pub struct Dataset {
    pub path: PathBuf,
    pub manifest: DatasetManifest,
    pub cloud: PointCloud,
}

impl Dataset {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let manifest = load_manifest(path)?;
        let loaded = load_ply_with_report(&manifest.cloud).map_err(|source| PipelineError::Cloud {
            path: manifest.cloud.clone(),
            source,
        })?;
        if loaded.dropped_non_finite > 0 {
            warn!("dropped {} non-finite points from {}", loaded.dropped_non_finite, manifest.cloud.display());
        }
        info!(
            "dataset {}: {} points, {} references, {} queries",
            path.display(),
            loaded.cloud.len(),
            manifest.references.len(),
            manifest.queries.len()
        );
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
            cloud: loaded.cloud,
        })
    }

    /// Ground-truth query poses in manifest order.
    pub fn query_truths(&self) -> Result<Vec<Pose>, PipelineError> {
        self.manifest
            .queries
            .iter()
            .map(|q| q.pose.ok_or_else(|| PipelineError::MissingTruth(q.name.clone())))
            .collect()
    }
}

/// Runs `f` on a pool of `workers` threads, or on the global pool when `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        None => f(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                warn!("cannot start a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
    }
}

pub fn build_map(
    ds: &Dataset,
    config: &PipelineConfig,
    subset: Option<&[usize]>,
    features_dir: Option<&Path>,
) -> Result<ReferenceMap, PipelineError> {
    Ok(build_from_manifest(&ds.manifest, &ds.cloud.points, &config.build, subset, features_dir)?)
}

fn load_image(path: &Path) -> Result<image::GrayImage, PipelineError> {
    load_gray(path).map_err(|source| PipelineError::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Imported `<name>.feat` features when present, detection otherwise.
fn features_for(
    name: &str,
    id: u32,
    image: &image::GrayImage,
    detector: &DetectorConfig,
    features_dir: Option<&Path>,
) -> FeatureSet {
    if let Some(path) = features_dir.map(|d| d.join(format!("{name}.feat"))).filter(|p| p.is_file()) {
        match import_features(&path) {
            Ok(f) => return FeatureSet { image_id: id, ..f },
            Err(e) => warn!("ignoring {}: {e}", path.display()),
        }
    }
    detect_and_describe(image, id, detector)
}

/// Featurizes every query image; query ids are manifest indices.
pub fn load_queries(ds: &Dataset, detector: &DetectorConfig, features_dir: Option<&Path>) -> Result<Vec<Query>, PipelineError> {
    ds.manifest
        .queries
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let image = load_image(&rec.path)?;
            let mut q = Query::from_image(i as u32, &rec.name, rec.intrinsics, &image, detector);
            if features_dir.is_some() {
                q.features = features_for(&rec.name, i as u32, &image, detector, features_dir);
            }
            Ok(q)
        })
        .collect()
}

/// Localization output. Holds no paths or timings, so equal inputs and seeds
/// give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub seed: u64,
    pub results: Vec<LocalizationResult>,
}

/// Fills per-query errors and threshold flags where ground truth exists.
pub fn annotate(results: &mut [LocalizationResult], truths: &[Option<Pose>], thresholds: &ThresholdSet) {
    for (r, truth) in results.iter_mut().zip(truths) {
        r.error = match (&r.pose, truth) {
            (Some(p), Some(t)) => Some(crate::geometry::pose_error(p, t)),
            _ => None,
        };
        r.passes = match (&r.error, truth) {
            (Some(e), _) => thresholds.passes(e),
            (None, Some(_)) => vec![false; thresholds.len()],
            (None, None) => Vec::new(),
        };
    }
}

pub fn localize_dataset(map: &ReferenceMap, ds: &Dataset, queries: &[Query], config: &PipelineConfig) -> ResultsFile {
    let mut results = localize_all(map, queries, &config.localize, config.seed);
    let truths: Vec<Option<Pose>> = results
        .iter()
        .map(|r| ds.manifest.queries[r.query_id as usize].pose)
        .collect();
    annotate(&mut results, &truths, &config.thresholds);
    ResultsFile {
        seed: config.seed,
        results,
    }
}

/// Scores results against the manifest's ground truth, matching queries by name.
pub fn score(results: &ResultsFile, manifest: &DatasetManifest, thresholds: &ThresholdSet) -> Result<Evaluation, PipelineError> {
    let truths = results
        .results
        .iter()
        .map(|r| {
            let rec = manifest
                .queries
                .iter()
                .find(|q| q.name == r.name)
                .ok_or_else(|| PipelineError::UnknownQuery(r.name.clone()))?;
            rec.pose.ok_or_else(|| PipelineError::MissingTruth(r.name.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate(&results.results, &truths, thresholds))
}

/// Reference image reduction over the dataset's references; ids are manifest indices.
pub fn reduce_dataset(ds: &Dataset, config: &PipelineConfig, features_dir: Option<&Path>) -> Result<ReductionReport, PipelineError> {
    let refs = &ds.manifest.references;
    let features = refs
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let image = load_image(&rec.path)?;
            Ok(features_for(&rec.name, i as u32, &image, &config.build.detector, features_dir))
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    let poses: Vec<Pose> = (0..refs.len()).map(|i| ds.manifest.reference_pose(i)).collect();
    let views: Vec<RirView> = refs
        .iter()
        .enumerate()
        .map(|(i, rec)| RirView {
            id: i as u32,
            pose: &poses[i],
            intrinsics: &rec.intrinsics,
            features: &features[i],
        })
        .collect();
    let report = reduce(&views, &config.rir);
    info!("reduction kept {} of {} references", report.kept.len(), refs.len());
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Reduction then build with hidden point removal.
    Full,
    /// Every reference, with hidden point removal.
    NoRir,
    /// Reduction then build without hidden point removal.
    NoHpr,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoRir, Variant::NoHpr];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRir => "no-rir",
            Variant::NoHpr => "no-hpr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub references: usize,
    pub build_wall_s: f64,
    pub stats: MapStats,
    pub evaluation: Evaluation,
}

/// Builds and evaluates one map per variant. Reduction runs once and is
/// shared by the variants that use it.
pub fn ablate(ds: &Dataset, config: &PipelineConfig, variants: &[Variant]) -> Result<Vec<AblationRow>, PipelineError> {
    let truths = ds.query_truths()?;
    let queries = load_queries(ds, &config.localize.detector, None)?;
    let kept: Option<Vec<usize>> = if variants.iter().any(|v| *v != Variant::NoRir) {
        Some(reduce_dataset(ds, config, None)?.kept.iter().map(|&i| i as usize).collect())
    } else {
        None
    };
    variants
        .iter()
        .map(|&variant| {
            let mut cfg = config.clone();
            let subset = match variant {
                Variant::NoRir => None,
                _ => kept.as_deref(),
            };
            cfg.build.use_hpr = variant != Variant::NoHpr;
            let map = build_map(ds, &cfg, subset, None)?;
            let results = localize_all(&map, &queries, &cfg.localize, cfg.seed);
            let evaluation = evaluate(&results, &truths, &cfg.thresholds);
            info!("{}: recall {:?}", variant.label(), evaluation.recall_percent);
            Ok(AblationRow {
                variant,
                references: map.records.len(),
                build_wall_s: map.metadata.build_wall_s,
                stats: map_statistics(&map),
                evaluation,
            })
        })
        .collect()
}
