//! Dataset manifest: where the registered cloud lives plus every posed reference
//! and query image. Paths inside the manifest are relative to the manifest file.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, GeometryError, Pose};

/// Quaternions further than this from unit norm are rejected outright.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image `{image}`: {source}")]
    Geometry {
        image: String,
        #[source]
        source: GeometryError,
    },
    #[error("image `{0}`: reference images need both `q` and `t`")]
    MissingPose(String),
    #[error("duplicate image name `{0}`")]
    DuplicateImage(String),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntrinsicsSource {
    Inline(CameraIntrinsics),
    File(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub intrinsics: IntrinsicsSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<[f64; 3]>,
}

/// On-disk JSON shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub cloud: String,
    pub references: Vec<ManifestEntry>,
    #[serde(default)]
    pub queries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    /// Image name as written in the manifest; unique across the dataset.
    pub name: String,
    pub path: PathBuf,
    pub intrinsics: CameraIntrinsics,
    /// Always present for references; optional ground truth for queries.
    pub pose: Option<Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub cloud: PathBuf,
    pub references: Vec<ImageRecord>,
    pub queries: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn reference_pose(&self, i: usize) -> Pose {
        self.references[i].pose.expect("validated reference pose")
    }
}

fn read_to_string(path: &Path) -> Result<String, ManifestError> {
    fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn require_file(path: PathBuf) -> Result<PathBuf, ManifestError> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(ManifestError::MissingFile(path))
    }
}

fn resolve_entry(entry: &ManifestEntry, root: &Path, need_pose: bool) -> Result<ImageRecord, ManifestError> {
    let path = require_file(root.join(&entry.image))?;
    let intrinsics = match &entry.intrinsics {
        IntrinsicsSource::Inline(intr) => *intr,
        IntrinsicsSource::File(rel) => {
            let intr_path = require_file(root.join(rel))?;
            serde_json::from_str(&read_to_string(&intr_path)?)?
        }
    };
    intrinsics.validate().map_err(|source| ManifestError::Geometry {
        image: entry.image.clone(),
        source,
    })?;
    let pose = match (entry.q, entry.t) {
        (Some(q), Some(t)) => Some(Pose::from_wxyz(q, t, QUATERNION_NORM_TOLERANCE).map_err(|source| {
            ManifestError::Geometry {
                image: entry.image.clone(),
                source,
            }
        })?),
        (None, None) if !need_pose => None,
        _ => return Err(ManifestError::MissingPose(entry.image.clone())),
    };
    Ok(ImageRecord {
        name: entry.image.clone(),
        path,
        intrinsics,
        pose,
    })
}

/// Validates a parsed manifest against the files below `root`.
pub fn resolve_manifest(file: &ManifestFile, root: &Path) -> Result<DatasetManifest, ManifestError> {
    let mut seen = HashSet::new();
    for entry in file.references.iter().chain(&file.queries) {
        if !seen.insert(entry.image.as_str()) {
            return Err(ManifestError::DuplicateImage(entry.image.clone()));
        }
    }
    let cloud = require_file(root.join(&file.cloud))?;
    let references = file
        .references
        .iter()
        .map(|e| resolve_entry(e, root, true))
        .collect::<Result<Vec<_>, _>>()?;
    let queries = file
        .queries
        .iter()
        .map(|e| resolve_entry(e, root, false))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        cloud,
        references,
        queries,
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ManifestError> {
    let path = path.as_ref();
    let file: ManifestFile = serde_json::from_str(&read_to_string(path)?)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    resolve_manifest(&file, &root)
}

pub fn entry_for(name: &str, intrinsics: &CameraIntrinsics, pose: Option<&Pose>) -> ManifestEntry {
    ManifestEntry {
        image: name.to_string(),
        intrinsics: IntrinsicsSource::Inline(*intrinsics),
        q: pose.map(Pose::wxyz),
        t: pose.map(|p| [p.translation().x, p.translation().y, p.translation().z]),
    }
}
