//! Error classification, remediation hints and exit codes.

use std::fmt;
use std::io;

use lidarmap::features::ContainerError;
use lidarmap::manifest::ManifestError;
use lidarmap::pipeline::{ConfigError, PipelineError};
use lidarmap::pointcloud::PlyError;
use lidarmap::refmap::MapFormatError;
use lidarmap::synth::SynthError;
use serde::Serialize;

/// Rerun outputs that differ from their recorded digests.
#[derive(Debug)]
pub struct Mismatch(pub Vec<String>);

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "regenerated outputs differ from the run manifest: {}", self.0.join(", "))
    }
}

impl std::error::Error for Mismatch {}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INPUT: i32 = 4;
pub const EXIT_MISMATCH: i32 = 5;

#[derive(Debug, Serialize)]
pub struct Report {
    pub kind: &'static str,
    pub message: String,
    pub causes: Vec<String>,
    pub hint: Option<String>,
    pub exit_code: i32,
}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<(&'static str, i32, String)> {
    if let Some(c) = e.downcast_ref::<ConfigError>() {
        let hint = match c {
            ConfigError::UnknownKey { .. } => "check the key spelling; docs/formats.md lists every configuration field",
            ConfigError::Malformed(_) => "write overrides as --set section.field=value",
            _ => "fix the value or drop the override to use the default",
        };
        return Some(("config", EXIT_CONFIG, hint.into()));
    }
    if let Some(m) = e.downcast_ref::<ManifestError>() {
        let hint = match m {
            ManifestError::MissingFile(_) => "paths in a manifest are relative to the manifest's own directory",
            ManifestError::Geometry { .. } => "quaternions are (w, x, y, z) and must have unit norm within 1e-3",
            _ => "see docs/formats.md for the manifest schema",
        };
        return Some(("input", EXIT_INPUT, hint.into()));
    }
    if e.downcast_ref::<MapFormatError>().is_some() {
        return Some(("input", EXIT_INPUT, "the map file is damaged or from another version; rebuild it with build-map".into()));
    }
    if e.downcast_ref::<PlyError>().is_some() {
        return Some((
            "input",
            EXIT_INPUT,
            "only ASCII and binary little-endian PLY with float x, y, z are read".into(),
        ));
    }
    if e.downcast_ref::<ContainerError>().is_some() {
        return Some(("input", EXIT_INPUT, "re-export the feature container; docs/formats.md describes its layout".into()));
    }
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        let hint = match p {
            PipelineError::MissingTruth(_) => "eval needs queries with `q` and `t` in the truth manifest",
            PipelineError::UnknownQuery(_) => "pass the manifest the results were produced from",
            _ => return None,
        };
        return Some(("input", EXIT_INPUT, hint.into()));
    }
    if let Some(SynthError::UnknownScene(_)) = e.downcast_ref::<SynthError>() {
        return Some(("input", EXIT_INPUT, "pass one of the listed scene names to --scene".into()));
    }
    if e.downcast_ref::<Mismatch>().is_some() {
        return Some((
            "mismatch",
            EXIT_MISMATCH,
            "the inputs changed since the original run, or a stage is not deterministic".into(),
        ));
    }
    if let Some(io) = e.downcast_ref::<io::Error>() {
        if io.kind() == io::ErrorKind::NotFound {
            return Some(("input", EXIT_INPUT, "check that the path exists".into()));
        }
    }
    None
}

pub fn report(err: &anyhow::Error) -> Report {
    let mut found = None;
    for cause in err.chain() {
        if let Some(c) = classify(cause) {
            found = Some(c);
            break;
        }
    }
    let (kind, exit_code, hint) = match found {
        Some((k, c, h)) => (k, c, Some(h)),
        None => ("failure", EXIT_FAILURE, None),
    };
    Report {
        kind,
        message: err.to_string(),
        causes: err.chain().skip(1).map(|c| c.to_string()).collect(),
        hint,
        exit_code,
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "error: {}", self.message)?;
        for c in &self.causes {
            writeln!(f, "  caused by: {c}")?;
        }
        if let Some(h) = &self.hint {
            writeln!(f, "  hint: {h}")?;
        }
        Ok(())
    }
}
