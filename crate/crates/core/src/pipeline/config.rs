//! One configuration for every stage, layered file < environment < flags.
//!
//! Overrides address fields by path. On the command line a path is dotted
//! (`--set localize.top_k=20`); in the environment levels are joined by a
//! double underscore after the `LIDARMAP_` prefix (`LIDARMAP_LOCALIZE__TOP_K=20`).
//! Values are parsed as JSON and fall back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::localize::{LocalizeConfig, ThresholdSet};
use crate::refmap::BuildConfig;
use crate::rir::RirConfig;

pub const ENV_PREFIX: &str = "LIDARMAP_";
/// Names a config file when `--config` is absent.
pub const ENV_CONFIG_FILE: &str = "LIDARMAP_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds every randomized stage.
    pub seed: u64,
    /// Size of the worker pool; `None` uses every core.
    pub workers: Option<usize>,
    pub build: BuildConfig,
    pub rir: RirConfig,
    pub localize: LocalizeConfig,
    pub thresholds: ThresholdSet,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            workers: None,
            build: BuildConfig::default(),
            rir: RirConfig::default(),
            localize: LocalizeConfig::default(),
            thresholds: ThresholdSet::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("unknown config key `{key}` (from {origin}); keys at this level: {valid}")]
    UnknownKey { key: String, origin: String, valid: String },
    #[error("override `{0}` must have the form section.field=value")]
    Malformed(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Where an override came from, for error messages.
fn describe(origin: &str, path: &[String]) -> String {
    format!("{origin} {}", path.join("."))
}

fn keys(map: &Map<String, Value>) -> String {
    map.keys().cloned().collect::<Vec<_>>().join(", ")
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Replaces the leaf at `path`; every key on the way must already exist.
fn set_path(root: &mut Value, path: &[String], value: Value, origin: &str) -> Result<(), ConfigError> {
    let mut node = root;
    for (depth, key) in path.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(ConfigError::UnknownKey {
                key: path[..=depth].join("."),
                origin: describe(origin, path),
                valid: String::new(),
            });
        };
        let valid = keys(map);
        node = map.get_mut(key).ok_or_else(|| ConfigError::UnknownKey {
            key: path[..=depth].join("."),
            origin: describe(origin, path),
            valid,
        })?;
    }
    *node = value;
    Ok(())
}

/// Overlays `over` onto `base`, recursing into objects present in both.
fn merge(base: &mut Value, over: Value, path: &mut Vec<String>, origin: &str) -> Result<(), ConfigError> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                path.push(k.clone());
                let valid = keys(b);
                let slot = b.get_mut(&k).ok_or_else(|| ConfigError::UnknownKey {
                    key: path.join("."),
                    origin: origin.to_string(),
                    valid,
                })?;
                merge(slot, v, path, origin)?;
                path.pop();
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Reads a `.toml` or `.json` config file into a JSON tree.
fn read_file(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |message: String| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str::<Value>(&text).map_err(|e| parse_err(e.to_string())),
        Some("json") => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string())),
        _ => Err(parse_err("expected a .toml or .json extension".into())),
    }
}

impl PipelineConfig {
    /// Builds the effective configuration. `env` is scanned for `LIDARMAP_*`
    /// keys (other than the config-file variable); `sets` are `path=value` flags.
    pub fn layered<I>(file: Option<&Path>, env: I, sets: &[String]) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut tree = serde_json::to_value(Self::default()).expect("config serializes");
        if let Some(path) = file {
            let over = read_file(path)?;
            merge(&mut tree, over, &mut Vec::new(), &format!("file {}", path.display()))?;
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != ENV_CONFIG_FILE)
            .collect();
        env.sort();
        for (key, raw) in env {
            let path: Vec<String> = key[ENV_PREFIX.len()..].to_lowercase().split("__").map(str::to_string).collect();
            set_path(&mut tree, &path, parse_value(&raw), &format!("environment {key}"))?;
        }
        for set in sets {
            let (path, raw) = set.split_once('=').ok_or_else(|| ConfigError::Malformed(set.clone()))?;
            if path.is_empty() {
                return Err(ConfigError::Malformed(set.clone()));
            }
            let path: Vec<String> = path.split('.').map(str::to_string).collect();
            set_path(&mut tree, &path, parse_value(raw), "flag --set")?;
        }
        let config: Self = serde_json::from_value(tree).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Err(e) = self.build.hpr.validate() {
            return invalid(e.to_string());
        }
        let v = &self.build.virtual_image;
        if !(v.splat_radius >= 0.0 && v.search_radius >= 0.0 && v.splat_radius.is_finite() && v.search_radius.is_finite()) {
            return invalid("build.virtual_image radii must be finite and non-negative".into());
        }
        if self.workers == Some(0) {
            return invalid("workers must be at least 1".into());
        }
        let l = &self.localize;
        if l.top_k == 0 {
            return invalid("localize.top_k must be at least 1".into());
        }
        if !(l.match_ratio > 0.0 && l.match_ratio <= 1.0) {
            return invalid(format!("localize.match_ratio must be in (0, 1], got {}", l.match_ratio));
        }
        let r = &l.ransac;
        if !(r.threshold_px > 0.0 && r.confidence > 0.0 && r.confidence < 1.0 && r.max_iters > 0) {
            return invalid("localize.ransac needs threshold_px > 0, 0 < confidence < 1, max_iters > 0".into());
        }
        if !(self.rir.grid_cell_m > 0.0) {
            return invalid("rir.grid_cell_m must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(PipelineConfig::layered(None, Vec::new(), &[]).unwrap(), c);
    }

    #[test]
    fn flags_beat_environment_beat_file() {
        let mut file = tempfile::Builder::new().suffix(".toml").tempfile().unwrap();
        writeln!(file, "seed = 5\n[localize]\ntop_k = 3\nmatch_ratio = 0.7\n[build.hpr.shell]\ns_min = 0.5").unwrap();
        let c = PipelineConfig::layered(
            Some(file.path()),
            env(&[("LIDARMAP_LOCALIZE__TOP_K", "4"), ("LIDARMAP_SEED", "6"), ("HOME", "/x")]),
            &["localize.top_k=20".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 6);
        assert_eq!(c.localize.top_k, 20);
        assert_eq!(c.localize.match_ratio, 0.7);
        assert_eq!(c.build.hpr.shell.s_min, 0.5);
        assert_eq!(c.build.hpr.shell.s_max, 1.0);
    }

    #[test]
    fn json_file_and_optional_fields() {
        let mut file = tempfile::Builder::new().suffix(".json").tempfile().unwrap();
        write!(file, r#"{{"build": {{"frustum_crop_px": 8.0}}, "workers": 2}}"#).unwrap();
        let c = PipelineConfig::layered(Some(file.path()), Vec::new(), &["build.hpr.max_range=30".into()]).unwrap();
        assert_eq!(c.build.frustum_crop_px, Some(8.0));
        assert_eq!(c.build.hpr.max_range, Some(30.0));
        assert_eq!(c.workers, Some(2));
    }

    #[test]
    fn thresholds_can_be_replaced_whole() {
        let c = PipelineConfig::layered(None, Vec::new(), &["thresholds=[[0.1,10],[0.5,10]]".into()]).unwrap();
        assert_eq!(c.thresholds.pairs(), &[(0.1, 10.0), (0.5, 10.0)]);
        let bad = PipelineConfig::layered(None, Vec::new(), &["thresholds=[[0.5,10],[0.1,10]]".into()]);
        assert!(matches!(bad, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn unknown_keys_name_the_valid_ones() {
        let e = PipelineConfig::layered(None, Vec::new(), &["localize.topk=3".into()]).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("localize.topk") && msg.contains("top_k"), "{msg}");
        let e = PipelineConfig::layered(None, env(&[("LIDARMAP_NOPE", "1")]), &[]).unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { .. }));
        assert!(matches!(
            PipelineConfig::layered(None, Vec::new(), &["seed".into()]),
            Err(ConfigError::Malformed(_))
        ));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for set in ["seed=\"x\"", "build.hpr.shell.s_min=2", "workers=0", "localize.top_k=0"] {
            assert!(PipelineConfig::layered(None, Vec::new(), &[set.into()]).is_err(), "{set}");
        }
    }

    #[test]
    fn config_file_variable_is_not_a_key() {
        let c = PipelineConfig::layered(None, env(&[(ENV_CONFIG_FILE, "x.toml")]), &[]).unwrap();
        assert_eq!(c, PipelineConfig::default());
    }
}
