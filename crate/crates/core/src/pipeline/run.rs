//! Run manifests: what a command was asked to do, with which configuration,
//! what it read and wrote, and how long each stage took.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::refmap::{read_map, write_map, MAGIC};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub bytes: u64,
    /// CRC-32 (hex) of the content. For map files the build timings and start
    /// time are zeroed first, so a rebuild with the same inputs digests the same.
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    /// Working directory the arguments are relative to.
    pub cwd: String,
    /// Arguments after the subcommand, as given.
    pub args: Vec<String>,
    /// The effective configuration after layering.
    pub config: PipelineConfig,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_unix_s: f64,
    pub wall_s: f64,
    pub stages: Vec<Stage>,
    /// Command-specific results, for instance recall or dropped images.
    pub summary: serde_json::Value,
}

fn content_bytes(path: &Path) -> io::Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if !bytes.starts_with(MAGIC) {
        return Ok(bytes);
    }
    let Ok(mut map) = read_map(&mut bytes.as_slice()) else {
        return Ok(bytes);
    };
    map.metadata.timings.iter_mut().for_each(|t| {
        t.detect_s = 0.0;
        t.hpr_s = 0.0;
        t.render_s = 0.0;
        t.assign_s = 0.0;
        t.cpu_s = 0.0;
        t.total_s = 0.0;
    });
    map.metadata.started_unix_s = 0.0;
    map.metadata.build_wall_s = 0.0;
    let mut out = Vec::new();
    write_map(&map, &mut out).map_err(io::Error::other)?;
    // Drop the trailing checksum: a CRC over data plus its own CRC is constant.
    out.truncate(out.len().saturating_sub(4));
    Ok(out)
}

/// Describes one file, or every file below a directory in path order.
pub fn artifacts(path: &Path) -> io::Result<Vec<Artifact>> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, &mut files)?;
        files.sort();
        return files.iter().map(|f| artifact(f)).collect();
    }
    Ok(vec![artifact(path)?])
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn artifact(path: &Path) -> io::Result<Artifact> {
    let content = content_bytes(path)?;
    Ok(Artifact {
        path: path.display().to_string(),
        bytes: fs::metadata(path)?.len(),
        digest: format!("{:08x}", crc32fast::hash(&content)),
    })
}

/// Accumulates a manifest while a command runs.
pub struct RunRecorder {
    manifest: RunManifest,
    started: Instant,
}

impl RunRecorder {
    pub fn start(command: &str, args: Vec<String>, config: PipelineConfig) -> Self {
        let started_unix_s = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            manifest: RunManifest {
                tool: concat!("lidarmap ", env!("CARGO_PKG_VERSION")).to_string(),
                command: command.to_string(),
                cwd: std::env::current_dir().map(|d| d.display().to_string()).unwrap_or_default(),
                args,
                config,
                inputs: Vec::new(),
                outputs: Vec::new(),
                started_unix_s,
                wall_s: 0.0,
                stages: Vec::new(),
                summary: serde_json::Value::Null,
            },
            started: Instant::now(),
        }
    }

    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.manifest.stages.push(Stage {
            name: name.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        self.manifest.inputs.extend(artifacts(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> io::Result<()> {
        self.manifest.outputs.extend(artifacts(path)?);
        Ok(())
    }

    pub fn summary(&mut self, value: serde_json::Value) {
        self.manifest.summary = value;
    }

    /// Stamps the wall time and writes the manifest as pretty JSON.
    pub fn finish(mut self, path: &Path) -> io::Result<RunManifest> {
        self.manifest.wall_s = self.started.elapsed().as_secs_f64();
        fs::write(path, serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(self.manifest)
    }
}

pub fn load_run_manifest(path: &Path) -> io::Result<RunManifest> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
