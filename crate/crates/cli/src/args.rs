//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "lidarmap",
    version,
    about = "Build LiDAR-backed visual reference maps and localize query images against them",
    after_help = "Configuration is layered: defaults < --config file (or LIDARMAP_CONFIG) < \
                  LIDARMAP_<SECTION>__<FIELD> environment variables < --set and dedicated flags.\n\
                  Every run writes <output>.run.json next to its main output."
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Print errors as one JSON object on standard error.
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: cloud.ply, images/, manifest.json, scene.json.
    Synth(SynthArgs),
    /// Build a reference map from a dataset manifest.
    BuildMap(BuildMapArgs),
    /// Reference image reduction; writes a JSON report of kept and dropped images.
    Reduce(ReduceArgs),
    /// Per-image keypoint and 2D-to-3D assignment counts as CSV.
    MapStats(MapStatsArgs),
    /// Remove keypoints or shift 3D positions of a map, for sensitivity experiments.
    Degrade(DegradeArgs),
    /// Localize the queries of a manifest against a map.
    Localize(LocalizeArgs),
    /// Recall table (CSV, optional SVG) for one or more result files.
    Eval(EvalArgs),
    /// Compare the full pipeline with reduction or hidden point removal skipped.
    Ablate(AblateArgs),
    /// Re-execute a run from its run manifest and check the outputs match.
    Rerun(RerunArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::BuildMap(_) => "build-map",
            Command::Reduce(_) => "reduce",
            Command::MapStats(_) => "map-stats",
            Command::Degrade(_) => "degrade",
            Command::Localize(_) => "localize",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Rerun(_) => "rerun",
        }
    }
}

/// Configuration options shared by every pipeline command.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML or JSON configuration file.
    #[arg(long, value_name = "FILE", env = "LIDARMAP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. --set localize.top_k=20 (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub sets: Vec<String>,
    /// Seed for every randomized stage.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Inner shell radius for hidden point removal.
    #[arg(long)]
    pub shell_min: Option<f64>,
    /// Outer shell radius for hidden point removal.
    #[arg(long)]
    pub shell_max: Option<f64>,
    /// Flip radius as a multiple of the outer shell radius.
    #[arg(long)]
    pub flip_radius_factor: Option<f64>,
    /// Treat points further than this many meters from the camera as hidden.
    #[arg(long)]
    pub max_range: Option<f64>,
    /// Only run hidden point removal on points projecting within this many pixels of the image.
    #[arg(long, value_name = "PX")]
    pub frustum_crop: Option<f64>,
    /// Build without hidden point removal.
    #[arg(long)]
    pub no_hpr: bool,
    /// Reference images retrieved per query.
    #[arg(long)]
    pub top_k: Option<usize>,
}

impl ConfigArgs {
    /// The dedicated flags as `path=value` overrides, applied after `--set`.
    pub fn overrides(&self) -> Vec<String> {
        let mut out = self.sets.clone();
        let mut push = |path: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push(format!("{path}={v}"));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("workers", self.workers.map(|v| v.to_string()));
        push("build.hpr.shell.s_min", self.shell_min.map(|v| v.to_string()));
        push("build.hpr.shell.s_max", self.shell_max.map(|v| v.to_string()));
        push("build.hpr.flip_radius_factor", self.flip_radius_factor.map(|v| v.to_string()));
        push("build.hpr.max_range", self.max_range.map(|v| v.to_string()));
        push("build.frustum_crop_px", self.frustum_crop.map(|v| v.to_string()));
        push("build.use_hpr", self.no_hpr.then(|| "false".to_string()));
        push("localize.top_k", self.top_k.map(|v| v.to_string()));
        out
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene name: wall, two-walls, room, two-floor or park.
    #[arg(long)]
    pub scene: String,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Surface point density in points per square meter (default: the scene's own).
    #[arg(long)]
    pub density: Option<f64>,
    /// Isotropic Gaussian jitter of cloud points, meters.
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Append an exact copy of these reference views (comma separated indices).
    #[arg(long, value_delimiter = ',')]
    pub duplicate: Vec<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct BuildMapArgs {
    /// Dataset manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output map file.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory of <image name>.feat containers replacing built-in detection.
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    /// Only build the images kept by this reduction report.
    #[arg(long)]
    pub reduction: Option<PathBuf>,
    /// Skip images that fail instead of aborting.
    #[arg(long)]
    pub lenient: bool,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReduceArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output report JSON.
    #[arg(long)]
    pub report: PathBuf,
    /// Grid cell size, meters.
    #[arg(long)]
    pub grid: Option<f64>,
    /// Cosine threshold on viewing directions.
    #[arg(long)]
    pub cos: Option<f64>,
    /// Minimum epipolar-inlier matches.
    #[arg(long)]
    pub inliers: Option<usize>,
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct MapStatsArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Output CSV; standard output when absent (no run manifest is written then).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub map: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Remove this fraction of map points from every image.
    #[arg(long, value_name = "FRACTION")]
    pub reduce_keypoints: Option<f64>,
    /// Shift map points by this many meters along one world axis each.
    #[arg(long, value_name = "METERS")]
    pub shift: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub map: PathBuf,
    /// Manifest whose queries are localized.
    #[arg(long)]
    pub queries: PathBuf,
    /// Output results JSON.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub features_dir: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results JSON, optionally labelled as LABEL=PATH (repeatable).
    #[arg(long, required = true)]
    pub results: Vec<String>,
    /// Manifest with ground-truth query poses.
    #[arg(long)]
    pub truth: PathBuf,
    /// `default`, or pairs like 0.1:10,0.25:10 (meters:degrees).
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Also draw recall per threshold as an SVG line chart.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Skip {
    Hpr,
    Rir,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Variants to compare against the full pipeline (default: both).
    #[arg(long, value_enum)]
    pub skip: Vec<Skip>,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// A `.run.json` written by an earlier command.
    pub manifest: PathBuf,
    /// Re-execute without comparing output digests.
    #[arg(long)]
    pub no_verify: bool,
}
