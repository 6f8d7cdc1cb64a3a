//! Subcommand implementations. Each resolves its configuration, does its work
//! on the configured worker pool and writes a run manifest beside its output.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lidarmap::localize::ThresholdSet;
use lidarmap::pipeline::svg::{line_chart, Series};
use lidarmap::pipeline::{
    ablate, artifact, build_map, load_queries, load_run_manifest, localize_dataset, reduce_dataset, score, with_workers,
    Dataset, PipelineConfig, ResultsFile, RunManifest, RunRecorder, Variant,
};
use lidarmap::refmap::{degrade_reduce_keypoints, degrade_shift_positions, load_map, map_statistics, save_map};
use lidarmap::rir::ReductionReport;
use lidarmap::synth::{generate, scene, scenes::with_duplicates};
use serde_json::json;

use crate::args::*;

/// Where the configuration comes from: layered from flags, or fixed by a rerun.
pub enum Source<'a> {
    Layered(&'a ConfigArgs),
    Fixed(PipelineConfig),
}

impl Source<'_> {
    fn resolve(self) -> Result<PipelineConfig> {
        match self {
            Source::Fixed(c) => Ok(c),
            Source::Layered(args) => {
                Ok(PipelineConfig::layered(args.config.as_deref(), std::env::vars(), &args.overrides())?)
            }
        }
    }
}

/// `<output>.run.json`, next to the output file or directory.
pub fn run_manifest_path(out: &Path) -> PathBuf {
    let s = out.display().to_string();
    PathBuf::from(format!("{}.run.json", s.trim_end_matches('/')))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("{} is not valid", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    Ok(())
}

/// Runs `cmd`; returns the manifest it wrote, if any.
pub fn execute(cmd: &Command, source: Source, raw_args: Vec<String>) -> Result<Option<RunManifest>> {
    let config_args = match cmd {
        Command::Synth(a) => &a.config,
        Command::BuildMap(a) => &a.config,
        Command::Reduce(a) => &a.config,
        Command::MapStats(a) => &a.config,
        Command::Degrade(a) => &a.config,
        Command::Localize(a) => &a.config,
        Command::Eval(a) => &a.config,
        Command::Ablate(a) => &a.config,
        Command::Rerun(a) => return rerun(a).map(Some),
    };
    let source = match source {
        Source::Layered(_) => Source::Layered(config_args),
        fixed => fixed,
    };
    let mut config = source.resolve()?;
    // Command-specific flags are folded into the recorded configuration.
    match cmd {
        Command::Reduce(a) => {
            config.rir.grid_cell_m = a.grid.unwrap_or(config.rir.grid_cell_m);
            config.rir.cos_threshold = a.cos.unwrap_or(config.rir.cos_threshold);
            config.rir.min_inliers = a.inliers.unwrap_or(config.rir.min_inliers);
            config.validate()?;
        }
        Command::BuildMap(a) if a.lenient => config.build.strict = false,
        Command::Eval(a) => {
            if let Some(spec) = &a.thresholds {
                config.thresholds = parse_thresholds(spec)?;
            }
        }
        _ => {}
    }
    let mut rec = RunRecorder::start(cmd.name(), raw_args, config.clone());
    let out = with_workers(config.workers, || -> Result<Option<PathBuf>> {
        match cmd {
            Command::Synth(a) => synth(a, &config, &mut rec).map(Some),
            Command::BuildMap(a) => build(a, &config, &mut rec).map(Some),
            Command::Reduce(a) => reduce(a, &config, &mut rec).map(Some),
            Command::MapStats(a) => stats(a, &mut rec),
            Command::Degrade(a) => degrade(a, &config, &mut rec).map(Some),
            Command::Localize(a) => localize(a, &config, &mut rec).map(Some),
            Command::Eval(a) => eval(a, &config, &mut rec).map(Some),
            Command::Ablate(a) => run_ablation(a, &config, &mut rec).map(Some),
            Command::Rerun(_) => unreachable!("handled above"),
        }
    })?;
    let Some(out) = out else { return Ok(None) };
    let path = run_manifest_path(&out);
    let manifest = rec.finish(&path).with_context(|| format!("cannot write {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(Some(manifest))
}

pub fn parse_thresholds(spec: &str) -> Result<ThresholdSet> {
    if spec == "default" {
        return Ok(ThresholdSet::default());
    }
    let pairs = spec
        .split(',')
        .map(|p| {
            let (t, r) = p
                .split_once(':')
                .with_context(|| format!("threshold `{p}` must look like METERS:DEGREES"))?;
            Ok((t.trim().parse::<f64>()?, r.trim().parse::<f64>()?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ThresholdSet::new(pairs)?)
}

fn synth(a: &SynthArgs, config: &PipelineConfig, rec: &mut RunRecorder) -> Result<PathBuf> {
    let mut spec = scene(&a.scene, config.seed)?;
    if let Some(d) = a.density {
        spec.density = d;
    }
    if let Some(j) = a.jitter {
        spec.jitter_m = j;
    }
    if !a.duplicate.is_empty() {
        if let Some(&bad) = a.duplicate.iter().find(|&&i| i >= spec.references.len()) {
            bail!("--duplicate {bad} is out of range; scene `{}` has {} references", a.scene, spec.references.len());
        }
        spec = with_duplicates(spec, &a.duplicate);
    }
    let data = rec.stage("generate", || generate(&spec))?;
    let manifest = rec.stage("write", || data.write(&a.out))?;
    rec.output(&a.out)?;
    rec.summary(json!({
        "scene": a.scene,
        "points": data.cloud.len(),
        "references": data.references.len(),
        "queries": data.queries.len(),
        "manifest": manifest.display().to_string(),
    }));
    println!("wrote {} ({} points)", manifest.display(), data.cloud.len());
    Ok(a.out.clone())
}

fn build(a: &BuildMapArgs, config: &PipelineConfig, rec: &mut RunRecorder) -> Result<PathBuf> {
    let ds = rec.stage("load", || Dataset::load(&a.manifest))?;
    rec.input(&a.manifest)?;
    rec.input(&ds.manifest.cloud)?;
    let subset: Option<Vec<usize>> = match &a.reduction {
        Some(path) => {
            let report: ReductionReport = read_json(path)?;
            rec.input(path)?;
            let n = ds.manifest.references.len();
            if let Some(bad) = report.kept.iter().find(|&&i| i as usize >= n) {
                bail!("reduction report keeps image {bad} but the manifest has {n} references");
            }
            Some(report.kept.iter().map(|&i| i as usize).collect())
        }
        None => None,
    };
    let map = rec.stage("build", || build_map(&ds, config, subset.as_deref(), a.features_dir.as_deref()))?;
    create_parent(&a.out)?;
    save_map(&map, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    rec.output(&a.out)?;
    let stats = map_statistics(&map);
    rec.summary(json!({
        "records": map.records.len(),
        "map_points": map.map_point_count(),
        "mean_ratio": stats.mean_ratio,
        "skipped": map.metadata.skipped,
        "build_wall_s": map.metadata.build_wall_s,
        "summed_image_s": map.metadata.summed_image_seconds(),
    }));
    println!(
        "{} records, {} map points, mean assignment ratio {:.3}",
        map.records.len(),
        map.map_point_count(),
        stats.mean_ratio
    );
    Ok(a.out.clone())
}

fn reduce(a: &ReduceArgs, config: &PipelineConfig, rec: &mut RunRecorder) -> Result<PathBuf> {
    let ds = rec.stage("load", || Dataset::load(&a.manifest))?;
    rec.input(&a.manifest)?;
    let report = rec.stage("reduce", || reduce_dataset(&ds, config, a.features_dir.as_deref()))?;
    create_parent(&a.report)?;
    write_json(&a.report, &report)?;
    rec.output(&a.report)?;
    rec.summary(json!({"kept": report.kept.len(), "dropped": report.dropped_ids()}));
    println!("kept {}, dropped {:?}", report.kept.len(), report.dropped_ids());
    Ok(a.report.clone())
}

fn stats(a: &MapStatsArgs, rec: &mut RunRecorder) -> Result<Option<PathBuf>> {
    let map = load_map(&a.map).with_context(|| format!("cannot load map {}", a.map.display()))?;
    let stats = map_statistics(&map);
    match &a.out {
        None => {
            stats.write_csv(&mut io::stdout().lock())?;
            Ok(None)
        }
        Some(out) => {
            rec.input(&a.map)?;
            create_parent(out)?;
            let mut buf = Vec::new();
            stats.write_csv(&mut buf)?;
            fs::write(out, buf).with_context(|| format!("cannot write {}", out.display()))?;
            rec.output(out)?;
            rec.summary(json!({"images": stats.images.len(), "mean_ratio": stats.mean_ratio}));
            Ok(Some(out.clone()))
        }
    }
}

fn degrade(a: &DegradeArgs, config: &PipelineConfig, rec: &mut RunRecorder) -> Result<PathBuf> {
    if a.reduce_keypoints.is_none() && a.shift.is_none() {
        bail!("nothing to do: pass --reduce-keypoints FRACTION and/or --shift METERS");
    }
    if let Some(f) = a.reduce_keypoints {
        if !(0.0..1.0).contains(&f) {
            bail!("--reduce-keypoints must be in [0, 1), got {f}");
        }
    }
    if let Some(m) = a.shift {
        if !(m >= 0.0 && m.is_finite()) {
            bail!("--shift must be a finite non-negative distance, got {m}");
        }
    }
    let mut map = load_map(&a.map).with_context(|| format!("cannot load map {}", a.map.display()))?;
    rec.input(&a.map)?;
    if let Some(f) = a.reduce_keypoints {
        map = degrade_reduce_keypoints(&map, f, config.seed);
    }
    if let Some(m) = a.shift {
        map = degrade_shift_positions(&map, m, config.seed);
    }
    create_parent(&a.out)?;
    save_map(&map, &a.out).with_context(|| format!("cannot write {}", a.out.display()))?;
    rec.output(&a.out)?;
    rec.summary(json!({"map_points": map.map_point_count(), "degradations": map.metadata.degradations}));
    Ok(a.out.clone())
}

fn localize(a: &LocalizeArgs, config: &PipelineConfig, rec: &mut RunRecorder) -> Result<PathBuf> {
    let map = rec
        .stage("load_map", || load_map(&a.map))
        .with_context(|| format!("cannot load map {}", a.map.display()))?;
    rec.input(&a.map)?;
    let ds = rec.stage("load_queries", || Dataset::load(&a.queries))?;
    rec.input(&a.queries)?;
    let queries = rec.stage("featurize", || load_queries(&ds, &config.localize.detector, a.features_dir.as_deref()))?;
    let results = rec.stage("localize", || localize_dataset(&map, &ds, &queries, config));
    create_parent(&a.out)?;
    write_json(&a.out, &results)?;
    rec.output(&a.out)?;
    let localized = results.results.iter().filter(|r| r.pose.is_some()).count();
    let mean_query_s = if queries.is_empty() {
        0.0
    } else {
        results.results.iter().map(|r| r.timings.total_s).sum::<f64>() / queries.len() as f64
    };
    rec.summary(json!({"queries": queries.len(), "localized": localized, "mean_query_s": mean_query_s}));
    println!("localized {localized} of {} queries", queries.len());
    Ok(a.out.clone())
}

/// `LABEL=PATH` or a bare path labelled by its file stem.
fn labelled(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let label = path.file_stem().map_or_else(|| spec.to_string(), |s| s.to_string_lossy().into_owned());
            (label, path)
        }
    }
}

fn recall_svg(title: &str, thresholds: &ThresholdSet, series: Vec<Series>) -> String {
    line_chart(title, &thresholds.labels(), "recall (%)", 100.0, &series)
}

fn eval(a: &EvalArgs, config: &PipelineConfig, rec: &mut RunRecorder) -> Result<PathBuf> {
    let truth = lidarmap::manifest::load_manifest(&a.truth)?;
    rec.input(&a.truth)?;
    let mut csv = Vec::new();
    let mut series = Vec::new();
    let mut summary = serde_json::Map::new();
    for (k, spec) in a.results.iter().enumerate() {
        let (label, path) = labelled(spec);
        let results: ResultsFile = read_json(&path)?;
        rec.input(&path)?;
        let e = score(&results, &truth, &config.thresholds)?;
        if k == 0 {
            e.write_csv_header(&mut csv)?;
        }
        e.write_csv_row(&label, &mut csv)?;
        summary.insert(label.clone(), json!(e.recall_percent));
        series.push(Series {
            label,
            values: e.recall_percent,
        });
    }
    create_parent(&a.out)?;
    fs::write(&a.out, &csv).with_context(|| format!("cannot write {}", a.out.display()))?;
    rec.output(&a.out)?;
    io::stdout().write_all(&csv)?;
    if let Some(svg) = &a.svg {
        create_parent(svg)?;
        fs::write(svg, recall_svg("Localization recall", &config.thresholds, series))
            .with_context(|| format!("cannot write {}", svg.display()))?;
        rec.output(svg)?;
    }
    rec.summary(serde_json::Value::Object(summary));
    Ok(a.out.clone())
}

fn run_ablation(a: &AblateArgs, config: &PipelineConfig, rec: &mut RunRecorder) -> Result<PathBuf> {
    let ds = rec.stage("load", || Dataset::load(&a.manifest))?;
    rec.input(&a.manifest)?;
    let skips = if a.skip.is_empty() { vec![Skip::Rir, Skip::Hpr] } else { a.skip.clone() };
    let mut variants = vec![Variant::Full];
    for s in skips {
        let v = match s {
            Skip::Rir => Variant::NoRir,
            Skip::Hpr => Variant::NoHpr,
        };
        if !variants.contains(&v) {
            variants.push(v);
        }
    }
    let rows = rec.stage("ablate", || ablate(&ds, config, &variants))?;
    // Timings stay in the run manifest so the CSV is reproducible.
    let mut csv = Vec::new();
    writeln!(csv, "variant,references,mean_ratio,{},mean_rre_deg,localized,total", config.thresholds.labels().join(","))?;
    for r in &rows {
        let recall: Vec<String> = r.evaluation.recall_percent.iter().map(|v| format!("{v:.2}")).collect();
        let rre = r.evaluation.mean_rre_deg.map_or(String::new(), |v| format!("{v:.6}"));
        writeln!(
            csv,
            "{},{},{:.4},{},{rre},{},{}",
            r.variant.label(),
            r.references,
            r.stats.mean_ratio,
            recall.join(","),
            r.evaluation.localized,
            r.evaluation.total
        )?;
    }
    create_parent(&a.out)?;
    fs::write(&a.out, &csv).with_context(|| format!("cannot write {}", a.out.display()))?;
    rec.output(&a.out)?;
    io::stdout().write_all(&csv)?;
    if let Some(svg) = &a.svg {
        let series = rows
            .iter()
            .map(|r| Series {
                label: r.variant.label().to_string(),
                values: r.evaluation.recall_percent.clone(),
            })
            .collect();
        create_parent(svg)?;
        fs::write(svg, recall_svg("Ablation recall", &config.thresholds, series))
            .with_context(|| format!("cannot write {}", svg.display()))?;
        rec.output(svg)?;
    }
    rec.summary(json!(rows
        .iter()
        .map(|r| json!({
            "variant": r.variant.label(),
            "references": r.references,
            "build_wall_s": r.build_wall_s,
            "recall_percent": r.evaluation.recall_percent,
        }))
        .collect::<Vec<_>>()));
    Ok(a.out.clone())
}

/// Outputs whose digest no longer matches the recorded one.
pub fn changed_outputs(recorded: &RunManifest) -> Vec<String> {
    recorded
        .outputs
        .iter()
        .filter(|o| artifact(Path::new(&o.path)).map_or(true, |now| now.digest != o.digest))
        .map(|o| o.path.clone())
        .collect()
}

fn rerun(a: &RerunArgs) -> Result<RunManifest> {
    let recorded = load_run_manifest(&a.manifest).with_context(|| format!("cannot read run manifest {}", a.manifest.display()))?;
    if recorded.command == "rerun" {
        bail!("{} records a rerun; rerun the original command's manifest instead", a.manifest.display());
    }
    let argv = ["lidarmap".to_string(), recorded.command.clone()]
        .into_iter()
        .chain(recorded.args.iter().cloned());
    let cli = <Cli as clap::Parser>::try_parse_from(argv).context("recorded arguments no longer parse")?;
    if !recorded.cwd.is_empty() {
        std::env::set_current_dir(&recorded.cwd)
            .with_context(|| format!("cannot enter recorded working directory {}", recorded.cwd))?;
    }
    let fresh = execute(&cli.command, Source::Fixed(recorded.config.clone()), recorded.args.clone())?
        .context("the recorded command writes no run manifest")?;
    if !a.no_verify {
        let changed = changed_outputs(&recorded);
        if !changed.is_empty() {
            return Err(crate::report::Mismatch(changed).into());
        }
        println!("all {} outputs match their recorded digests", recorded.outputs.len());
    }
    Ok(fresh)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_specs() {
        assert_eq!(parse_thresholds("default").unwrap(), ThresholdSet::default());
        assert_eq!(parse_thresholds("0.1:10, 0.25:10").unwrap().pairs(), &[(0.1, 10.0), (0.25, 10.0)]);
        assert!(parse_thresholds("0.1").is_err());
        assert!(parse_thresholds("0.5:10,0.1:10").is_err());
    }

    #[test]
    fn labels_default_to_file_stem() {
        assert_eq!(labelled("clean=out/r.json"), ("clean".to_string(), PathBuf::from("out/r.json")));
        assert_eq!(labelled("out/shift.json"), ("shift".to_string(), PathBuf::from("out/shift.json")));
    }

    #[test]
    fn run_manifest_sits_beside_the_output() {
        assert_eq!(run_manifest_path(Path::new("a/map.lmap")), PathBuf::from("a/map.lmap.run.json"));
        assert_eq!(run_manifest_path(Path::new("data/room/")), PathBuf::from("data/room.run.json"));
    }
}
