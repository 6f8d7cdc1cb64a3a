use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lidarmap(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidarmap"))
        .current_dir(cwd)
        .args(args)
        .env_remove("LIDARMAP_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = lidarmap(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Column index of a header field in a CSV header line.
fn column(header: &str, name: &str) -> usize {
    header.split(',').position(|c| c == name).unwrap_or_else(|| panic!("{name} not in {header}"))
}

#[test]
fn room_build_localize_eval_writes_seven_recall_columns() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--scene", "room", "--out", "room", "--density", "500"]);
    ok(d, &["build-map", "--manifest", "room/manifest.json", "--out", "map.lmap", "--frustum-crop", "8"]);
    ok(d, &["localize", "--map", "map.lmap", "--queries", "room/manifest.json", "--out", "res.json", "--top-k", "20"]);
    ok(d, &["eval", "--results", "res.json", "--truth", "room/manifest.json", "--out", "eval.csv", "--svg", "eval.svg"]);
    let csv = fs::read_to_string(d.join("eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    let recall_cols = lines[0].split(',').filter(|c| c.ends_with("deg") && *c != "mean_rre_deg").count();
    assert_eq!(recall_cols, 7, "{}", lines[0]);
    assert_eq!(lines[1].split(',').count(), lines[0].split(',').count());
    assert!(fs::read_to_string(d.join("eval.svg")).unwrap().contains("<polyline"));
    for out in ["room", "map.lmap", "res.json", "eval.csv"] {
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join(format!("{out}.run.json"))).unwrap()).unwrap();
        assert!(manifest["config"]["build"]["hpr"]["shell"]["s_min"].is_number(), "{out}");
        assert!(!manifest["outputs"].as_array().unwrap().is_empty(), "{out}");
    }
}

#[test]
fn reduce_with_cosine_above_one_drops_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--scene", "wall", "--out", "wall", "--density", "200", "--duplicate", "0,1"]);
    ok(d, &["reduce", "--manifest", "wall/manifest.json", "--report", "none.json", "--cos", "1.01"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("none.json")).unwrap()).unwrap();
    assert_eq!(report["dropped"].as_array().unwrap().len(), 0);
    assert_eq!(report["kept"].as_array().unwrap().len(), 7);
    // At the default thresholds the copies (ids 5 and 6) go, and build-map honours the report.
    ok(d, &["reduce", "--manifest", "wall/manifest.json", "--report", "red.json"]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("red.json")).unwrap()).unwrap();
    let dropped: Vec<u64> = report["dropped"].as_array().unwrap().iter().map(|r| r["id"].as_u64().unwrap()).collect();
    assert!(dropped.contains(&5) && dropped.contains(&6), "{report}");
    let kept = report["kept"].as_array().unwrap().len();
    ok(d, &["build-map", "--manifest", "wall/manifest.json", "--reduction", "red.json", "--out", "m.lmap"]);
    let stats = ok(d, &["map-stats", "--map", "m.lmap"]);
    let rows = stats.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count();
    assert_eq!(rows, kept, "{stats}");
}

#[test]
fn ablate_without_hpr_loses_recall_on_two_floor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--scene", "two-floor", "--out", "tf"]);
    ok(d, &[
        "ablate", "--manifest", "tf/manifest.json", "--skip", "hpr", "--out", "ab.csv", "--frustum-crop", "8", "--top-k", "20",
    ]);
    let csv = fs::read_to_string(d.join("ab.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let col = column(lines[0], "0.1m_10deg");
    let recall = |variant: &str| -> f64 {
        let row = lines.iter().find(|l| l.starts_with(&format!("{variant},"))).unwrap();
        row.split(',').nth(col).unwrap().parse().unwrap()
    };
    assert_eq!(lines.len(), 3, "{csv}");
    assert!(recall("no-hpr") < recall("full"), "{csv}");
}

#[test]
fn rerun_regenerates_outputs_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--scene", "wall", "--out", "wall", "--density", "300"]);
    ok(d, &["build-map", "--manifest", "wall/manifest.json", "--out", "m.lmap", "--seed", "3"]);
    ok(d, &["localize", "--map", "m.lmap", "--queries", "wall/manifest.json", "--out", "r.json", "--seed", "3"]);
    let before = fs::read(d.join("r.json")).unwrap();
    let out = ok(d, &["rerun", "r.json.run.json"]);
    assert!(out.contains("match their recorded digests"), "{out}");
    assert_eq!(fs::read(d.join("r.json")).unwrap(), before);
    ok(d, &["rerun", "m.lmap.run.json"]);
    ok(d, &["rerun", "wall.run.json"]);

    // Change an input so the regenerated map differs from the recorded one.
    let manifest_path = d.join("wall/manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    manifest["references"].as_array_mut().unwrap().pop();
    fs::write(&manifest_path, serde_json::to_string(&manifest).unwrap()).unwrap();
    let out = lidarmap(d, &["rerun", "m.lmap.run.json"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn errors_carry_exit_codes_and_hints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = lidarmap(d, &["build-map", "--manifest", "missing.json", "--out", "m.lmap"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hint:"));

    let out = lidarmap(d, &["synth", "--scene", "wall", "--out", "w", "--set", "nope.x=1"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown config key `nope`"));

    fs::write(d.join("bad.lmap"), b"LMAPxxxx").unwrap();
    let out = lidarmap(d, &["map-stats", "--map", "bad.lmap", "--json-errors"]);
    assert_eq!(out.status.code(), Some(4));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "input");
    assert!(err["hint"].as_str().unwrap().contains("build-map"));

    let out = lidarmap(d, &["localize"]);
    assert_eq!(out.status.code(), Some(2), "usage errors come from the argument parser");
}

#[test]
fn environment_layer_sits_between_file_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), "seed = 11\n[localize]\ntop_k = 4\n").unwrap();
    let run = |extra: &[&str], env: &[(&str, &str)]| -> serde_json::Value {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lidarmap"));
        cmd.current_dir(d)
            .args(["synth", "--scene", "wall", "--out", "w", "--density", "20", "--config", "c.toml"])
            .args(extra);
        for (k, v) in env {
            cmd.env(k, v);
        }
        assert!(cmd.status().unwrap().success());
        serde_json::from_str(&fs::read_to_string(d.join("w.run.json")).unwrap()).unwrap()
    };
    let m = run(&[], &[]);
    assert_eq!((m["config"]["seed"].as_u64(), m["config"]["localize"]["top_k"].as_u64()), (Some(11), Some(4)));
    let m = run(&[], &[("LIDARMAP_LOCALIZE__TOP_K", "6")]);
    assert_eq!(m["config"]["localize"]["top_k"].as_u64(), Some(6));
    let m = run(&["--top-k", "8"], &[("LIDARMAP_LOCALIZE__TOP_K", "6")]);
    assert_eq!(m["config"]["localize"]["top_k"].as_u64(), Some(8));
}
