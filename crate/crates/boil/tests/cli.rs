//! End-to-end checks of the `boil` binary: exit codes, determinism, and
//! output schemas.

use std::path::Path;
use std::process::{Command, Output};

fn boil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boil"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

fn generate_env(dir: &Path, kind: &str, out: &str) {
    assert_ok(&boil(dir, &["env", "generate", "--kind", kind, "--seed", "11", "--out", out]));
}

#[test]
fn env_generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "a.json");
    generate_env(tmp.path(), "small", "b.json");
    assert_eq!(read(tmp.path(), "a.json"), read(tmp.path(), "b.json"));
    assert_ok(&boil(tmp.path(), &["env", "validate", "a.json"]));
}

#[test]
fn env_generate_large_is_70_by_70_without_walls() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "large", "large.json");
    let text = std::fs::read_to_string(tmp.path().join("large.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["width"], 70);
    assert_eq!(v["height"], 70);
    let walls = v["cells"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["kind"] == "Wall")
        .count();
    assert_eq!(walls, 0);
}

#[test]
fn env_validate_rejects_corrupted_file_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    let text = std::fs::read_to_string(tmp.path().join("env.json")).unwrap();
    // corrupt a marker id out of range
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["markers"][0] = serde_json::json!(999_999);
    std::fs::write(tmp.path().join("bad.json"), v.to_string()).unwrap();
    let out = boil(tmp.path(), &["env", "validate", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("marker"), "diagnostic names the invariant: {stderr}");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = boil(tmp.path(), &["env", "generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn optimize_is_deterministic_and_writes_trace() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    let args = [
        "optimize", "--env", "env.json", "--steps", "5", "--seed", "4", "--out", "d1.json",
    ];
    assert_ok(&boil(tmp.path(), &args));
    let mut args2 = args;
    args2[8] = "d2.json";
    assert_ok(&boil(tmp.path(), &args2));
    let d1 = read(tmp.path(), "d1.json");
    assert_eq!(d1, read(tmp.path(), "d2.json"));
    let trace = String::from_utf8(read(tmp.path(), "d1.json.trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iteration,loss,accepted_best"));
    assert_eq!(lines.count(), 6); // initial iterate + 5 steps
    // manifest written beside the distribution
    let manifest = String::from_utf8(read(tmp.path(), "d1.json.manifest.json")).unwrap();
    assert!(manifest.contains("\"manifest/1\""));
}

#[test]
fn optimize_single_step_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    assert_ok(&boil(
        tmp.path(),
        &["optimize", "--env", "env.json", "--steps", "1", "--seed", "0", "--out", "d.json"],
    ));
}

#[test]
fn patrolling_requires_patrol_nodes() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    let out = boil(
        tmp.path(),
        &[
            "optimize", "--env", "env.json", "--loss", "patrolling", "--steps", "1", "--seed",
            "0", "--out", "d.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_sample_without_dist_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    let out = boil(
        tmp.path(),
        &[
            "simulate", "--env", "env.json", "--strategy", "sample", "--agents", "2", "--steps",
            "10", "--runs", "1", "--seed", "0", "--out", "sim",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn simulate_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    for out in ["s1", "s2"] {
        assert_ok(&boil(
            tmp.path(),
            &[
                "simulate", "--env", "env.json", "--strategy", "frontier", "--agents", "2",
                "--steps", "50", "--runs", "2", "--seed", "9", "--out", out,
            ],
        ));
    }
    for name in ["trace_run0.csv", "trace_run1.csv", "summary_run0.csv", "markers_run1.csv"] {
        assert_eq!(
            read(tmp.path(), &format!("s1/{name}")),
            read(tmp.path(), &format!("s2/{name}")),
            "{name} differs between reruns"
        );
    }
}

#[test]
fn metrics_reports_have_expected_schemas() {
    let tmp = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    assert_ok(&boil(
        tmp.path(),
        &[
            "optimize", "--env", "env.json", "--steps", "3", "--seed", "1", "--out", "dist.json",
        ],
    ));
    assert_ok(&boil(
        tmp.path(),
        &[
            "simulate", "--env", "env.json", "--strategy", "optimal", "--agents", "2", "--steps",
            "100", "--runs", "2", "--seed", "5", "--dist", "dist.json", "--out", "sim",
        ],
    ));
    let cases = [
        ("tv", "tv_series.csv", "step,tv,strategy,run"),
        ("hist", "hist.csv", "strategy,bin_lo,bin_hi,mean,min,max"),
        ("markers", "markers.csv", "strategy,marker,mean,var"),
        (
            "bounds",
            "bounds.csv",
            "run,node,lower,observed,upper,cross_term,band,excluded,violation",
        ),
    ];
    for (report, file, header) in cases {
        let out_dir = format!("m_{report}");
        assert_ok(&boil(
            tmp.path(),
            &[
                "metrics", "--traces", "sim", "--dist", "dist.json", "--report", report, "--out",
                &out_dir,
            ],
        ));
        let text = String::from_utf8(read(tmp.path(), &format!("{out_dir}/{file}"))).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file} header");
        assert!(text.lines().count() > 1, "{file} has rows");
    }
}

#[test]
fn visibility_cache_respects_no_cache_and_cache_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    generate_env(tmp.path(), "small", "env.json");
    let out = Command::new(env!("CARGO_BIN_EXE_boil"))
        .current_dir(tmp.path())
        .env("BOIL_CACHE_DIR", cache.path())
        .args(["optimize", "--env", "env.json", "--steps", "1", "--seed", "0", "--out", "d.json"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cached: Vec<_> = std::fs::read_dir(cache.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("vis_"))
        .collect();
    assert_eq!(cached.len(), 1, "cache file lands in BOIL_CACHE_DIR");
    // --no-cache leaves the working directory free of cache files
    assert_ok(&boil(
        tmp.path(),
        &[
            "optimize", "--env", "env.json", "--steps", "1", "--seed", "0", "--no-cache",
            "--out", "d2.json",
        ],
    ));
    let local: Vec<_> = std::fs::read_dir(tmp.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("vis_"))
        .collect();
    assert!(local.is_empty(), "--no-cache must not write cache files");
}
