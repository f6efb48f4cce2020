use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tunnelmag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tunnelmag"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// A still 96x96 scene with one ring. The zero-amplitude squeeze only
/// places the prism targets.
const STILL_SCENE: &str = r#"
[input]
manifest_path = "scene/manifest.csv"

[pyramid]
n_orientations = 4

[[rings]]
ring_id = "R1"
prism_a_px = [48.0, 16.0]
prism_b_px = [48.0, 80.0]
prism_separation_mm = 640.0

[rings.profile]
center_px = [48.0, 48.0]
semi_axes = [30.0, 30.0]
m = 6

[output]
dir = "out"

[synth]
width = 96
height = 96
n_frames = 8
frame_interval_s = 60.0
rng_seed = 3

[[synth.motion]]
kind = "ring_squeeze"
amplitude_mm = 0.0
scale_mm_per_px = 10.0
center_px = [48.0, 48.0]
radius_px = 32.0
falloff_px = 12.0
settlement = false
frequency_hz = 0.0
n_samples = 6
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_ok(stage: &str, config: &Path, out: Option<&Path>) {
    let mut args = vec![stage, "-c", config.to_str().unwrap(), "--threads", "1"];
    if let Some(o) = out {
        args.extend(["-o", o.to_str().unwrap()]);
    }
    let o = tunnelmag(&args);
    assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn negative_alpha_fails_validation_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &STILL_SCENE.replace("[output]", "[magnify]\nalpha = -1.0\n\n[output]"));
    let o = tunnelmag(&["full", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("magnify.alpha"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = tunnelmag(&["warp", "-c", "x.toml"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("warp"));
}

#[test]
fn still_scene_has_no_convergence_and_staged_runs_match_full() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), STILL_SCENE);
    run_ok("synth", &cfg, None);
    run_ok("full", &cfg, None);

    let full = tmp.path().join("out");
    let csv = fs::read_to_string(full.join("convergence.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let last: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(last.abs() < 1e-3, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 8);
    let r = report(&full);
    assert_eq!(r["success"], true);
    assert_eq!(r["frames"]["flow_fields"], 8);

    let staged = tmp.path().join("staged");
    for stage in ["ingest", "magnify", "flow", "analyze"] {
        run_ok(stage, &cfg, Some(&staged));
    }
    for name in ["convergence.csv", "deformation_map_R1.csv"] {
        assert_eq!(fs::read(full.join(name)).unwrap(), fs::read(staged.join(name)).unwrap(), "{name}");
    }
    let flow = |d: &Path| fs::read(d.join("flow").join("flow_00007.pflo")).unwrap();
    assert_eq!(flow(&full), flow(&staged));
}

#[test]
fn missing_intermediate_is_a_runtime_failure_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), STILL_SCENE);
    let o = tunnelmag(&["flow", "-c", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let r = report(&tmp.path().join("out"));
    assert_eq!(r["success"], false);
    assert_eq!(r["failed_stage"], "flow");
}

#[test]
fn report_echoes_the_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), STILL_SCENE);
    run_ok("synth", &cfg, None);
    let r = report(&tmp.path().join("out"));
    assert_eq!(r["config"]["magnify"]["alpha"], 15.0);
    assert_eq!(r["config"]["rings"][0]["ring_id"], "R1");
    assert_eq!(r["config"]["pyramid"]["n_orientations"], 4);
}
