use std::path::Path;
use std::process::{Command, Output};

use flowsense::config::{Manifest, RunConfig};

fn flowsense(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowsense"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml");
    let text = std::fs::read_to_string(src).unwrap().replace("../runs/tiny", "out");
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn init_writes_a_loadable_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = flowsense(&["init", "run.toml"], dir.path());
    assert!(out.status.success());
    let cfg = RunConfig::load(&dir.path().join("run.toml")).unwrap();
    assert_eq!(cfg.model, RunConfig::default().model);
    // refuses to clobber
    let again = flowsense(&["init", "run.toml"], dir.path());
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn validation_errors_exit_with_1_and_list_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "tz_offset_minutes = 9000\n[sae]\nk = 0\n").unwrap();
    let out = flowsense(&["ingest", "--config", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tz_offset_minutes") || err.contains("offset"), "{err}");
    assert!(err.contains("k = 0"), "{err}");
}

#[test]
fn missing_stage_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = flowsense(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("featurize") && err.contains("features.csv"), "{err}");
}

#[test]
fn seed_and_threads_flags_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = flowsense(
        &["synth", "--config", cfg, "--seed", "99", "--threads", "2"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = Manifest::read(&dir.path().join("out/synth.manifest.json")).unwrap();
    assert_eq!(m.seed, 99);
    assert_eq!(m.threads, 2);
    assert_eq!(m.config.synth.seed, 99);
    let out = flowsense(&["ingest", "--config", cfg], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/hourly.csv").exists());
}

#[test]
fn pipeline_with_unconverged_fits_exits_with_3_and_keeps_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text.push_str("\n[stats.analysis.gee]\nmax_iter = 1\ntol = 0.0\n");
    std::fs::write(&cfg, text).unwrap();
    let out = flowsense(&["pipeline", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("out/stats_report.txt")).unwrap();
    assert!(report.contains("did not converge"), "{report}");
    assert!(dir.path().join("out/probe.manifest.json").exists());
}
