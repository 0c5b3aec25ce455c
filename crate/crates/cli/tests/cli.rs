use std::path::Path;
use std::process::{Command, Output};

fn laneforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_laneforge")).args(args).output().unwrap()
}

fn town(dir: &Path) -> String {
    assert!(laneforge(&["fixture-town", "--out", dir.to_str().unwrap()]).status.success());
    dir.join("config.json").to_str().unwrap().to_string()
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error record");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{line:?}: {e}"))
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = laneforge(&["all"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
    assert_eq!(error_record(&out)["error"], "usage");
}

#[test]
fn unknown_stage_is_a_usage_error() {
    assert_eq!(laneforge(&["teleport"]).status.code(), Some(1));
}

#[test]
fn version_and_help_succeed() {
    let out = laneforge(&["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("laneforge "));
    assert!(laneforge(&["--help"]).status.success());
}

#[test]
fn corrupt_detections_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = town(dir.path());
    let det = dir.path().join("detections.jsonl");
    let mut lines: Vec<String> = std::fs::read_to_string(&det).unwrap().lines().map(String::from).collect();
    lines[3] = "{\"pano_id\":\"x\",\"heading_deg\":0.0,\"negative\":true}".into();
    std::fs::write(&det, lines.join("\n") + "\n").unwrap();

    let out = laneforge(&["all", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "data");
    assert_eq!(rec["stage"], "tracks");
    assert_eq!(rec["line"], 4);
    assert!(rec["path"].as_str().unwrap().ends_with("detections.jsonl"));
}

#[test]
fn downstream_stage_without_inputs_says_what_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = town(dir.path());
    let out = laneforge(&["match", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("'tracks'"));
}

#[test]
fn unwritable_run_dir_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = town(dir.path());
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let out = laneforge(&["crawl", "--config", &cfg, "--run-dir", blocker.join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_record(&out)["error"], "io");
}

#[test]
fn downstream_stages_reproduce_deleted_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = town(dir.path());
    assert!(laneforge(&["all", "--config", &cfg]).status.success());
    let run = dir.path().join("run");
    let read = |n: &str| std::fs::read(run.join(n)).unwrap();
    let before: Vec<_> = ["matches.jsonl", "lane_counts.json", "network.json", "network.geojson", "network.sim.xml", "manifest.json"]
        .iter()
        .map(|n| (n.to_string(), read(n)))
        .collect();
    for (n, _) in &before[..5] {
        std::fs::remove_file(run.join(n)).unwrap();
    }
    for stage in ["match", "fuse", "build", "export"] {
        let out = laneforge(&[stage, "--config", &cfg]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for (n, bytes) in before {
        assert_eq!(read(&n), bytes, "{n}");
    }
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = town(dir.path());
    let out = laneforge(&["crawl", "--config", &cfg, "--seed", "no-such-pano"]);
    assert_eq!(out.status.code(), Some(2));
    let out = laneforge(&["crawl", "--config", &cfg, "--radius-m", "-1"]);
    assert_eq!(out.status.code(), Some(1));
}
