use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use podpilot::model::PilotConfig;
use podpilot::podspec::{build_pod_blueprint, parse_manifest, ManifestFormat};
use podpilot::taskrepo::{PilotDescriptor, Repository};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_podpilot"));
    cmd.env("RUST_LOG", "info").env_remove("PODPILOT_REPO_TOKEN").env_remove("PODPILOT_CONFIG");
    cmd
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config_fixture() -> PilotConfig {
    PilotConfig::from_toml(&std::fs::read_to_string(fixture("pilot.toml")).unwrap()).unwrap()
}

#[test]
fn genpod_yaml() {
    let out = run(&["genpod", "--config", fixture("pilot.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("shareProcessNamespace: true"));
}

#[test]
fn genpod_json_round_trips() {
    let out = run(&[
        "genpod",
        "--config",
        fixture("pilot.toml").to_str().unwrap(),
        "--pilot-image",
        "registry.example/podpilot:0.1",
        "--format",
        "json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let parsed = parse_manifest(&stdout(&out), ManifestFormat::Json).unwrap();
    assert_eq!(parsed, build_pod_blueprint(&config_fixture(), "registry.example/podpilot:0.1").unwrap());
}

#[test]
fn genpod_rejects_root_payload() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(fixture("pilot.toml"))
        .unwrap()
        .replace("payload_uid = 1000", "payload_uid = 0");
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let out = run(&["genpod", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("payload uid must be nonzero"), "{}", stderr(&out));
}

#[test]
fn run_sim_bundled_scenarios() {
    let out = run(&["run", "--sim", "threetasks"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stderr(&out).contains("phase=Fetch event=TaskClaimed"), "{}", stderr(&out));
    assert!(stdout(&out).contains("completed=3"));

    let out = run(&["run", "--sim", "pullfail"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("completed=1 failed=1"));
}

#[test]
fn run_without_credential_is_validation_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "run",
        "--config",
        fixture("pilot.toml").to_str().unwrap(),
        "--credentials",
        dir.path().join("missing").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("validation-failure"), "{}", stderr(&out));
}

#[test]
fn submit_to_directory_then_acquire() {
    let dir = tempfile::tempdir().unwrap();
    let repo = dir.path().join("repo");
    let out = run(&["submit", "--repo", repo.to_str().unwrap(), fixture("task.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "demo-1");

    let mut repository = Repository::open(&repo, 60).unwrap();
    let ticket = repository.acquire(&PilotDescriptor::new("p"), 0).unwrap().unwrap();
    assert_eq!(ticket.task.task_id, "demo-1");
    assert_eq!(repository.get_input("demo-1", "data.csv").unwrap(), b"a,b\n1,2\n");
}

#[test]
fn submit_malformed_task_fails() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"task_id": "x", "image": ""#).unwrap();
    let out = run(&["submit", "--repo", dir.path().join("repo").to_str().unwrap(), bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_is_deterministic() {
    let a = run(&["simulate", "threetasks"]);
    let b = run(&["simulate", "threetasks"]);
    assert_eq!(a.status.code(), Some(0));
    assert!(stdout(&a).contains("completed=3"));
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn simulate_hang_kills_before_reporting() {
    let out = run(&["simulate", "hang"]);
    let text = stdout(&out);
    let kill = text.find("KillPayload").expect("KillPayload in transitions");
    let failure = text.find("ReportFailure(wall-limit)").expect("failure report");
    assert!(kill < failure, "{text}");
}

#[test]
fn simulate_unknown_scenario_is_config_error() {
    let out = run(&["simulate", "/nonexistent/scenario.txt"]);
    assert_eq!(out.status.code(), Some(2));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn serve_submit_simulate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    let mut child = bin()
        .args(["repo-serve", "--state", state.to_str().unwrap(), "--listen", "127.0.0.1:0", "--token", "tok"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let _server = Server(child);
    let url = line.trim().strip_prefix("listening on ").expect("address line").to_string();

    for i in 0..5 {
        let task = dir.path().join(format!("t{i}.yaml"));
        std::fs::write(
            &task,
            format!("task_id: job-{i}\nimage: science/sim:{i}\ncommand: /opt/run\noutput_files: [out.txt]\n"),
        )
        .unwrap();
        let out = run(&["submit", "--repo", &url, "--token", "tok", task.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }

    let scenario = dir.path().join("idle.txt");
    std::fs::write(&scenario, "seed 3\npilot idle_timeout=10 poll_ms=500\n").unwrap();
    let out = run(&["simulate", scenario.to_str().unwrap(), "--repo", &url, "--token", "tok"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("completed=5"), "{}", stdout(&out));

    let repository = Repository::open(&state, 60).unwrap();
    let views = repository.list();
    assert_eq!(views.len(), 5);
    assert!(views.iter().all(|v| v.status == "completed"), "{views:?}");
    // the default payload produces no outputs, so each declared one is missing
    assert!(views.iter().all(|v| v.missing_outputs == ["out.txt"]));
}

#[test]
fn unreachable_repo_is_transport_error() {
    let out = run(&["submit", "--repo", "http://127.0.0.1:1", fixture("task.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
}
