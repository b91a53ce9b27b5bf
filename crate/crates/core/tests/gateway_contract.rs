//! The gateway contract against the simulator and against the HTTP client
//! replaying the committed cassette.

use std::path::PathBuf;
use std::time::Duration;

use podpilot::clock::ManualClock;
use podpilot::cluster::contract::{pass_set, run_gateway_contract, ContractTarget, CONTRACT_CASES};
use podpilot::cluster::fixture::{read_cassette, write_cassette, FakeApiServer, RecordingTransport, ReplayTransport};
use podpilot::cluster::kube::KubeGateway;
use podpilot::model::PilotConfig;
use podpilot::podspec::build_pod_blueprint;
use podpilot::simcluster::{SimHandle, SimOptions, SimPod};

const PILOT_IMAGE: &str = "podpilot:dev";

fn cassette_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/gateway_contract.jsonl")
}

fn target(config: &PilotConfig) -> ContractTarget<'_> {
    ContractTarget {
        pod: &config.pod_name,
        pilot_container: &config.pilot_container_name,
        payload_container: &config.payload_container_name,
        parking_image: &config.parking_image,
        task_image: "science/sim:2.1",
        timeout: Duration::from_secs(60),
        poll: Duration::from_secs(1),
    }
}

fn record(config: &PilotConfig) -> Vec<podpilot::cluster::fixture::Exchange> {
    let server = FakeApiServer::new(
        &config.namespace,
        &config.pod_name,
        &[
            (&config.pilot_container_name, PILOT_IMAGE),
            (&config.payload_container_name, &config.parking_image),
        ],
        2,
    );
    let gateway = KubeGateway::new(RecordingTransport::new(server), config.namespace.clone());
    let outcomes = run_gateway_contract(&gateway, &ManualClock::new(0), &target(config));
    assert!(outcomes.iter().all(|o| o.passed), "{outcomes:?}");
    gateway.transport().exchanges()
}

#[test]
fn simulator_passes_contract() {
    let dir = tempfile::tempdir().unwrap();
    let config = PilotConfig {
        shared_dir: dir.path().join("shared"),
        private_dir: dir.path().join("private"),
        ..PilotConfig::default()
    };
    let pod = SimPod::new(
        build_pod_blueprint(&config, PILOT_IMAGE).unwrap(),
        config.clone(),
        SimOptions::default(),
    )
    .unwrap();
    let sim = SimHandle::new(pod);
    let outcomes = run_gateway_contract(&sim, &sim, &target(&config));
    for o in &outcomes {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
    assert_eq!(pass_set(&outcomes), CONTRACT_CASES.to_vec());
}

#[test]
fn replayed_client_passes_contract() {
    let config = PilotConfig::default();
    let replay = ReplayTransport::load(&cassette_path()).unwrap();
    let gateway = KubeGateway::new(replay, config.namespace.clone());
    let outcomes = run_gateway_contract(&gateway, &ManualClock::new(0), &target(&config));
    for o in &outcomes {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
    assert_eq!(gateway.transport().remaining(), 0, "cassette not fully consumed");
}

/// Guards against the committed cassette drifting from the client's
/// request sequence. Set PODPILOT_RECORD=1 to rewrite it.
#[test]
fn cassette_matches_fresh_recording() {
    let config = PilotConfig::default();
    let fresh = record(&config);
    if std::env::var_os("PODPILOT_RECORD").is_some() {
        write_cassette(&cassette_path(), &fresh).unwrap();
    }
    assert_eq!(read_cassette(&cassette_path()).unwrap(), fresh);
}
