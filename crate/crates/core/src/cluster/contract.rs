//! Behavioural contract every [`ClusterGateway`] must satisfy. The same
//! cases run against the simulator and against the HTTP client replaying
//! recorded API traffic; both must produce the same pass set.

use std::time::Duration;

use super::{await_container_running, ClusterGateway, ContainerStatus, GatewayError};
use crate::clock::Clock;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractTarget<'a> {
    pub pod: &'a str,
    pub pilot_container: &'a str,
    pub payload_container: &'a str,
    pub parking_image: &'a str,
    pub task_image: &'a str,
    pub timeout: Duration,
    pub poll: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub const CONTRACT_CASES: [&str; 10] = [
    "parked-running",
    "patch-restarts-once",
    "isolation",
    "same-image-noop",
    "restart-to-parking",
    "parked-restart-noop",
    "unknown-container",
    "restart-count-monotonic",
    "await-returns-expected-image",
    "await-timeout-carries-status",
];

/// Image that is never assigned, used for the timeout case.
pub const NEVER_ASSIGNED_IMAGE: &str = "contract/never-assigned:0";

struct Run<'g> {
    gateway: &'g dyn ClusterGateway,
    clock: &'g dyn Clock,
    payload_counts: Vec<u32>,
    awaited: Vec<(String, ContainerStatus)>,
}

impl Run<'_> {
    fn status(&mut self, t: &ContractTarget, container: &str) -> Result<ContainerStatus, GatewayError> {
        let s = self.gateway.get_container_status(t.pod, container)?;
        if container == t.payload_container {
            self.payload_counts.push(s.restart_count);
        }
        Ok(s)
    }

    fn await_running(&mut self, t: &ContractTarget, image: &str) -> Result<ContainerStatus, GatewayError> {
        let s = await_container_running(self.gateway, self.clock, t.pod, t.payload_container, image, t.timeout, t.poll)?;
        self.payload_counts.push(s.restart_count);
        self.awaited.push((image.to_string(), s.clone()));
        Ok(s)
    }
}

fn outcome(name: &'static str, result: Result<String, String>) -> ContractOutcome {
    match result {
        Ok(detail) => ContractOutcome {
            name,
            passed: true,
            detail,
        },
        Err(detail) => ContractOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Runs every case in [`CONTRACT_CASES`] order against a freshly created
/// pod whose payload container is assigned the parking image. Cases build on
/// the state left by earlier ones.
pub fn run_gateway_contract(gateway: &dyn ClusterGateway, clock: &dyn Clock, t: &ContractTarget) -> Vec<ContractOutcome> {
    let mut run = Run {
        gateway,
        clock,
        payload_counts: Vec::new(),
        awaited: Vec::new(),
    };
    let mut out = Vec::new();
    let e = |e: GatewayError| e.to_string();

    let parked = run.await_running(t, t.parking_image);
    out.push(outcome(
        CONTRACT_CASES[0],
        parked
            .as_ref()
            .map_err(|x| x.to_string())
            .and_then(|s| check(s.running_image == t.parking_image, || format!("{s}")).map(|_| s.to_string())),
    ));
    let pilot_before = run.status(t, t.pilot_container);

    let patched = (|| {
        let before = run.status(t, t.payload_container).map_err(e)?;
        let ack = gateway
            .patch_container_image(t.pod, t.payload_container, t.task_image)
            .map_err(e)?;
        check(ack.changed, || "patch to a new image reported unchanged".into())?;
        let after = run.await_running(t, t.task_image).map_err(e)?;
        check(after.restart_count == before.restart_count + 1, || {
            format!("restart_count {} -> {}", before.restart_count, after.restart_count)
        })?;
        Ok(after.to_string())
    })();
    out.push(outcome(CONTRACT_CASES[1], patched));

    let isolation = (|| {
        let before = pilot_before.map_err(e)?;
        let after = run.status(t, t.pilot_container).map_err(e)?;
        check(before == after, || format!("pilot changed: {before} -> {after}"))?;
        Ok(after.to_string())
    })();
    out.push(outcome(CONTRACT_CASES[2], isolation));

    let noop = (|| {
        let before = run.status(t, t.payload_container).map_err(e)?;
        let ack = gateway
            .patch_container_image(t.pod, t.payload_container, t.task_image)
            .map_err(e)?;
        check(!ack.changed, || "same-image patch reported a change".into())?;
        let after = run.status(t, t.payload_container).map_err(e)?;
        check(before == after, || format!("{before} -> {after}"))?;
        Ok(after.to_string())
    })();
    out.push(outcome(CONTRACT_CASES[3], noop));

    let restart = (|| {
        let before = run.status(t, t.payload_container).map_err(e)?;
        let ack = gateway
            .restart_payload_container(t.pod, t.payload_container, t.parking_image)
            .map_err(e)?;
        check(ack.changed, || "restart reported unchanged".into())?;
        let after = run.await_running(t, t.parking_image).map_err(e)?;
        check(after.restart_count == before.restart_count + 1, || {
            format!("restart_count {} -> {}", before.restart_count, after.restart_count)
        })?;
        Ok(after.to_string())
    })();
    out.push(outcome(CONTRACT_CASES[4], restart));

    let parked_noop = (|| {
        let before = run.status(t, t.payload_container).map_err(e)?;
        let ack = gateway
            .restart_payload_container(t.pod, t.payload_container, t.parking_image)
            .map_err(e)?;
        check(!ack.changed, || "restart of a parked container reported a change".into())?;
        let after = run.status(t, t.payload_container).map_err(e)?;
        check(before == after, || format!("{before} -> {after}"))?;
        Ok(after.to_string())
    })();
    out.push(outcome(CONTRACT_CASES[5], parked_noop));

    let unknown = match gateway.get_container_status(t.pod, "no-such-container") {
        Err(GatewayError::ContainerNotFound { container, .. }) if container == "no-such-container" => {
            Ok("not found".to_string())
        }
        other => Err(format!("expected not-found, got {other:?}")),
    };
    out.push(outcome(CONTRACT_CASES[6], unknown));

    let timeout = match await_container_running(
        gateway,
        clock,
        t.pod,
        t.payload_container,
        NEVER_ASSIGNED_IMAGE,
        t.poll * 3,
        t.poll,
    ) {
        Err(GatewayError::Timeout { last }) => check(
            last.container_name == t.payload_container && last.running_image == t.parking_image,
            || format!("carried status {last}"),
        )
        .map(|_| last.to_string()),
        other => Err(format!("expected timeout, got {other:?}")),
    };

    let counts = &run.payload_counts;
    let monotonic = check(counts.windows(2).all(|w| w[0] <= w[1]), || format!("{counts:?}")).map(|_| format!("{counts:?}"));
    out.push(outcome(CONTRACT_CASES[7], monotonic));

    let wrong: Vec<_> = run
        .awaited
        .iter()
        .filter(|(want, s)| &s.running_image != want)
        .map(|(want, s)| format!("wanted {want}, got {s}"))
        .collect();
    let awaited = check(!run.awaited.is_empty() && wrong.is_empty(), || {
        format!("{} awaits, wrong: {wrong:?}", run.awaited.len())
    })
    .map(|_| format!("{} awaits", run.awaited.len()));
    out.push(outcome(CONTRACT_CASES[8], awaited));
    out.push(outcome(CONTRACT_CASES[9], timeout));
    out
}

/// Names of the passing cases.
pub fn pass_set(outcomes: &[ContractOutcome]) -> Vec<&'static str> {
    outcomes.iter().filter(|o| o.passed).map(|o| o.name).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::cluster::fixture::FakeApiServer;
    use crate::cluster::kube::KubeGateway;

    #[test]
    fn fake_api_server_passes_contract() {
        let gw = KubeGateway::new(
            FakeApiServer::new("ns", "pod", &[("pilot", "pilot:1"), ("payload", "busybox:stable")], 2),
            "ns",
        );
        let clock = ManualClock::new(0);
        let target = ContractTarget {
            pod: "pod",
            pilot_container: "pilot",
            payload_container: "payload",
            parking_image: "busybox:stable",
            task_image: "science/sim:2.1",
            timeout: Duration::from_secs(60),
            poll: Duration::from_secs(1),
        };
        let outcomes = run_gateway_contract(&gw, &clock, &target);
        for o in &outcomes {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
        assert_eq!(pass_set(&outcomes), CONTRACT_CASES.to_vec());
    }
}
