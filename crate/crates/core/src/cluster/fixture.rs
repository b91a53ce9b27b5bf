//! Test transports: an in-memory pod API server, plus recording and strict
//! replay of HTTP exchanges (JSON lines, one exchange per line).

use std::cell::{Cell, RefCell};
use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::kube::{pod_path, HttpRequest, HttpResponse, Transport, JSON_PATCH};
use super::{normalize_image, GatewayError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub request: HttpRequest,
    pub response: HttpResponse,
}

#[derive(Debug, Clone)]
struct FakeContainer {
    name: String,
    image: String,
    running: bool,
    waiting_reason: String,
    /// GETs left before a waiting container starts.
    countdown: u32,
    restart_count: u32,
}

/// Just enough of the pod API for one pod: GET returns the pod object, and a
/// JSON-patch replacing `/spec/containers/<i>/image` recreates that
/// container, which then reports `ContainerCreating` for a fixed number of
/// GETs before running.
pub struct FakeApiServer {
    namespace: String,
    pod: String,
    start_after_gets: u32,
    containers: RefCell<Vec<FakeContainer>>,
    unpullable: RefCell<BTreeSet<String>>,
    requests: Cell<usize>,
}

impl FakeApiServer {
    pub fn new(namespace: &str, pod: &str, containers: &[(&str, &str)], start_after_gets: u32) -> Self {
        Self {
            namespace: namespace.to_string(),
            pod: pod.to_string(),
            start_after_gets,
            containers: RefCell::new(
                containers
                    .iter()
                    .map(|(name, image)| FakeContainer {
                        name: name.to_string(),
                        image: image.to_string(),
                        running: false,
                        waiting_reason: "ContainerCreating".into(),
                        countdown: start_after_gets,
                        restart_count: 0,
                    })
                    .collect(),
            ),
            unpullable: RefCell::new(BTreeSet::new()),
            requests: Cell::new(0),
        }
    }

    /// Images that never pull; containers assigned one stay waiting.
    pub fn mark_unpullable(&self, image: &str) {
        self.unpullable.borrow_mut().insert(image.to_string());
    }

    pub fn request_count(&self) -> usize {
        self.requests.get()
    }

    fn pod_json(&self) -> Value {
        let containers = self.containers.borrow();
        let spec: Vec<Value> = containers.iter().map(|c| json!({"name": c.name, "image": c.image})).collect();
        let statuses: Vec<Value> = containers
            .iter()
            .map(|c| {
                let state = if c.running {
                    json!({"running": {"startedAt": "2024-01-01T00:00:00Z"}})
                } else {
                    json!({"waiting": {"reason": c.waiting_reason}})
                };
                json!({
                    "name": c.name,
                    // the runtime reports a normalized reference
                    "image": normalize_image(&c.image),
                    "ready": c.running,
                    "restartCount": c.restart_count,
                    "state": state,
                })
            })
            .collect();
        let all_running = containers.iter().all(|c| c.running);
        json!({
            "apiVersion": "v1",
            "kind": "Pod",
            "metadata": {"name": self.pod, "namespace": self.namespace},
            "spec": {"containers": spec},
            "status": {"phase": if all_running { "Running" } else { "Pending" }, "containerStatuses": statuses},
        })
    }

    fn tick(&self) {
        let unpullable = self.unpullable.borrow();
        for c in self.containers.borrow_mut().iter_mut().filter(|c| !c.running) {
            if unpullable.contains(&c.image) {
                c.waiting_reason = "ErrImagePull".into();
            } else if c.countdown == 0 {
                c.running = true;
            } else {
                c.countdown -= 1;
            }
        }
    }

    fn apply_patch(&self, body: &str) -> Result<(), String> {
        let ops: Vec<Value> = serde_json::from_str(body).map_err(|e| e.to_string())?;
        for op in &ops {
            if op["op"] != "replace" {
                return Err(format!("unsupported op {}", op["op"]));
            }
            let path = op["path"].as_str().unwrap_or_default();
            let index = path
                .strip_prefix("/spec/containers/")
                .and_then(|rest| rest.strip_suffix("/image"))
                .and_then(|i| i.parse::<usize>().ok())
                .ok_or_else(|| format!("path {path} is not a container image"))?;
            let image = op["value"].as_str().ok_or("value must be a string")?;
            let mut containers = self.containers.borrow_mut();
            let c = containers.get_mut(index).ok_or_else(|| format!("no container at index {index}"))?;
            if c.image != image {
                c.image = image.to_string();
                c.running = false;
                c.waiting_reason = "ContainerCreating".into();
                c.countdown = self.start_after_gets;
                c.restart_count += 1;
            }
        }
        Ok(())
    }
}

fn respond(status: u16, body: Value) -> HttpResponse {
    HttpResponse {
        status,
        body: body.to_string(),
    }
}

impl Transport for FakeApiServer {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, GatewayError> {
        self.requests.set(self.requests.get() + 1);
        if request.path != pod_path(&self.namespace, &self.pod) {
            return Ok(respond(404, json!({"kind": "Status", "reason": "NotFound"})));
        }
        match request.method.as_str() {
            "GET" => {
                self.tick();
                Ok(respond(200, self.pod_json()))
            }
            "PATCH" if request.content_type.as_deref() == Some(JSON_PATCH) => {
                match self.apply_patch(request.body.as_deref().unwrap_or("")) {
                    Ok(()) => Ok(respond(200, self.pod_json())),
                    Err(msg) => Ok(respond(422, json!({"kind": "Status", "reason": "Invalid", "message": msg}))),
                }
            }
            "PATCH" => Ok(respond(415, json!({"kind": "Status", "reason": "UnsupportedMediaType"}))),
            _ => Ok(respond(405, json!({"kind": "Status", "reason": "MethodNotAllowed"}))),
        }
    }
}

/// Passes requests through and keeps every exchange.
pub struct RecordingTransport<T> {
    inner: T,
    log: RefCell<Vec<Exchange>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn exchanges(&self) -> Vec<Exchange> {
        self.log.borrow().clone()
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, GatewayError> {
        let response = self.inner.send(request)?;
        self.log.borrow_mut().push(Exchange {
            request: request.clone(),
            response: response.clone(),
        });
        Ok(response)
    }
}

/// Serves recorded responses in order. Any request that differs from the
/// recording, or runs past its end, is a protocol error.
pub struct ReplayTransport {
    exchanges: Vec<Exchange>,
    next: Cell<usize>,
}

impl ReplayTransport {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        Self {
            exchanges,
            next: Cell::new(0),
        }
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Self::new(read_cassette(path)?))
    }

    pub fn remaining(&self) -> usize {
        self.exchanges.len() - self.next.get()
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, GatewayError> {
        let i = self.next.get();
        let Some(exchange) = self.exchanges.get(i) else {
            return Err(GatewayError::Protocol(format!(
                "cassette exhausted at request {i}: {} {}",
                request.method, request.path
            )));
        };
        if &exchange.request != request {
            return Err(GatewayError::Protocol(format!(
                "request {i} diverges from cassette: got {request:?}, recorded {:?}",
                exchange.request
            )));
        }
        self.next.set(i + 1);
        Ok(exchange.response.clone())
    }
}

pub fn write_cassette(path: &Path, exchanges: &[Exchange]) -> io::Result<()> {
    let mut text = String::new();
    for e in exchanges {
        text.push_str(&serde_json::to_string(e).map_err(io::Error::other)?);
        text.push('\n');
    }
    fs::write(path, text)
}

pub fn read_cassette(path: &Path) -> io::Result<Vec<Exchange>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::kube::KubeGateway;
    use crate::cluster::{ClusterGateway, ContainerState};

    fn server() -> FakeApiServer {
        FakeApiServer::new("ns", "pod", &[("pilot", "pilot:1"), ("payload", "busybox:stable")], 1)
    }

    #[test]
    fn containers_start_after_countdown() {
        let gw = KubeGateway::new(server(), "ns");
        assert_eq!(gw.get_container_status("pod", "payload").unwrap().state, ContainerState::Waiting);
        let s = gw.get_container_status("pod", "payload").unwrap();
        assert!(s.is_running("busybox:stable"), "{s}");
    }

    #[test]
    fn unpullable_image_reports_reason() {
        let api = server();
        api.mark_unpullable("bad:1");
        let gw = KubeGateway::new(api, "ns");
        gw.patch_container_image("pod", "payload", "bad:1").unwrap();
        for _ in 0..3 {
            gw.get_container_status("pod", "payload").unwrap();
        }
        let s = gw.get_container_status("pod", "payload").unwrap();
        assert_eq!(s.waiting_reason.as_deref(), Some("ErrImagePull"));
        assert_eq!(s.restart_count, 1);
    }

    #[test]
    fn wrong_pod_is_not_found() {
        let gw = KubeGateway::new(server(), "ns");
        assert!(matches!(gw.get_container_status("other", "payload"), Err(GatewayError::PodNotFound(_))));
    }

    #[test]
    fn record_then_replay_is_identical() {
        let rec = RecordingTransport::new(server());
        let gw = KubeGateway::new(rec, "ns");
        gw.patch_container_image("pod", "payload", "x:1").unwrap();
        let live = gw.get_container_status("pod", "payload").unwrap();
        let exchanges = gw.transport().exchanges();
        assert_eq!(exchanges.len(), 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_cassette(&path, &exchanges).unwrap();
        let replay = KubeGateway::new(ReplayTransport::load(&path).unwrap(), "ns");
        replay.patch_container_image("pod", "payload", "x:1").unwrap();
        assert_eq!(replay.get_container_status("pod", "payload").unwrap(), live);
        assert_eq!(replay.transport().remaining(), 0);
        assert!(matches!(
            replay.get_container_status("pod", "payload"),
            Err(GatewayError::Protocol(_))
        ));
    }

    #[test]
    fn replay_rejects_divergent_request() {
        let rec = RecordingTransport::new(server());
        KubeGateway::new(&rec, "ns").get_container_status("pod", "payload").unwrap();
        let replay = KubeGateway::new(ReplayTransport::new(rec.exchanges()), "ns");
        // the GET matches the recording; the PATCH that follows was never recorded
        assert!(matches!(
            replay.patch_container_image("pod", "payload", "y:2"),
            Err(GatewayError::Protocol(_))
        ));
        let other = KubeGateway::new(ReplayTransport::new(rec.exchanges()), "other-ns");
        assert!(matches!(other.get_container_status("pod", "payload"), Err(GatewayError::Protocol(_))));
    }
}
