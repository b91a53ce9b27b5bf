//! Gateway backed by the Kubernetes API server.
//!
//! Two requests are all the pilot ever sends: `GET` of its own pod, and a
//! JSON-patch replacing a single container image. Requests go through a
//! [`Transport`] so they can be recorded and replayed in tests.

use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{normalize_image, ClusterGateway, ContainerState, ContainerStatus, GatewayError, PatchAck};

pub const SERVICE_ACCOUNT_DIR: &str = "/var/run/secrets/kubernetes.io/serviceaccount";
pub const JSON_PATCH: &str = "application/json-patch+json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport {
    /// Transport-level failures only; HTTP error statuses are responses.
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, GatewayError>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, GatewayError> {
        (**self).send(request)
    }
}

/// Where and how to reach the API server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterCredential {
    pub api_endpoint: String,
    pub bearer_token: String,
    pub namespace: String,
    pub ca_file: Option<PathBuf>,
}

impl ClusterCredential {
    /// Loads the in-pod service-account credential. The endpoint comes from
    /// `KUBERNETES_SERVICE_HOST`/`_PORT`.
    pub fn from_service_account(dir: &Path) -> Result<Self, GatewayError> {
        let read = |name: &str| {
            fs::read_to_string(dir.join(name))
                .map(|s| s.trim().to_string())
                .map_err(|e| GatewayError::Unauthorized(format!("cannot read {}: {e}", dir.join(name).display())))
        };
        let bearer_token = read("token")?;
        let namespace = read("namespace")?;
        let host = env::var("KUBERNETES_SERVICE_HOST")
            .map_err(|_| GatewayError::Unauthorized("KUBERNETES_SERVICE_HOST is not set".into()))?;
        let port = env::var("KUBERNETES_SERVICE_PORT").unwrap_or_else(|_| "443".into());
        let host = if host.contains(':') { format!("[{host}]") } else { host };
        let ca = dir.join("ca.crt");
        Ok(Self {
            api_endpoint: format!("https://{host}:{port}"),
            bearer_token,
            namespace,
            ca_file: ca.exists().then_some(ca),
        })
    }
}

/// Blocking HTTPS transport.
pub struct UreqTransport {
    agent: ureq::Agent,
    base_url: String,
    token: String,
}

impl UreqTransport {
    pub fn new(credential: &ClusterCredential) -> Result<Self, GatewayError> {
        let mut config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)));
        if let Some(ca) = &credential.ca_file {
            let pem = fs::read(ca).map_err(|e| GatewayError::Unauthorized(format!("cannot read CA {}: {e}", ca.display())))?;
            let certs = ureq::tls::parse_pem(&pem)
                .filter_map(|item| match item {
                    Ok(ureq::tls::PemItem::Certificate(c)) => Some(c),
                    _ => None,
                })
                .collect::<Vec<_>>();
            let tls = ureq::tls::TlsConfig::builder()
                .root_certs(ureq::tls::RootCerts::new_with_certs(&certs))
                .build();
            config = config.tls_config(tls);
        }
        Ok(Self {
            agent: config.build().into(),
            base_url: credential.api_endpoint.trim_end_matches('/').to_string(),
            token: credential.bearer_token.clone(),
        })
    }
}

impl Transport for UreqTransport {
    fn send(&self, request: &HttpRequest) -> Result<HttpResponse, GatewayError> {
        let url = format!("{}{}", self.base_url, request.path);
        let auth = format!("Bearer {}", self.token);
        let result = match request.method.as_str() {
            "GET" => self
                .agent
                .get(&url)
                .header("Authorization", &auth)
                .header("Accept", "application/json")
                .call(),
            "PATCH" => self
                .agent
                .patch(&url)
                .header("Authorization", &auth)
                .header("Content-Type", request.content_type.as_deref().unwrap_or(JSON_PATCH))
                .send(request.body.as_deref().unwrap_or("")),
            other => return Err(GatewayError::Protocol(format!("unsupported method {other}"))),
        };
        let mut response = result.map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

pub fn pod_path(namespace: &str, pod: &str) -> String {
    format!("/api/v1/namespaces/{namespace}/pods/{pod}")
}

/// The exact JSON-patch body replacing one container image.
pub fn image_patch_body(index: usize, image: &str) -> String {
    serde_json::json!([{"op": "replace", "path": format!("/spec/containers/{index}/image"), "value": image}]).to_string()
}

pub struct KubeGateway<T> {
    transport: T,
    namespace: String,
}

impl<T: Transport> KubeGateway<T> {
    pub fn new(transport: T, namespace: impl Into<String>) -> Self {
        Self {
            transport,
            namespace: namespace.into(),
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn check(&self, pod: &str, response: HttpResponse) -> Result<String, GatewayError> {
        match response.status {
            200..=299 => Ok(response.body),
            401 | 403 => Err(GatewayError::Unauthorized(format!(
                "HTTP {} (pod patch role missing?): {}",
                response.status,
                short(&response.body)
            ))),
            404 => Err(GatewayError::PodNotFound(pod.to_string())),
            408 | 429 | 500..=599 => Err(GatewayError::Transport(format!(
                "HTTP {}: {}",
                response.status,
                short(&response.body)
            ))),
            s => Err(GatewayError::Protocol(format!("HTTP {s}: {}", short(&response.body)))),
        }
    }

    fn get_pod(&self, pod: &str) -> Result<Value, GatewayError> {
        let request = HttpRequest {
            method: "GET".into(),
            path: pod_path(&self.namespace, pod),
            content_type: None,
            body: None,
        };
        let body = self.check(pod, self.transport.send(&request)?)?;
        serde_json::from_str(&body).map_err(|e| GatewayError::Protocol(format!("pod JSON: {e}")))
    }
}

fn short(s: &str) -> &str {
    let end = s.char_indices().nth(200).map(|(i, _)| i).unwrap_or(s.len());
    &s[..end]
}

fn spec_container(pod: &Value, container: &str) -> Option<(usize, String)> {
    pod["spec"]["containers"]
        .as_array()?
        .iter()
        .enumerate()
        .find(|(_, c)| c["name"] == container)
        .map(|(i, c)| (i, c["image"].as_str().unwrap_or_default().to_string()))
}

/// Extracts one container's status from a pod object.
pub fn container_status_from_pod(pod: &Value, pod_name: &str, container: &str) -> Result<ContainerStatus, GatewayError> {
    let (_, image) = spec_container(pod, container).ok_or_else(|| GatewayError::ContainerNotFound {
        pod: pod_name.to_string(),
        container: container.to_string(),
    })?;
    let cs = pod["status"]["containerStatuses"]
        .as_array()
        .and_then(|all| all.iter().find(|c| c["name"] == container));
    let Some(cs) = cs else {
        return Ok(ContainerStatus {
            container_name: container.to_string(),
            image,
            running_image: String::new(),
            state: ContainerState::Waiting,
            waiting_reason: None,
            restart_count: 0,
        });
    };
    let restart_count = cs["restartCount"].as_u64().unwrap_or(0) as u32;
    let state = &cs["state"];
    let (state, waiting_reason) = if state.get("running").is_some() {
        (ContainerState::Running, None)
    } else if let Some(t) = state.get("terminated") {
        (ContainerState::Terminated, t["reason"].as_str().map(str::to_string))
    } else {
        (
            ContainerState::Waiting,
            state.get("waiting").and_then(|w| w["reason"].as_str()).map(str::to_string),
        )
    };
    let running_image = if state == ContainerState::Running {
        let live = cs["image"].as_str().unwrap_or_default();
        // the runtime reports a normalized reference
        if normalize_image(live) == normalize_image(&image) {
            image.clone()
        } else {
            live.to_string()
        }
    } else {
        String::new()
    };
    Ok(ContainerStatus {
        container_name: container.to_string(),
        image,
        running_image,
        state,
        waiting_reason,
        restart_count,
    })
}

impl<T: Transport> ClusterGateway for KubeGateway<T> {
    fn patch_container_image(&self, pod: &str, container: &str, image: &str) -> Result<PatchAck, GatewayError> {
        let current = self.get_pod(pod)?;
        let (index, assigned) = spec_container(&current, container).ok_or_else(|| GatewayError::ContainerNotFound {
            pod: pod.to_string(),
            container: container.to_string(),
        })?;
        if assigned == image {
            return Ok(PatchAck { changed: false });
        }
        let request = HttpRequest {
            method: "PATCH".into(),
            path: pod_path(&self.namespace, pod),
            content_type: Some(JSON_PATCH.into()),
            body: Some(image_patch_body(index, image)),
        };
        self.check(pod, self.transport.send(&request)?)?;
        Ok(PatchAck { changed: true })
    }

    fn get_container_status(&self, pod: &str, container: &str) -> Result<ContainerStatus, GatewayError> {
        let value = self.get_pod(pod)?;
        container_status_from_pod(&value, pod, container)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn patch_body_is_exact() {
        assert_eq!(
            image_patch_body(1, "science/sim:2.1"),
            r#"[{"op":"replace","path":"/spec/containers/1/image","value":"science/sim:2.1"}]"#
        );
    }

    #[test]
    fn status_parsing() {
        let pod = json!({
            "spec": {"containers": [{"name": "pilot", "image": "p:1"}, {"name": "payload", "image": "busybox:stable"}]},
            "status": {"containerStatuses": [
                {"name": "payload", "image": "docker.io/library/busybox:stable", "restartCount": 2, "state": {"running": {"startedAt": "x"}}},
                {"name": "pilot", "image": "p:1", "restartCount": 0, "state": {"waiting": {"reason": "ErrImagePull"}}}
            ]}
        });
        let s = container_status_from_pod(&pod, "pod", "payload").unwrap();
        assert_eq!(s.state, ContainerState::Running);
        assert_eq!(s.running_image, "busybox:stable");
        assert_eq!(s.restart_count, 2);
        let s = container_status_from_pod(&pod, "pod", "pilot").unwrap();
        assert_eq!(s.state, ContainerState::Waiting);
        assert_eq!(s.waiting_reason.as_deref(), Some("ErrImagePull"));
        assert_eq!(s.running_image, "");
        assert!(matches!(
            container_status_from_pod(&pod, "pod", "nope"),
            Err(GatewayError::ContainerNotFound { .. })
        ));
    }

    #[test]
    fn credential_from_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ClusterCredential::from_service_account(dir.path()),
            Err(GatewayError::Unauthorized(_))
        ));
    }

    struct Canned(u16);
    impl Transport for Canned {
        fn send(&self, _: &HttpRequest) -> Result<HttpResponse, GatewayError> {
            Ok(HttpResponse {
                status: self.0,
                body: "{}".into(),
            })
        }
    }

    #[test]
    fn http_errors_map_to_gateway_errors() {
        let forbidden = KubeGateway::new(Canned(403), "ns");
        assert!(matches!(
            forbidden.patch_container_image("p", "c", "i"),
            Err(GatewayError::Unauthorized(_))
        ));
        let missing = KubeGateway::new(Canned(404), "ns");
        assert!(matches!(missing.get_container_status("p", "c"), Err(GatewayError::PodNotFound(_))));
        let flaky = KubeGateway::new(Canned(503), "ns");
        assert!(flaky.get_container_status("p", "c").unwrap_err().is_transient());
    }
}
