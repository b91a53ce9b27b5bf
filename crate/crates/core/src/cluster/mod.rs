//! The pilot's only cluster authority: patching a container image in its
//! own pod, and reading container status back.
//!
//! Restarting the payload container is an image patch back to the parking
//! image. Unprivileged credentials cannot kill containers, but the runtime
//! recreates any container whose image changes.

pub mod contract;
pub mod fixture;
pub mod kube;

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::time::Duration;

use thiserror::Error;

use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerState {
    Waiting,
    Running,
    Terminated,
}

impl fmt::Display for ContainerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerStatus {
    pub container_name: String,
    /// Image in the pod spec.
    pub image: String,
    /// Image of the live container; empty unless running.
    pub running_image: String,
    pub state: ContainerState,
    pub waiting_reason: Option<String>,
    pub restart_count: u32,
}

impl ContainerStatus {
    pub fn is_running(&self, image: &str) -> bool {
        self.state == ContainerState::Running && self.running_image == image
    }
}

impl fmt::Display for ContainerStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} image={} running={} state={} restarts={}",
            self.container_name,
            self.image,
            if self.running_image.is_empty() { "-" } else { &self.running_image },
            self.state,
            self.restart_count
        )?;
        if let Some(reason) = &self.waiting_reason {
            write!(f, " reason={reason}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchAck {
    /// False when the requested image was already assigned.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("not authorized: {0}")]
    Unauthorized(String),
    #[error("pod {pod} has no container {container}")]
    ContainerNotFound { pod: String, container: String },
    #[error("pod {0} not found")]
    PodNotFound(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("timed out; last status: {last}")]
    Timeout { last: Box<ContainerStatus> },
    #[error("unexpected API response: {0}")]
    Protocol(String),
}

impl GatewayError {
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::Transport(_))
    }
}

pub trait ClusterGateway {
    fn patch_container_image(&self, pod: &str, container: &str, image: &str) -> Result<PatchAck, GatewayError>;

    fn get_container_status(&self, pod: &str, container: &str) -> Result<ContainerStatus, GatewayError>;

    /// Patches the container back to the parking image, which makes the
    /// runtime kill every process in it and start a fresh bootstrap. A
    /// container already on the parking image is left alone.
    fn restart_payload_container(&self, pod: &str, container: &str, parking_image: &str) -> Result<PatchAck, GatewayError> {
        self.patch_container_image(pod, container, parking_image)
    }
}

impl<G: ClusterGateway + ?Sized> ClusterGateway for std::rc::Rc<G> {
    fn patch_container_image(&self, pod: &str, container: &str, image: &str) -> Result<PatchAck, GatewayError> {
        (**self).patch_container_image(pod, container, image)
    }
    fn get_container_status(&self, pod: &str, container: &str) -> Result<ContainerStatus, GatewayError> {
        (**self).get_container_status(pod, container)
    }
    fn restart_payload_container(&self, pod: &str, container: &str, parking_image: &str) -> Result<PatchAck, GatewayError> {
        (**self).restart_payload_container(pod, container, parking_image)
    }
}

/// Poll delay with up to 10% deterministic jitter derived from the target
/// and attempt number, so pilots sharing an API server do not poll in
/// lockstep while simulated runs stay reproducible.
pub fn jittered(base: Duration, key: &str, attempt: u32) -> Duration {
    let spread = base.as_millis() as u64 / 10;
    if spread == 0 {
        return base;
    }
    let mut h = DefaultHasher::new();
    key.hash(&mut h);
    attempt.hash(&mut h);
    base + Duration::from_millis(h.finish() % (spread + 1))
}

/// Polls until the container runs `expected_image`. Transient errors are
/// tolerated until the deadline.
pub fn await_container_running(
    gateway: &dyn ClusterGateway,
    clock: &dyn Clock,
    pod: &str,
    container: &str,
    expected_image: &str,
    timeout: Duration,
    poll: Duration,
) -> Result<ContainerStatus, GatewayError> {
    let started = clock.now();
    let key = format!("{pod}/{container}");
    let mut last: Option<ContainerStatus> = None;
    let mut last_err = None;
    let mut attempt = 0;
    loop {
        match gateway.get_container_status(pod, container) {
            Ok(status) if status.is_running(expected_image) => return Ok(status),
            Ok(status) => last = Some(status),
            Err(e) if e.is_transient() => last_err = Some(e),
            Err(e) => return Err(e),
        }
        let elapsed = clock.now().saturating_sub(started);
        if elapsed >= timeout {
            return match (last, last_err) {
                (Some(status), _) => Err(GatewayError::Timeout { last: Box::new(status) }),
                (None, Some(e)) => Err(e),
                (None, None) => Err(GatewayError::Transport("no status observed".into())),
            };
        }
        attempt += 1;
        clock.sleep(jittered(poll, &key, attempt).min(timeout - elapsed));
    }
}

/// Canonical form of an image reference for equality checks: adds the
/// default registry, `library/` namespace and `latest` tag when omitted.
pub fn normalize_image(image: &str) -> String {
    let image = image.trim();
    let (name, digest) = match image.split_once('@') {
        Some((n, d)) => (n, Some(d)),
        None => (image, None),
    };
    let last_segment = name.rsplit('/').next().unwrap_or(name);
    let name = if digest.is_none() && !last_segment.contains(':') {
        format!("{name}:latest")
    } else {
        name.to_string()
    };
    let first = name.split('/').next().unwrap_or("");
    let has_registry = name.contains('/') && (first.contains('.') || first.contains(':') || first == "localhost");
    let name = if has_registry {
        name
    } else if name.contains('/') {
        format!("docker.io/{name}")
    } else {
        format!("docker.io/library/{name}")
    };
    match digest {
        Some(d) => format!("{name}@{d}"),
        None => name,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_normalization() {
        assert_eq!(normalize_image("busybox"), "docker.io/library/busybox:latest");
        assert_eq!(normalize_image("busybox:stable"), "docker.io/library/busybox:stable");
        assert_eq!(normalize_image("science/sim:2.1"), "docker.io/science/sim:2.1");
        assert_eq!(normalize_image("ghcr.io/a/b:1"), "ghcr.io/a/b:1");
        assert_eq!(normalize_image("localhost:5000/x"), "localhost:5000/x:latest");
        assert_eq!(normalize_image("a/b@sha256:00"), "docker.io/a/b@sha256:00");
    }

    #[test]
    fn jitter_bounds() {
        let base = Duration::from_millis(1000);
        for attempt in 0..50 {
            let d = jittered(base, "pod/payload", attempt);
            assert!(d >= base && d <= base + Duration::from_millis(100));
            assert_eq!(d, jittered(base, "pod/payload", attempt));
        }
        assert_eq!(jittered(Duration::from_millis(5), "k", 1), Duration::from_millis(5));
    }
}
