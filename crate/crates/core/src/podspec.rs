//! The two-container pod that makes unprivileged late binding possible.
//!
//! Container 0 is the pilot, container 1 the payload. Both mount the
//! `shared` volume at the same path; only the pilot mounts `pilot-private`.
//! The payload container starts on the parking image running the bootstrap
//! wait loop; its image is patched per task later.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConfigError, PilotConfig};
use crate::wrapper::generate_bootstrap_command;

pub const SHARED_VOLUME: &str = "shared";
pub const PRIVATE_VOLUME: &str = "pilot-private";
pub const PILOT_INDEX: usize = 0;
pub const PAYLOAD_INDEX: usize = 1;

/// Environment variable names the pilot reads its own identity from.
pub const POD_NAME_ENV: &str = "POD_NAME";
pub const POD_NAMESPACE_ENV: &str = "POD_NAMESPACE";
/// Carries the pilot configuration (TOML) into the pilot container.
pub const CONFIG_ENV: &str = "PODPILOT_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RestartPolicy {
    Always,
    OnFailure,
}

impl RestartPolicy {
    fn as_str(self) -> &'static str {
        match self {
            Self::Always => "Always",
            Self::OnFailure => "OnFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    /// Plain node-local `emptyDir`.
    EphemeralEmpty,
    /// Memory-backed `emptyDir`, independent of node disk layout.
    HostAgnosticScratch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeSpec {
    pub name: String,
    pub kind: VolumeKind,
    pub size_limit_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnvValue {
    Literal(String),
    /// Downward API field path, e.g. `metadata.name`.
    FieldRef(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvVar {
    pub name: String,
    pub value: EnvValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VolumeMount {
    pub volume: String,
    pub mount_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerSpec {
    pub name: String,
    pub image: String,
    pub command: Vec<String>,
    pub env: Vec<EnvVar>,
    pub run_as_user: u32,
    pub allow_privilege_escalation: bool,
    pub volume_mounts: Vec<VolumeMount>,
}

impl ContainerSpec {
    fn mount_of(&self, volume: &str) -> Option<&VolumeMount> {
        self.volume_mounts.iter().find(|m| m.volume == volume)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PodBlueprint {
    pub pod_name: String,
    pub namespace: String,
    pub share_process_namespace: bool,
    /// `[pilot, payload]`.
    pub containers: Vec<ContainerSpec>,
    pub volumes: Vec<VolumeSpec>,
    pub restart_policy: RestartPolicy,
    pub service_account: String,
}

impl PodBlueprint {
    pub fn pilot(&self) -> Option<&ContainerSpec> {
        self.containers.get(PILOT_INDEX)
    }

    pub fn payload(&self) -> Option<&ContainerSpec> {
        self.containers.get(PAYLOAD_INDEX)
    }

    pub fn volume_mut(&mut self, name: &str) -> Option<&mut VolumeSpec> {
        self.volumes.iter_mut().find(|v| v.name == name)
    }

    /// Where the shared volume is mounted (same path in both containers).
    pub fn shared_mount_path(&self) -> Option<&PathBuf> {
        self.pilot()?.mount_of(SHARED_VOLUME).map(|m| &m.mount_path)
    }
}

pub fn build_pod_blueprint(config: &PilotConfig, pilot_image: &str) -> Result<PodBlueprint, ConfigError> {
    config.validate()?;
    if pilot_image.trim().is_empty() {
        return Err(ConfigError::Empty("pilot image"));
    }
    let shared = VolumeMount {
        volume: SHARED_VOLUME.to_string(),
        mount_path: config.shared_dir.clone(),
    };
    let pilot = ContainerSpec {
        name: config.pilot_container_name.clone(),
        image: pilot_image.to_string(),
        command: vec!["podpilot".to_string(), "run".to_string()],
        env: vec![
            EnvVar {
                name: POD_NAME_ENV.to_string(),
                value: EnvValue::FieldRef("metadata.name".to_string()),
            },
            EnvVar {
                name: POD_NAMESPACE_ENV.to_string(),
                value: EnvValue::FieldRef("metadata.namespace".to_string()),
            },
            EnvVar {
                name: CONFIG_ENV.to_string(),
                value: EnvValue::Literal(config.to_toml()),
            },
        ],
        run_as_user: 0,
        allow_privilege_escalation: false,
        volume_mounts: vec![
            shared.clone(),
            VolumeMount {
                volume: PRIVATE_VOLUME.to_string(),
                mount_path: config.private_dir.clone(),
            },
        ],
    };
    let payload = ContainerSpec {
        name: config.payload_container_name.clone(),
        image: config.parking_image.clone(),
        command: generate_bootstrap_command(config),
        env: Vec::new(),
        run_as_user: 0,
        allow_privilege_escalation: false,
        volume_mounts: vec![shared],
    };
    Ok(PodBlueprint {
        pod_name: config.pod_name.clone(),
        namespace: config.namespace.clone(),
        share_process_namespace: true,
        containers: vec![pilot, payload],
        volumes: vec![
            VolumeSpec {
                name: SHARED_VOLUME.to_string(),
                kind: VolumeKind::EphemeralEmpty,
                size_limit_bytes: None,
            },
            VolumeSpec {
                name: PRIVATE_VOLUME.to_string(),
                kind: VolumeKind::EphemeralEmpty,
                size_limit_bytes: None,
            },
        ],
        restart_policy: RestartPolicy::Always,
        service_account: config.service_account.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LintRule {
    ProcessNamespace,
    ContainerLayout,
    Volumes,
    SharedMount,
    PrivateVolumeExposed,
    PrivateVolumeMissing,
    PayloadEscalation,
    PseudoRoot,
    Restart,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub rule: LintRule,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.rule, self.message)
    }
}

fn diag(rule: LintRule, message: impl Into<String>) -> Diagnostic {
    Diagnostic {
        rule,
        message: message.into(),
    }
}

/// Checks the structural invariants and the security posture. An empty
/// result means the blueprint is safe to submit.
pub fn lint_blueprint(bp: &PodBlueprint) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if !bp.share_process_namespace {
        out.push(diag(LintRule::ProcessNamespace, "shareProcessNamespace must be true"));
    }
    if bp.restart_policy != RestartPolicy::Always {
        out.push(diag(
            LintRule::Restart,
            "restartPolicy must be Always so payload restarts are delegated to the runtime",
        ));
    }
    let names: Vec<&str> = bp.volumes.iter().map(|v| v.name.as_str()).collect();
    for required in [SHARED_VOLUME, PRIVATE_VOLUME] {
        match names.iter().filter(|n| **n == required).count() {
            1 => {}
            0 => out.push(diag(LintRule::Volumes, format!("volume {required:?} missing"))),
            _ => out.push(diag(LintRule::Volumes, format!("volume {required:?} declared twice"))),
        }
    }
    for v in &bp.volumes {
        if v.size_limit_bytes == Some(0) {
            out.push(diag(LintRule::Volumes, format!("volume {:?} has a zero size limit", v.name)));
        }
    }

    let (pilot, payload) = match bp.containers.as_slice() {
        [pilot, payload] if pilot.name != payload.name => (pilot, payload),
        [_, _] => {
            out.push(diag(LintRule::ContainerLayout, "pilot and payload containers share a name"));
            return out;
        }
        other => {
            out.push(diag(
                LintRule::ContainerLayout,
                format!("expected exactly 2 containers (pilot, payload), found {}", other.len()),
            ));
            return out;
        }
    };

    match (pilot.mount_of(SHARED_VOLUME), payload.mount_of(SHARED_VOLUME)) {
        (Some(a), Some(b)) if a.mount_path == b.mount_path => {}
        (Some(_), Some(_)) => out.push(diag(
            LintRule::SharedMount,
            "shared volume mounted at different paths in pilot and payload",
        )),
        _ => out.push(diag(LintRule::SharedMount, "shared volume must be mounted in both containers")),
    }
    if pilot.mount_of(PRIVATE_VOLUME).is_none() {
        out.push(diag(LintRule::PrivateVolumeMissing, "private volume not mounted in pilot"));
    }
    if payload.mount_of(PRIVATE_VOLUME).is_some() {
        out.push(diag(LintRule::PrivateVolumeExposed, "private volume exposed to payload"));
    }
    if payload.allow_privilege_escalation {
        out.push(diag(
            LintRule::PayloadEscalation,
            "payload container must set allowPrivilegeEscalation=false",
        ));
    }
    for c in [pilot, payload] {
        if c.run_as_user != 0 {
            out.push(diag(
                LintRule::PseudoRoot,
                format!("container {:?} must run as container pseudo-root (runAsUser 0)", c.name),
            ));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestFormat {
    Yaml,
    Json,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest does not decode: {0}")]
    Decode(String),
    #[error("manifest field {0} is missing or unsupported")]
    Field(String),
}

// Kubernetes pod schema subset. Field order here is the rendered order.

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KPod {
    api_version: String,
    kind: String,
    metadata: KMeta,
    spec: KSpec,
}

#[derive(Serialize, Deserialize)]
struct KMeta {
    name: String,
    namespace: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KSpec {
    share_process_namespace: bool,
    restart_policy: String,
    service_account_name: String,
    containers: Vec<KContainer>,
    volumes: Vec<KVolume>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KContainer {
    name: String,
    image: String,
    command: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    env: Vec<KEnv>,
    security_context: KSecurity,
    volume_mounts: Vec<KMount>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KEnv {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value_from: Option<KEnvSource>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KEnvSource {
    field_ref: KFieldRef,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KFieldRef {
    field_path: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KSecurity {
    run_as_user: u32,
    allow_privilege_escalation: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KMount {
    name: String,
    mount_path: String,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct KVolume {
    name: String,
    empty_dir: KEmptyDir,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
struct KEmptyDir {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    medium: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size_limit: Option<String>,
}

fn to_k8s(bp: &PodBlueprint) -> KPod {
    KPod {
        api_version: "v1".to_string(),
        kind: "Pod".to_string(),
        metadata: KMeta {
            name: bp.pod_name.clone(),
            namespace: bp.namespace.clone(),
        },
        spec: KSpec {
            share_process_namespace: bp.share_process_namespace,
            restart_policy: bp.restart_policy.as_str().to_string(),
            service_account_name: bp.service_account.clone(),
            containers: bp
                .containers
                .iter()
                .map(|c| KContainer {
                    name: c.name.clone(),
                    image: c.image.clone(),
                    command: c.command.clone(),
                    env: c
                        .env
                        .iter()
                        .map(|e| match &e.value {
                            EnvValue::Literal(v) => KEnv {
                                name: e.name.clone(),
                                value: Some(v.clone()),
                                value_from: None,
                            },
                            EnvValue::FieldRef(path) => KEnv {
                                name: e.name.clone(),
                                value: None,
                                value_from: Some(KEnvSource {
                                    field_ref: KFieldRef {
                                        field_path: path.clone(),
                                    },
                                }),
                            },
                        })
                        .collect(),
                    security_context: KSecurity {
                        run_as_user: c.run_as_user,
                        allow_privilege_escalation: c.allow_privilege_escalation,
                    },
                    volume_mounts: c
                        .volume_mounts
                        .iter()
                        .map(|m| KMount {
                            name: m.volume.clone(),
                            mount_path: m.mount_path.to_string_lossy().into_owned(),
                        })
                        .collect(),
                })
                .collect(),
            volumes: bp
                .volumes
                .iter()
                .map(|v| KVolume {
                    name: v.name.clone(),
                    empty_dir: KEmptyDir {
                        medium: match v.kind {
                            VolumeKind::EphemeralEmpty => None,
                            VolumeKind::HostAgnosticScratch => Some("Memory".to_string()),
                        },
                        size_limit: v.size_limit_bytes.map(|b| b.to_string()),
                    },
                })
                .collect(),
        },
    }
}

fn from_k8s(pod: KPod) -> Result<PodBlueprint, ManifestError> {
    let restart_policy = match pod.spec.restart_policy.as_str() {
        "Always" => RestartPolicy::Always,
        "OnFailure" => RestartPolicy::OnFailure,
        other => return Err(ManifestError::Field(format!("spec.restartPolicy={other}"))),
    };
    let containers = pod
        .spec
        .containers
        .into_iter()
        .map(|c| {
            let env = c
                .env
                .into_iter()
                .map(|e| {
                    let value = match (e.value, e.value_from) {
                        (Some(v), None) => EnvValue::Literal(v),
                        (None, Some(src)) => EnvValue::FieldRef(src.field_ref.field_path),
                        _ => return Err(ManifestError::Field(format!("env {}", e.name))),
                    };
                    Ok(EnvVar { name: e.name, value })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(ContainerSpec {
                name: c.name,
                image: c.image,
                command: c.command,
                env,
                run_as_user: c.security_context.run_as_user,
                allow_privilege_escalation: c.security_context.allow_privilege_escalation,
                volume_mounts: c
                    .volume_mounts
                    .into_iter()
                    .map(|m| VolumeMount {
                        volume: m.name,
                        mount_path: PathBuf::from(m.mount_path),
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>, ManifestError>>()?;
    let volumes = pod
        .spec
        .volumes
        .into_iter()
        .map(|v| {
            let kind = match v.empty_dir.medium.as_deref() {
                None | Some("") => VolumeKind::EphemeralEmpty,
                Some("Memory") => VolumeKind::HostAgnosticScratch,
                Some(other) => return Err(ManifestError::Field(format!("emptyDir.medium={other}"))),
            };
            let size_limit_bytes = v
                .empty_dir
                .size_limit
                .map(|s| s.parse::<u64>().map_err(|_| ManifestError::Field(format!("sizeLimit={s}"))))
                .transpose()?;
            Ok(VolumeSpec {
                name: v.name,
                kind,
                size_limit_bytes,
            })
        })
        .collect::<Result<Vec<_>, ManifestError>>()?;
    Ok(PodBlueprint {
        pod_name: pod.metadata.name,
        namespace: pod.metadata.namespace,
        share_process_namespace: pod.spec.share_process_namespace,
        containers,
        volumes,
        restart_policy,
        service_account: pod.spec.service_account_name,
    })
}

pub fn render_manifest(bp: &PodBlueprint, format: ManifestFormat) -> String {
    let pod = to_k8s(bp);
    match format {
        ManifestFormat::Json => {
            let mut text = serde_json::to_string_pretty(&pod).expect("pod manifest serializes");
            text.push('\n');
            text
        }
        ManifestFormat::Yaml => serde_yaml::to_string(&pod).expect("pod manifest serializes"),
    }
}

pub fn parse_manifest(text: &str, format: ManifestFormat) -> Result<PodBlueprint, ManifestError> {
    let pod: KPod = match format {
        ManifestFormat::Json => serde_json::from_str(text).map_err(|e| ManifestError::Decode(e.to_string()))?,
        ManifestFormat::Yaml => serde_yaml::from_str(text).map_err(|e| ManifestError::Decode(e.to_string()))?,
    };
    if pod.kind != "Pod" {
        return Err(ManifestError::Field(format!("kind={}", pod.kind)));
    }
    from_k8s(pod)
}

/// Container name → image for every container in a manifest; used to check
/// that no task image leaks into a freshly built pod.
pub fn images(bp: &PodBlueprint) -> BTreeMap<String, String> {
    bp.containers.iter().map(|c| (c.name.clone(), c.image.clone())).collect()
}
