//! Domain types shared by every part of the pilot.
//!
//! All types here are plain values: cloneable, comparable and serializable.
//! Validation lives next to each type so that every entry point (config file,
//! repository JSON, scenario file) rejects the same invalid inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default numeric UID the payload's top process is dropped to.
pub const DEFAULT_PAYLOAD_UID: u32 = 64000;
/// UID of the pod infrastructure ("pause") process.
pub const DEFAULT_PAUSE_UID: u32 = 65535;
/// Default symbolic name for the payload UID, as shown by `ps` in images that
/// define the user.
pub const DEFAULT_PAYLOAD_USER: &str = "payload";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("payload uid must be nonzero")]
    PayloadUidZero,
    #[error("payload uid must differ from pause uid")]
    PayloadUidIsPauseUid,
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{0} must be strictly positive")]
    NotPositive(&'static str),
    #[error("{field} must be an absolute path, got {value:?}")]
    NotAbsolute { field: &'static str, value: PathBuf },
    #[error("{field} must be a relative path without '..' segments, got {value:?}")]
    BadRelativePath { field: &'static str, value: String },
    #[error("shared dir and private dir must be disjoint")]
    OverlappingDirs,
    #[error("pilot and payload containers must have distinct names")]
    SameContainerNames,
    #[error("invalid task id {0:?}: use 1-128 characters from [A-Za-z0-9._-]")]
    BadTaskId(String),
    #[error("input {0:?} is marked for unpacking but is not a recognized archive")]
    NotAnArchive(String),
    #[error("duplicate {kind} name {name:?}")]
    Duplicate { kind: &'static str, name: String },
    #[error("invalid environment variable name {0:?}")]
    BadEnvName(String),
    #[error("could not decode config: {0}")]
    Decode(String),
}

/// True when `path` is relative, non-empty, and contains only normal
/// segments (no `..`, no root, no prefix). `.` segments are tolerated.
pub fn is_contained_relative(path: &str) -> bool {
    if path.is_empty() || path.contains('\0') {
        return false;
    }
    let mut normal = 0;
    for c in Path::new(path).components() {
        match c {
            Component::Normal(_) => normal += 1,
            Component::CurDir => {}
            Component::ParentDir | Component::RootDir | Component::Prefix(_) => return false,
        }
    }
    normal > 0
}

/// Task ids double as directory names and URL path segments.
pub fn validate_task_id(id: &str) -> Result<(), ConfigError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'));
    if ok {
        Ok(())
    } else {
        Err(ConfigError::BadTaskId(id.to_string()))
    }
}

/// Shell-style identifier: `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_env_identifier(name: &str) -> bool {
    let mut bytes = name.bytes();
    match bytes.next() {
        Some(b) if b.is_ascii_alphabetic() || b == b'_' => {}
        _ => return false,
    }
    bytes.all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// Archive formats that may be unpacked during staging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveKind {
    Tar,
    TarGz,
    Zip,
}

impl ArchiveKind {
    pub fn from_name(name: &str) -> Option<Self> {
        let lower = name.to_ascii_lowercase();
        if lower.ends_with(".tar.gz") || lower.ends_with(".tgz") {
            Some(Self::TarGz)
        } else if lower.ends_with(".tar") {
            Some(Self::Tar)
        } else if lower.ends_with(".zip") {
            Some(Self::Zip)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputFile {
    pub name: String,
    pub source: String,
    #[serde(default)]
    pub unpack: bool,
}

impl InputFile {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !is_contained_relative(&self.name) {
            return Err(ConfigError::BadRelativePath {
                field: "input file name",
                value: self.name.clone(),
            });
        }
        if self.unpack && ArchiveKind::from_name(&self.name).is_none() {
            return Err(ConfigError::NotAnArchive(self.name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLimits {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_memory_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_processes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_wall_seconds: Option<u64>,
}

impl ResourceLimits {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("max_memory_bytes", self.max_memory_bytes),
            ("max_processes", self.max_processes),
            ("max_wall_seconds", self.max_wall_seconds),
        ] {
            if value == Some(0) {
                return Err(ConfigError::NotPositive(field));
            }
        }
        Ok(())
    }
}

fn default_lease_seconds() -> u64 {
    600
}

/// One user payload as held by the task repository.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub image: String,
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub input_files: Vec<InputFile>,
    #[serde(default)]
    pub output_files: Vec<String>,
    #[serde(default)]
    pub limits: ResourceLimits,
    #[serde(default = "default_lease_seconds")]
    pub lease_seconds: u64,
    /// Key/value pairs a pilot's capabilities must match exactly.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub requirements: BTreeMap<String, String>,
}

impl TaskSpec {
    /// A task with only the mandatory fields set.
    pub fn new(task_id: impl Into<String>, image: impl Into<String>, command: impl Into<String>) -> Self {
        Self {
            task_id: task_id.into(),
            image: image.into(),
            command: command.into(),
            args: Vec::new(),
            env: BTreeMap::new(),
            input_files: Vec::new(),
            output_files: Vec::new(),
            limits: ResourceLimits::default(),
            lease_seconds: default_lease_seconds(),
            requirements: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_task_id(&self.task_id)?;
        if self.image.trim().is_empty() {
            return Err(ConfigError::Empty("image"));
        }
        if self.command.is_empty() {
            return Err(ConfigError::Empty("command"));
        }
        if self.lease_seconds == 0 {
            return Err(ConfigError::NotPositive("lease_seconds"));
        }
        for name in self.env.keys() {
            if !is_env_identifier(name) {
                return Err(ConfigError::BadEnvName(name.clone()));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for input in &self.input_files {
            input.validate()?;
            if !seen.insert(input.name.as_str()) {
                return Err(ConfigError::Duplicate {
                    kind: "input",
                    name: input.name.clone(),
                });
            }
        }
        for out in &self.output_files {
            if !is_contained_relative(out) {
                return Err(ConfigError::BadRelativePath {
                    field: "output file",
                    value: out.clone(),
                });
            }
        }
        self.limits.validate()
    }
}

fn default_payload_user() -> String {
    DEFAULT_PAYLOAD_USER.to_string()
}

fn default_pause_uid() -> u32 {
    DEFAULT_PAUSE_UID
}

fn default_service_account() -> String {
    "pilot".to_string()
}

/// Static configuration of one pilot pod.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub pod_name: String,
    pub namespace: String,
    pub payload_container_name: String,
    pub pilot_container_name: String,
    pub parking_image: String,
    pub shared_dir: PathBuf,
    pub private_dir: PathBuf,
    pub control_subdir: String,
    pub payload_uid: u32,
    /// Symbolic alias of `payload_uid`, matched in process tables and used
    /// by the startup script when the image knows the user.
    #[serde(default = "default_payload_user")]
    pub payload_user: String,
    #[serde(default = "default_pause_uid")]
    pub pause_uid: u32,
    pub poll_interval_ms: u64,
    pub bind_timeout_seconds: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tasks: Option<u32>,
    pub idle_timeout_seconds: u64,
    pub repo_endpoint: String,
    #[serde(default = "default_service_account")]
    pub service_account: String,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            pod_name: "pilot-0".to_string(),
            namespace: "default".to_string(),
            payload_container_name: "payload".to_string(),
            pilot_container_name: "pilot".to_string(),
            parking_image: "busybox:stable".to_string(),
            shared_dir: PathBuf::from("/shared"),
            private_dir: PathBuf::from("/pilot"),
            control_subdir: ".pilot".to_string(),
            payload_uid: DEFAULT_PAYLOAD_UID,
            payload_user: default_payload_user(),
            pause_uid: DEFAULT_PAUSE_UID,
            poll_interval_ms: 1000,
            bind_timeout_seconds: 300,
            max_tasks: None,
            idle_timeout_seconds: 600,
            repo_endpoint: "http://127.0.0.1:8650".to_string(),
            service_account: default_service_account(),
        }
    }
}

impl PilotConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("pod_name", &self.pod_name),
            ("namespace", &self.namespace),
            ("payload_container_name", &self.payload_container_name),
            ("pilot_container_name", &self.pilot_container_name),
            ("parking_image", &self.parking_image),
            ("repo_endpoint", &self.repo_endpoint),
            ("service_account", &self.service_account),
        ] {
            if value.trim().is_empty() {
                return Err(ConfigError::Empty(field));
            }
        }
        if self.payload_uid == 0 {
            return Err(ConfigError::PayloadUidZero);
        }
        if self.payload_uid == self.pause_uid {
            return Err(ConfigError::PayloadUidIsPauseUid);
        }
        if self.payload_container_name == self.pilot_container_name {
            return Err(ConfigError::SameContainerNames);
        }
        for (field, dir) in [("shared_dir", &self.shared_dir), ("private_dir", &self.private_dir)] {
            if !dir.is_absolute() {
                return Err(ConfigError::NotAbsolute {
                    field,
                    value: dir.clone(),
                });
            }
        }
        if self.shared_dir.starts_with(&self.private_dir) || self.private_dir.starts_with(&self.shared_dir) {
            return Err(ConfigError::OverlappingDirs);
        }
        if !is_contained_relative(&self.control_subdir) {
            return Err(ConfigError::BadRelativePath {
                field: "control_subdir",
                value: self.control_subdir.clone(),
            });
        }
        if self.payload_user.is_empty()
            || !self
                .payload_user
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
        {
            return Err(ConfigError::Empty("payload_user"));
        }
        for (field, value) in [
            ("poll_interval_ms", self.poll_interval_ms),
            ("bind_timeout_seconds", self.bind_timeout_seconds),
            ("idle_timeout_seconds", self.idle_timeout_seconds),
        ] {
            if value == 0 {
                return Err(ConfigError::NotPositive(field));
            }
        }
        if self.max_tasks == Some(0) {
            return Err(ConfigError::NotPositive("max_tasks"));
        }
        Ok(())
    }

    /// `<shared_dir>/<control_subdir>`.
    pub fn control_dir(&self) -> PathBuf {
        self.shared_dir.join(&self.control_subdir)
    }

    /// Parses the TOML text encoding and validates it.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Decode(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("PilotConfig always encodes as TOML")
    }
}

/// File-mediated record of one payload run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitReport {
    pub task_id: String,
    /// One octet: the portable shell exit status.
    pub exit_code: u8,
    pub started_at: u64,
    pub finished_at: u64,
}

impl ExitReport {
    pub fn new(task_id: impl Into<String>, exit_code: u8, started_at: u64, finished_at: u64) -> Result<Self, ConfigError> {
        let report = Self {
            task_id: task_id.into(),
            exit_code,
            started_at,
            finished_at,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        validate_task_id(&self.task_id)?;
        if self.finished_at < self.started_at {
            return Err(ConfigError::NotPositive("finished_at - started_at"));
        }
        Ok(())
    }
}

/// One row of the pod-wide process table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessRecord {
    /// Numeric (`"64000"`) or symbolic (`"payload"`) user.
    pub uid: String,
    pub pid: u32,
    pub ppid: u32,
    pub cmd: String,
}

impl ProcessRecord {
    pub fn new(uid: impl Into<String>, pid: u32, ppid: u32, cmd: impl Into<String>) -> Self {
        Self {
            uid: uid.into(),
            pid,
            ppid,
            cmd: cmd.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PilotPhase {
    Validate,
    Fetch,
    Bind,
    Stage,
    Run,
    Collect,
    Cleanup,
    Drain,
    Terminated,
}

impl fmt::Display for PilotPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_config_is_valid() {
        PilotConfig::default().validate().unwrap();
    }

    #[test]
    fn payload_uid_zero_rejected() {
        let config = PilotConfig {
            payload_uid: 0,
            ..PilotConfig::default()
        };
        let err = config.validate().unwrap_err();
        assert_eq!(err, ConfigError::PayloadUidZero);
        assert_eq!(err.to_string(), "payload uid must be nonzero");
    }

    #[test]
    fn nested_dirs_rejected() {
        let config = PilotConfig {
            private_dir: PathBuf::from("/shared/private"),
            ..PilotConfig::default()
        };
        assert_eq!(config.validate().unwrap_err(), ConfigError::OverlappingDirs);
        let config = PilotConfig {
            private_dir: PathBuf::from("/shared"),
            ..PilotConfig::default()
        };
        assert_eq!(config.validate().unwrap_err(), ConfigError::OverlappingDirs);
        // sibling with a common string prefix is fine
        let config = PilotConfig {
            private_dir: PathBuf::from("/shared-private"),
            ..PilotConfig::default()
        };
        config.validate().unwrap();
    }

    #[test]
    fn relative_path_containment() {
        assert!(is_contained_relative("a/b.txt"));
        assert!(is_contained_relative("./a"));
        assert!(!is_contained_relative("../evil"));
        assert!(!is_contained_relative("a/../../b"));
        assert!(!is_contained_relative("/etc/passwd"));
        assert!(!is_contained_relative(""));
        assert!(!is_contained_relative("."));
    }

    #[test]
    fn unpack_requires_archive_suffix() {
        let mut input = InputFile {
            name: "data.csv".into(),
            source: "files/t/data.csv".into(),
            unpack: true,
        };
        assert!(matches!(input.validate(), Err(ConfigError::NotAnArchive(_))));
        for name in ["d.tar", "d.tar.gz", "d.TGZ", "d.zip"] {
            input.name = name.into();
            input.validate().unwrap();
        }
    }

    #[test]
    fn task_validation() {
        let mut task = TaskSpec::new("t1", "science/sim:2.1", "/shared/run");
        task.validate().unwrap();
        task.output_files.push("../up".into());
        assert!(task.validate().is_err());
        let task = TaskSpec::new("", "img", "/bin/true");
        assert!(task.validate().is_err());
        let task = TaskSpec::new("t1", " ", "/bin/true");
        assert_eq!(task.validate().unwrap_err(), ConfigError::Empty("image"));
        let mut task = TaskSpec::new("t1", "img", "/bin/true");
        task.env.insert("1BAD".into(), "x".into());
        assert!(task.validate().is_err());
    }

    #[test]
    fn exit_report_ordering() {
        assert!(ExitReport::new("t", 0, 10, 9).is_err());
        assert!(ExitReport::new("t", 255, 10, 10).is_ok());
    }

    fn arb_task() -> impl Strategy<Value = TaskSpec> {
        (
            "[a-z0-9][a-z0-9._-]{0,12}",
            "[a-z]{1,8}/[a-z]{1,8}:[0-9]",
            proptest::collection::vec("[ -~]{0,10}", 0..3),
            proptest::collection::btree_map("[A-Z_][A-Z0-9_]{0,5}", "\\PC{0,8}", 0..3),
            proptest::collection::vec("[a-z]{1,6}(/[a-z]{1,6})?", 0..3),
            proptest::option::of(1u64..1 << 40),
            1u64..10_000,
        )
            .prop_map(|(id, image, args, env, outputs, mem, lease)| TaskSpec {
                task_id: id,
                image,
                command: "/shared/run".into(),
                args,
                env,
                input_files: vec![InputFile {
                    name: "in.tar".into(),
                    source: "files/x/in.tar".into(),
                    unpack: true,
                }],
                output_files: outputs,
                limits: ResourceLimits {
                    max_memory_bytes: mem,
                    max_processes: Some(4),
                    max_wall_seconds: None,
                },
                lease_seconds: lease,
                requirements: BTreeMap::new(),
            })
    }

    proptest! {
        #[test]
        fn task_json_round_trip(task in arb_task()) {
            let text = serde_json::to_string(&task).unwrap();
            let back: TaskSpec = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, task);
        }

        #[test]
        fn config_toml_round_trip(uid in 1u32..65535, poll in 1u64..10_000, max in proptest::option::of(1u32..100)) {
            let config = PilotConfig { payload_uid: uid, poll_interval_ms: poll, max_tasks: max, ..PilotConfig::default() };
            let back = PilotConfig::from_toml(&config.to_toml()).unwrap();
            prop_assert_eq!(back, config);
        }

        #[test]
        fn exit_report_json_round_trip(code in any::<u8>(), start in 0u64..1 << 40, dur in 0u64..1 << 20) {
            let report = ExitReport::new("t-1", code, start, start + dur).unwrap();
            let back: ExitReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
            prop_assert_eq!(back, report);
        }
    }
}
