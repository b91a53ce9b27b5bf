//! The task repository: claim/lease state machine, a directory-backed
//! reference server, and the clients a pilot uses.
//!
//! Leases expire lazily: every operation first requeues claims whose lease
//! has run out. A completion report is still accepted during a grace window
//! after expiry, unless another pilot has claimed the task meanwhile.

pub mod http;
pub mod staging;
pub mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExitReport, TaskSpec};

pub use staging::{stage_inputs, upload_outputs, UploadSummary};
pub use store::{LocalRepo, Repository};

pub const DEFAULT_GRACE_SECONDS: u64 = 60;

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("not authorized")]
    Unauthorized,
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("unknown claim {0}")]
    UnknownClaim(String),
    #[error("claim expired")]
    ClaimExpired,
    #[error("task {0} was claimed by another pilot")]
    Superseded(String),
    #[error("task {0} already finished")]
    AlreadyTerminal(String),
    #[error("task {0} already exists")]
    Duplicate(String),
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("unsafe archive entry {entry:?} in {archive}")]
    UnsafeArchive { archive: String, entry: String },
    #[error("cannot unpack {archive}: {message}")]
    Archive { archive: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl RepoError {
    pub fn is_transient(&self) -> bool {
        matches!(self, Self::Transport(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotDescriptor {
    pub pilot_id: String,
    #[serde(default)]
    pub capabilities: BTreeMap<String, String>,
}

impl PilotDescriptor {
    pub fn new(pilot_id: impl Into<String>) -> Self {
        Self {
            pilot_id: pilot_id.into(),
            capabilities: BTreeMap::new(),
        }
    }

    /// Every requirement must be matched exactly by a capability.
    pub fn satisfies(&self, requirements: &BTreeMap<String, String>) -> bool {
        requirements.iter().all(|(k, v)| self.capabilities.get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimTicket {
    pub task: TaskSpec,
    pub claim_id: String,
    /// Unix epoch seconds.
    pub lease_expiry: u64,
}

/// How a claimed task ended, as reported by the pilot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    Exit(ExitReport),
    /// No exit code exists (bind timeout, missing report, limit breach...).
    Failure(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub completion: Completion,
    #[serde(default)]
    pub missing_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TaskStatus {
    Queued,
    Claimed { claim_id: String, lease_expiry: u64 },
    Completed { report: ExitReport },
    Failed { exit_code: Option<u8>, reason: Option<String> },
}

impl TaskStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::Completed { .. } | Self::Failed { .. })
    }
}

impl fmt::Display for TaskStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Queued => f.write_str("queued"),
            Self::Claimed { .. } => f.write_str("claimed"),
            Self::Completed { .. } => f.write_str("completed"),
            Self::Failed {
                exit_code: Some(code), ..
            } => write!(f, "failed({code})"),
            Self::Failed { reason, .. } => write!(f, "failed({})", reason.as_deref().unwrap_or("unknown")),
        }
    }
}

/// Per-task bookkeeping of the reference repository.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub spec: TaskSpec,
    pub seq: u64,
    pub status: TaskStatus,
    #[serde(default)]
    pub claims_issued: u32,
    #[serde(default)]
    pub requeues: u32,
    /// Every claim issued, oldest first, with its lease expiry.
    #[serde(default)]
    pub claims: Vec<(String, u64)>,
    #[serde(default)]
    pub missing_outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub status: String,
    pub claims_issued: u32,
    pub requeues: u32,
    pub missing_outputs: Vec<String>,
}

impl From<&TaskRecord> for TaskView {
    fn from(r: &TaskRecord) -> Self {
        Self {
            task_id: r.spec.task_id.clone(),
            status: r.status.to_string(),
            claims_issued: r.claims_issued,
            requeues: r.requeues,
            missing_outputs: r.missing_outputs.clone(),
        }
    }
}

/// Pure claim state machine. Time is passed in as unix seconds.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RepoState {
    pub tasks: BTreeMap<String, TaskRecord>,
    pub next_seq: u64,
    pub next_claim: u64,
    pub grace_seconds: u64,
}

impl RepoState {
    pub fn new(grace_seconds: u64) -> Self {
        Self {
            grace_seconds,
            ..Self::default()
        }
    }

    pub fn submit(&mut self, spec: TaskSpec) -> Result<(), RepoError> {
        spec.validate().map_err(|e| RepoError::Rejected(e.to_string()))?;
        if self.tasks.contains_key(&spec.task_id) {
            return Err(RepoError::Duplicate(spec.task_id));
        }
        self.next_seq += 1;
        self.tasks.insert(
            spec.task_id.clone(),
            TaskRecord {
                spec,
                seq: self.next_seq,
                status: TaskStatus::Queued,
                claims_issued: 0,
                requeues: 0,
                claims: Vec::new(),
                missing_outputs: Vec::new(),
            },
        );
        Ok(())
    }

    /// Requeues every claim whose lease ended at or before `now`. Returns
    /// the ids of requeued tasks.
    pub fn expire(&mut self, now: u64) -> Vec<String> {
        let mut requeued = Vec::new();
        for (id, r) in &mut self.tasks {
            if let TaskStatus::Claimed { lease_expiry, .. } = r.status {
                if lease_expiry <= now {
                    r.status = TaskStatus::Queued;
                    r.requeues += 1;
                    requeued.push(id.clone());
                }
            }
        }
        requeued
    }

    /// Claims the oldest queued task the pilot can run.
    pub fn acquire(&mut self, pilot: &PilotDescriptor, now: u64) -> Option<ClaimTicket> {
        self.expire(now);
        let record = self
            .tasks
            .values_mut()
            .filter(|r| r.status == TaskStatus::Queued && pilot.satisfies(&r.spec.requirements))
            .min_by_key(|r| r.seq)?;
        self.next_claim += 1;
        let claim_id = format!("claim-{:06}", self.next_claim);
        let lease_expiry = now + record.spec.lease_seconds;
        record.status = TaskStatus::Claimed {
            claim_id: claim_id.clone(),
            lease_expiry,
        };
        record.claims_issued += 1;
        record.claims.push((claim_id.clone(), lease_expiry));
        Some(ClaimTicket {
            task: record.spec.clone(),
            claim_id,
            lease_expiry,
        })
    }

    /// The task a claim was issued for, the claim's lease expiry, and
    /// whether it is the task's most recent claim.
    fn task_of_claim(&self, claim_id: &str) -> Result<(&TaskRecord, u64, bool), RepoError> {
        self.tasks
            .values()
            .find_map(|r| {
                let i = r.claims.iter().position(|(c, _)| c == claim_id)?;
                Some((r, r.claims[i].1, i + 1 == r.claims.len()))
            })
            .ok_or_else(|| RepoError::UnknownClaim(claim_id.to_string()))
    }

    /// The task whose live claim is `claim_id`; uploads need this.
    pub fn live_claim(&mut self, claim_id: &str, now: u64) -> Result<String, RepoError> {
        self.expire(now);
        let (r, _, latest) = self.task_of_claim(claim_id)?;
        match &r.status {
            s if s.is_terminal() => Err(RepoError::AlreadyTerminal(r.spec.task_id.clone())),
            _ if !latest => Err(RepoError::Superseded(r.spec.task_id.clone())),
            TaskStatus::Claimed { .. } => Ok(r.spec.task_id.clone()),
            _ => Err(RepoError::ClaimExpired),
        }
    }

    /// Records the terminal state. Exit code 0 completes the task; anything
    /// else fails it. Terminal tasks are never handed out again.
    pub fn complete(&mut self, claim_id: &str, request: &CompletionRequest, now: u64) -> Result<TaskStatus, RepoError> {
        self.expire(now);
        let grace = self.grace_seconds;
        let (r, expiry, latest) = self.task_of_claim(claim_id)?;
        let task_id = r.spec.task_id.clone();
        match &r.status {
            s if s.is_terminal() => return Err(RepoError::AlreadyTerminal(task_id)),
            _ if !latest => return Err(RepoError::Superseded(task_id)),
            TaskStatus::Claimed { .. } => {}
            _ if now <= expiry + grace => {}
            _ => return Err(RepoError::ClaimExpired),
        }
        if let Completion::Exit(report) = &request.completion {
            if report.task_id != task_id {
                return Err(RepoError::Rejected(format!(
                    "report names task {} but claim is for {task_id}",
                    report.task_id
                )));
            }
        }
        let r = self.tasks.get_mut(&task_id).expect("found above");
        r.status = match &request.completion {
            Completion::Exit(report) if report.exit_code == 0 => TaskStatus::Completed { report: report.clone() },
            Completion::Exit(report) => TaskStatus::Failed {
                exit_code: Some(report.exit_code),
                reason: None,
            },
            Completion::Failure(reason) => TaskStatus::Failed {
                exit_code: None,
                reason: Some(reason.clone()),
            },
        };
        r.missing_outputs = request.missing_outputs.clone();
        Ok(r.status.clone())
    }

    pub fn view(&self, task_id: &str) -> Result<TaskView, RepoError> {
        self.tasks
            .get(task_id)
            .map(TaskView::from)
            .ok_or_else(|| RepoError::UnknownTask(task_id.to_string()))
    }

    /// All tasks in submission order.
    pub fn list(&self) -> Vec<TaskView> {
        let mut records: Vec<_> = self.tasks.values().collect();
        records.sort_by_key(|r| r.seq);
        records.into_iter().map(TaskView::from).collect()
    }
}

/// What a pilot needs from a repository.
pub trait RepoClient {
    fn acquire_task(&self, pilot: &PilotDescriptor) -> Result<Option<ClaimTicket>, RepoError>;
    fn fetch_input(&self, ticket: &ClaimTicket, name: &str) -> Result<Vec<u8>, RepoError>;
    fn upload_output(&self, ticket: &ClaimTicket, name: &str, data: &[u8]) -> Result<(), RepoError>;
    fn report_completion(&self, ticket: &ClaimTicket, request: &CompletionRequest) -> Result<(), RepoError>;
}

impl<R: RepoClient + ?Sized> RepoClient for std::rc::Rc<R> {
    fn acquire_task(&self, pilot: &PilotDescriptor) -> Result<Option<ClaimTicket>, RepoError> {
        (**self).acquire_task(pilot)
    }
    fn fetch_input(&self, ticket: &ClaimTicket, name: &str) -> Result<Vec<u8>, RepoError> {
        (**self).fetch_input(ticket, name)
    }
    fn upload_output(&self, ticket: &ClaimTicket, name: &str, data: &[u8]) -> Result<(), RepoError> {
        (**self).upload_output(ticket, name, data)
    }
    fn report_completion(&self, ticket: &ClaimTicket, request: &CompletionRequest) -> Result<(), RepoError> {
        (**self).report_completion(ticket, request)
    }
}
