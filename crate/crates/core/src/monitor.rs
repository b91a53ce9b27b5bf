//! Watching the payload through the pod-wide process table.
//!
//! With a shared process namespace the pilot sees every process in the pod.
//! Ownership is decided purely by UID: the payload UID marks payload
//! processes, the pause UID marks the infrastructure process, and everything
//! else belongs to the pilot side (including the root-owned bootstrap and
//! startup wrapper in the payload container).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

use crate::clock::Clock;
use crate::model::{PilotConfig, ProcessRecord, ResourceLimits};

/// Grace period between the polite and the forced kill.
pub const DEFAULT_KILL_GRACE: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("process table unavailable: {0}")]
    Unavailable(String),
    #[error("pid {0} appears twice in one snapshot")]
    DuplicatePid(u32),
    #[error("failed to signal pid {pid}: {source}")]
    Signal {
        pid: u32,
        #[source]
        source: io::Error,
    },
}

pub trait ProcessProvider {
    fn process_table(&self) -> Result<Vec<ProcessRecord>, MonitorError>;

    /// Resident memory of one process, when the provider can measure it.
    fn memory_bytes(&self, _pid: u32) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KillSignal {
    Terminate,
    Kill,
}

pub trait ProcessControl: ProcessProvider {
    /// Delivers a signal. A process that no longer exists is not an error.
    fn signal(&self, pid: u32, signal: KillSignal) -> Result<(), MonitorError>;
}

impl<P: ProcessProvider + ?Sized> ProcessProvider for std::rc::Rc<P> {
    fn process_table(&self) -> Result<Vec<ProcessRecord>, MonitorError> {
        (**self).process_table()
    }
    fn memory_bytes(&self, pid: u32) -> Option<u64> {
        (**self).memory_bytes(pid)
    }
}

impl<P: ProcessControl + ?Sized> ProcessControl for std::rc::Rc<P> {
    fn signal(&self, pid: u32, signal: KillSignal) -> Result<(), MonitorError> {
        (**self).signal(pid, signal)
    }
}

/// Matches a process-table UID column in numeric or symbolic form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UidMatcher {
    pub numeric: Option<u32>,
    pub name: Option<String>,
}

impl UidMatcher {
    pub fn numeric(uid: u32) -> Self {
        Self {
            numeric: Some(uid),
            name: None,
        }
    }

    pub fn named(name: impl Into<String>) -> Self {
        Self {
            numeric: None,
            name: Some(name.into()),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn payload(config: &PilotConfig) -> Self {
        Self::numeric(config.payload_uid).with_name(config.payload_user.clone())
    }

    pub fn pause(config: &PilotConfig) -> Self {
        Self::numeric(config.pause_uid)
    }

    pub fn matches(&self, uid: &str) -> bool {
        let uid = uid.trim();
        if let (Some(n), Ok(parsed)) = (self.numeric, uid.parse::<u32>()) {
            if n == parsed {
                return true;
            }
        }
        self.name.as_deref() == Some(uid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProcessSnapshot {
    pub taken_at: Duration,
    pub records: Vec<ProcessRecord>,
}

impl ProcessSnapshot {
    /// Builds a snapshot, rejecting duplicate pids.
    pub fn new(taken_at: Duration, records: Vec<ProcessRecord>) -> Result<Self, MonitorError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.pid) {
                return Err(MonitorError::DuplicatePid(r.pid));
            }
        }
        Ok(Self { taken_at, records })
    }

    pub fn pids_of(&self, uid: &UidMatcher) -> BTreeSet<u32> {
        self.records.iter().filter(|r| uid.matches(&r.uid)).map(|r| r.pid).collect()
    }
}

pub fn snapshot(provider: &dyn ProcessProvider, clock: &dyn Clock) -> Result<ProcessSnapshot, MonitorError> {
    let records = provider.process_table()?;
    ProcessSnapshot::new(clock.now(), records)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Classification {
    pub payload: BTreeSet<u32>,
    pub pilot: BTreeSet<u32>,
    pub infrastructure: BTreeSet<u32>,
}

/// Partitions the snapshot by UID. A record matching both matchers counts
/// as payload.
pub fn classify(snapshot: &ProcessSnapshot, payload: &UidMatcher, pause: &UidMatcher) -> Classification {
    let mut out = Classification::default();
    for r in &snapshot.records {
        if payload.matches(&r.uid) {
            out.payload.insert(r.pid);
        } else if pause.matches(&r.uid) {
            out.infrastructure.insert(r.pid);
        } else {
            out.pilot.insert(r.pid);
        }
    }
    out
}

pub fn payload_active(snapshot: &ProcessSnapshot, payload: &UidMatcher) -> bool {
    snapshot.records.iter().any(|r| payload.matches(&r.uid))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UsageSample {
    /// Summed resident memory of payload processes.
    pub memory_bytes: u64,
    /// Wall time since the payload was handed over.
    pub wall: Duration,
}

pub fn sample_usage(
    provider: &dyn ProcessProvider,
    snapshot: &ProcessSnapshot,
    payload: &UidMatcher,
    wall: Duration,
) -> UsageSample {
    let memory_bytes = snapshot
        .pids_of(payload)
        .into_iter()
        .filter_map(|pid| provider.memory_bytes(pid))
        .sum();
    UsageSample { memory_bytes, wall }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LimitKind {
    Processes,
    Memory,
    WallTime,
}

impl LimitKind {
    pub fn reason(self) -> &'static str {
        match self {
            Self::Processes => "process-limit",
            Self::Memory => "memory-limit",
            Self::WallTime => "wall-limit",
        }
    }
}

impl fmt::Display for LimitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.reason())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnforcementAction {
    Terminate { pids: BTreeSet<u32>, reason: LimitKind },
}

/// One `Terminate` per breached limit, in the order processes, memory, wall
/// time. Targets only payload pids.
pub fn enforce(
    snapshot: &ProcessSnapshot,
    limits: &ResourceLimits,
    usage: &UsageSample,
    payload: &UidMatcher,
) -> Vec<EnforcementAction> {
    let pids = snapshot.pids_of(payload);
    let mut breaches = Vec::new();
    if limits.max_processes.is_some_and(|max| pids.len() as u64 > max) {
        breaches.push(LimitKind::Processes);
    }
    if limits.max_memory_bytes.is_some_and(|max| usage.memory_bytes > max) {
        breaches.push(LimitKind::Memory);
    }
    if limits
        .max_wall_seconds
        .is_some_and(|max| usage.wall > Duration::from_secs(max))
    {
        breaches.push(LimitKind::WallTime);
    }
    breaches
        .into_iter()
        .map(|reason| EnforcementAction::Terminate {
            pids: pids.clone(),
            reason,
        })
        .collect()
}

/// Polite-then-forceful kill of every process under the payload UID.
/// Returns the number of distinct pids signaled.
pub fn kill_payload(
    control: &dyn ProcessControl,
    clock: &dyn Clock,
    payload: &UidMatcher,
    grace: Duration,
    poll: Duration,
) -> Result<usize, MonitorError> {
    let mut signaled = BTreeSet::new();
    let started = clock.now();
    loop {
        let current = ProcessSnapshot::new(clock.now(), control.process_table()?)?.pids_of(payload);
        if current.is_empty() {
            return Ok(signaled.len());
        }
        for pid in &current {
            // late forks also get the polite signal first
            if signaled.insert(*pid) {
                control.signal(*pid, KillSignal::Terminate)?;
            }
        }
        if clock.now().saturating_sub(started) >= grace {
            break;
        }
        clock.sleep(poll.min(grace));
    }
    for _ in 0..3 {
        let remaining = ProcessSnapshot::new(clock.now(), control.process_table()?)?.pids_of(payload);
        if remaining.is_empty() {
            break;
        }
        for pid in remaining {
            signaled.insert(pid);
            control.signal(pid, KillSignal::Kill)?;
        }
        clock.sleep(poll.min(Duration::from_millis(100)));
    }
    Ok(signaled.len())
}

/// Reads the pod's process table from a procfs mount.
#[derive(Debug, Clone)]
pub struct ProcFsProvider {
    root: PathBuf,
}

impl ProcFsProvider {
    pub fn new() -> Self {
        Self::at("/proc")
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn status_fields(&self, pid: u32) -> io::Result<BTreeMap<String, String>> {
        let text = fs::read_to_string(self.root.join(pid.to_string()).join("status"))?;
        Ok(text
            .lines()
            .filter_map(|l| l.split_once(':'))
            .map(|(k, v)| (k.to_string(), v.trim().to_string()))
            .collect())
    }

    fn record(&self, pid: u32) -> io::Result<ProcessRecord> {
        let status = self.status_fields(pid)?;
        let field = |name: &str| {
            status
                .get(name)
                .cloned()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, format!("no {name} in status")))
        };
        // real uid is the first of the four Uid columns
        let uid = field("Uid")?.split_whitespace().next().unwrap_or("").to_string();
        let ppid = field("PPid")?
            .parse()
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad PPid"))?;
        let raw = fs::read(self.root.join(pid.to_string()).join("cmdline")).unwrap_or_default();
        let cmd = raw
            .split(|b| *b == 0)
            .filter(|s| !s.is_empty())
            .map(|s| String::from_utf8_lossy(s).into_owned())
            .collect::<Vec<_>>()
            .join(" ");
        let cmd = if cmd.is_empty() {
            format!("[{}]", status.get("Name").map(String::as_str).unwrap_or("?"))
        } else {
            cmd
        };
        Ok(ProcessRecord { uid, pid, ppid, cmd })
    }
}

impl Default for ProcFsProvider {
    fn default() -> Self {
        Self::new()
    }
}

impl ProcessProvider for ProcFsProvider {
    fn process_table(&self) -> Result<Vec<ProcessRecord>, MonitorError> {
        let entries = fs::read_dir(&self.root).map_err(|e| MonitorError::Unavailable(e.to_string()))?;
        let mut records = Vec::new();
        for entry in entries.flatten() {
            let Some(pid) = entry.file_name().to_str().and_then(|s| s.parse::<u32>().ok()) else {
                continue;
            };
            // processes may exit between readdir and read
            if let Ok(r) = self.record(pid) {
                records.push(r);
            }
        }
        records.sort_by_key(|r| r.pid);
        Ok(records)
    }

    fn memory_bytes(&self, pid: u32) -> Option<u64> {
        let status = self.status_fields(pid).ok()?;
        let kb: u64 = status.get("VmRSS")?.split_whitespace().next()?.parse().ok()?;
        Some(kb * 1024)
    }
}

impl ProcessControl for ProcFsProvider {
    fn signal(&self, pid: u32, signal: KillSignal) -> Result<(), MonitorError> {
        let sig = match signal {
            KillSignal::Terminate => libc::SIGTERM,
            KillSignal::Kill => libc::SIGKILL,
        };
        let pid_t = libc::pid_t::try_from(pid).map_err(|_| MonitorError::Signal {
            pid,
            source: io::Error::from(io::ErrorKind::InvalidInput),
        })?;
        // SAFETY: kill(2) has no memory-safety preconditions.
        let rc = unsafe { libc::kill(pid_t, sig) };
        if rc == 0 {
            return Ok(());
        }
        let err = io::Error::last_os_error();
        if err.raw_os_error() == Some(libc::ESRCH) {
            Ok(())
        } else {
            Err(MonitorError::Signal { pid, source: err })
        }
    }
}
