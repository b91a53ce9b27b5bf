//! Directory-backed repository: `tasks/<id>/{task.json,state.json,inputs/,outputs/}`
//! plus `repo.json` holding the sequence counters.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    ClaimTicket, CompletionRequest, PilotDescriptor, RepoClient, RepoError, RepoState, TaskRecord, TaskStatus,
    TaskView,
};
use crate::clock::Clock;
use crate::model::{is_contained_relative, validate_task_id, TaskSpec};

#[derive(Debug, Serialize, Deserialize)]
struct Counters {
    next_seq: u64,
    next_claim: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    seq: u64,
    status: TaskStatus,
    claims_issued: u32,
    requeues: u32,
    claims: Vec<(String, u64)>,
    missing_outputs: Vec<String>,
}

pub struct Repository {
    root: PathBuf,
    state: RepoState,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RepoError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(RepoError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(RepoError::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, RepoError> {
    let text = fs::read_to_string(path).map_err(RepoError::io(path))?;
    serde_json::from_str(&text).map_err(|e| RepoError::Malformed(format!("{}: {e}", path.display())))
}

fn json(value: &impl Serialize) -> Vec<u8> {
    serde_json::to_vec_pretty(value).expect("plain data serializes")
}

impl Repository {
    /// Opens (or initializes) a repository rooted at `root`.
    pub fn open(root: impl Into<PathBuf>, grace_seconds: u64) -> Result<Self, RepoError> {
        let root = root.into();
        let tasks_dir = root.join("tasks");
        fs::create_dir_all(&tasks_dir).map_err(RepoError::io(&tasks_dir))?;
        let mut state = RepoState::new(grace_seconds);
        let counters = root.join("repo.json");
        if counters.exists() {
            let c: Counters = read_json(&counters)?;
            state.next_seq = c.next_seq;
            state.next_claim = c.next_claim;
        }
        for entry in fs::read_dir(&tasks_dir).map_err(RepoError::io(&tasks_dir))? {
            let dir = entry.map_err(RepoError::io(&tasks_dir))?.path();
            if !dir.join("state.json").exists() {
                continue;
            }
            let spec: TaskSpec = read_json(&dir.join("task.json"))?;
            let s: StateFile = read_json(&dir.join("state.json"))?;
            state.tasks.insert(
                spec.task_id.clone(),
                TaskRecord {
                    spec,
                    seq: s.seq,
                    status: s.status,
                    claims_issued: s.claims_issued,
                    requeues: s.requeues,
                    claims: s.claims,
                    missing_outputs: s.missing_outputs,
                },
            );
        }
        Ok(Self { root, state })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn state(&self) -> &RepoState {
        &self.state
    }

    pub fn task_dir(&self, task_id: &str) -> PathBuf {
        self.root.join("tasks").join(task_id)
    }

    pub fn output_path(&self, task_id: &str, name: &str) -> PathBuf {
        self.task_dir(task_id).join("outputs").join(name)
    }

    fn persist(&self, task_ids: &[String]) -> Result<(), RepoError> {
        for id in task_ids {
            let r = &self.state.tasks[id];
            let file = StateFile {
                seq: r.seq,
                status: r.status.clone(),
                claims_issued: r.claims_issued,
                requeues: r.requeues,
                claims: r.claims.clone(),
                missing_outputs: r.missing_outputs.clone(),
            };
            write_atomic(&self.task_dir(id).join("state.json"), &json(&file))?;
        }
        let counters = Counters {
            next_seq: self.state.next_seq,
            next_claim: self.state.next_claim,
        };
        write_atomic(&self.root.join("repo.json"), &json(&counters))
    }

    pub fn submit(&mut self, spec: TaskSpec) -> Result<(), RepoError> {
        let id = spec.task_id.clone();
        let dir = self.task_dir(&id);
        self.state.submit(spec.clone())?;
        for sub in ["inputs", "outputs"] {
            fs::create_dir_all(dir.join(sub)).map_err(RepoError::io(dir.join(sub)))?;
        }
        write_atomic(&dir.join("task.json"), &json(&spec))?;
        self.persist(&[id])
    }

    fn record(&self, task_id: &str) -> Result<&TaskRecord, RepoError> {
        validate_task_id(task_id).map_err(|e| RepoError::Rejected(e.to_string()))?;
        self.state
            .tasks
            .get(task_id)
            .ok_or_else(|| RepoError::UnknownTask(task_id.to_string()))
    }

    /// Stores the content of a declared input file.
    pub fn put_input(&mut self, task_id: &str, name: &str, data: &[u8]) -> Result<(), RepoError> {
        let r = self.record(task_id)?;
        if !r.spec.input_files.iter().any(|i| i.name == name) {
            return Err(RepoError::Rejected(format!("{name} is not a declared input of {task_id}")));
        }
        let path = self.task_dir(task_id).join("inputs").join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(RepoError::io(parent))?;
        }
        write_atomic(&path, data)
    }

    pub fn get_input(&self, task_id: &str, name: &str) -> Result<Vec<u8>, RepoError> {
        let r = self.record(task_id)?;
        if !r.spec.input_files.iter().any(|i| i.name == name) {
            return Err(RepoError::Rejected(format!("{name} is not a declared input of {task_id}")));
        }
        let path = self.task_dir(task_id).join("inputs").join(name);
        fs::read(&path).map_err(RepoError::io(path))
    }

    pub fn acquire(&mut self, pilot: &PilotDescriptor, now: u64) -> Result<Option<ClaimTicket>, RepoError> {
        if pilot.pilot_id.is_empty() {
            return Err(RepoError::Rejected("pilot_id must not be empty".into()));
        }
        let mut touched = self.state.expire(now);
        let ticket = self.state.acquire(pilot, now);
        if let Some(t) = &ticket {
            touched.push(t.task.task_id.clone());
        }
        self.persist(&touched)?;
        Ok(ticket)
    }

    /// Stores one output; the claim must be live and own the task.
    pub fn put_output(&mut self, claim_id: &str, task_id: &str, name: &str, data: &[u8], now: u64) -> Result<(), RepoError> {
        let touched = self.state.expire(now);
        self.persist(&touched)?;
        let owner = self.state.live_claim(claim_id, now)?;
        if owner != task_id {
            return Err(RepoError::Rejected(format!("claim {claim_id} is not for task {task_id}")));
        }
        if !is_contained_relative(name) || !self.state.tasks[task_id].spec.output_files.iter().any(|o| o == name) {
            return Err(RepoError::Rejected(format!("{name} is not a declared output of {task_id}")));
        }
        let path = self.output_path(task_id, name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(RepoError::io(parent))?;
        }
        write_atomic(&path, data)
    }

    pub fn complete(&mut self, claim_id: &str, request: &CompletionRequest, now: u64) -> Result<TaskStatus, RepoError> {
        let mut touched = self.state.expire(now);
        let result = self.state.complete(claim_id, request, now);
        if result.is_ok() {
            let task = self
                .state
                .tasks
                .values()
                .find(|r| r.claims.iter().any(|(c, _)| c == claim_id))
                .map(|r| r.spec.task_id.clone());
            touched.extend(task);
        }
        self.persist(&touched)?;
        result
    }

    pub fn view(&self, task_id: &str) -> Result<TaskView, RepoError> {
        self.state.view(task_id)
    }

    pub fn list(&self) -> Vec<TaskView> {
        self.state.list()
    }
}

/// In-process repository client with an injected clock (virtual time in the
/// simulator).
pub struct LocalRepo<C> {
    repo: RefCell<Repository>,
    clock: C,
}

impl<C: Clock> LocalRepo<C> {
    pub fn new(repo: Repository, clock: C) -> Self {
        Self {
            repo: RefCell::new(repo),
            clock,
        }
    }

    pub fn repository(&self) -> std::cell::RefMut<'_, Repository> {
        self.repo.borrow_mut()
    }
}

impl<C: Clock> RepoClient for LocalRepo<C> {
    fn acquire_task(&self, pilot: &PilotDescriptor) -> Result<Option<ClaimTicket>, RepoError> {
        let now = self.clock.epoch_seconds();
        self.repo.borrow_mut().acquire(pilot, now)
    }

    fn fetch_input(&self, ticket: &ClaimTicket, name: &str) -> Result<Vec<u8>, RepoError> {
        self.repo.borrow().get_input(&ticket.task.task_id, name)
    }

    fn upload_output(&self, ticket: &ClaimTicket, name: &str, data: &[u8]) -> Result<(), RepoError> {
        let now = self.clock.epoch_seconds();
        self.repo
            .borrow_mut()
            .put_output(&ticket.claim_id, &ticket.task.task_id, name, data, now)
    }

    fn report_completion(&self, ticket: &ClaimTicket, request: &CompletionRequest) -> Result<(), RepoError> {
        let now = self.clock.epoch_seconds();
        self.repo.borrow_mut().complete(&ticket.claim_id, request, now).map(|_| ())
    }
}
