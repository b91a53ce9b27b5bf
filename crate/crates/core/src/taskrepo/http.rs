//! HTTP/JSON wire protocol: the reference server and the pilot's client.
//!
//! | method | path                          | body / result                  |
//! |--------|-------------------------------|--------------------------------|
//! | POST   | /tasks                        | TaskSpec → 201                 |
//! | GET    | /tasks                        | list of task views             |
//! | GET    | /tasks/<id>                   | task view                      |
//! | PUT    | /files/<task>/<name>          | input bytes → 201              |
//! | GET    | /files/<task>/<name>          | input bytes                    |
//! | POST   | /claims                       | PilotDescriptor → ticket / 204 |
//! | PUT    | /outputs/<task>/<name>?claim= | output bytes → 201             |
//! | POST   | /claims/<id>/complete         | CompletionRequest → 200        |
//!
//! Every request carries `Authorization: Bearer <token>`. Errors are
//! `{"kind": ..., "error": ...}` bodies.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use super::{ClaimTicket, CompletionRequest, PilotDescriptor, RepoClient, RepoError, Repository, TaskView};
use crate::clock::Clock;
use crate::model::TaskSpec;

const MAX_BODY: u64 = 1 << 30;

/// Encodes a path component, keeping `/` so nested names stay readable.
const COMPONENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.').remove(b'~').remove(b'/');

fn encode(s: &str) -> String {
    utf8_percent_encode(s, COMPONENT).to_string()
}

fn error_kind(e: &RepoError) -> (u16, &'static str) {
    match e {
        RepoError::ClaimExpired => (409, "claim-expired"),
        RepoError::Superseded(_) => (409, "superseded"),
        RepoError::AlreadyTerminal(_) => (409, "terminal"),
        RepoError::Duplicate(_) => (409, "duplicate"),
        RepoError::UnknownClaim(_) => (404, "unknown-claim"),
        RepoError::UnknownTask(_) => (404, "unknown-task"),
        RepoError::Rejected(_) | RepoError::Malformed(_) => (400, "rejected"),
        RepoError::Unauthorized => (401, "unauthorized"),
        _ => (500, "internal"),
    }
}

struct Reply {
    status: u16,
    body: Vec<u8>,
    json: bool,
}

impl Reply {
    fn json(status: u16, value: &impl Serialize) -> Self {
        Self {
            status,
            body: serde_json::to_vec(value).expect("plain data serializes"),
            json: true,
        }
    }

    fn bytes(data: Vec<u8>) -> Self {
        Self {
            status: 200,
            body: data,
            json: false,
        }
    }

    fn empty(status: u16) -> Self {
        Self {
            status,
            body: Vec::new(),
            json: false,
        }
    }

    fn error(e: &RepoError) -> Self {
        let (status, kind) = error_kind(e);
        Self::json(status, &json!({"kind": kind, "error": e.to_string()}))
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, RepoError> {
    serde_json::from_slice(body).map_err(|e| RepoError::Rejected(format!("bad JSON body: {e}")))
}

/// The reference repository server. Requests are handled one at a time,
/// which serializes all claim-state mutations.
pub struct RepoServer {
    server: Arc<tiny_http::Server>,
    repo: Arc<Mutex<Repository>>,
    token: String,
    clock: Arc<dyn Clock + Send + Sync>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    thread: Option<thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

impl RepoServer {
    pub fn bind(
        addr: &str,
        repo: Repository,
        token: impl Into<String>,
        clock: Arc<dyn Clock + Send + Sync>,
    ) -> Result<Self, RepoError> {
        let server = tiny_http::Server::http(addr).map_err(|e| RepoError::Transport(format!("cannot bind {addr}: {e}")))?;
        Ok(Self {
            server: Arc::new(server),
            repo: Arc::new(Mutex::new(repo)),
            token: token.into(),
            clock,
        })
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.server.server_addr().to_ip()
    }

    /// Serves until the underlying server is unblocked.
    pub fn serve(&self) {
        for mut request in self.server.incoming_requests() {
            let reply = self.handle(&mut request);
            let mut response = tiny_http::Response::from_data(reply.body).with_status_code(reply.status);
            let content_type = if reply.json {
                "application/json"
            } else {
                "application/octet-stream"
            };
            if let Ok(h) = tiny_http::Header::from_bytes("Content-Type", content_type) {
                response = response.with_header(h);
            }
            if let Err(e) = request.respond(response) {
                log::warn!("failed to send response: {e}");
            }
        }
    }

    /// Serves on a background thread.
    pub fn spawn(self) -> ServerHandle {
        let addr = self.local_addr().expect("bound to an IP address");
        let server = Arc::clone(&self.server);
        let thread = thread::spawn(move || self.serve());
        ServerHandle {
            addr,
            server,
            thread: Some(thread),
        }
    }

    fn authorized(&self, request: &tiny_http::Request) -> bool {
        if self.token.is_empty() {
            return true;
        }
        let expected = format!("Bearer {}", self.token);
        request
            .headers()
            .iter()
            .any(|h| h.field.equiv("Authorization") && h.value.as_str() == expected)
    }

    fn handle(&self, request: &mut tiny_http::Request) -> Reply {
        if !self.authorized(request) {
            return Reply::error(&RepoError::Unauthorized);
        }
        let mut body = Vec::new();
        if let Err(e) = request.as_reader().take(MAX_BODY).read_to_end(&mut body) {
            return Reply::error(&RepoError::Transport(e.to_string()));
        }
        let url = request.url().to_string();
        let (path, query) = url.split_once('?').unwrap_or((&url, ""));
        let segments: Vec<String> = path
            .trim_start_matches('/')
            .split('/')
            .map(|s| percent_decode_str(s).decode_utf8_lossy().into_owned())
            .collect();
        let claim = query
            .split('&')
            .find_map(|kv| kv.strip_prefix("claim="))
            .map(|v| percent_decode_str(v).decode_utf8_lossy().into_owned());
        let method = request.method().as_str().to_string();
        let seg: Vec<&str> = segments.iter().map(String::as_str).collect();
        let now = self.clock.epoch_seconds();
        let mut repo = match self.repo.lock() {
            Ok(guard) => guard,
            Err(poisoned) => poisoned.into_inner(),
        };
        let result = match (method.as_str(), seg.as_slice()) {
            ("POST", ["tasks"]) => parse::<TaskSpec>(&body).and_then(|spec| {
                let id = spec.task_id.clone();
                repo.submit(spec).map(|_| Reply::json(201, &json!({"task_id": id})))
            }),
            ("GET", ["tasks"]) => Ok(Reply::json(200, &repo.list())),
            ("GET", ["tasks", id]) => repo.view(id).map(|v| Reply::json(200, &v)),
            ("PUT", ["files", task, name @ ..]) if !name.is_empty() => repo
                .put_input(task, &name.join("/"), &body)
                .map(|_| Reply::empty(201)),
            ("GET", ["files", task, name @ ..]) if !name.is_empty() => {
                repo.get_input(task, &name.join("/")).map(Reply::bytes)
            }
            ("POST", ["claims"]) => parse::<PilotDescriptor>(&body).and_then(|pilot| {
                repo.acquire(&pilot, now).map(|t| match t {
                    Some(ticket) => Reply::json(200, &ticket),
                    None => Reply::empty(204),
                })
            }),
            ("PUT", ["outputs", task, name @ ..]) if !name.is_empty() => match &claim {
                Some(claim) => repo
                    .put_output(claim, task, &name.join("/"), &body, now)
                    .map(|_| Reply::empty(201)),
                None => Err(RepoError::Rejected("missing claim parameter".into())),
            },
            ("POST", ["claims", id, "complete"]) => parse::<CompletionRequest>(&body).and_then(|req| {
                repo.complete(id, &req, now)
                    .map(|status| Reply::json(200, &json!({"status": status.to_string()})))
            }),
            _ => Ok(Reply::json(404, &json!({"kind": "no-route", "error": format!("{method} {path}")}))),
        };
        result.unwrap_or_else(|e| {
            if matches!(e, RepoError::Io { .. }) {
                log::error!("repository I/O failure: {e}");
            }
            Reply::error(&e)
        })
    }
}

/// Blocking client for the HTTP protocol.
pub struct HttpRepoClient {
    agent: ureq::Agent,
    base: String,
    token: String,
}

impl HttpRepoClient {
    pub fn new(base_url: &str, token: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            agent,
            base: base_url.trim_end_matches('/').to_string(),
            token: token.into(),
        }
    }

    fn send(&self, method: &str, path: &str, body: Option<(&str, &[u8])>) -> Result<(u16, Vec<u8>), RepoError> {
        let url = format!("{}{}", self.base, path);
        let auth = format!("Bearer {}", self.token);
        let result = match (method, body) {
            ("GET", _) => self.agent.get(&url).header("Authorization", &auth).call(),
            ("POST", Some((ct, data))) => self
                .agent
                .post(&url)
                .header("Authorization", &auth)
                .header("Content-Type", ct)
                .send(data),
            ("PUT", Some((ct, data))) => self
                .agent
                .put(&url)
                .header("Authorization", &auth)
                .header("Content-Type", ct)
                .send(data),
            _ => return Err(RepoError::Rejected(format!("unsupported request {method} {path}"))),
        };
        let mut response = result.map_err(|e| RepoError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let bytes = response
            .body_mut()
            .with_config()
            .limit(MAX_BODY)
            .read_to_vec()
            .map_err(|e| RepoError::Transport(e.to_string()))?;
        if status >= 400 {
            return Err(Self::error(status, &bytes));
        }
        Ok((status, bytes))
    }

    fn error(status: u16, body: &[u8]) -> RepoError {
        let value: serde_json::Value = serde_json::from_slice(body).unwrap_or_default();
        let message = value["error"].as_str().unwrap_or("").to_string();
        match (status, value["kind"].as_str().unwrap_or("")) {
            (401, _) => RepoError::Unauthorized,
            (_, "claim-expired") => RepoError::ClaimExpired,
            (_, "superseded") => RepoError::Superseded(message),
            (_, "terminal") => RepoError::AlreadyTerminal(message),
            (_, "duplicate") => RepoError::Duplicate(message),
            (_, "unknown-claim") => RepoError::UnknownClaim(message),
            (_, "unknown-task") => RepoError::UnknownTask(message),
            (500..=599, _) => RepoError::Transport(format!("HTTP {status}: {message}")),
            _ => RepoError::Rejected(format!("HTTP {status}: {message}")),
        }
    }

    fn post_json<T: Serialize>(&self, path: &str, value: &T) -> Result<(u16, Vec<u8>), RepoError> {
        let body = serde_json::to_vec(value).expect("plain data serializes");
        self.send("POST", path, Some(("application/json", &body)))
    }

    pub fn submit(&self, spec: &TaskSpec) -> Result<(), RepoError> {
        self.post_json("/tasks", spec).map(|_| ())
    }

    pub fn put_input(&self, task_id: &str, name: &str, data: &[u8]) -> Result<(), RepoError> {
        let path = format!("/files/{}/{}", encode(task_id), encode(name));
        self.send("PUT", &path, Some(("application/octet-stream", data))).map(|_| ())
    }

    pub fn task(&self, task_id: &str) -> Result<TaskView, RepoError> {
        let (_, body) = self.send("GET", &format!("/tasks/{}", encode(task_id)), None)?;
        serde_json::from_slice(&body).map_err(|e| RepoError::Malformed(e.to_string()))
    }

    pub fn tasks(&self) -> Result<Vec<TaskView>, RepoError> {
        let (_, body) = self.send("GET", "/tasks", None)?;
        serde_json::from_slice(&body).map_err(|e| RepoError::Malformed(e.to_string()))
    }
}

impl RepoClient for HttpRepoClient {
    fn acquire_task(&self, pilot: &PilotDescriptor) -> Result<Option<ClaimTicket>, RepoError> {
        match self.post_json("/claims", pilot)? {
            (204, _) => Ok(None),
            (_, body) => {
                let ticket: ClaimTicket = serde_json::from_slice(&body).map_err(|e| RepoError::Malformed(e.to_string()))?;
                ticket.task.validate().map_err(|e| RepoError::Malformed(e.to_string()))?;
                Ok(Some(ticket))
            }
        }
    }

    fn fetch_input(&self, ticket: &ClaimTicket, name: &str) -> Result<Vec<u8>, RepoError> {
        let path = format!("/files/{}/{}", encode(&ticket.task.task_id), encode(name));
        self.send("GET", &path, None).map(|(_, body)| body)
    }

    fn upload_output(&self, ticket: &ClaimTicket, name: &str, data: &[u8]) -> Result<(), RepoError> {
        let path = format!(
            "/outputs/{}/{}?claim={}",
            encode(&ticket.task.task_id),
            encode(name),
            encode(&ticket.claim_id)
        );
        self.send("PUT", &path, Some(("application/octet-stream", data))).map(|_| ())
    }

    fn report_completion(&self, ticket: &ClaimTicket, request: &CompletionRequest) -> Result<(), RepoError> {
        self.post_json(&format!("/claims/{}/complete", encode(&ticket.claim_id)), request)
            .map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;
    use crate::model::{ExitReport, InputFile};
    use crate::taskrepo::Completion;

    fn serve(dir: &std::path::Path, token: &str) -> ServerHandle {
        let repo = Repository::open(dir, 60).unwrap();
        RepoServer::bind("127.0.0.1:0", repo, token, Arc::new(SystemClock::new()))
            .unwrap()
            .spawn()
    }

    #[test]
    fn round_trip_over_http() {
        let dir = tempfile::tempdir().unwrap();
        let handle = serve(dir.path(), "s3cret");
        let client = HttpRepoClient::new(&handle.url(), "s3cret");
        let pilot = PilotDescriptor::new("p1");
        assert!(client.acquire_task(&pilot).unwrap().is_none());

        let mut spec = TaskSpec::new("t1", "img:1", "/bin/x");
        spec.input_files.push(InputFile {
            name: "dir/in put.txt".into(),
            source: "x".into(),
            unpack: false,
        });
        spec.output_files = vec!["out.txt".into(), "gone.txt".into()];
        client.submit(&spec).unwrap();
        assert!(matches!(client.submit(&spec), Err(RepoError::Duplicate(_))));
        client.put_input("t1", "dir/in put.txt", b"data").unwrap();

        let ticket = client.acquire_task(&pilot).unwrap().unwrap();
        assert_eq!(ticket.task, spec);
        assert_eq!(client.fetch_input(&ticket, "dir/in put.txt").unwrap(), b"data");
        client.upload_output(&ticket, "out.txt", b"result").unwrap();
        let request = CompletionRequest {
            completion: Completion::Exit(ExitReport::new("t1", 1, 1, 2).unwrap()),
            missing_outputs: vec!["gone.txt".into()],
        };
        client.report_completion(&ticket, &request).unwrap();
        assert!(matches!(
            client.report_completion(&ticket, &request),
            Err(RepoError::AlreadyTerminal(_))
        ));
        let view = client.task("t1").unwrap();
        assert_eq!(view.status, "failed(1)");
        assert_eq!(view.missing_outputs, ["gone.txt"]);
        assert_eq!(client.tasks().unwrap().len(), 1);
        assert!(dir.path().join("tasks/t1/outputs/out.txt").exists());
        handle.shutdown();
    }

    #[test]
    fn bad_token_is_unauthorized() {
        let dir = tempfile::tempdir().unwrap();
        let handle = serve(dir.path(), "right");
        let client = HttpRepoClient::new(&handle.url(), "wrong");
        assert!(matches!(
            client.acquire_task(&PilotDescriptor::new("p")),
            Err(RepoError::Unauthorized)
        ));
    }

    #[test]
    fn unreachable_server_is_transient() {
        let client = HttpRepoClient::new("http://127.0.0.1:1", "t");
        assert!(client.acquire_task(&PilotDescriptor::new("p")).unwrap_err().is_transient());
    }

    #[test]
    fn concurrent_pilots_never_share_a_task() {
        let dir = tempfile::tempdir().unwrap();
        let handle = serve(dir.path(), "t");
        let submitter = HttpRepoClient::new(&handle.url(), "t");
        for i in 0..20 {
            submitter.submit(&TaskSpec::new(format!("t{i}"), "img:1", "/bin/x")).unwrap();
        }
        let url = handle.url();
        let threads: Vec<_> = (0..4)
            .map(|p| {
                let url = url.clone();
                thread::spawn(move || {
                    let client = HttpRepoClient::new(&url, "t");
                    let pilot = PilotDescriptor::new(format!("p{p}"));
                    let mut got = Vec::new();
                    while let Some(t) = client.acquire_task(&pilot).unwrap() {
                        got.push(t.task.task_id);
                    }
                    got
                })
            })
            .collect();
        let mut all: Vec<String> = threads.into_iter().flat_map(|t| t.join().unwrap()).collect();
        all.sort();
        let before = all.len();
        all.dedup();
        assert_eq!((before, all.len()), (20, 20));
    }
}
