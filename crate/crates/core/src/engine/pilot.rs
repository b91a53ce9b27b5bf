//! Executing the lifecycle against real (or simulated) collaborators.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use super::{step, Context, EngineAction, EngineEvent, PilotOutcome, ProtocolError, REASON_START_TIMEOUT};
use crate::clock::{Backoff, Clock};
use crate::cluster::{await_container_running, ClusterGateway, GatewayError};
use crate::model::{PilotConfig, PilotPhase};
use crate::monitor::{self, ProcessControl, UidMatcher, DEFAULT_KILL_GRACE};
use crate::taskrepo::{
    stage_inputs, upload_outputs, ClaimTicket, Completion, CompletionRequest, PilotDescriptor, RepoClient, RepoError,
};
use crate::wrapper::{self, ControlPaths};

/// The collaborators a pilot drives.
#[derive(Clone, Copy)]
pub struct PilotDeps<'a> {
    pub gateway: &'a dyn ClusterGateway,
    pub repo: &'a dyn RepoClient,
    pub processes: &'a dyn ProcessControl,
    pub clock: &'a dyn Clock,
}

/// One line of the transition log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionRecord {
    pub at: Duration,
    pub from: PilotPhase,
    pub event: String,
    pub to: PilotPhase,
    pub actions: Vec<String>,
}

impl fmt::Display for TransitionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t={}.{:03} phase={} event={} next={} actions=[{}]",
            self.at.as_secs(),
            self.at.subsec_millis(),
            self.from,
            self.event,
            self.to,
            self.actions.join(", ")
        )
    }
}

type Observer<'a> = Box<dyn FnMut(PilotPhase, &EngineAction) + 'a>;

/// Checks that the pod gives the pilot what it needs. Returns
/// `ValidationFailed` naming the first problem found.
pub fn validate_environment(config: &PilotConfig, gateway: &dyn ClusterGateway, processes: &dyn ProcessControl) -> EngineEvent {
    match check_environment(config, gateway, processes) {
        Ok(()) => EngineEvent::ValidationOk,
        Err(reason) => EngineEvent::ValidationFailed(reason),
    }
}

fn probe_writable(dir: &std::path::Path) -> bool {
    let probe = dir.join(format!(".podpilot-probe-{}", std::process::id()));
    let ok = fs::create_dir_all(dir).is_ok() && fs::write(&probe, b"").is_ok();
    let _ = fs::remove_file(&probe);
    ok
}

fn check_environment(config: &PilotConfig, gateway: &dyn ClusterGateway, processes: &dyn ProcessControl) -> Result<(), String> {
    config.validate().map_err(|e| format!("invalid configuration: {e}"))?;
    if !probe_writable(&config.shared_dir) {
        return Err("shared dir not writable".into());
    }
    if !probe_writable(&config.private_dir) {
        return Err("private dir not writable".into());
    }
    let paths = ControlPaths::new(config);
    wrapper::prepare_control_dir(config, &paths).map_err(|e| format!("control dir not creatable: {e}"))?;
    let _ = fs::remove_dir_all(&paths.control_dir);
    gateway
        .get_container_status(&config.pod_name, &config.payload_container_name)
        .map_err(|e| format!("cannot read own pod status: {e}"))?;
    let table = processes
        .process_table()
        .map_err(|e| format!("process table unreadable: {e}"))?;
    let pause = UidMatcher::pause(config);
    if !table.iter().any(|r| pause.matches(&r.uid)) {
        return Err("process namespace not shared".into());
    }
    Ok(())
}

/// Progress of the payload while in `Run`.
#[derive(Debug, Default)]
struct RunState {
    published_at: Duration,
    started: bool,
}

/// A pilot bound to one pod.
pub struct Pilot<'a> {
    config: PilotConfig,
    deps: PilotDeps<'a>,
    descriptor: PilotDescriptor,
    paths: ControlPaths,
    payload: UidMatcher,
    backoff: Backoff,
    stop: Arc<AtomicBool>,
    observer: Option<Observer<'a>>,
    transitions: Vec<TransitionRecord>,
    ticket: Option<ClaimTicket>,
    idle_since: Duration,
    run: RunState,
    kill_grace: Duration,
}

impl<'a> Pilot<'a> {
    pub fn new(config: PilotConfig, deps: PilotDeps<'a>) -> Self {
        let descriptor = PilotDescriptor::new(format!("{}/{}", config.namespace, config.pod_name));
        Self {
            paths: ControlPaths::new(&config),
            payload: UidMatcher::payload(&config),
            descriptor,
            config,
            deps,
            backoff: Backoff::default(),
            stop: Arc::new(AtomicBool::new(false)),
            observer: None,
            transitions: Vec::new(),
            ticket: None,
            idle_since: Duration::ZERO,
            run: RunState::default(),
            kill_grace: DEFAULT_KILL_GRACE,
        }
    }

    pub fn with_descriptor(mut self, descriptor: PilotDescriptor) -> Self {
        self.descriptor = descriptor;
        self
    }

    /// Called before every action executes; the action has not touched
    /// anything yet.
    pub fn with_observer(mut self, observer: impl FnMut(PilotPhase, &EngineAction) + 'a) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    /// Setting the flag makes the pilot drain before its next claim.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    pub fn with_stop_flag(mut self, flag: Arc<AtomicBool>) -> Self {
        self.stop = flag;
        self
    }

    pub fn transitions(&self) -> &[TransitionRecord] {
        &self.transitions
    }

    /// Drives the lifecycle to `Terminated`.
    pub fn run(&mut self) -> Result<PilotOutcome, ProtocolError> {
        let mut phase = PilotPhase::Validate;
        let mut ctx = Context::new(
            self.config.max_tasks,
            Duration::from_secs(self.config.bind_timeout_seconds),
        );
        let mut queue = VecDeque::new();
        queue.push_back(validate_environment(&self.config, self.deps.gateway, self.deps.processes));
        if queue[0] == EngineEvent::ValidationOk {
            // start from an empty shared directory, whatever a previous
            // pilot in this pod left behind
            let _ = wrapper::wipe_dir(&self.config.shared_dir);
        }
        self.idle_since = self.deps.clock.now();

        while phase != PilotPhase::Terminated {
            let event = match queue.pop_front() {
                Some(e) => e,
                None if phase == PilotPhase::Run => match self.monitor_tick() {
                    Some(e) => e,
                    None => continue,
                },
                None => {
                    return Err(ProtocolError::Inconsistent(format!("no event pending in phase {phase}")));
                }
            };
            let t = step(phase, &event, &ctx)?;
            let record = TransitionRecord {
                at: self.deps.clock.now(),
                from: phase,
                event: event.to_string(),
                to: t.phase,
                actions: t.actions.iter().map(ToString::to_string).collect(),
            };
            log::info!(target: "podpilot::transition", "{record}");
            self.transitions.push(record);
            if phase == PilotPhase::Cleanup && t.phase == PilotPhase::Fetch {
                self.idle_since = self.deps.clock.now();
            }
            phase = t.phase;
            ctx = t.context;
            if let EngineEvent::TaskClaimed(ticket) = &event {
                self.ticket = Some(ticket.clone());
            }
            for action in &t.actions {
                if let Some(observer) = self.observer.as_mut() {
                    observer(phase, action);
                }
                if let Some(e) = self.execute(action) {
                    // a failure aborts the rest of the batch
                    let abort = matches!(
                        e,
                        EngineEvent::StagingFailed(_) | EngineEvent::Fatal(_) | EngineEvent::BindTimeout(_)
                    );
                    queue.push_back(e);
                    if abort {
                        break;
                    }
                }
            }
        }
        Ok(ctx.outcome().expect("terminated pilots carry a reason"))
    }

    fn retry_gateway<T>(&self, op: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        self.backoff.retry(self.deps.clock, GatewayError::is_transient, op)
    }

    fn retry_repo<T>(&self, op: impl FnMut() -> Result<T, RepoError>) -> Result<T, RepoError> {
        self.backoff.retry(self.deps.clock, RepoError::is_transient, op)
    }

    fn ticket(&self) -> &ClaimTicket {
        self.ticket.as_ref().expect("task actions run only with a claimed task")
    }

    fn poll(&self) -> Duration {
        Duration::from_millis(self.config.poll_interval_ms.max(1))
    }

    fn gateway_failure(&self, e: GatewayError) -> EngineEvent {
        EngineEvent::Fatal(format!("cluster gateway: {e}"))
    }

    fn execute(&mut self, action: &EngineAction) -> Option<EngineEvent> {
        let cfg = &self.config;
        match action {
            EngineAction::AcquireTask => Some(self.acquire()),
            EngineAction::PatchImage(image) => {
                // the pilot never touches its own container
                if cfg.payload_container_name == cfg.pilot_container_name {
                    return Some(EngineEvent::Fatal("refusing to patch the pilot's own container".into()));
                }
                match self.retry_gateway(|| {
                    self.deps
                        .gateway
                        .patch_container_image(&cfg.pod_name, &cfg.payload_container_name, image)
                }) {
                    Ok(_) => None,
                    Err(e @ (GatewayError::Unauthorized(_) | GatewayError::PodNotFound(_))) => Some(self.gateway_failure(e)),
                    Err(e) => Some(EngineEvent::BindTimeout(format!("patch failed: {e}"))),
                }
            }
            EngineAction::AwaitRunning { image, timeout } => match await_container_running(
                self.deps.gateway,
                self.deps.clock,
                &cfg.pod_name,
                &cfg.payload_container_name,
                image,
                *timeout,
                self.poll(),
            ) {
                Ok(status) => Some(EngineEvent::ContainerRunning(status)),
                Err(GatewayError::Timeout { last }) => Some(EngineEvent::BindTimeout(last.to_string())),
                Err(e @ GatewayError::Unauthorized(_)) => Some(self.gateway_failure(e)),
                Err(e) => Some(EngineEvent::BindTimeout(e.to_string())),
            },
            EngineAction::StageInputs => {
                if let Err(e) = wrapper::prepare_control_dir(cfg, &self.paths) {
                    return Some(EngineEvent::StagingFailed(e.to_string()));
                }
                let ticket = self.ticket().clone();
                match stage_inputs(self.deps.repo, &ticket, &cfg.shared_dir) {
                    Ok(staged) => {
                        log::debug!("staged {} input file(s) for {}", staged.len(), ticket.task.task_id);
                        None
                    }
                    Err(e) => Some(EngineEvent::StagingFailed(e.to_string())),
                }
            }
            EngineAction::WriteEnvFile => wrapper::write_env_file(&self.paths, &self.ticket().task.env)
                .err()
                .map(|e| EngineEvent::StagingFailed(e.to_string())),
            EngineAction::PublishScript => {
                for stale in [&self.paths.report_file, &self.paths.report_file_tmp, &self.paths.done_marker] {
                    let _ = fs::remove_file(stale);
                }
                let script = wrapper::generate_startup_script(&self.ticket().task, cfg, &self.paths);
                wrapper::publish_startup_script(&self.paths, &script)
                    .err()
                    .map(|e| EngineEvent::StagingFailed(e.to_string()))
            }
            EngineAction::StartMonitoring => {
                self.run = RunState {
                    published_at: self.deps.clock.now(),
                    started: false,
                };
                Some(EngineEvent::StagingDone)
            }
            EngineAction::KillPayload => {
                self.kill();
                None
            }
            EngineAction::ParseReport => Some(self.parse_report()),
            EngineAction::UploadOutputs => {
                let ticket = self.ticket().clone();
                match upload_outputs(self.deps.repo, &ticket, &cfg.shared_dir) {
                    Ok(summary) => Some(EngineEvent::OutputsUploaded {
                        count: summary.uploaded,
                        missing: summary.missing,
                    }),
                    Err(e) => {
                        log::warn!("output upload for {} failed: {e}", ticket.task.task_id);
                        Some(EngineEvent::OutputsUploaded {
                            count: 0,
                            missing: ticket.task.output_files.clone(),
                        })
                    }
                }
            }
            EngineAction::ReportCompletion { report, missing_outputs } => {
                self.report(CompletionRequest {
                    completion: Completion::Exit(report.clone()),
                    missing_outputs: missing_outputs.clone(),
                });
                None
            }
            EngineAction::ReportFailure(reason) => {
                self.report(CompletionRequest {
                    completion: Completion::Failure(reason.clone()),
                    missing_outputs: Vec::new(),
                });
                None
            }
            EngineAction::RestartPayload => self.restart(),
            EngineAction::WipeSharedDir => match wrapper::wipe_dir(&cfg.shared_dir) {
                Ok(()) => {
                    self.ticket = None;
                    Some(EngineEvent::Cleaned)
                }
                Err(e) => Some(EngineEvent::Fatal(format!("cannot clean shared dir: {e}"))),
            },
            EngineAction::SelfTerminate => {
                if let Err(e) = wrapper::wipe_dir(&cfg.private_dir) {
                    log::warn!("cannot clean private dir: {e}");
                }
                Some(EngineEvent::Cleaned)
            }
        }
    }

    fn acquire(&mut self) -> EngineEvent {
        if self.stop.load(Ordering::SeqCst) {
            return EngineEvent::StopRequested;
        }
        match self.retry_repo(|| self.deps.repo.acquire_task(&self.descriptor)) {
            Ok(Some(ticket)) => return EngineEvent::TaskClaimed(ticket),
            Ok(None) => {}
            Err(RepoError::Unauthorized) => return EngineEvent::Fatal("task repository rejected the pilot".into()),
            Err(e) => log::warn!("cannot reach task repository: {e}"),
        }
        let idle = Duration::from_secs(self.config.idle_timeout_seconds);
        if self.deps.clock.now().saturating_sub(self.idle_since) >= idle {
            return EngineEvent::IdleExpired;
        }
        self.deps.clock.sleep(self.poll());
        if self.deps.clock.now().saturating_sub(self.idle_since) >= idle {
            EngineEvent::IdleExpired
        } else {
            EngineEvent::NoTask
        }
    }

    /// One sampling period of the `Run` phase.
    fn monitor_tick(&mut self) -> Option<EngineEvent> {
        let clock = self.deps.clock;
        clock.sleep(self.poll());
        let snap = match monitor::snapshot(self.deps.processes, clock) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("process sampling failed: {e}");
                return None;
            }
        };
        let active = monitor::payload_active(&snap, &self.payload);
        if active && !self.run.started {
            self.run.started = true;
            return Some(EngineEvent::PayloadStarted);
        }
        let wall = clock.now().saturating_sub(self.run.published_at);
        let limits = &self.ticket().task.limits;
        let usage = monitor::sample_usage(self.deps.processes, &snap, &self.payload, wall);
        if let Some(monitor::EnforcementAction::Terminate { reason, .. }) =
            monitor::enforce(&snap, limits, &usage, &self.payload).into_iter().next()
        {
            return Some(EngineEvent::LimitBreached(reason.reason().to_string()));
        }
        if self.paths.report_file.exists() || self.paths.done_marker.exists() {
            if active {
                // the top process is gone but it left children behind
                self.kill();
            }
            return Some(EngineEvent::PayloadExited);
        }
        let unclaimed = self.paths.startup_script.exists();
        if unclaimed && wall >= Duration::from_secs(self.config.bind_timeout_seconds) {
            return Some(EngineEvent::LimitBreached(REASON_START_TIMEOUT.into()));
        }
        None
    }

    fn kill(&self) {
        match monitor::kill_payload(self.deps.processes, self.deps.clock, &self.payload, self.kill_grace, self.poll()) {
            Ok(n) => log::info!("signaled {n} payload process(es)"),
            Err(e) => log::warn!("killing payload failed: {e}"),
        }
    }

    fn parse_report(&self) -> EngineEvent {
        // a wrapper whose payload was just killed needs a moment to write
        let deadline = self.deps.clock.now() + self.kill_grace;
        while !self.paths.report_file.exists()
            && !self.paths.done_marker.exists()
            && self.deps.clock.now() < deadline
        {
            self.deps.clock.sleep(self.poll());
        }
        let text = match wrapper::read_report(&self.paths) {
            Ok(Some(text)) => text,
            Ok(None) => return EngineEvent::ReportMissing,
            Err(e) => return EngineEvent::ReportInvalid(e.to_string()),
        };
        match wrapper::parse_exit_report(&text) {
            Ok(report) if report.task_id == self.ticket().task.task_id => EngineEvent::ReportParsed(report),
            Ok(report) => EngineEvent::ReportInvalid(format!("report names task {}", report.task_id)),
            Err(e) => EngineEvent::ReportInvalid(e.to_string()),
        }
    }

    fn report(&self, request: CompletionRequest) {
        let ticket = self.ticket();
        match self.retry_repo(|| self.deps.repo.report_completion(ticket, &request)) {
            Ok(()) => {}
            Err(e) => log::warn!("completion of {} not recorded: {e}", ticket.task.task_id),
        }
    }

    /// Sends the payload container back to the parking image and waits
    /// until it runs there again, which also kills every process in it.
    fn restart(&self) -> Option<EngineEvent> {
        let cfg = &self.config;
        if let Err(e) = self.retry_gateway(|| {
            self.deps
                .gateway
                .restart_payload_container(&cfg.pod_name, &cfg.payload_container_name, &cfg.parking_image)
        }) {
            return Some(self.gateway_failure(e));
        }
        match await_container_running(
            self.deps.gateway,
            self.deps.clock,
            &cfg.pod_name,
            &cfg.payload_container_name,
            &cfg.parking_image,
            Duration::from_secs(cfg.bind_timeout_seconds),
            self.poll(),
        ) {
            Ok(_) => None,
            Err(e) => Some(EngineEvent::Fatal(format!("payload container did not return to parking: {e}"))),
        }
    }
}

/// Runs one pilot to completion.
pub fn run_pilot(config: PilotConfig, deps: PilotDeps<'_>) -> Result<PilotOutcome, ProtocolError> {
    Pilot::new(config, deps).run()
}
