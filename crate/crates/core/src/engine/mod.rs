//! The pilot lifecycle.
//!
//! [`step`] is a pure transition function over ([`PilotPhase`], event,
//! [`Context`]). The orchestrator in [`pilot`] executes the actions it
//! emits against the cluster, the repository and the shared directory, and
//! turns their results back into events.
//!
//! ```text
//! Validate ─ok─▶ Fetch ─claimed─▶ Bind ─running─▶ Stage ─▶ Run ─▶ Collect ─▶ Cleanup ─┐
//!    │            ▲  │              │               │                                   │
//!    │            │  └─idle/max─▶ Drain ◀───────────┼──────── max tasks ◀────────────────┤
//!    │            └──────────────────────────────── ┴ ───────── cleaned ◀────────────────┘
//!    └─failed─▶ Terminated
//! ```

pub mod pilot;
pub mod simulate;

use std::fmt;
use std::time::Duration;

use thiserror::Error;

use crate::cluster::ContainerStatus;
use crate::model::{ExitReport, PilotPhase};
use crate::taskrepo::ClaimTicket;

pub use pilot::{run_pilot, validate_environment, Pilot, PilotDeps, TransitionRecord};
pub use simulate::{run_scenario, ScenarioRun, SimulationReport};

pub const REASON_BIND_TIMEOUT: &str = "bind-timeout";
pub const REASON_REPORT_MISSING: &str = "report-missing";
pub const REASON_REPORT_INVALID: &str = "report-invalid";
pub const REASON_START_TIMEOUT: &str = "start-timeout";
pub const REASON_PILOT_FAILURE: &str = "pilot-failure";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineEvent {
    ValidationOk,
    ValidationFailed(String),
    TaskClaimed(ClaimTicket),
    NoTask,
    ContainerRunning(ContainerStatus),
    /// The payload container did not reach the task image in time.
    BindTimeout(String),
    StagingDone,
    StagingFailed(String),
    PayloadStarted,
    PayloadExited,
    ReportParsed(ExitReport),
    ReportMissing,
    /// A report exists but is malformed or names another task.
    ReportInvalid(String),
    OutputsUploaded { count: usize, missing: Vec<String> },
    LimitBreached(String),
    Cleaned,
    IdleExpired,
    MaxTasksReached,
    /// Graceful shutdown requested from outside (signal, operator).
    StopRequested,
    /// Unrecoverable error, e.g. the cluster credential was revoked.
    Fatal(String),
}

impl fmt::Display for EngineEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ValidationOk => f.write_str("ValidationOk"),
            Self::ValidationFailed(r) => write!(f, "ValidationFailed({r})"),
            Self::TaskClaimed(t) => write!(f, "TaskClaimed(task={} image={} claim={})", t.task.task_id, t.task.image, t.claim_id),
            Self::NoTask => f.write_str("NoTask"),
            Self::ContainerRunning(s) => write!(f, "ContainerRunning({} restarts={})", s.running_image, s.restart_count),
            Self::BindTimeout(d) => write!(f, "BindTimeout({d})"),
            Self::StagingDone => f.write_str("StagingDone"),
            Self::StagingFailed(r) => write!(f, "StagingFailed({r})"),
            Self::PayloadStarted => f.write_str("PayloadStarted"),
            Self::PayloadExited => f.write_str("PayloadExited"),
            Self::ReportParsed(r) => write!(f, "ReportParsed(task={} exit={})", r.task_id, r.exit_code),
            Self::ReportMissing => f.write_str("ReportMissing"),
            Self::ReportInvalid(r) => write!(f, "ReportInvalid({r})"),
            Self::OutputsUploaded { count, missing } => {
                write!(f, "OutputsUploaded(count={count} missing=[{}])", missing.join(","))
            }
            Self::LimitBreached(r) => write!(f, "LimitBreached({r})"),
            Self::Cleaned => f.write_str("Cleaned"),
            Self::IdleExpired => f.write_str("IdleExpired"),
            Self::MaxTasksReached => f.write_str("MaxTasksReached"),
            Self::StopRequested => f.write_str("StopRequested"),
            Self::Fatal(r) => write!(f, "Fatal({r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EngineAction {
    PatchImage(String),
    AwaitRunning { image: String, timeout: Duration },
    StageInputs,
    WriteEnvFile,
    PublishScript,
    StartMonitoring,
    KillPayload,
    ParseReport,
    UploadOutputs,
    ReportCompletion { report: ExitReport, missing_outputs: Vec<String> },
    ReportFailure(String),
    RestartPayload,
    WipeSharedDir,
    AcquireTask,
    SelfTerminate,
}

impl fmt::Display for EngineAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PatchImage(i) => write!(f, "PatchImage({i})"),
            Self::AwaitRunning { image, timeout } => write!(f, "AwaitRunning({image}, {}s)", timeout.as_secs()),
            Self::ReportCompletion { report, .. } => write!(f, "ReportCompletion(exit={})", report.exit_code),
            Self::ReportFailure(r) => write!(f, "ReportFailure({r})"),
            other => fmt::Debug::fmt(other, f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    Idle,
    MaxTasks,
    ValidationFailure,
    ExternalStop,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Idle => "idle",
            Self::MaxTasks => "max-tasks",
            Self::ValidationFailure => "validation-failure",
            Self::ExternalStop => "external-stop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PilotOutcome {
    pub tasks_completed: u32,
    pub tasks_failed: u32,
    pub termination_reason: TerminationReason,
}

impl fmt::Display for PilotOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "completed={} failed={} reason={}",
            self.tasks_completed, self.tasks_failed, self.termination_reason
        )
    }
}

/// Everything `step` needs besides the phase. Counters and the task in
/// flight live here so the phase stays a plain enum.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Context {
    pub max_tasks: Option<u32>,
    pub bind_timeout: Duration,
    pub tasks_claimed: u32,
    pub tasks_completed: u32,
    pub tasks_failed: u32,
    pub current: Option<ClaimTicket>,
    pub report: Option<ExitReport>,
    /// Set when the monitor stopped the payload; overrides the report.
    pub breach: Option<String>,
    /// The repository has been told how the current task ended.
    pub reported: bool,
    pub termination: Option<TerminationReason>,
}

impl Context {
    pub fn new(max_tasks: Option<u32>, bind_timeout: Duration) -> Self {
        Self {
            max_tasks,
            bind_timeout,
            ..Self::default()
        }
    }

    fn max_reached(&self) -> bool {
        self.max_tasks.is_some_and(|m| self.tasks_claimed >= m)
    }

    pub fn outcome(&self) -> Option<PilotOutcome> {
        self.termination.map(|termination_reason| PilotOutcome {
            tasks_completed: self.tasks_completed,
            tasks_failed: self.tasks_failed,
            termination_reason,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transition {
    pub phase: PilotPhase,
    pub actions: Vec<EngineAction>,
    pub context: Context,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("event {event} is not admissible in phase {phase}")]
    Inadmissible { phase: PilotPhase, event: String },
    #[error("{0}")]
    Inconsistent(String),
}

fn cleanup_after_failure(reason: &str) -> Vec<EngineAction> {
    vec![
        EngineAction::ReportFailure(reason.to_string()),
        EngineAction::RestartPayload,
        EngineAction::WipeSharedDir,
    ]
}

/// The lifecycle transition function. Pure: equal inputs give equal
/// outputs, and nothing outside the arguments is read.
pub fn step(phase: PilotPhase, event: &EngineEvent, context: &Context) -> Result<Transition, ProtocolError> {
    use EngineAction as A;
    use EngineEvent as E;
    use PilotPhase as P;

    let mut ctx = context.clone();
    let inadmissible = || ProtocolError::Inadmissible {
        phase,
        event: event.to_string(),
    };
    let task_image = |ctx: &Context| {
        ctx.current
            .as_ref()
            .map(|t| t.task.image.clone())
            .ok_or_else(|| ProtocolError::Inconsistent(format!("no task in flight during {phase}")))
    };
    let fail = |ctx: &mut Context, reason: &str| {
        ctx.tasks_failed += 1;
        ctx.reported = true;
        (P::Cleanup, cleanup_after_failure(reason))
    };
    let drain = |ctx: &mut Context, reason: TerminationReason| {
        ctx.termination = Some(reason);
        (P::Drain, vec![A::SelfTerminate])
    };
    let next_task = |ctx: &mut Context| {
        if ctx.max_reached() {
            drain(ctx, TerminationReason::MaxTasks)
        } else {
            (P::Fetch, vec![A::AcquireTask])
        }
    };

    let (next, actions) = match (phase, event) {
        (P::Validate, E::ValidationOk) => next_task(&mut ctx),
        (P::Validate, E::ValidationFailed(_)) => {
            ctx.termination = Some(TerminationReason::ValidationFailure);
            (P::Terminated, vec![A::SelfTerminate])
        }

        (P::Fetch, E::TaskClaimed(ticket)) => {
            if ctx.max_reached() {
                return Err(ProtocolError::Inconsistent("task claimed beyond max_tasks".into()));
            }
            ctx.tasks_claimed += 1;
            ctx.current = Some(ticket.clone());
            ctx.report = None;
            ctx.breach = None;
            ctx.reported = false;
            let image = ticket.task.image.clone();
            (
                P::Bind,
                vec![
                    A::PatchImage(image.clone()),
                    A::AwaitRunning {
                        image,
                        timeout: ctx.bind_timeout,
                    },
                ],
            )
        }
        (P::Fetch, E::NoTask) => (P::Fetch, vec![A::AcquireTask]),
        (P::Fetch, E::IdleExpired) => drain(&mut ctx, TerminationReason::Idle),
        (P::Fetch, E::MaxTasksReached) => drain(&mut ctx, TerminationReason::MaxTasks),
        (P::Fetch | P::Validate, E::StopRequested) => drain(&mut ctx, TerminationReason::ExternalStop),

        (P::Bind, E::ContainerRunning(status)) => {
            let image = task_image(&ctx)?;
            if !status.is_running(&image) {
                return Err(ProtocolError::Inconsistent(format!(
                    "container reported running {} while binding {image}",
                    status.running_image
                )));
            }
            (
                P::Stage,
                vec![A::StageInputs, A::WriteEnvFile, A::PublishScript, A::StartMonitoring],
            )
        }
        (P::Bind, E::BindTimeout(_)) => fail(&mut ctx, REASON_BIND_TIMEOUT),

        (P::Stage, E::StagingDone) => (P::Run, vec![]),
        (P::Stage, E::StagingFailed(reason)) => fail(&mut ctx, &format!("staging-failed: {reason}")),

        (P::Run, E::PayloadStarted) => (P::Run, vec![]),
        (P::Run, E::PayloadExited) => (P::Collect, vec![A::ParseReport]),
        (P::Run, E::LimitBreached(reason)) => {
            ctx.breach = Some(reason.clone());
            (P::Collect, vec![A::KillPayload, A::ParseReport])
        }

        (P::Collect, E::ReportParsed(report)) => match ctx.breach.clone() {
            Some(reason) => fail(&mut ctx, &reason),
            None => {
                ctx.report = Some(report.clone());
                (P::Collect, vec![A::UploadOutputs])
            }
        },
        (P::Collect, E::OutputsUploaded { missing, .. }) => {
            let report = ctx
                .report
                .clone()
                .ok_or_else(|| ProtocolError::Inconsistent("outputs uploaded without a parsed report".into()))?;
            if report.exit_code == 0 {
                ctx.tasks_completed += 1;
            } else {
                ctx.tasks_failed += 1;
            }
            ctx.reported = true;
            (
                P::Cleanup,
                vec![
                    A::ReportCompletion {
                        report,
                        missing_outputs: missing.clone(),
                    },
                    A::RestartPayload,
                    A::WipeSharedDir,
                ],
            )
        }
        (P::Collect, E::ReportMissing) => {
            let reason = ctx.breach.clone().unwrap_or_else(|| REASON_REPORT_MISSING.into());
            fail(&mut ctx, &reason)
        }
        (P::Collect, E::ReportInvalid(_)) => {
            let reason = ctx.breach.clone().unwrap_or_else(|| REASON_REPORT_INVALID.into());
            fail(&mut ctx, &reason)
        }

        (P::Cleanup, E::Cleaned) => {
            ctx.current = None;
            ctx.report = None;
            ctx.breach = None;
            next_task(&mut ctx)
        }

        (P::Drain, E::Cleaned) => (P::Terminated, vec![]),

        (P::Drain | P::Terminated, E::Fatal(_)) => return Err(inadmissible()),
        (_, E::Fatal(_)) => {
            let mut actions = Vec::new();
            if ctx.current.is_some() && !ctx.reported {
                ctx.tasks_failed += 1;
                ctx.reported = true;
                actions.push(A::ReportFailure(REASON_PILOT_FAILURE.into()));
            }
            actions.push(A::SelfTerminate);
            ctx.termination = Some(TerminationReason::ValidationFailure);
            (P::Drain, actions)
        }

        _ => return Err(inadmissible()),
    };
    Ok(Transition {
        phase: next,
        actions,
        context: ctx,
    })
}
