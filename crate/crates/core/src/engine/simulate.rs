//! Running a pilot against the simulated pod, end to end.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{EngineAction, Pilot, PilotDeps, PilotOutcome, ProtocolError, TransitionRecord};
use crate::model::{PilotConfig, PilotPhase};
use crate::podspec::build_pod_blueprint;
use crate::simcluster::scenario::Scenario;
use crate::simcluster::{SimError, SimEvent, SimHandle, SimPod};
use crate::taskrepo::{LocalRepo, RepoClient, RepoError, Repository, TaskView, DEFAULT_GRACE_SECONDS};

pub const SIM_PILOT_IMAGE: &str = "podpilot:dev";

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Repo(#[from] RepoError),
    #[error("invalid configuration: {0}")]
    Config(#[from] crate::model::ConfigError),
    #[error("pilot protocol violation: {0}")]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone)]
pub struct SimulationReport {
    pub outcome: PilotOutcome,
    pub trace: Vec<SimEvent>,
    pub transitions: Vec<TransitionRecord>,
    /// Final repository view; empty when an external repository was used.
    pub tasks: Vec<TaskView>,
    pub config: PilotConfig,
}

type SimObserver<'a> = Box<dyn FnMut(&SimHandle, PilotPhase, &EngineAction) + 'a>;
type ConfigTweak<'a> = Box<dyn FnOnce(&mut PilotConfig) + 'a>;

/// A scenario prepared for one run under `workdir`.
pub struct ScenarioRun<'a> {
    scenario: &'a Scenario,
    workdir: PathBuf,
    tweak: Option<ConfigTweak<'a>>,
    observer: Option<SimObserver<'a>>,
    repo: Option<&'a dyn RepoClient>,
}

impl<'a> ScenarioRun<'a> {
    pub fn new(scenario: &'a Scenario, workdir: impl AsRef<Path>) -> Self {
        Self {
            scenario,
            workdir: workdir.as_ref().to_path_buf(),
            tweak: None,
            observer: None,
            repo: None,
        }
    }

    /// Adjusts the pilot configuration after the scenario's overrides.
    pub fn configure(mut self, tweak: impl FnOnce(&mut PilotConfig) + 'a) -> Self {
        self.tweak = Some(Box::new(tweak));
        self
    }

    /// Sees every action right before it executes, together with the pod.
    pub fn observe(mut self, observer: impl FnMut(&SimHandle, PilotPhase, &EngineAction) + 'a) -> Self {
        self.observer = Some(Box::new(observer));
        self
    }

    /// Uses an existing repository instead of a fresh local one seeded with
    /// the scenario's tasks.
    pub fn with_repo(mut self, repo: &'a dyn RepoClient) -> Self {
        self.repo = Some(repo);
        self
    }

    pub fn run(self) -> Result<SimulationReport, SimulationError> {
        let mut config = PilotConfig {
            shared_dir: self.workdir.join("shared"),
            private_dir: self.workdir.join("private"),
            ..PilotConfig::default()
        };
        self.scenario.configure(&mut config);
        if let Some(tweak) = self.tweak {
            tweak(&mut config);
        }
        config.validate()?;
        let blueprint = build_pod_blueprint(&config, SIM_PILOT_IMAGE)?;
        let mut pod = SimPod::new(blueprint, config.clone(), self.scenario.sim_options())?;
        self.scenario.apply(&mut pod)?;
        let sim = SimHandle::new(pod);

        let local = match self.repo {
            Some(_) => None,
            None => {
                let mut repository = Repository::open(self.workdir.join("repo"), DEFAULT_GRACE_SECONDS)?;
                for t in &self.scenario.tasks {
                    repository.submit(t.spec.clone())?;
                }
                Some(LocalRepo::new(repository, sim.clone()))
            }
        };
        let repo: &dyn RepoClient = match (self.repo, &local) {
            (Some(r), _) => r,
            (None, Some(l)) => l,
            (None, None) => unreachable!("local repository created above"),
        };

        let deps = PilotDeps {
            gateway: &sim,
            repo,
            processes: &sim,
            clock: &sim,
        };
        let mut pilot = Pilot::new(config.clone(), deps);
        if let Some(mut observer) = self.observer {
            let handle = sim.clone();
            pilot = pilot.with_observer(move |phase, action| observer(&handle, phase, action));
        }
        let outcome = pilot.run()?;
        let transitions = pilot.transitions().to_vec();
        drop(pilot);
        let tasks = local.map(|l| l.repository().list()).unwrap_or_default();
        Ok(SimulationReport {
            outcome,
            trace: sim.trace(),
            transitions,
            tasks,
            config,
        })
    }
}

/// Runs `scenario` with a fresh local repository under `workdir`.
pub fn run_scenario(scenario: &Scenario, workdir: &Path) -> Result<SimulationReport, SimulationError> {
    ScenarioRun::new(scenario, workdir).run()
}
