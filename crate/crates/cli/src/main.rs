//! `podpilot` — operator entry points.
//!
//! Exit status: 0 success, 2 configuration error, 3 validation failure,
//! 4 transport failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use podpilot::clock::SystemClock;
use podpilot::cluster::kube::{ClusterCredential, KubeGateway, UreqTransport, SERVICE_ACCOUNT_DIR};
use podpilot::engine::simulate::{ScenarioRun, SimulationError};
use podpilot::engine::{Pilot, PilotDeps, PilotOutcome, TerminationReason};
use podpilot::model::{PilotConfig, TaskSpec};
use podpilot::monitor::ProcFsProvider;
use podpilot::podspec::{build_pod_blueprint, render_manifest, ManifestFormat, CONFIG_ENV, POD_NAMESPACE_ENV, POD_NAME_ENV};
use podpilot::simcluster::dump_trace;
use podpilot::simcluster::scenario::{bundled, Scenario};
use podpilot::taskrepo::http::{HttpRepoClient, RepoServer};
use podpilot::taskrepo::{RepoError, Repository, DEFAULT_GRACE_SECONDS};

const EXIT_CONFIG: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_TRANSPORT: u8 = 4;

const TOKEN_ENV: &str = "PODPILOT_REPO_TOKEN";

#[derive(Parser)]
#[command(name = "podpilot", version, about = "Pilot agent that late-binds container images in a Kubernetes pod")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Yaml,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Print the pod manifest for a pilot configuration.
    Genpod {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "podpilot:latest")]
        pilot_image: String,
        #[arg(long, value_enum, default_value = "yaml")]
        format: Format,
    },
    /// Run the pilot inside its pod, or against the simulator with --sim.
    /// Without --config the configuration is read from $PODPILOT_CONFIG,
    /// which the generated manifest sets.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding the service-account token, CA and namespace.
        #[arg(long, default_value = SERVICE_ACCOUNT_DIR)]
        credentials: PathBuf,
        /// Scenario file or bundled scenario name.
        #[arg(long)]
        sim: Option<String>,
        #[arg(long)]
        pod_name: Option<String>,
        #[arg(long)]
        namespace: Option<String>,
        #[arg(long, env = TOKEN_ENV, default_value = "", hide_env_values = true)]
        repo_token: String,
        /// Working directory for --sim (defaults to a temporary directory).
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Serve a directory-backed task repository over HTTP.
    RepoServe {
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8650")]
        listen: String,
        #[arg(long, env = TOKEN_ENV, default_value = "", hide_env_values = true)]
        token: String,
        #[arg(long, default_value_t = DEFAULT_GRACE_SECONDS)]
        grace_seconds: u64,
    },
    /// Enqueue a task (JSON or YAML) and upload its input files.
    Submit {
        /// Repository URL, or a state directory for direct access.
        #[arg(long)]
        repo: String,
        #[arg(long, env = TOKEN_ENV, default_value = "", hide_env_values = true)]
        token: String,
        task: PathBuf,
    },
    /// Run a scenario in the simulator and print the trace and outcome.
    Simulate {
        /// Scenario file or bundled scenario name.
        scenario: String,
        /// Claim tasks from this repository URL instead of the scenario's.
        #[arg(long)]
        repo: Option<String>,
        #[arg(long, env = TOKEN_ENV, default_value = "", hide_env_values = true)]
        token: String,
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

/// An error with the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.to_string(),
        }
    }

    fn repo(e: RepoError) -> Self {
        let code = if e.is_transient() { EXIT_TRANSPORT } else { EXIT_CONFIG };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<SimulationError> for Failure {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Repo(r) => Self::repo(r),
            other => Self::config(other),
        }
    }
}

fn load_config(path: &Path) -> Result<PilotConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let config = PilotConfig::from_toml(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    config.validate().map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn load_scenario(name: &str) -> Result<Scenario, Failure> {
    let text = match bundled(name) {
        Some(text) if !Path::new(name).exists() => text.to_string(),
        _ => fs::read_to_string(name).map_err(|e| Failure::config(format!("{name}: {e}")))?,
    };
    Scenario::parse(&text).map_err(|e| Failure::config(format!("{name}: {e}")))
}

fn load_task(path: &Path) -> Result<TaskSpec, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let json = path.extension().is_some_and(|e| e == "json") || text.trim_start().starts_with('{');
    let spec: TaskSpec = if json {
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    } else {
        serde_yaml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    };
    spec.validate().map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

fn workdir(explicit: Option<PathBuf>) -> Result<(PathBuf, Option<tempfile::TempDir>), Failure> {
    match explicit {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(|e| Failure::config(format!("{}: {e}", dir.display())))?;
            Ok((dir, None))
        }
        None => {
            let tmp = tempfile::tempdir().map_err(|e| Failure::config(format!("temporary directory: {e}")))?;
            Ok((tmp.path().to_path_buf(), Some(tmp)))
        }
    }
}

fn outcome_status(outcome: &PilotOutcome) -> u8 {
    match outcome.termination_reason {
        TerminationReason::ValidationFailure => EXIT_VALIDATION,
        _ => 0,
    }
}

static SIGNALLED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    SIGNALLED.store(true, Ordering::SeqCst);
}

/// SIGTERM/SIGINT make the pilot drain before its next claim.
fn install_stop_handler() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let handler = on_signal as extern "C" fn(libc::c_int);
    // SAFETY: the handler only stores to an atomic, which is async-signal-safe.
    unsafe {
        libc::signal(libc::SIGTERM, handler as libc::sighandler_t);
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
    }
    let watcher = Arc::clone(&flag);
    std::thread::spawn(move || loop {
        if SIGNALLED.load(Ordering::SeqCst) {
            log::info!("stop requested; draining");
            watcher.store(true, Ordering::SeqCst);
            return;
        }
        std::thread::sleep(Duration::from_millis(200));
    });
    flag
}

fn genpod(config: &Path, pilot_image: &str, format: Format) -> Result<u8, Failure> {
    let config = load_config(config)?;
    let blueprint = build_pod_blueprint(&config, pilot_image).map_err(Failure::config)?;
    let format = match format {
        Format::Yaml => ManifestFormat::Yaml,
        Format::Json => ManifestFormat::Json,
    };
    print!("{}", render_manifest(&blueprint, format));
    Ok(0)
}

fn print_simulation(report: &podpilot::engine::SimulationReport) {
    print!("{}", dump_trace(&report.trace));
    for t in &report.transitions {
        println!("{t}");
    }
    for task in &report.tasks {
        println!("task {} {}", task.task_id, task.status);
    }
    println!("outcome {}", report.outcome);
}

fn simulate(scenario: &str, repo: Option<&str>, token: &str, dir: Option<PathBuf>) -> Result<u8, Failure> {
    let scenario = load_scenario(scenario)?;
    let (dir, _guard) = workdir(dir)?;
    let client = repo.map(|url| HttpRepoClient::new(url, token));
    let mut run = ScenarioRun::new(&scenario, &dir);
    if let Some(client) = &client {
        run = run.with_repo(client);
    }
    let report = run.run()?;
    print_simulation(&report);
    Ok(outcome_status(&report.outcome))
}

fn run_real(
    config: PilotConfig,
    credentials: &Path,
    pod_name: Option<String>,
    namespace: Option<String>,
    token: &str,
) -> Result<u8, Failure> {
    let mut config = config;
    if let Some(name) = pod_name.or_else(|| std::env::var(POD_NAME_ENV).ok()) {
        config.pod_name = name;
    }
    if let Some(ns) = namespace.or_else(|| std::env::var(POD_NAMESPACE_ENV).ok()) {
        config.namespace = ns;
    }
    let credential = match ClusterCredential::from_service_account(credentials) {
        Ok(c) => c,
        Err(e) => {
            return Err(Failure {
                code: EXIT_VALIDATION,
                message: format!("validation-failure: no cluster credential: {e}"),
            })
        }
    };
    let transport = UreqTransport::new(&credential).map_err(|e| Failure {
        code: EXIT_VALIDATION,
        message: format!("validation-failure: {e}"),
    })?;
    let gateway = KubeGateway::new(transport, config.namespace.clone());
    let repo = HttpRepoClient::new(&config.repo_endpoint, token);
    let processes = ProcFsProvider::new();
    let clock = SystemClock::new();
    let deps = PilotDeps {
        gateway: &gateway,
        repo: &repo,
        processes: &processes,
        clock: &clock,
    };
    let stop = install_stop_handler();
    let mut pilot = Pilot::new(config, deps).with_stop_flag(stop);
    let outcome = pilot.run().map_err(|e| Failure {
        code: EXIT_VALIDATION,
        message: e.to_string(),
    })?;
    println!("outcome {outcome}");
    Ok(outcome_status(&outcome))
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: Option<PathBuf>,
    credentials: &Path,
    sim: Option<String>,
    pod_name: Option<String>,
    namespace: Option<String>,
    token: &str,
    dir: Option<PathBuf>,
) -> Result<u8, Failure> {
    let mut config = config.as_deref().map(load_config).transpose()?;
    if config.is_none() && sim.is_none() {
        if let Ok(text) = std::env::var(CONFIG_ENV) {
            let parsed = PilotConfig::from_toml(&text).map_err(|e| Failure::config(format!("${CONFIG_ENV}: {e}")))?;
            parsed.validate().map_err(|e| Failure::config(format!("${CONFIG_ENV}: {e}")))?;
            config = Some(parsed);
        }
    }
    match sim {
        Some(name) => {
            let scenario = load_scenario(&name)?;
            let (dir, _guard) = workdir(dir)?;
            let mut run = ScenarioRun::new(&scenario, &dir);
            let overrides = scenario.clone();
            if let Some(base) = config {
                // directories always come from the work dir in simulation
                run = run.configure(move |c| {
                    *c = PilotConfig {
                        shared_dir: c.shared_dir.clone(),
                        private_dir: c.private_dir.clone(),
                        ..base
                    };
                    overrides.configure(c);
                });
            }
            let report = run.run()?;
            println!("outcome {}", report.outcome);
            Ok(outcome_status(&report.outcome))
        }
        None => {
            let config = config.ok_or_else(|| Failure::config(format!("--config or ${CONFIG_ENV} is required outside --sim")))?;
            run_real(config, credentials, pod_name, namespace, token)
        }
    }
}

fn repo_serve(state: &Path, listen: &str, token: &str, grace: u64) -> Result<u8, Failure> {
    let repo = Repository::open(state, grace).map_err(Failure::repo)?;
    let server = RepoServer::bind(listen, repo, token, Arc::new(SystemClock::new())).map_err(|e| Failure {
        code: EXIT_TRANSPORT,
        message: e.to_string(),
    })?;
    if let Some(addr) = server.local_addr() {
        // scripts starting the server on port 0 read the address from here
        println!("listening on http://{addr}");
    }
    if token.is_empty() {
        log::warn!("serving without a token; any client may claim tasks");
    }
    server.serve();
    Ok(0)
}

fn submit(repo: &str, token: &str, task: &Path) -> Result<u8, Failure> {
    let spec = load_task(task)?;
    let base = task.parent().unwrap_or(Path::new("."));
    let mut inputs = Vec::new();
    for input in &spec.input_files {
        let path = base.join(&input.source);
        let data = fs::read(&path).map_err(|e| Failure::config(format!("input {}: {}: {e}", input.name, path.display())))?;
        inputs.push((input.name.clone(), data));
    }
    if repo.starts_with("http://") || repo.starts_with("https://") {
        let client = HttpRepoClient::new(repo, token);
        client.submit(&spec).map_err(Failure::repo)?;
        for (name, data) in &inputs {
            client.put_input(&spec.task_id, name, data).map_err(Failure::repo)?;
        }
    } else {
        let mut local = Repository::open(repo, DEFAULT_GRACE_SECONDS).map_err(Failure::repo)?;
        local.submit(spec.clone()).map_err(Failure::repo)?;
        for (name, data) in &inputs {
            local.put_input(&spec.task_id, name, data).map_err(Failure::repo)?;
        }
    }
    println!("{}", spec.task_id);
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Genpod {
            config,
            pilot_image,
            format,
        } => genpod(&config, &pilot_image, format),
        Command::Run {
            config,
            credentials,
            sim,
            pod_name,
            namespace,
            repo_token,
            workdir,
        } => run(config, &credentials, sim, pod_name, namespace, &repo_token, workdir),
        Command::RepoServe {
            state,
            listen,
            token,
            grace_seconds,
        } => repo_serve(&state, &listen, &token, grace_seconds),
        Command::Submit { repo, token, task } => submit(&repo, &token, &task),
        Command::Simulate {
            scenario,
            repo,
            token,
            workdir,
        } => simulate(&scenario, repo.as_deref(), &token, workdir),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("podpilot: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
