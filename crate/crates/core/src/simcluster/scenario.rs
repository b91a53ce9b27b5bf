//! Scenario files: line-oriented descriptions of tasks, payload behaviors
//! and injected failures.
//!
//! ```text
//! seed 42
//! mode behavior                      # or: real
//! pilot max_tasks=3 idle_timeout=60 poll_ms=500 bind_timeout=120
//! timing pull=3 jitter=2 retry=10     # seconds
//! task t1 image=sci/sim:1 cmd=/opt/sim exit=0 run=30 subprocs=1 outputs=a.txt,b.txt
//! fail payload-hang task=t1
//! ```
//!
//! Task keys: `image` (required), `cmd`, `args` (shell-quoted), `exit`,
//! `run`, `subprocs`, `daemons`, `mem` (bytes per payload process),
//! `outputs` (declared and produced), `missing` (declared, never produced),
//! `wall`, `procs`, `maxmem` (limits), `env.NAME=value`.

use std::time::Duration;

use super::{ExecMode, FailureKind, FailureScope, PayloadBehavior, SimError, SimPod, SimOptions, SimTiming};
use crate::model::{PilotConfig, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PilotOverrides {
    pub max_tasks: Option<u32>,
    pub idle_timeout_seconds: Option<u64>,
    pub poll_interval_ms: Option<u64>,
    pub bind_timeout_seconds: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScenarioTask {
    pub spec: TaskSpec,
    pub behavior: PayloadBehavior,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Scenario {
    pub seed: u64,
    pub mode: ExecMode,
    pub timing: SimTiming,
    pub pilot: PilotOverrides,
    pub tasks: Vec<ScenarioTask>,
    pub failures: Vec<(FailureKind, FailureScope)>,
}

pub const BUNDLED: [(&str, &str); 5] = [
    ("threetasks", include_str!("../../scenarios/threetasks.txt")),
    ("hang", include_str!("../../scenarios/hang.txt")),
    ("pullfail", include_str!("../../scenarios/pullfail.txt")),
    ("killresist", include_str!("../../scenarios/killresist.txt")),
    ("reportmissing", include_str!("../../scenarios/reportmissing.txt")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

fn err(line: usize, message: impl Into<String>) -> SimError {
    SimError::Scenario {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T, SimError> {
    value
        .parse()
        .map_err(|_| err(line, format!("{key}: not a valid number: {value:?}")))
}

fn seconds(line: usize, key: &str, value: &str) -> Result<Duration, SimError> {
    let secs: f64 = num(line, key, value)?;
    if !secs.is_finite() || secs < 0.0 {
        return Err(err(line, format!("{key}: negative or invalid duration")));
    }
    Ok(Duration::from_secs_f64(secs))
}

fn split_list(value: &str) -> Vec<String> {
    value.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect()
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut s = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let Some(words) = shlex::split(raw) else {
                return Err(err(line, "unbalanced quotes"));
            };
            let Some((directive, rest)) = words.split_first() else {
                continue;
            };
            if directive.starts_with('#') {
                continue;
            }
            let pairs = |rest: &[String]| -> Result<Vec<(String, String)>, SimError> {
                rest.iter()
                    .map(|w| {
                        w.split_once('=')
                            .map(|(k, v)| (k.to_string(), v.to_string()))
                            .ok_or_else(|| err(line, format!("expected key=value, got {w:?}")))
                    })
                    .collect()
            };
            match directive.as_str() {
                "seed" => match rest {
                    [v] => s.seed = num(line, "seed", v)?,
                    _ => return Err(err(line, "seed takes one value")),
                },
                "mode" => match rest {
                    [v] if v == "behavior" => s.mode = ExecMode::BehaviorTable,
                    [v] if v == "real" => s.mode = ExecMode::RealProcess,
                    _ => return Err(err(line, "mode is `behavior` or `real`")),
                },
                "pilot" => {
                    for (k, v) in pairs(rest)? {
                        match k.as_str() {
                            "max_tasks" => s.pilot.max_tasks = Some(num(line, &k, &v)?),
                            "idle_timeout" => s.pilot.idle_timeout_seconds = Some(num(line, &k, &v)?),
                            "poll_ms" => s.pilot.poll_interval_ms = Some(num(line, &k, &v)?),
                            "bind_timeout" => s.pilot.bind_timeout_seconds = Some(num(line, &k, &v)?),
                            _ => return Err(err(line, format!("unknown pilot key {k}"))),
                        }
                    }
                }
                "timing" => {
                    for (k, v) in pairs(rest)? {
                        match k.as_str() {
                            "pull" => s.timing.pull_latency = seconds(line, &k, &v)?,
                            "jitter" => s.timing.pull_jitter = seconds(line, &k, &v)?,
                            "retry" => s.timing.pull_retry = seconds(line, &k, &v)?,
                            _ => return Err(err(line, format!("unknown timing key {k}"))),
                        }
                    }
                }
                "task" => {
                    let (id, rest) = rest.split_first().ok_or_else(|| err(line, "task needs an id"))?;
                    s.tasks.push(parse_task(line, id, &pairs(rest)?)?);
                }
                "fail" => {
                    let (kind, rest) = rest.split_first().ok_or_else(|| err(line, "fail needs a kind"))?;
                    let kind = FailureKind::parse(kind).ok_or_else(|| err(line, format!("unknown failure kind {kind}")))?;
                    let scope = match pairs(rest)?.as_slice() {
                        [(k, v)] if k == "task" => FailureScope::Task(v.clone()),
                        [(k, v)] if k == "image" => FailureScope::Image(v.clone()),
                        [(k, v)] if k == "container" => FailureScope::Container(v.clone()),
                        _ => return Err(err(line, "fail needs exactly one of task=, image=, container=")),
                    };
                    s.failures.push((kind, scope));
                }
                other => return Err(err(line, format!("unknown directive {other}"))),
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &s.tasks {
            if !seen.insert(&t.spec.task_id) {
                return Err(err(0, format!("duplicate task {}", t.spec.task_id)));
            }
        }
        Ok(s)
    }

    pub fn sim_options(&self) -> SimOptions {
        SimOptions {
            seed: self.seed,
            timing: self.timing.clone(),
            mode: self.mode,
            ..SimOptions::default()
        }
    }

    pub fn configure(&self, config: &mut PilotConfig) {
        if let Some(v) = self.pilot.max_tasks {
            config.max_tasks = Some(v);
        }
        if let Some(v) = self.pilot.idle_timeout_seconds {
            config.idle_timeout_seconds = v;
        }
        if let Some(v) = self.pilot.poll_interval_ms {
            config.poll_interval_ms = v;
        }
        if let Some(v) = self.pilot.bind_timeout_seconds {
            config.bind_timeout_seconds = v;
        }
    }

    /// Registers behaviors and failures with a freshly created pod.
    pub fn apply(&self, sim: &mut SimPod) -> Result<(), SimError> {
        for t in &self.tasks {
            sim.register_task(&t.spec.task_id, &t.spec.image, t.behavior.clone());
        }
        for (kind, scope) in &self.failures {
            sim.inject_failure(*kind, scope.clone())?;
        }
        Ok(())
    }
}

fn parse_task(line: usize, id: &str, pairs: &[(String, String)]) -> Result<ScenarioTask, SimError> {
    let mut image = None;
    let mut behavior = PayloadBehavior::default();
    let mut spec = TaskSpec::new(id, "", "");
    let mut missing = Vec::new();
    for (k, v) in pairs {
        match k.as_str() {
            "image" => image = Some(v.clone()),
            "cmd" => behavior.command = v.clone(),
            "args" => spec.args = shlex::split(v).ok_or_else(|| err(line, "args: unbalanced quotes"))?,
            "exit" => behavior.exit_code = num(line, k, v)?,
            "run" => behavior.run = seconds(line, k, v)?,
            "subprocs" => behavior.subprocesses = num(line, k, v)?,
            "daemons" => behavior.daemons = num(line, k, v)?,
            "mem" => behavior.memory_bytes = num(line, k, v)?,
            "outputs" => behavior.outputs = split_list(v),
            "missing" => missing = split_list(v),
            "wall" => spec.limits.max_wall_seconds = Some(num(line, k, v)?),
            "procs" => spec.limits.max_processes = Some(num(line, k, v)?),
            "maxmem" => spec.limits.max_memory_bytes = Some(num(line, k, v)?),
            _ => match k.strip_prefix("env.") {
                Some(name) => {
                    spec.env.insert(name.to_string(), v.clone());
                }
                None => return Err(err(line, format!("unknown task key {k}"))),
            },
        }
    }
    spec.image = image.ok_or_else(|| err(line, format!("task {id} needs image=")))?;
    spec.command = behavior.command.clone();
    spec.output_files = behavior.outputs.iter().chain(&missing).cloned().collect();
    spec.validate()
        .map_err(|e| err(line, format!("task {id}: {e}")))?;
    Ok(ScenarioTask { spec, behavior })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for (name, text) in BUNDLED {
            let s = Scenario::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!s.tasks.is_empty(), "{name}");
        }
        let three = Scenario::parse(bundled("threetasks").unwrap()).unwrap();
        assert_eq!(three.tasks.len(), 3);
        assert_eq!(three.pilot.max_tasks, Some(3));
        assert_eq!(three.tasks[0].spec.output_files, ["result-a.txt"]);
    }

    #[test]
    fn task_keys() {
        let s = Scenario::parse(
            "task t image=a:1 cmd=/bin/sh args='-c \"exit 3\"' exit=3 run=1.5 outputs=x,y missing=z wall=60 env.FOO=bar\n\
             fail report-missing image=a:1\nmode real\n",
        )
        .unwrap();
        let t = &s.tasks[0];
        assert_eq!(t.spec.args, ["-c", "exit 3"]);
        assert_eq!(t.behavior.run, Duration::from_millis(1500));
        assert_eq!(t.spec.output_files, ["x", "y", "z"]);
        assert_eq!(t.behavior.outputs, ["x", "y"]);
        assert_eq!(t.spec.limits.max_wall_seconds, Some(60));
        assert_eq!(t.spec.env["FOO"], "bar");
        assert_eq!(s.mode, ExecMode::RealProcess);
        assert_eq!(s.failures, [(FailureKind::ReportMissing, FailureScope::Image("a:1".into()))]);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [
            ("seed x", 1),
            ("# c\ntask t cmd=x", 2),
            ("fail explode task=t", 1),
            ("bogus", 1),
            ("task t image=a:1 exit=256", 1),
            ("task ../t image=a:1", 1),
        ] {
            match Scenario::parse(text) {
                Err(SimError::Scenario { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }
}
