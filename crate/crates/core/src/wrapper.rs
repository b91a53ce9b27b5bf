//! The file-based control channel between the pilot and the payload
//! container.
//!
//! The payload container runs a fixed bootstrap loop (see
//! [`generate_bootstrap_command`]) that waits for a startup script on the
//! shared volume. The pilot publishes one script per task; the script drops
//! privileges, runs the payload, and leaves an exit report next to it.
//!
//! Every file the pilot hands over is published with write-to-temp plus
//! rename, so the bootstrap never sees a partial file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::os::unix::fs::{MetadataExt, OpenOptionsExt, PermissionsExt};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{is_env_identifier, ExitReport, PilotConfig, TaskSpec};

const SCRIPT_MODE: u32 = 0o755;
const ENV_MODE: u32 = 0o644;
const CONTROL_DIR_MODE: u32 = 0o755;
/// World-writable with the sticky bit: the payload can create files but
/// cannot rename or delete entries owned by the pilot.
const SHARED_DIR_MODE: u32 = 0o1777;

#[derive(Debug, Error)]
pub enum WrapperError {
    #[error("invalid environment variable name {0:?}")]
    InvalidIdentifier(String),
    #[error("environment value for {0} contains a NUL byte")]
    InvalidValue(String),
    #[error("control directory {0} does not exist")]
    MissingControlDir(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> WrapperError + '_ {
    move |source| WrapperError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Fixed locations of the control files under `<shared_dir>/<control_subdir>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlPaths {
    pub control_dir: PathBuf,
    pub startup_script: PathBuf,
    pub startup_script_tmp: PathBuf,
    /// Where the bootstrap moves a script it has claimed for execution.
    pub running_script: PathBuf,
    pub env_file: PathBuf,
    pub env_file_tmp: PathBuf,
    pub report_file: PathBuf,
    pub report_file_tmp: PathBuf,
    /// Created by the bootstrap once the startup script has exited.
    pub done_marker: PathBuf,
}

impl ControlPaths {
    pub fn new(config: &PilotConfig) -> Self {
        Self::under(config.control_dir())
    }

    pub fn under(control_dir: PathBuf) -> Self {
        let p = |name: &str| control_dir.join(name);
        Self {
            startup_script: p("startup.sh"),
            startup_script_tmp: p("startup.sh.tmp"),
            running_script: p("startup.running.sh"),
            env_file: p("env.sh"),
            env_file_tmp: p("env.sh.tmp"),
            report_file: p("report.txt"),
            report_file_tmp: p("report.txt.tmp"),
            done_marker: p("done"),
            control_dir,
        }
    }
}

fn quote(s: &str) -> String {
    shlex::try_quote(s)
        .map(|c| c.into_owned())
        .unwrap_or_else(|_| format!("'{}'", s.replace('\0', "").replace('\'', r"'\''")))
}

fn path_quote(p: &Path) -> String {
    quote(&p.to_string_lossy())
}

/// Renders milliseconds as an argument for `sleep`.
fn sleep_arg(ms: u64) -> String {
    if ms.is_multiple_of(1000) {
        (ms / 1000).to_string()
    } else {
        format!("{}.{:03}", ms / 1000, ms % 1000)
    }
}

/// The payload container's command: a shell wait loop that claims and runs
/// each published startup script exactly once, then keeps waiting.
pub fn generate_bootstrap_command(config: &PilotConfig) -> Vec<String> {
    let paths = ControlPaths::new(config);
    let script = path_quote(&paths.startup_script);
    let running = path_quote(&paths.running_script);
    let done = path_quote(&paths.done_marker);
    let body = format!(
        "while :; do \
if [ -f {script} ] && mv -f {script} {running} 2>/dev/null; then \
rm -f {done}; \
/bin/sh {running}; \
rm -f {running}; \
true 2>/dev/null > {done}; \
fi; \
sleep {sleep}; \
done",
        sleep = sleep_arg(config.poll_interval_ms),
    );
    vec!["/bin/sh".to_string(), "-c".to_string(), body]
}

/// Header values the startup script carries in its leading comments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptHeader {
    pub task_id: String,
    pub image: String,
}

const TASK_TAG: &str = "# podpilot-task: ";
const IMAGE_TAG: &str = "# podpilot-image: ";

pub fn parse_script_header(script: &str) -> Option<ScriptHeader> {
    let mut task_id = None;
    let mut image = None;
    for line in script.lines().take_while(|l| l.starts_with('#')) {
        if let Some(v) = line.strip_prefix(TASK_TAG) {
            task_id = Some(v.trim().to_string());
        } else if let Some(v) = line.strip_prefix(IMAGE_TAG) {
            image = Some(v.trim().to_string());
        }
    }
    Some(ScriptHeader {
        task_id: task_id?,
        image: image?,
    })
}

/// The per-task startup script. It runs as container pseudo-root, drops to
/// the payload UID for the user command, and reports the exit status through
/// `paths.report_file`.
///
/// The env file is sourced inside the unprivileged shell so that nothing the
/// task controls (PATH, LD_PRELOAD, ...) reaches a root process.
pub fn generate_startup_script(task: &TaskSpec, config: &PilotConfig, paths: &ControlPaths) -> String {
    let cmdline = std::iter::once(task.command.as_str())
        .chain(task.args.iter().map(String::as_str))
        .map(quote)
        .collect::<Vec<_>>()
        .join(" ");
    let env = path_quote(&paths.env_file);
    let inner = quote(&format!("if [ -r {env} ]; then . {env}; fi; exec {cmdline}"));
    let uid = config.payload_uid;
    let user = quote(&config.payload_user);
    let helper = path_quote(&paths.control_dir.join("dropuid"));

    let mut s = String::new();
    s.push_str("#!/bin/sh\n");
    s.push_str(&format!("{TASK_TAG}{}\n", task.task_id));
    s.push_str(&format!("{IMAGE_TAG}{}\n", task.image.trim()));
    s.push_str("# Generated by podpilot. Runs as container pseudo-root; do not edit.\n");
    s.push_str("umask 022\n");
    s.push_str(&format!("pilot_report={}\n", path_quote(&paths.report_file)));
    s.push_str(&format!("pilot_report_tmp={}\n", path_quote(&paths.report_file_tmp)));
    s.push_str(&format!("pilot_helper={helper}\n"));
    s.push_str("pilot_su=$(command -v su 2>/dev/null)\n");
    s.push_str("pilot_setpriv=$(command -v setpriv 2>/dev/null)\n");
    s.push_str(&format!("cd {} || exit 125\n", path_quote(&config.shared_dir)));
    s.push_str("pilot_started=$(date +%s)\n");
    s.push_str("pilot_uid=$(id -u)\n");
    s.push_str(&format!("if [ \"$pilot_uid\" = {uid} ]; then\n"));
    s.push_str(&format!("  /bin/sh -c {inner}\n"));
    s.push_str("elif [ \"$pilot_uid\" != 0 ]; then\n");
    s.push_str(&format!(
        "  echo \"podpilot: wrapper needs pseudo-root or uid {uid}, running as $pilot_uid\" >&2\n"
    ));
    s.push_str("  exit 126\n");
    s.push_str(&format!(
        "elif [ -n \"$pilot_su\" ] && [ \"$(id -u {user} 2>/dev/null)\" = {uid} ]; then\n"
    ));
    s.push_str(&format!("  \"$pilot_su\" -s /bin/sh -c {inner} {user}\n"));
    s.push_str("elif [ -n \"$pilot_setpriv\" ]; then\n");
    s.push_str(&format!(
        "  \"$pilot_setpriv\" --reuid={uid} --regid={uid} --clear-groups --no-new-privs /bin/sh -c {inner}\n"
    ));
    s.push_str("elif [ -x \"$pilot_helper\" ]; then\n");
    s.push_str(&format!("  \"$pilot_helper\" {uid} /bin/sh -c {inner}\n"));
    s.push_str("else\n");
    s.push_str("  echo 'podpilot: no way to drop privileges in this image' >&2\n");
    s.push_str("  exit 126\n");
    s.push_str("fi\n");
    s.push_str("pilot_rc=$?\n");
    s.push_str("pilot_finished=$(date +%s)\n");
    s.push_str(&format!(
        "printf 'task_id=%s\\nexit_code=%s\\nstarted_at=%s\\nfinished_at=%s\\n' {} \"$pilot_rc\" \"$pilot_started\" \"$pilot_finished\" > \"$pilot_report_tmp\" && mv -f \"$pilot_report_tmp\" \"$pilot_report\"\n",
        quote(&task.task_id)
    ));
    s.push_str("exit \"$pilot_rc\"\n");
    s
}

/// Creates the shared directory (sticky, world-writable) and the control
/// directory (pilot-owned, not writable by others).
pub fn prepare_control_dir(config: &PilotConfig, paths: &ControlPaths) -> Result<(), WrapperError> {
    fs::create_dir_all(&config.shared_dir).map_err(io_err(&config.shared_dir))?;
    fs::set_permissions(&config.shared_dir, fs::Permissions::from_mode(SHARED_DIR_MODE))
        .map_err(io_err(&config.shared_dir))?;
    fs::create_dir_all(&paths.control_dir).map_err(io_err(&paths.control_dir))?;
    fs::set_permissions(&paths.control_dir, fs::Permissions::from_mode(CONTROL_DIR_MODE))
        .map_err(io_err(&paths.control_dir))
}

fn publish_atomic(control_dir: &Path, tmp: &Path, dest: &Path, content: &[u8], mode: u32) -> Result<(), WrapperError> {
    if !control_dir.is_dir() {
        return Err(WrapperError::MissingControlDir(control_dir.to_path_buf()));
    }
    let _ = fs::remove_file(tmp);
    let mut file = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .mode(mode)
        .open(tmp)
        .map_err(io_err(tmp))?;
    file.write_all(content).map_err(io_err(tmp))?;
    // umask may have stripped bits from the requested mode
    file.set_permissions(fs::Permissions::from_mode(mode)).map_err(io_err(tmp))?;
    file.sync_all().map_err(io_err(tmp))?;
    drop(file);
    fs::rename(tmp, dest).map_err(io_err(dest))
}

/// Publishes the startup script at its trigger path. Readers see either no
/// file or the complete script.
pub fn publish_startup_script(paths: &ControlPaths, script: &str) -> Result<(), WrapperError> {
    publish_atomic(
        &paths.control_dir,
        &paths.startup_script_tmp,
        &paths.startup_script,
        script.as_bytes(),
        SCRIPT_MODE,
    )
}

/// Renders `env` as `export NAME='value'` lines, sourceable by a POSIX shell.
pub fn render_env_file(env: &BTreeMap<String, String>) -> Result<String, WrapperError> {
    let mut out = String::new();
    for (name, value) in env {
        if !is_env_identifier(name) {
            return Err(WrapperError::InvalidIdentifier(name.clone()));
        }
        let quoted = shlex::try_quote(value).map_err(|_| WrapperError::InvalidValue(name.clone()))?;
        out.push_str(&format!("export {name}={quoted}\n"));
    }
    Ok(out)
}

pub fn write_env_file(paths: &ControlPaths, env: &BTreeMap<String, String>) -> Result<(), WrapperError> {
    let text = render_env_file(env)?;
    publish_atomic(&paths.control_dir, &paths.env_file_tmp, &paths.env_file, text.as_bytes(), ENV_MODE)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReportParseError {
    #[error("exit report is missing field {0}")]
    Missing(&'static str),
    #[error("exit report field {field} has invalid value {value:?}")]
    Invalid { field: String, value: String },
    #[error("exit report field {field} is out of range: {value}")]
    OutOfRange { field: &'static str, value: String },
    #[error("exit report has unexpected line {0:?}")]
    Unexpected(String),
    #[error("exit report repeats field {0}")]
    Duplicate(String),
}

/// Parses the line-oriented `key=value` report written by the startup
/// script.
pub fn parse_exit_report(text: &str) -> Result<ExitReport, ReportParseError> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ReportParseError::Unexpected(line.to_string()))?;
        if !matches!(key, "task_id" | "exit_code" | "started_at" | "finished_at") {
            return Err(ReportParseError::Unexpected(line.to_string()));
        }
        if fields.insert(key, value).is_some() {
            return Err(ReportParseError::Duplicate(key.to_string()));
        }
    }
    let get = |field: &'static str| fields.get(field).copied().ok_or(ReportParseError::Missing(field));
    let number = |field: &'static str| -> Result<u64, ReportParseError> {
        let raw = get(field)?;
        raw.parse::<u64>().map_err(|_| ReportParseError::Invalid {
            field: field.to_string(),
            value: raw.to_string(),
        })
    };

    let task_id = get("task_id")?;
    if crate::model::validate_task_id(task_id).is_err() {
        return Err(ReportParseError::Invalid {
            field: "task_id".into(),
            value: task_id.to_string(),
        });
    }
    let exit_code = number("exit_code")?;
    let exit_code = u8::try_from(exit_code).map_err(|_| ReportParseError::OutOfRange {
        field: "exit_code",
        value: exit_code.to_string(),
    })?;
    let started_at = number("started_at")?;
    let finished_at = number("finished_at")?;
    if finished_at < started_at {
        return Err(ReportParseError::OutOfRange {
            field: "finished_at",
            value: format!("{finished_at} < started_at {started_at}"),
        });
    }
    Ok(ExitReport {
        task_id: task_id.to_string(),
        exit_code,
        started_at,
        finished_at,
    })
}

/// The exact text the startup script writes.
pub fn render_exit_report(report: &ExitReport) -> String {
    format!(
        "task_id={}\nexit_code={}\nstarted_at={}\nfinished_at={}\n",
        report.task_id, report.exit_code, report.started_at, report.finished_at
    )
}

/// Writes a report the way the startup script does (temp file, then rename).
pub fn write_exit_report(paths: &ControlPaths, report: &ExitReport) -> Result<(), WrapperError> {
    publish_atomic(
        &paths.control_dir,
        &paths.report_file_tmp,
        &paths.report_file,
        render_exit_report(report).as_bytes(),
        ENV_MODE,
    )
}

/// Report text if present.
pub fn read_report(paths: &ControlPaths) -> Result<Option<String>, WrapperError> {
    match fs::read(&paths.report_file) {
        Ok(bytes) => Ok(Some(String::from_utf8_lossy(&bytes).into_owned())),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&paths.report_file)(e)),
    }
}

/// Removes every entry under `dir`, keeping `dir` itself.
pub fn wipe_dir(dir: &Path) -> Result<(), WrapperError> {
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let file_type = entry.file_type().map_err(io_err(&path))?;
        if file_type.is_dir() {
            fs::remove_dir_all(&path).map_err(io_err(&path))?;
        } else {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    Ok(())
}

/// Whether a process running as `uid` (with primary group `uid`, no
/// supplementary groups) could write `path` under classic permission bits.
pub fn writable_by(path: &Path, uid: u32) -> io::Result<bool> {
    let meta = fs::metadata(path)?;
    let mode = meta.mode();
    Ok((meta.uid() == uid && mode & 0o200 != 0) || (meta.gid() == uid && mode & 0o020 != 0) || mode & 0o002 != 0)
}
