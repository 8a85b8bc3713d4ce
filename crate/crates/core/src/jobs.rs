//! Job specifications and lifecycle records for the per-node job manager.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::fileio::validate_rel_path;

/// Per-stream capture cap.
pub const CAPTURE_LIMIT: usize = 1024 * 1024;
pub const DEFAULT_GRACE_SECS: u64 = 5;
/// Exit code reported when the executable could not be started.
pub const SPAWN_FAILURE_EXIT: i32 = 127;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_key: String,
    /// Executable followed by its arguments. `{input}` and `{output}` are
    /// replaced with the job's absolute input and output directories.
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default = "default_input")]
    pub input_subdir: String,
    #[serde(default = "default_output")]
    pub output_subdir: String,
    pub timeout_secs: u64,
    #[serde(default)]
    pub image: Option<String>,
}

fn default_input() -> String {
    "input".into()
}

fn default_output() -> String {
    "output".into()
}

pub fn valid_job_key(key: &str) -> bool {
    (1..=64).contains(&key.len()) && key.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

impl JobSpec {
    pub fn new(job_key: impl Into<String>, command: Vec<String>, timeout_secs: u64) -> Self {
        Self {
            job_key: job_key.into(),
            command,
            env: BTreeMap::new(),
            input_subdir: default_input(),
            output_subdir: default_output(),
            timeout_secs,
            image: None,
        }
    }

    pub fn validate(&self) -> Result<(), JobError> {
        let bad = |s: String| Err(JobError::InvalidSpec(s));
        if !valid_job_key(&self.job_key) {
            return bad(format!("job key `{}` must match [A-Za-z0-9_-]{{1,64}}", self.job_key));
        }
        if self.timeout_secs == 0 {
            return bad("timeout must be positive".into());
        }
        if self.command.is_empty() || self.command[0].is_empty() {
            return bad("command is empty".into());
        }
        for sub in [&self.input_subdir, &self.output_subdir] {
            if validate_rel_path(sub).is_err() {
                return bad(format!("bad subdir `{sub}`"));
            }
        }
        if self.input_subdir == self.output_subdir {
            return bad("input and output subdirs must differ".into());
        }
        for k in self.env.keys() {
            if k.is_empty() || k.contains('=') || k.contains('\0') {
                return bad(format!("bad environment name `{k}`"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Scheduled,
    Started,
    FinishedOk,
    FinishedErr,
    Cancelled,
    TimedOut,
}

impl JobState {
    pub const ALL: [JobState; 6] = [
        JobState::Scheduled,
        JobState::Started,
        JobState::FinishedOk,
        JobState::FinishedErr,
        JobState::Cancelled,
        JobState::TimedOut,
    ];

    pub fn is_terminal(self) -> bool {
        !matches!(self, JobState::Scheduled | JobState::Started)
    }

    pub fn can_transition(self, to: JobState) -> bool {
        use JobState::*;
        match self {
            Scheduled => matches!(to, Started | Cancelled | FinishedErr),
            Started => to.is_terminal(),
            _ => false,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Scheduled => "SCHEDULED",
            JobState::Started => "STARTED",
            JobState::FinishedOk => "FINISHED_OK",
            JobState::FinishedErr => "FINISHED_ERR",
            JobState::Cancelled => "CANCELLED",
            JobState::TimedOut => "TIMED_OUT",
        }
    }
}

impl std::fmt::Display for JobState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for JobState {
    type Err = JobError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| JobError::InvalidSpec(format!("unknown job state `{s}`")))
    }
}

/// Captured output stream, bounded to [`CAPTURE_LIMIT`] bytes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capture {
    #[serde(with = "b64")]
    pub data: Vec<u8>,
    pub truncated: bool,
}

impl Capture {
    pub fn append(&mut self, bytes: &[u8]) {
        let room = CAPTURE_LIMIT.saturating_sub(self.data.len());
        if bytes.len() > room {
            self.truncated = true;
        }
        self.data.extend_from_slice(&bytes[..bytes.len().min(room)]);
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.data).into_owned()
    }
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub state: JobState,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobRecord {
    pub spec: JobSpec,
    pub state: JobState,
    pub exit_code: Option<i32>,
    pub stdout: Capture,
    pub stderr: Capture,
    pub transitions: Vec<Transition>,
    /// Submission order on this node.
    pub seq: u64,
    pub pid: Option<u32>,
    pub working_dir: String,
}

impl JobRecord {
    pub fn new(spec: JobSpec, seq: u64, working_dir: String, now: DateTime<Utc>) -> Self {
        Self {
            spec,
            state: JobState::Scheduled,
            exit_code: None,
            stdout: Capture::default(),
            stderr: Capture::default(),
            transitions: vec![Transition {
                state: JobState::Scheduled,
                at: now,
            }],
            seq,
            pid: None,
            working_dir,
        }
    }

    /// Moves to `to`. Exit codes are attached by [`JobRecord::finish`].
    pub fn transition(&mut self, to: JobState, now: DateTime<Utc>) -> Result<(), JobError> {
        if !self.state.can_transition(to) {
            return Err(JobError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        self.transitions.push(Transition { state: to, at: now });
        Ok(())
    }

    /// Terminal transition for an exited process: FINISHED_OK iff code 0.
    pub fn finish(&mut self, code: i32, now: DateTime<Utc>) -> Result<(), JobError> {
        let to = if code == 0 {
            JobState::FinishedOk
        } else {
            JobState::FinishedErr
        };
        self.transition(to, now)?;
        self.exit_code = Some(code);
        Ok(())
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }

    /// Checks the record-level invariants.
    pub fn check(&self) -> Result<(), String> {
        let has_code = matches!(self.state, JobState::FinishedOk | JobState::FinishedErr);
        if has_code != self.exit_code.is_some() {
            return Err(format!("exit code presence wrong in state {}", self.state));
        }
        if self.state == JobState::FinishedOk && self.exit_code != Some(0) {
            return Err("FINISHED_OK with non-zero exit".into());
        }
        if self.state == JobState::FinishedErr && self.exit_code == Some(0) {
            return Err("FINISHED_ERR with zero exit".into());
        }
        let states: Vec<JobState> = self.transitions.iter().map(|t| t.state).collect();
        if states.first() != Some(&JobState::Scheduled) {
            return Err("history does not start at SCHEDULED".into());
        }
        for w in states.windows(2) {
            if !w[0].can_transition(w[1]) {
                return Err(format!("illegal history step {} -> {}", w[0], w[1]));
            }
        }
        for w in self.transitions.windows(2) {
            if w[1].at < w[0].at {
                return Err("transition timestamps go backwards".into());
            }
        }
        if states.last() != Some(&self.state) {
            return Err("history tail differs from state".into());
        }
        Ok(())
    }
}

/// Listing entry without the captures.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_key: String,
    pub state: JobState,
    pub exit_code: Option<i32>,
    pub seq: u64,
    pub pid: Option<u32>,
    pub transitions: Vec<Transition>,
}

impl From<&JobRecord> for JobSummary {
    fn from(r: &JobRecord) -> Self {
        Self {
            job_key: r.spec.job_key.clone(),
            state: r.state,
            exit_code: r.exit_code,
            seq: r.seq,
            pid: r.pid,
            transitions: r.transitions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JobError {
    #[error("duplicate job key {0}")]
    DuplicateJobKey(String),
    #[error("input directory missing for job {0}")]
    MissingInput(String),
    #[error("job queue is full")]
    QueueFull,
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("invalid job spec: {0}")]
    InvalidSpec(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: JobState, to: JobState },
}
