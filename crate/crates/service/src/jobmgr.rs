//! Job manager: spawns plugin processes on a compute node, bounds their
//! parallelism and exposes their lifecycle over REST.

use std::collections::HashMap;
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::process::{ExitStatus, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::Deserialize;
use tokio::io::AsyncReadExt;
use tokio::process::{Child, Command};
use tokio::sync::{watch, Semaphore};

use chips_client::wire::{JobStats, PurgeRequest, PurgeResponse};
use chips_core::jobs::{JobError, JobRecord, JobSpec, JobState, JobSummary, SPAWN_FAILURE_EXIT};

use crate::api::{ApiError, ApiResult, JsonBody};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Plain subprocess in the job's working directory.
    Local,
    /// `RUNTIME run ... IMAGE COMMAND` with the working directory mounted.
    Container { runtime: String },
}

#[derive(Clone, Debug)]
pub struct JobManagerConfig {
    pub job_root: PathBuf,
    pub max_parallel: usize,
    /// Most SCHEDULED jobs held at once.
    pub queue_limit: usize,
    pub grace: Duration,
    pub backend: Backend,
}

impl JobManagerConfig {
    pub fn new(job_root: impl Into<PathBuf>, max_parallel: usize) -> Self {
        Self {
            job_root: job_root.into(),
            max_parallel: max_parallel.max(1),
            queue_limit: 1024,
            grace: Duration::from_secs(chips_core::jobs::DEFAULT_GRACE_SECS),
            backend: Backend::Local,
        }
    }
}

struct Entry {
    record: JobRecord,
    cancel: watch::Sender<bool>,
    done: watch::Receiver<bool>,
}

#[derive(Default)]
struct Inner {
    jobs: HashMap<String, Entry>,
    next_seq: u64,
    running: usize,
    high_water: usize,
}

pub struct JobManager {
    cfg: JobManagerConfig,
    inner: Mutex<Inner>,
    slots: Arc<Semaphore>,
}

enum End {
    Exited(std::io::Result<ExitStatus>),
    TimedOut,
    Cancelled,
}

#[derive(Clone, Copy)]
enum Pipe {
    Out,
    Err,
}

impl JobManager {
    pub fn new(cfg: JobManagerConfig) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&cfg.job_root)?;
        let cfg = JobManagerConfig {
            job_root: cfg.job_root.canonicalize()?,
            ..cfg
        };
        Ok(Arc::new(Self {
            slots: Arc::new(Semaphore::new(cfg.max_parallel)),
            cfg,
            inner: Mutex::new(Inner::default()),
        }))
    }

    pub fn config(&self) -> &JobManagerConfig {
        &self.cfg
    }

    pub fn job_dir(&self, key: &str) -> PathBuf {
        self.cfg.job_root.join(key)
    }

    pub fn submit(self: &Arc<Self>, spec: JobSpec) -> Result<JobRecord, JobError> {
        spec.validate()?;
        let workdir = self.job_dir(&spec.job_key);
        let input = workdir.join(&spec.input_subdir);
        let mut g = self.inner.lock().unwrap();
        if g.jobs.contains_key(&spec.job_key) {
            return Err(JobError::DuplicateJobKey(spec.job_key));
        }
        if !input.is_dir() {
            return Err(JobError::MissingInput(input.display().to_string()));
        }
        let queued = g
            .jobs
            .values()
            .filter(|e| e.record.state == JobState::Scheduled)
            .count();
        if queued >= self.cfg.queue_limit {
            return Err(JobError::QueueFull);
        }
        std::fs::create_dir_all(workdir.join(&spec.output_subdir))
            .map_err(|e| JobError::InvalidSpec(format!("cannot create output dir: {e}")))?;
        let seq = g.next_seq;
        g.next_seq += 1;
        let key = spec.job_key.clone();
        let record = JobRecord::new(spec, seq, workdir.display().to_string(), Utc::now());
        let (cancel_tx, cancel_rx) = watch::channel(false);
        let (done_tx, done_rx) = watch::channel(false);
        g.jobs.insert(
            key.clone(),
            Entry {
                record: record.clone(),
                cancel: cancel_tx,
                done: done_rx,
            },
        );
        drop(g);
        tokio::spawn(self.clone().run(key, cancel_rx, done_tx));
        Ok(record)
    }

    pub fn get(&self, key: &str) -> Result<JobRecord, JobError> {
        let g = self.inner.lock().unwrap();
        g.jobs
            .get(key)
            .map(|e| e.record.clone())
            .ok_or_else(|| JobError::UnknownJob(key.to_string()))
    }

    /// Stops a live job and waits for its terminal record. Terminal jobs are
    /// returned unchanged.
    pub async fn cancel(&self, key: &str) -> Result<JobRecord, JobError> {
        let mut done = {
            let mut g = self.inner.lock().unwrap();
            let e = g
                .jobs
                .get_mut(key)
                .ok_or_else(|| JobError::UnknownJob(key.to_string()))?;
            if e.record.is_terminal() {
                return Ok(e.record.clone());
            }
            if e.record.state == JobState::Scheduled {
                e.record.transition(JobState::Cancelled, Utc::now())?;
                e.cancel.send_replace(true);
                return Ok(e.record.clone());
            }
            e.cancel.send_replace(true);
            e.done.clone()
        };
        let _ = done.wait_for(|d| *d).await;
        self.get(key)
    }

    /// Summaries in submission order, optionally restricted to `states`.
    pub fn list(&self, states: &[JobState]) -> Vec<JobSummary> {
        let g = self.inner.lock().unwrap();
        let mut out: Vec<JobSummary> = g
            .jobs
            .values()
            .filter(|e| states.is_empty() || states.contains(&e.record.state))
            .map(|e| JobSummary::from(&e.record))
            .collect();
        out.sort_by_key(|s| s.seq);
        out
    }

    /// Drops every terminal record.
    pub fn purge(&self, remove_dirs: bool) -> Vec<String> {
        let mut g = self.inner.lock().unwrap();
        let mut keys: Vec<String> = g
            .jobs
            .iter()
            .filter(|(_, e)| e.record.is_terminal())
            .map(|(k, _)| k.clone())
            .collect();
        keys.sort();
        for k in &keys {
            g.jobs.remove(k);
        }
        drop(g);
        if remove_dirs {
            for k in &keys {
                let _ = std::fs::remove_dir_all(self.job_dir(k));
            }
        }
        keys
    }

    pub fn stats(&self) -> JobStats {
        let g = self.inner.lock().unwrap();
        JobStats {
            max_parallel: self.cfg.max_parallel,
            running: g.running,
            running_high_water: g.high_water,
            queued: g
                .jobs
                .values()
                .filter(|e| e.record.state == JobState::Scheduled)
                .count(),
        }
    }

    async fn run(self: Arc<Self>, key: String, mut cancel: watch::Receiver<bool>, done: watch::Sender<bool>) {
        let permit = tokio::select! {
            p = self.slots.clone().acquire_owned() => p.expect("semaphore is never closed"),
            _ = cancel.wait_for(|c| *c) => {
                done.send_replace(true);
                return;
            }
        };
        let Some((mut child, timeout)) = self.start(&key) else {
            drop(permit);
            done.send_replace(true);
            return;
        };
        let pgid = child.id().map(|p| p as i32);
        let readers: Vec<_> = [
            child
                .stdout
                .take()
                .map(|p| tokio::spawn(self.clone().pump(key.clone(), p, Pipe::Out))),
            child
                .stderr
                .take()
                .map(|p| tokio::spawn(self.clone().pump(key.clone(), p, Pipe::Err))),
        ]
        .into_iter()
        .flatten()
        .collect();

        let end = tokio::select! {
            st = child.wait() => End::Exited(st),
            _ = tokio::time::sleep(timeout) => End::TimedOut,
            _ = cancel.wait_for(|c| *c) => End::Cancelled,
        };
        if !matches!(end, End::Exited(_)) {
            self.terminate(&mut child, pgid).await;
        }
        if let Some(pg) = pgid {
            signal_group(pg, libc::SIGKILL);
        }
        for r in readers {
            let _ = tokio::time::timeout(Duration::from_secs(5), r).await;
        }

        let now = Utc::now();
        let mut g = self.inner.lock().unwrap();
        let g = &mut *g;
        g.running -= 1;
        if let Some(e) = g.jobs.get_mut(&key) {
            let r = &mut e.record;
            let res = match end {
                End::Exited(Ok(st)) => r.finish(exit_code(st), now),
                End::Exited(Err(err)) => {
                    r.stderr.append(format!("wait failed: {err}\n").as_bytes());
                    r.finish(-1, now)
                }
                End::TimedOut => r.transition(JobState::TimedOut, now),
                End::Cancelled => r.transition(JobState::Cancelled, now),
            };
            if let Err(err) = res {
                tracing::error!(%key, %err, "terminal transition refused");
            }
        }
        drop(permit);
        done.send_replace(true);
    }

    /// Spawns the process for a SCHEDULED job. Returns None when the job
    /// was cancelled meanwhile or the spawn failed.
    fn start(&self, key: &str) -> Option<(Child, Duration)> {
        let mut guard = self.inner.lock().unwrap();
        let g = &mut *guard;
        let e = g.jobs.get_mut(key)?;
        if e.record.state != JobState::Scheduled {
            return None;
        }
        let spec = e.record.spec.clone();
        let workdir = PathBuf::from(&e.record.working_dir);
        let now = Utc::now();
        match self.command(&spec, &workdir).and_then(|mut c| c.spawn()) {
            Ok(child) => {
                e.record.pid = child.id();
                e.record.transition(JobState::Started, now).ok()?;
                g.running += 1;
                g.high_water = g.high_water.max(g.running);
                Some((child, Duration::from_secs(spec.timeout_secs)))
            }
            Err(err) => {
                e.record
                    .stderr
                    .append(format!("spawn failed: {}: {err}\n", spec.command[0]).as_bytes());
                if let Err(err) = e.record.finish(SPAWN_FAILURE_EXIT, now) {
                    tracing::error!(%key, %err, "spawn failure transition refused");
                }
                None
            }
        }
    }

    async fn terminate(&self, child: &mut Child, pgid: Option<i32>) {
        let Some(pg) = pgid else {
            let _ = child.kill().await;
            return;
        };
        signal_group(pg, libc::SIGTERM);
        if tokio::time::timeout(self.cfg.grace, child.wait()).await.is_err() {
            signal_group(pg, libc::SIGKILL);
            let _ = child.wait().await;
        }
    }

    async fn pump(self: Arc<Self>, key: String, mut pipe: impl tokio::io::AsyncRead + Unpin, which: Pipe) {
        let mut buf = vec![0u8; 8192];
        loop {
            match pipe.read(&mut buf).await {
                Ok(0) | Err(_) => return,
                Ok(n) => {
                    let mut g = self.inner.lock().unwrap();
                    if let Some(e) = g.jobs.get_mut(&key) {
                        match which {
                            Pipe::Out => e.record.stdout.append(&buf[..n]),
                            Pipe::Err => e.record.stderr.append(&buf[..n]),
                        }
                    }
                }
            }
        }
    }

    fn command(&self, spec: &JobSpec, workdir: &Path) -> std::io::Result<Command> {
        let input = workdir.join(&spec.input_subdir);
        let output = workdir.join(&spec.output_subdir);
        let argv = match &self.cfg.backend {
            Backend::Local => spec
                .command
                .iter()
                .map(|a| substitute(a, &input.display().to_string(), &output.display().to_string()))
                .collect(),
            Backend::Container { runtime } => container_argv(runtime, spec, workdir)?,
        };
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .env_clear()
            .env(
                "PATH",
                std::env::var("PATH").unwrap_or_else(|_| "/usr/local/bin:/usr/bin:/bin".into()),
            )
            .env("HOME", workdir)
            .env("CHIPS_INPUT_DIR", &input)
            .env("CHIPS_OUTPUT_DIR", &output)
            .env("CHIPS_JOB_KEY", &spec.job_key)
            .envs(&spec.env)
            .current_dir(workdir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true)
            .process_group(0);
        #[cfg(target_os = "linux")]
        unsafe {
            cmd.pre_exec(|| {
                libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
                Ok(())
            });
        }
        Ok(cmd)
    }
}

fn exit_code(st: ExitStatus) -> i32 {
    st.code().unwrap_or_else(|| 128 + st.signal().unwrap_or(0))
}

fn signal_group(pgid: i32, sig: i32) {
    if pgid > 0 {
        unsafe {
            libc::kill(-pgid, sig);
        }
    }
}

fn substitute(arg: &str, input: &str, output: &str) -> String {
    arg.replace("{input}", input).replace("{output}", output)
}

/// Argument vector for running `spec` under a container runtime, with the
/// job directory mounted at `/work`.
pub fn container_argv(runtime: &str, spec: &JobSpec, workdir: &Path) -> std::io::Result<Vec<String>> {
    let image = spec
        .image
        .as_deref()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "container backend needs an image"))?;
    let input = format!("/work/{}", spec.input_subdir);
    let output = format!("/work/{}", spec.output_subdir);
    let mut argv: Vec<String> = vec![
        runtime.into(),
        "run".into(),
        "--rm".into(),
        "--init".into(),
        "--network".into(),
        "none".into(),
        "-v".into(),
        format!("{}:/work", workdir.display()),
        "-w".into(),
        "/work".into(),
        "-e".into(),
        format!("CHIPS_INPUT_DIR={input}"),
        "-e".into(),
        format!("CHIPS_OUTPUT_DIR={output}"),
        "-e".into(),
        format!("CHIPS_JOB_KEY={}", spec.job_key),
    ];
    for (k, v) in &spec.env {
        argv.push("-e".into());
        argv.push(format!("{k}={v}"));
    }
    argv.push(image.into());
    argv.extend(spec.command.iter().map(|a| substitute(a, &input, &output)));
    Ok(argv)
}

pub fn router(mgr: Arc<JobManager>) -> Router {
    Router::new()
        .route("/api/v1/jobs", post(submit).get(list))
        .route("/api/v1/jobs/{key}", get(get_job).delete(cancel))
        .route("/api/v1/purge", post(purge))
        .route("/api/v1/stats", get(stats))
        .with_state(mgr)
}

async fn submit(
    State(m): State<Arc<JobManager>>,
    JsonBody(spec): JsonBody<JobSpec>,
) -> Result<(StatusCode, Json<JobRecord>), ApiError> {
    Ok((StatusCode::CREATED, Json(m.submit(spec)?)))
}

async fn get_job(State(m): State<Arc<JobManager>>, UrlPath(key): UrlPath<String>) -> ApiResult<JobRecord> {
    Ok(Json(m.get(&key)?))
}

async fn cancel(State(m): State<Arc<JobManager>>, UrlPath(key): UrlPath<String>) -> ApiResult<JobRecord> {
    Ok(Json(m.cancel(&key).await?))
}

#[derive(Deserialize)]
struct ListParams {
    state: Option<String>,
}

async fn list(State(m): State<Arc<JobManager>>, Query(p): Query<ListParams>) -> ApiResult<Vec<JobSummary>> {
    let mut states = Vec::new();
    for s in p.state.iter().flat_map(|s| s.split(',')).filter(|s| !s.is_empty()) {
        states.push(
            s.trim()
                .parse::<JobState>()
                .map_err(|_| ApiError::bad_request(format!("unknown state `{s}`")))?,
        );
    }
    Ok(Json(m.list(&states)))
}

async fn purge(State(m): State<Arc<JobManager>>, JsonBody(req): JsonBody<PurgeRequest>) -> ApiResult<PurgeResponse> {
    let m2 = m.clone();
    let purged = tokio::task::spawn_blocking(move || m2.purge(req.remove_dirs))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(PurgeResponse { purged }))
}

async fn stats(State(m): State<Arc<JobManager>>) -> Json<JobStats> {
    Json(m.stats())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_argv_mounts_workdir_and_substitutes_paths() {
        let mut spec = JobSpec::new("k1", vec!["imgstats".into(), "{input}".into(), "{output}".into()], 5);
        spec.image = Some("chips/imgstats:1.0".into());
        spec.env.insert("A".into(), "b".into());
        let argv = container_argv("docker", &spec, Path::new("/jobs/k1")).unwrap();
        assert_eq!(argv[0], "docker");
        assert!(argv.windows(2).any(|w| w[0] == "-v" && w[1] == "/jobs/k1:/work"));
        assert!(argv.windows(2).any(|w| w[0] == "-e" && w[1] == "A=b"));
        let img = argv.iter().position(|a| a == "chips/imgstats:1.0").unwrap();
        assert_eq!(&argv[img + 1..], ["imgstats", "/work/input", "/work/output"]);
    }

    #[test]
    fn container_argv_requires_image() {
        let spec = JobSpec::new("k1", vec!["true".into()], 5);
        assert!(container_argv("docker", &spec, Path::new("/j")).is_err());
    }

    #[test]
    fn placeholders_substituted_inside_arguments() {
        assert_eq!(substitute("--in={input}/x", "/a", "/b"), "--in=/a/x");
        assert_eq!(substitute("{output}", "/a", "/b"), "/b");
    }
}
