//! Dispatcher: picks a compute node per step and drives push, submit, poll
//! and pull against it. Step plans are persisted so a restarted dispatcher
//! resumes where it stopped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::routing::get;
use axum::{Json, Router};
use chrono::Utc;

use chips_client::wire::codes;
use chips_client::{ClientError, FileIoClient, JobClient};
use chips_core::dispatch::{
    select_node, ComputeNode, Diagnostic, DiagnosticKind, DispatchError, NodeHealth, StepPhase, StepPlan, StepRequest,
};
use chips_core::fileio::{manifest_of_dir, FileIoError, TreeManifest};
use chips_core::jobs::{JobRecord, JobSpec, JobState};

use crate::api::{bearer, ApiError, ApiResult, JsonBody};

const DOWN_AFTER: u32 = 3;
const STDERR_TAIL: usize = 4096;

#[derive(Clone, Debug)]
pub struct DispatcherConfig {
    pub state_dir: PathBuf,
    /// Retries per remote call after the first attempt.
    pub retry_budget: u32,
    /// First backoff; later ones double.
    pub backoff_base: Duration,
    pub poll_interval: Duration,
    /// Period of the node health probe; None probes only on demand.
    pub health_interval: Option<Duration>,
    pub call_timeout: Duration,
    /// Slack on top of the job timeout before the dispatcher gives up.
    pub timeout_slack: Duration,
    pub admin_token: Option<String>,
}

impl DispatcherConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        Self {
            state_dir: state_dir.into(),
            retry_budget: 3,
            backoff_base: Duration::from_secs(1),
            poll_interval: Duration::from_millis(500),
            health_interval: Some(Duration::from_secs(10)),
            call_timeout: Duration::from_secs(30),
            timeout_slack: Duration::from_secs(30),
            admin_token: None,
        }
    }
}

struct NodeEntry {
    node: ComputeNode,
    failures: u32,
}

struct StepCell {
    plan: Mutex<StepPlan>,
    /// Held by whoever talks to remote services on behalf of the step.
    op: tokio::sync::Mutex<()>,
}

impl StepCell {
    fn snapshot(&self) -> StepPlan {
        self.plan.lock().unwrap().clone()
    }
}

pub struct Dispatcher {
    cfg: DispatcherConfig,
    nodes: Mutex<BTreeMap<String, NodeEntry>>,
    steps: Mutex<BTreeMap<String, Arc<StepCell>>>,
}

enum Next {
    Continue,
    Wait(Duration),
    Retry {
        counter: StepPhase,
        kind: DiagnosticKind,
        detail: String,
    },
}

fn retry(counter: StepPhase, kind: DiagnosticKind, detail: impl Into<String>) -> Next {
    Next::Retry {
        counter,
        kind,
        detail: detail.into(),
    }
}

impl Dispatcher {
    /// Loads persisted steps and nodes, resumes live steps and starts the
    /// health probe. Must run inside a tokio runtime.
    pub fn open(cfg: DispatcherConfig, seed_nodes: Vec<ComputeNode>) -> anyhow::Result<Arc<Self>> {
        std::fs::create_dir_all(cfg.state_dir.join("steps"))?;
        let saved = cfg.state_dir.join("nodes.json");
        let nodes = if saved.exists() {
            serde_json::from_slice::<Vec<ComputeNode>>(&std::fs::read(&saved)?)?
        } else {
            seed_nodes
        };
        let mut map = BTreeMap::new();
        for n in nodes {
            n.validate()?;
            map.insert(n.id.clone(), NodeEntry { node: n, failures: 0 });
        }
        let mut steps = BTreeMap::new();
        for e in std::fs::read_dir(cfg.state_dir.join("steps"))? {
            let p = e?.path();
            if p.extension().and_then(|x| x.to_str()) != Some("json") {
                continue;
            }
            let plan: StepPlan = serde_json::from_slice(&std::fs::read(&p)?)?;
            steps.insert(
                plan.id.clone(),
                Arc::new(StepCell {
                    plan: Mutex::new(plan),
                    op: tokio::sync::Mutex::new(()),
                }),
            );
        }
        let d = Arc::new(Self {
            cfg,
            nodes: Mutex::new(map),
            steps: Mutex::new(steps),
        });
        let live: Vec<String> = d
            .steps
            .lock()
            .unwrap()
            .iter()
            .filter(|(_, c)| !c.snapshot().is_terminal())
            .map(|(k, _)| k.clone())
            .collect();
        for id in live {
            tracing::info!(step = %id, "resuming step");
            tokio::spawn(d.clone().drive(id));
        }
        let probe = d.clone();
        tokio::spawn(async move {
            loop {
                probe.probe_all().await;
                match probe.cfg.health_interval {
                    Some(i) => tokio::time::sleep(i).await,
                    None => break,
                }
            }
        });
        Ok(d)
    }

    pub fn config(&self) -> &DispatcherConfig {
        &self.cfg
    }

    pub fn nodes(&self) -> Vec<ComputeNode> {
        self.nodes.lock().unwrap().values().map(|e| e.node.clone()).collect()
    }

    pub fn put_nodes(self: &Arc<Self>, nodes: Vec<ComputeNode>) -> Result<Vec<ComputeNode>, DispatchError> {
        for n in &nodes {
            n.validate()?;
        }
        {
            let mut g = self.nodes.lock().unwrap();
            g.clear();
            for n in nodes {
                g.insert(n.id.clone(), NodeEntry { node: n, failures: 0 });
            }
        }
        let all = self.nodes();
        let path = self.cfg.state_dir.join("nodes.json");
        if let Err(e) = write_atomic(&path, &serde_json::to_vec_pretty(&all).unwrap_or_default()) {
            tracing::warn!(%e, "could not persist node registry");
        }
        let me = self.clone();
        tokio::spawn(async move { me.probe_all().await });
        Ok(all)
    }

    /// Probes every node's job list once.
    pub async fn probe_all(&self) {
        let targets: Vec<(String, String)> = self
            .nodes
            .lock()
            .unwrap()
            .values()
            .map(|e| (e.node.id.clone(), e.node.jobmgr_url.clone()))
            .collect();
        let probes = targets.into_iter().map(|(id, url)| async move {
            let c = JobClient::with_timeout(url, Some(Duration::from_secs(2)));
            (id, c.list(&[JobState::Scheduled, JobState::Started]).await)
        });
        for (id, res) in futures::future::join_all(probes).await {
            let mut g = self.nodes.lock().unwrap();
            let Some(e) = g.get_mut(&id) else { continue };
            match res {
                Ok(jobs) => {
                    e.failures = 0;
                    e.node.health = NodeHealth::Up;
                    e.node.queue_len = jobs.len() as u32;
                }
                Err(err) => {
                    e.failures += 1;
                    if e.failures >= DOWN_AFTER && e.node.health != NodeHealth::Down {
                        tracing::warn!(node = %id, %err, "node marked DOWN");
                        e.node.health = NodeHealth::Down;
                    }
                }
            }
        }
    }

    pub fn create_step(self: &Arc<Self>, req: StepRequest) -> Result<StepPlan, DispatchError> {
        if req.command.is_empty() {
            return Err(DispatchError::InvalidRequest("command is empty".into()));
        }
        if req.timeout_secs == 0 {
            return Err(DispatchError::InvalidRequest("timeout must be positive".into()));
        }
        if !Path::new(&req.input_dir).is_dir() {
            return Err(DispatchError::InvalidRequest(format!(
                "input dir {} is not readable",
                req.input_dir
            )));
        }
        let id = format!("step-{}", uuid::Uuid::new_v4().simple());
        let plan = StepPlan::new(id.clone(), id.clone(), req, Utc::now());
        self.persist(&plan);
        self.steps.lock().unwrap().insert(
            id.clone(),
            Arc::new(StepCell {
                plan: Mutex::new(plan.clone()),
                op: tokio::sync::Mutex::new(()),
            }),
        );
        tokio::spawn(self.clone().drive(id));
        Ok(plan)
    }

    pub fn step(&self, id: &str) -> Result<StepPlan, DispatchError> {
        Ok(self.cell(id)?.snapshot())
    }

    pub fn steps(&self) -> Vec<StepPlan> {
        self.steps.lock().unwrap().values().map(|c| c.snapshot()).collect()
    }

    fn cell(&self, id: &str) -> Result<Arc<StepCell>, DispatchError> {
        self.steps
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| DispatchError::UnknownStep(id.to_string()))
    }

    /// Cancels the remote job if one may exist and ends the step in
    /// DONE_CANCELLED. Terminal steps are returned unchanged.
    pub async fn cancel_step(&self, id: &str) -> Result<StepPlan, DispatchError> {
        let cell = self.cell(id)?;
        let _op = cell.op.lock().await;
        let plan = cell.snapshot();
        if plan.is_terminal() {
            return Ok(plan);
        }
        let mut remote_err = None;
        if matches!(
            plan.phase,
            StepPhase::Pushing | StepPhase::Submitted | StepPhase::Polling
        ) {
            if let Some(node) = plan.node_id.as_deref().and_then(|n| self.node(n)) {
                if let Err(e) = self.cancel_remote(&node, &plan.job_key).await {
                    remote_err = Some(e);
                }
            }
        }
        let mut p = cell.plan.lock().unwrap();
        if !p.is_terminal() {
            p.advance(StepPhase::DoneCancelled, Utc::now())?;
            if let Some(e) = remote_err {
                p.diagnostic = Some(Diagnostic::new(
                    DiagnosticKind::NodeLost,
                    format!("remote cancel failed: {e}"),
                ));
            }
            self.persist(&p);
        }
        Ok(p.clone())
    }

    async fn cancel_remote(&self, node: &ComputeNode, key: &str) -> Result<(), ClientError> {
        let jobs = JobClient::with_timeout(&node.jobmgr_url, Some(self.cfg.call_timeout));
        let mut attempt = 0;
        loop {
            match jobs.cancel(key).await {
                Ok(_) => return Ok(()),
                Err(e) if e.is(codes::UNKNOWN_JOB) => return Ok(()),
                Err(e) if e.is_transient() && attempt < self.cfg.retry_budget => {
                    tokio::time::sleep(self.backoff(attempt)).await;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn node(&self, id: &str) -> Option<ComputeNode> {
        self.nodes.lock().unwrap().get(id).map(|e| e.node.clone())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.cfg.backoff_base * 2u32.saturating_pow(attempt.min(16))
    }

    fn persist(&self, plan: &StepPlan) {
        let path = self.cfg.state_dir.join("steps").join(format!("{}.json", plan.id));
        let bytes = serde_json::to_vec_pretty(plan).expect("plan serializes");
        if let Err(e) = write_atomic(&path, &bytes) {
            tracing::error!(step = %plan.id, %e, "could not persist step");
        }
    }

    /// Applies `f` to the live plan and persists it. No-op once terminal.
    fn update(&self, cell: &StepCell, f: impl FnOnce(&mut StepPlan) -> Result<(), DispatchError>) {
        let mut p = cell.plan.lock().unwrap();
        if p.is_terminal() {
            return;
        }
        if let Err(e) = f(&mut p) {
            tracing::error!(step = %p.id, %e, "step update refused");
        }
        self.persist(&p);
    }

    fn fail(&self, cell: &StepCell, diag: Diagnostic) {
        tracing::warn!(%diag, "step failed");
        self.update(cell, |p| p.fail(diag, Utc::now()));
    }

    async fn drive(self: Arc<Self>, id: String) {
        let Ok(cell) = self.cell(&id) else { return };
        let mut failures: BTreeMap<StepPhase, u32> = BTreeMap::new();
        let mut bumped: Option<String> = None;
        loop {
            let next = {
                let _op = cell.op.lock().await;
                let plan = cell.snapshot();
                if plan.is_terminal() {
                    break;
                }
                self.step_once(&cell, &plan, &mut bumped).await
            };
            match next {
                Next::Continue => failures.clear(),
                Next::Wait(d) => {
                    failures.clear();
                    tokio::time::sleep(d).await;
                }
                Next::Retry { counter, kind, detail } => {
                    let n = failures.entry(counter).or_insert(0);
                    *n += 1;
                    if *n > self.cfg.retry_budget {
                        let _op = cell.op.lock().await;
                        let attempts = *n;
                        self.fail(
                            &cell,
                            Diagnostic::new(kind, format!("{detail} (after {attempts} attempts)")),
                        );
                        break;
                    }
                    let wait = self.backoff(*n - 1);
                    tracing::info!(step = %id, phase = %counter, %detail, ?wait, "transient failure, retrying");
                    self.update(&cell, |p| {
                        *p.retries.entry(counter).or_insert(0) += 1;
                        Ok(())
                    });
                    tokio::time::sleep(wait).await;
                }
            }
        }
        if let Some(node) = bumped {
            if let Some(e) = self.nodes.lock().unwrap().get_mut(&node) {
                e.node.queue_len = e.node.queue_len.saturating_sub(1);
            }
        }
    }

    async fn step_once(&self, cell: &StepCell, plan: &StepPlan, bumped: &mut Option<String>) -> Next {
        let now = Utc::now;
        if plan.phase == StepPhase::Selecting {
            let nodes = self.nodes();
            return match select_node(&plan.request.requirements, &nodes) {
                Ok(n) => {
                    let id = n.id.clone();
                    if let Some(e) = self.nodes.lock().unwrap().get_mut(&id) {
                        e.node.queue_len += 1;
                    }
                    *bumped = Some(id.clone());
                    self.update(cell, |p| {
                        p.node_id = Some(id);
                        p.advance(StepPhase::Pushing, now())
                    });
                    Next::Continue
                }
                Err(e) => {
                    self.probe_all().await;
                    retry(StepPhase::Selecting, DiagnosticKind::NoEligibleNode, e.to_string())
                }
            };
        }
        let Some(node) = plan.node_id.as_deref().and_then(|n| self.node(n)) else {
            self.fail(
                cell,
                Diagnostic::new(DiagnosticKind::NodeLost, "node left the registry"),
            );
            return Next::Continue;
        };
        let jobs = JobClient::with_timeout(&node.jobmgr_url, Some(self.cfg.call_timeout));
        let files = FileIoClient::new(&node.fileio_url);
        let key = plan.job_key.as_str();
        match plan.phase {
            StepPhase::Pushing => {
                if let Some(next) = self.push(cell, plan, &files).await {
                    return next;
                }
                let spec = JobSpec {
                    job_key: key.to_string(),
                    command: plan.request.command.clone(),
                    env: plan.request.env.clone(),
                    input_subdir: "input".into(),
                    output_subdir: "output".into(),
                    timeout_secs: plan.request.timeout_secs,
                    image: plan.request.image.clone(),
                };
                match jobs.submit(&spec).await {
                    Ok(_) => {}
                    Err(e) if e.is(codes::DUPLICATE_JOB_KEY) => {}
                    Err(e) if e.is_transient() => {
                        return retry(StepPhase::Submitted, DiagnosticKind::SpawnFailed, e.to_string())
                    }
                    Err(e) => {
                        self.fail(cell, Diagnostic::new(DiagnosticKind::SpawnFailed, e.to_string()));
                        return Next::Continue;
                    }
                }
                self.update(cell, |p| p.advance(StepPhase::Submitted, now()));
                Next::Continue
            }
            StepPhase::Submitted => {
                self.update(cell, |p| p.advance(StepPhase::Polling, now()));
                Next::Continue
            }
            StepPhase::Polling => match jobs.get(key).await {
                Ok(rec) => self.observe(cell, plan, &node, rec).await,
                Err(e) if e.is(codes::UNKNOWN_JOB) => {
                    self.fail(
                        cell,
                        Diagnostic::new(DiagnosticKind::NodeLost, "remote job record vanished"),
                    );
                    Next::Continue
                }
                Err(e) if e.is_transient() => retry(StepPhase::Polling, DiagnosticKind::NodeLost, e.to_string()),
                Err(e) => {
                    self.fail(cell, Diagnostic::new(DiagnosticKind::NodeLost, e.to_string()));
                    Next::Continue
                }
            },
            StepPhase::Pulling => self.pull(cell, plan, &files).await,
            _ => Next::Continue,
        }
    }

    /// Pushes the input tree. Returns Some when the phase cannot go on to
    /// submission yet.
    async fn push(&self, cell: &StepCell, plan: &StepPlan, files: &FileIoClient) -> Option<Next> {
        let input = PathBuf::from(&plan.request.input_dir);
        let local = match local_manifest(&input).await {
            Ok(m) => m,
            Err(e) => {
                self.fail(
                    cell,
                    Diagnostic::new(DiagnosticKind::PushFailed, format!("input tree: {e}")),
                );
                return Some(Next::Continue);
            }
        };
        match files.push_tree(&input, &plan.job_key, None).await {
            Ok(_) => None,
            Err(e) if e.is(codes::REMOTE_REJECTED) => match files.manifests(&plan.job_key).await {
                Ok(t) if t.input.as_ref() == Some(&local) => None,
                Ok(t) if t.input.is_none() => {
                    Some(retry(StepPhase::Pushing, DiagnosticKind::PushFailed, e.to_string()))
                }
                Ok(_) => {
                    self.fail(
                        cell,
                        Diagnostic::new(DiagnosticKind::PushFailed, "remote holds a different input tree"),
                    );
                    Some(Next::Continue)
                }
                Err(e) => Some(retry(StepPhase::Pushing, DiagnosticKind::PushFailed, e.to_string())),
            },
            Err(e) if e.is_transient() => Some(retry(StepPhase::Pushing, DiagnosticKind::PushFailed, e.to_string())),
            Err(e) => {
                self.fail(cell, Diagnostic::new(DiagnosticKind::PushFailed, e.to_string()));
                Some(Next::Continue)
            }
        }
    }

    async fn observe(&self, cell: &StepCell, plan: &StepPlan, node: &ComputeNode, rec: JobRecord) -> Next {
        let now = Utc::now();
        let state = rec.state;
        if !rec.is_terminal() {
            let submitted = plan
                .phase_times
                .iter()
                .find(|s| s.phase == StepPhase::Submitted)
                .map(|s| s.at)
                .unwrap_or(now);
            let budget = Duration::from_secs(plan.request.timeout_secs) + self.cfg.timeout_slack;
            if (now - submitted).to_std().unwrap_or_default() > budget {
                let _ = self.cancel_remote(node, &plan.job_key).await;
                self.fail(
                    cell,
                    Diagnostic::new(DiagnosticKind::Timeout, "job did not finish in time"),
                );
                return Next::Continue;
            }
            if plan.remote_state != Some(state) {
                self.update(cell, |p| {
                    p.remote_state = Some(state);
                    Ok(())
                });
            }
            return Next::Wait(self.cfg.poll_interval);
        }
        let tail = stderr_tail(&rec);
        let started = rec.transitions.iter().any(|t| t.state == JobState::Started);
        self.update(cell, |p| {
            p.remote_state = Some(state);
            p.exit_code = rec.exit_code;
            p.stderr = Some(tail.clone());
            match state {
                JobState::FinishedOk => p.advance(StepPhase::Pulling, now),
                JobState::FinishedErr if !started => {
                    p.fail(Diagnostic::new(DiagnosticKind::SpawnFailed, tail.trim_end()), now)
                }
                JobState::FinishedErr => p.fail(
                    Diagnostic::job_failed(rec.exit_code.unwrap_or(-1), tail.trim_end()),
                    now,
                ),
                JobState::TimedOut => p.fail(
                    Diagnostic::new(DiagnosticKind::Timeout, "job exceeded its timeout"),
                    now,
                ),
                _ => {
                    p.advance(StepPhase::DoneCancelled, now)?;
                    p.diagnostic = Some(Diagnostic::new(DiagnosticKind::JobFailed, "remote job was cancelled"));
                    Ok(())
                }
            }
        });
        Next::Continue
    }

    async fn pull(&self, cell: &StepCell, plan: &StepPlan, files: &FileIoClient) -> Next {
        let out = PathBuf::from(&plan.request.output_dir);
        let done = |m: TreeManifest| {
            self.update(cell, |p| {
                p.output_manifest = Some(m);
                p.advance(StepPhase::DoneOk, Utc::now())
            });
            Next::Continue
        };
        match files.pull_tree(&plan.job_key, "output", &out, None).await {
            Ok(r) => done(r.manifest),
            Err(ClientError::FileIo(FileIoError::DestNotEmpty(_))) => {
                let local = local_manifest(&out).await;
                match (files.manifests(&plan.job_key).await, local) {
                    (Ok(t), Ok(l)) if t.output.as_ref() == Some(&l) => done(l),
                    (Err(e), _) if e.is_transient() => {
                        retry(StepPhase::Pulling, DiagnosticKind::PullFailed, e.to_string())
                    }
                    _ => {
                        self.fail(
                            cell,
                            Diagnostic::new(DiagnosticKind::PullFailed, "output dir holds a different tree"),
                        );
                        Next::Continue
                    }
                }
            }
            Err(e) if e.is_transient() => retry(StepPhase::Pulling, DiagnosticKind::PullFailed, e.to_string()),
            Err(e) => {
                self.fail(cell, Diagnostic::new(DiagnosticKind::PullFailed, e.to_string()));
                Next::Continue
            }
        }
    }
}

async fn local_manifest(dir: &Path) -> Result<TreeManifest, FileIoError> {
    let dir = dir.to_path_buf();
    tokio::task::spawn_blocking(move || manifest_of_dir(&dir))
        .await
        .map_err(|e| FileIoError::Io(e.to_string()))?
}

fn stderr_tail(rec: &JobRecord) -> String {
    let data = &rec.stderr.data;
    let start = data.len().saturating_sub(STDERR_TAIL);
    String::from_utf8_lossy(&data[start..]).into_owned()
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
    }
    std::fs::rename(&tmp, path)
}

pub fn router(d: Arc<Dispatcher>) -> Router {
    Router::new()
        .route("/api/v1/steps", get(list_steps).post(create_step))
        .route("/api/v1/steps/{id}", get(get_step).delete(cancel_step))
        .route("/api/v1/nodes", get(list_nodes).put(put_nodes))
        .with_state(d)
}

async fn create_step(
    State(d): State<Arc<Dispatcher>>,
    JsonBody(req): JsonBody<StepRequest>,
) -> Result<(StatusCode, Json<StepPlan>), ApiError> {
    Ok((StatusCode::CREATED, Json(d.create_step(req)?)))
}

async fn list_steps(State(d): State<Arc<Dispatcher>>) -> Json<Vec<StepPlan>> {
    Json(d.steps())
}

async fn get_step(State(d): State<Arc<Dispatcher>>, UrlPath(id): UrlPath<String>) -> ApiResult<StepPlan> {
    Ok(Json(d.step(&id)?))
}

async fn cancel_step(State(d): State<Arc<Dispatcher>>, UrlPath(id): UrlPath<String>) -> ApiResult<StepPlan> {
    Ok(Json(d.cancel_step(&id).await?))
}

async fn list_nodes(State(d): State<Arc<Dispatcher>>) -> Json<Vec<ComputeNode>> {
    Json(d.nodes())
}

async fn put_nodes(
    State(d): State<Arc<Dispatcher>>,
    headers: HeaderMap,
    JsonBody(nodes): JsonBody<Vec<ComputeNode>>,
) -> ApiResult<Vec<ComputeNode>> {
    if let Some(t) = &d.cfg.admin_token {
        if bearer(&headers) != Some(t.as_str()) {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                codes::FORBIDDEN,
                "admin token required",
            ));
        }
    }
    Ok(Json(d.put_nodes(nodes)?))
}
