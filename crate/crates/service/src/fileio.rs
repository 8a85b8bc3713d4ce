//! Tree transfer service for a compute node's job root.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use futures::StreamExt;
use serde::Deserialize;

use chips_client::wire::{codes, JobTrees, TREE_HASH_HEADER};
use chips_core::fileio::{archive_tree, manifest_of_dir, Direction, FileIoError, RestoreSession, TransferReceipt};
use chips_core::jobs::valid_job_key;

use crate::api::{ApiError, ApiResult};

const CHUNK: usize = 64 * 1024;

pub struct FileIoState {
    pub job_root: PathBuf,
    /// Honour `?fault=` on pulls.
    pub fault_hooks: bool,
    busy: Mutex<HashSet<String>>,
    /// Faults applied to the next pulls of a key, with a remaining count.
    armed: Mutex<HashMap<String, (StreamFault, u32)>>,
}

impl FileIoState {
    pub fn new(job_root: impl Into<PathBuf>, fault_hooks: bool) -> std::io::Result<Arc<Self>> {
        let job_root = job_root.into();
        std::fs::create_dir_all(&job_root)?;
        Ok(Arc::new(Self {
            job_root,
            fault_hooks,
            busy: Mutex::new(HashSet::new()),
            armed: Mutex::new(HashMap::new()),
        }))
    }

    fn take_armed(&self, key: &str) -> Option<StreamFault> {
        let mut armed = self.armed.lock().unwrap();
        let (fault, left) = armed.get_mut(key)?;
        let f = *fault;
        *left -= 1;
        if *left == 0 {
            armed.remove(key);
        }
        Some(f)
    }

    fn claim(self: &Arc<Self>, key: &str) -> Result<Claim, ApiError> {
        if !self.busy.lock().unwrap().insert(key.to_string()) {
            return Err(rejected(format!("a transfer for {key} is in progress")));
        }
        Ok(Claim {
            state: self.clone(),
            key: key.to_string(),
        })
    }
}

struct Claim {
    state: Arc<FileIoState>,
    key: String,
}

impl Drop for Claim {
    fn drop(&mut self) {
        self.state.busy.lock().unwrap().remove(&self.key);
    }
}

fn rejected(msg: String) -> ApiError {
    ApiError::new(StatusCode::CONFLICT, codes::REMOTE_REJECTED, msg)
}

fn unknown_key(key: &str) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        codes::UNKNOWN_JOB_KEY,
        format!("unknown job key {key}"),
    )
}

fn check_key(key: &str) -> Result<(), ApiError> {
    if valid_job_key(key) {
        Ok(())
    } else {
        Err(ApiError::bad_request(format!("bad job key `{key}`")))
    }
}

pub fn router(state: Arc<FileIoState>) -> Router {
    Router::new()
        .route("/api/v1/trees/{key}/input", post(push).get(pull_input))
        .route("/api/v1/trees/{key}/manifest", get(manifests))
        .route("/api/v1/trees/{key}/{sub}", get(pull))
        .route("/api/v1/faults/{key}", post(arm_fault))
        .layer(DefaultBodyLimit::disable())
        .with_state(state)
}

async fn push(
    State(s): State<Arc<FileIoState>>,
    Path(key): Path<String>,
    headers: HeaderMap,
    body: Body,
) -> Result<Json<TransferReceipt>, ApiError> {
    let started = Instant::now();
    check_key(&key)?;
    let _claim = s.claim(&key)?;
    let dest = s.job_root.join(&key).join("input");
    if dest.exists() {
        return Err(rejected(format!("input tree for {key} already present")));
    }
    let mut session = RestoreSession::begin(&dest, None)?;
    if let Some(h) = headers.get(TREE_HASH_HEADER).and_then(|v| v.to_str().ok()) {
        session.expect_tree_hash(h);
    }
    let mut stream = body.into_data_stream();
    while let Some(chunk) = stream.next().await {
        let chunk = chunk.map_err(|e| FileIoError::IntegrityMismatch(format!("upload broke off: {e}")))?;
        session.push(&chunk)?;
    }
    let bytes = session.bytes_received();
    let manifest = session.commit()?;
    tracing::info!(%key, files = manifest.entries.len(), bytes, "input tree stored");
    Ok(Json(TransferReceipt {
        job_key: key,
        direction: Direction::Push,
        manifest,
        bytes_transferred: bytes,
        duration_ms: started.elapsed().as_millis() as u64,
    }))
}

async fn manifests(State(s): State<Arc<FileIoState>>, Path(key): Path<String>) -> ApiResult<JobTrees> {
    check_key(&key)?;
    let dir = s.job_root.join(&key);
    if !dir.is_dir() {
        return Err(unknown_key(&key));
    }
    let trees = tokio::task::spawn_blocking(move || -> Result<JobTrees, FileIoError> {
        let one = |sub: &str| {
            let d = dir.join(sub);
            if d.is_dir() {
                manifest_of_dir(&d).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(JobTrees {
            input: one("input")?,
            output: one("output")?,
        })
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(trees))
}

#[derive(Deserialize)]
struct FaultParam {
    fault: Option<String>,
    times: Option<u32>,
}

/// Arms `fault` for the next `times` pulls of `key` (default 1).
async fn arm_fault(
    State(s): State<Arc<FileIoState>>,
    Path(key): Path<String>,
    Query(q): Query<FaultParam>,
) -> Result<StatusCode, ApiError> {
    if !s.fault_hooks {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            codes::NOT_FOUND,
            "fault hooks are off",
        ));
    }
    check_key(&key)?;
    let f = q.fault.as_deref().unwrap_or_default();
    let fault = StreamFault::parse(f).ok_or_else(|| ApiError::bad_request(format!("bad fault `{f}`")))?;
    let times = q.times.unwrap_or(1);
    if times > 0 {
        s.armed.lock().unwrap().insert(key, (fault, times));
    }
    Ok(StatusCode::NO_CONTENT)
}

/// Test hooks on a pull stream, counted in archive bytes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamFault {
    Cut(usize),
    Flip(usize),
}

impl StreamFault {
    pub fn parse(s: &str) -> Option<Self> {
        let (kind, n) = s.split_once(':')?;
        let n = n.parse().ok()?;
        match kind {
            "cut" => Some(Self::Cut(n)),
            "flip" => Some(Self::Flip(n)),
            _ => None,
        }
    }
}

async fn pull_input(
    state: State<Arc<FileIoState>>,
    Path(key): Path<String>,
    q: Query<FaultParam>,
) -> Result<Response, ApiError> {
    pull(state, Path((key, "input".to_string())), q).await
}

async fn pull(
    State(s): State<Arc<FileIoState>>,
    Path((key, sub)): Path<(String, String)>,
    Query(q): Query<FaultParam>,
) -> Result<Response, ApiError> {
    check_key(&key)?;
    if sub != "input" && sub != "output" {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            codes::NOT_FOUND,
            format!("no tree `{sub}`"),
        ));
    }
    let fault = match (&q.fault, s.fault_hooks) {
        (Some(f), true) => {
            Some(StreamFault::parse(f).ok_or_else(|| ApiError::bad_request(format!("bad fault `{f}`")))?)
        }
        (None, true) => s.take_armed(&key),
        _ => None,
    };
    let dir = s.job_root.join(&key);
    if !dir.is_dir() {
        return Err(unknown_key(&key));
    }
    let tree = dir.join(&sub);
    if !tree.is_dir() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            codes::NOT_FOUND,
            format!("job {key} has no {sub} tree"),
        ));
    }
    let (mut archive, _) = tokio::task::spawn_blocking(move || archive_tree(&tree))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let mut limit = archive.len();
    match fault {
        Some(StreamFault::Flip(at)) if at < archive.len() => archive[at] ^= 0xFF,
        Some(StreamFault::Cut(at)) => limit = at.min(archive.len()),
        _ => {}
    }
    let total = archive.len();
    let archive = Bytes::from(archive);
    let chunks: Vec<Result<Bytes, std::io::Error>> = (0..limit)
        .step_by(CHUNK)
        .map(|i| Ok(archive.slice(i..(i + CHUNK).min(limit))))
        .collect();
    let cut = (limit < total).then_some(async {
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
        Err(std::io::Error::new(std::io::ErrorKind::ConnectionReset, "stream cut"))
    });
    let body = futures::stream::iter(chunks).chain(futures::stream::iter(cut).then(|f| f));
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "application/octet-stream")
        .body(Body::from_stream(body))
        .map_err(|e| ApiError::internal(e.to_string()))
}
