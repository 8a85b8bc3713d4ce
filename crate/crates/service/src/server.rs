//! The core REST API: users, feeds, plugins, instances and metadata, plus
//! the background worker that hands instances to the dispatcher and
//! mirrors step progress back into instance status.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::extract::{FromRequestParts, Path as UrlPath, Query, State};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::Deserialize;
use tokio::sync::Notify;

use chips_client::wire::*;
use chips_client::{DispatcherClient, PacsClient};
use chips_core::dicom::{AnonymizationPolicy, MetadataRecord};
use chips_core::dispatch::{StepPhase, StepPlan};
use chips_core::index::Predicate;
use chips_core::pacs::{PullReceipt, QuerySpec, StudyRecord};
use chips_core::workflow::{
    AnnotateAction, CoreError, CoreState, Feed, FeedTree, InstanceId, InstanceStatus, PluginDescriptor, PluginInstance,
    Role, UserId, UserInfo, Wal,
};

use crate::api::{bearer, ApiError, ApiResult, JsonBody};
use crate::token::{TokenError, TokenSigner};

#[derive(Clone, Debug)]
pub struct CoreConfig {
    pub store_path: PathBuf,
    pub dispatcher_url: String,
    pub pacs_url: Option<String>,
    /// `(identifier, secret)` for the PACS.
    pub pacs_cred: Option<(String, String)>,
    pub token_secret: Vec<u8>,
    pub token_ttl: chrono::Duration,
    pub anon_salt: Option<String>,
    pub poll_interval: Duration,
    pub ui_dir: Option<PathBuf>,
}

impl CoreConfig {
    pub fn new(
        store_path: impl Into<PathBuf>,
        dispatcher_url: impl Into<String>,
        token_secret: impl Into<Vec<u8>>,
    ) -> Self {
        Self {
            store_path: store_path.into(),
            dispatcher_url: dispatcher_url.into(),
            pacs_url: None,
            pacs_cred: None,
            token_secret: token_secret.into(),
            token_ttl: chrono::Duration::hours(12),
            anon_salt: None,
            poll_interval: Duration::from_millis(500),
            ui_dir: None,
        }
    }
}

pub struct Core {
    cfg: CoreConfig,
    state: RwLock<CoreState>,
    wal: Mutex<Wal>,
    signer: TokenSigner,
    dispatcher: DispatcherClient,
    wake: Notify,
}

impl Core {
    /// Replays the log under `store_path` and starts the dispatch worker.
    /// Must run inside a tokio runtime.
    pub fn open(cfg: CoreConfig) -> anyhow::Result<Arc<Self>> {
        std::fs::create_dir_all(&cfg.store_path)?;
        let root = cfg.store_path.canonicalize()?;
        let (mut wal, entries) = Wal::open(&root.join("chips.wal"))?;
        let state = CoreState::replay(&root, entries);
        wal.compact(&state.snapshot())?;
        let core = Arc::new(Self {
            signer: TokenSigner::new(cfg.token_secret.clone(), cfg.token_ttl),
            dispatcher: DispatcherClient::new(&cfg.dispatcher_url),
            cfg: CoreConfig {
                store_path: root,
                ..cfg
            },
            state: RwLock::new(state),
            wal: Mutex::new(wal),
            wake: Notify::new(),
        });
        tokio::spawn(core.clone().worker());
        Ok(core)
    }

    pub fn read<T>(&self, f: impl FnOnce(&CoreState) -> T) -> T {
        f(&self.state.read().unwrap())
    }

    /// Runs a mutation and logs whatever it changed.
    pub fn write<T>(&self, f: impl FnOnce(&mut CoreState) -> Result<T, CoreError>) -> Result<T, CoreError> {
        let mut s = self.state.write().unwrap();
        let out = f(&mut s);
        let pending = s.take_pending();
        if !pending.is_empty() {
            self.wal
                .lock()
                .unwrap()
                .append(&pending)
                .map_err(|e| CoreError::Io(format!("log append: {e}")))?;
        }
        out
    }

    /// Adds users that do not exist yet. Lines are `login:secret:ROLE`.
    pub fn seed_users(&self, text: &str) -> anyhow::Result<usize> {
        let mut added = 0;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, ':').collect();
            let [login, secret, role] = parts[..] else {
                anyhow::bail!("users line {}: expected login:secret:ROLE", n + 1);
            };
            let role: Role = serde_json::from_value(serde_json::Value::String(role.trim().to_uppercase()))
                .map_err(|_| anyhow::anyhow!("users line {}: unknown role {role}", n + 1))?;
            if self.read(|s| s.user_by_login(login).is_ok()) {
                continue;
            }
            self.write(|s| s.add_user(login, secret, role))?;
            added += 1;
        }
        Ok(added)
    }

    fn pull_dir(&self, user: UserId) -> PathBuf {
        self.cfg.store_path.join("pulls").join(format!("u{user}"))
    }

    async fn worker(self: Arc<Self>) {
        loop {
            self.dispatch_created().await;
            self.poll_live().await;
            tokio::select! {
                _ = self.wake.notified() => {}
                _ = tokio::time::sleep(self.cfg.poll_interval) => {}
            }
        }
    }

    async fn dispatch_created(&self) {
        let todo: Vec<InstanceId> = self.read(|s| {
            s.live_instances()
                .into_iter()
                .filter(|i| i.status == InstanceStatus::Created && i.step_id.is_none())
                .map(|i| i.id)
                .collect()
        });
        for id in todo {
            let req = match self.read(|s| s.step_request(id)) {
                Ok(r) => r,
                Err(e) => {
                    let _ = self.write(|s| s.update_status(id, InstanceStatus::Error, Some(e.to_string()), None));
                    continue;
                }
            };
            match self.dispatcher.create_step(&req).await {
                Ok(plan) => {
                    let still_live = self.write(|s| {
                        s.set_step(id, &plan.id)?;
                        let st = s.update_status(id, InstanceStatus::Dispatched, None, None)?;
                        Ok(st.changed)
                    });
                    if !matches!(still_live, Ok(true)) {
                        let _ = self.dispatcher.cancel_step(&plan.id).await;
                    }
                }
                Err(e) if e.is_transient() => {
                    tracing::warn!(instance = id, %e, "dispatcher unavailable, will retry");
                }
                Err(e) => {
                    let _ = self.write(|s| s.update_status(id, InstanceStatus::Error, Some(e.to_string()), None));
                }
            }
        }
    }

    async fn poll_live(&self) {
        let live: Vec<(InstanceId, String)> = self.read(|s| {
            s.live_instances()
                .into_iter()
                .filter_map(|i| i.step_id.map(|st| (i.id, st)))
                .collect()
        });
        for (id, step) in live {
            match self.dispatcher.get_step(&step).await {
                Ok(plan) => self.mirror(id, &plan),
                Err(e) if e.is(codes::UNKNOWN_STEP) => {
                    let _ = self.write(|s| {
                        s.update_status(
                            id,
                            InstanceStatus::Error,
                            Some(format!("step {step} unknown to dispatcher")),
                            None,
                        )
                    });
                }
                Err(e) => tracing::debug!(instance = id, %e, "step poll failed"),
            }
        }
    }

    fn mirror(&self, id: InstanceId, plan: &StepPlan) {
        let status = match plan.phase {
            StepPhase::Selecting | StepPhase::Pushing => InstanceStatus::Dispatched,
            StepPhase::Submitted | StepPhase::Polling | StepPhase::Pulling => InstanceStatus::Running,
            StepPhase::DoneOk => InstanceStatus::Success,
            StepPhase::DoneErr => InstanceStatus::Error,
            StepPhase::DoneCancelled => InstanceStatus::Cancelled,
        };
        let diag = plan.diagnostic.as_ref().map(|d| d.to_string());
        let stderr = if status == InstanceStatus::Error {
            plan.stderr.clone()
        } else {
            None
        };
        match self.write(|s| s.update_status(id, status, diag, stderr)) {
            Ok(u) if u.changed => tracing::info!(instance = id, ?status, records = u.analysis_records, "status"),
            Ok(_) => {}
            Err(e) => tracing::error!(instance = id, %e, "status update failed"),
        }
    }
}

/// The authenticated caller.
pub struct Caller(pub UserInfo);

impl FromRequestParts<Arc<Core>> for Caller {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, core: &Arc<Core>) -> Result<Self, Self::Rejection> {
        let token = bearer(&parts.headers).ok_or_else(|| ApiError::unauthorized("bearer token required"))?;
        let uid = core.signer.verify(token, Utc::now()).map_err(|e| match e {
            TokenError::Expired => ApiError::new(StatusCode::UNAUTHORIZED, codes::TOKEN_EXPIRED, "token expired"),
            _ => ApiError::unauthorized("invalid token"),
        })?;
        let user = core
            .read(|s| s.user(uid))
            .map_err(|_| ApiError::unauthorized("invalid token"))?;
        Ok(Caller(user))
    }
}

pub fn router(core: Arc<Core>) -> Router {
    let mut r = Router::new()
        .route("/login", post(login))
        .route("/users", get(list_users).post(add_user))
        .route("/feeds", get(list_feeds).post(create_feed))
        .route("/feeds/{id}", get(get_feed))
        .route("/feeds/{id}/tree", get(feed_tree))
        .route("/feeds/{id}/share", post(share_feed))
        .route("/feeds/{id}/annotate", post(annotate_feed))
        .route("/feeds/{id}/instances", post(create_instance))
        .route("/plugins", get(list_plugins).post(register_plugin))
        .route("/instances/{id}", get(get_instance))
        .route("/instances/{id}/cancel", post(cancel_instance))
        .route("/metadata/query", get(query_metadata))
        .route("/pacs/query", post(pacs_query))
        .route("/pacs/pull", post(pacs_pull));
    if let Some(dir) = &core.cfg.ui_dir {
        r = r.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    r.with_state(core)
}

async fn login(State(core): State<Arc<Core>>, JsonBody(req): JsonBody<LoginRequest>) -> ApiResult<LoginResponse> {
    let user = core.read(|s| s.login(&req.login, &req.secret))?;
    let (token, expires_at) = core.signer.issue(user.id, Utc::now());
    Ok(Json(LoginResponse {
        token,
        expires_at,
        user,
    }))
}

fn require_admin(c: &Caller) -> Result<(), ApiError> {
    if c.0.role == Role::Admin {
        Ok(())
    } else {
        Err(CoreError::NotAuthorized.into())
    }
}

async fn list_users(State(core): State<Arc<Core>>, _c: Caller) -> Json<Vec<UserInfo>> {
    Json(core.read(|s| s.users()))
}

async fn add_user(
    State(core): State<Arc<Core>>,
    c: Caller,
    JsonBody(req): JsonBody<NewUserRequest>,
) -> Result<(StatusCode, Json<UserInfo>), ApiError> {
    require_admin(&c)?;
    let u = core.write(|s| s.add_user(&req.login, &req.secret, req.role))?;
    Ok((StatusCode::CREATED, Json(u)))
}

async fn list_feeds(State(core): State<Arc<Core>>, c: Caller) -> Json<Vec<Feed>> {
    Json(core.read(|s| s.list_feeds(c.0.id)))
}

/// Receipts must point into the caller's own pull area.
fn check_receipt_dir(core: &Core, user: UserId, receipt: &PullReceipt) -> Result<(), ApiError> {
    let area = core.pull_dir(user);
    let dir = Path::new(&receipt.study_dir)
        .canonicalize()
        .map_err(|e| CoreError::BadReceipt(format!("{}: {e}", receipt.study_dir)))?;
    let area = area.canonicalize().unwrap_or(area);
    if !dir.starts_with(&area) {
        return Err(CoreError::BadReceipt("study directory is outside the caller's pull area".into()).into());
    }
    Ok(())
}

async fn create_feed(
    State(core): State<Arc<Core>>,
    c: Caller,
    JsonBody(req): JsonBody<CreateFeedRequest>,
) -> Result<(StatusCode, Json<Feed>), ApiError> {
    check_receipt_dir(&core, c.0.id, &req.receipt)?;
    let f = core.write(|s| s.create_feed_from_pull(c.0.id, &req.title, &req.receipt))?;
    Ok((StatusCode::CREATED, Json(f)))
}

async fn get_feed(State(core): State<Arc<Core>>, c: Caller, UrlPath(id): UrlPath<u64>) -> ApiResult<Feed> {
    Ok(Json(core.read(|s| s.feed(id, c.0.id))?))
}

async fn feed_tree(State(core): State<Arc<Core>>, c: Caller, UrlPath(id): UrlPath<u64>) -> ApiResult<FeedTree> {
    Ok(Json(core.read(|s| s.get_feed_tree(id, c.0.id))?))
}

async fn share_feed(
    State(core): State<Arc<Core>>,
    c: Caller,
    UrlPath(id): UrlPath<u64>,
    JsonBody(req): JsonBody<ShareRequest>,
) -> ApiResult<Feed> {
    let f = core.write(|s| {
        let to = s.user_by_login(&req.user)?;
        s.share_feed(id, c.0.id, to.id)
    })?;
    Ok(Json(f))
}

async fn annotate_feed(
    State(core): State<Arc<Core>>,
    c: Caller,
    UrlPath(id): UrlPath<u64>,
    JsonBody(action): JsonBody<AnnotateAction>,
) -> ApiResult<Feed> {
    Ok(Json(core.write(|s| s.annotate_feed(id, c.0.id, action))?))
}

async fn list_plugins(State(core): State<Arc<Core>>, _c: Caller) -> Json<Vec<PluginDescriptor>> {
    Json(core.read(|s| s.plugins()))
}

async fn register_plugin(
    State(core): State<Arc<Core>>,
    c: Caller,
    JsonBody(d): JsonBody<PluginDescriptor>,
) -> Result<(StatusCode, Json<PluginDescriptor>), ApiError> {
    let d = core.write(|s| s.register_plugin(c.0.id, d))?;
    Ok((StatusCode::CREATED, Json(d)))
}

async fn create_instance(
    State(core): State<Arc<Core>>,
    c: Caller,
    UrlPath(feed): UrlPath<u64>,
    JsonBody(req): JsonBody<CreateInstanceRequest>,
) -> Result<(StatusCode, Json<PluginInstance>), ApiError> {
    let inst = core.write(|s| {
        s.create_plugin_instance(
            feed,
            req.parent,
            &req.plugin,
            req.version.as_deref(),
            &req.params,
            c.0.id,
        )
    })?;
    core.wake.notify_one();
    Ok((StatusCode::CREATED, Json(inst)))
}

async fn get_instance(
    State(core): State<Arc<Core>>,
    c: Caller,
    UrlPath(id): UrlPath<u64>,
) -> ApiResult<PluginInstance> {
    Ok(Json(core.read(|s| s.instance(id, c.0.id))?))
}

async fn cancel_instance(
    State(core): State<Arc<Core>>,
    c: Caller,
    UrlPath(id): UrlPath<u64>,
) -> ApiResult<CancelResponse> {
    let hits = core.write(|s| s.cancel_instance(id, c.0.id))?;
    for (iid, step) in &hits {
        if let Some(step) = step {
            if let Err(e) = core.dispatcher.cancel_step(step).await {
                tracing::warn!(instance = iid, %e, "dispatcher cancel failed");
            }
        }
    }
    Ok(Json(CancelResponse {
        cancelled: hits.into_iter().map(|(i, _)| i).collect(),
    }))
}

#[derive(Deserialize)]
struct WhereParam {
    #[serde(rename = "where")]
    predicate: String,
}

async fn query_metadata(
    State(core): State<Arc<Core>>,
    c: Caller,
    Query(q): Query<WhereParam>,
) -> ApiResult<Vec<MetadataRecord>> {
    let pred: Predicate = q.predicate.parse().map_err(CoreError::from)?;
    Ok(Json(core.read(|s| s.query_metadata(c.0.id, &pred))?))
}

fn pacs(core: &Core) -> Result<(PacsClient, &str, &str), ApiError> {
    match (&core.cfg.pacs_url, &core.cfg.pacs_cred) {
        (Some(url), Some((id, secret))) => Ok((PacsClient::new(url), id, secret)),
        _ => Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            codes::UNAVAILABLE,
            "no PACS configured",
        )),
    }
}

async fn pacs_query(
    State(core): State<Arc<Core>>,
    _c: Caller,
    JsonBody(spec): JsonBody<QuerySpec>,
) -> ApiResult<Vec<StudyRecord>> {
    let (client, id, secret) = pacs(&core)?;
    let token = client.authenticate(id, secret).await?;
    Ok(Json(client.query(&token.token, &spec).await?))
}

async fn pacs_pull(
    State(core): State<Arc<Core>>,
    c: Caller,
    JsonBody(req): JsonBody<PacsPullRequest>,
) -> Result<(StatusCode, Json<PullReceipt>), ApiError> {
    let (client, id, secret) = pacs(&core)?;
    let mut policy = AnonymizationPolicy::default_policy();
    if let Some(salt) = &core.cfg.anon_salt {
        policy = policy.with_salt(salt.as_bytes().to_vec());
    }
    let dest = core.pull_dir(c.0.id);
    std::fs::create_dir_all(&dest).map_err(|e| ApiError::internal(e.to_string()))?;
    let receipt = client
        .pull_study(id, secret, &req.study_uid, policy, &dest, None)
        .await?;
    Ok((StatusCode::CREATED, Json(receipt)))
}
