//! Simulated PACS: token handshake, study query, framed retrieve.

use std::sync::Arc;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use bytes::Bytes;
use serde::Deserialize;

use chips_client::wire::PacsAuthRequest;
use chips_core::pacs::{
    encode_frame, run_query, AuthError, AuthToken, Authenticator, Corpus, QuerySpec, Scope, StudyRecord, END_MARKER,
};

use crate::api::{bearer, ApiError, ApiResult, JsonBody};

pub struct PacsState {
    pub corpus: Corpus,
    pub auth: Authenticator,
    /// Honour `?fault=` on retrieve.
    pub fault_hooks: bool,
}

pub fn router(state: Arc<PacsState>) -> Router {
    Router::new()
        .route("/auth", post(auth))
        .route("/query", post(query))
        .route("/retrieve/{uid}", get(retrieve))
        .with_state(state)
}

async fn auth(State(s): State<Arc<PacsState>>, JsonBody(req): JsonBody<PacsAuthRequest>) -> ApiResult<AuthToken> {
    Ok(Json(s.auth.authenticate(&req.id, &req.secret)?))
}

fn check(s: &PacsState, headers: &HeaderMap, scope: Scope) -> Result<(), ApiError> {
    let token = bearer(headers).ok_or(AuthError::InvalidToken)?;
    Ok(s.auth.check(token, scope)?)
}

async fn query(
    State(s): State<Arc<PacsState>>,
    headers: HeaderMap,
    JsonBody(spec): JsonBody<QuerySpec>,
) -> ApiResult<Vec<StudyRecord>> {
    check(&s, &headers, Scope::Query)?;
    Ok(Json(run_query(&spec, s.corpus.studies())?))
}

#[derive(Deserialize)]
struct FaultParam {
    fault: Option<String>,
}

/// Test hooks on the retrieve stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrieveFault {
    /// Drop the connection after this many whole frames.
    Cut(usize),
    /// Corrupt one payload byte of this frame (0-based).
    Flip(usize),
}

impl RetrieveFault {
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

async fn retrieve(
    State(s): State<Arc<PacsState>>,
    Path(uid): Path<String>,
    Query(q): Query<FaultParam>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    check(&s, &headers, Scope::Retrieve)?;
    let fault = match (&q.fault, s.fault_hooks) {
        (Some(f), true) => {
            Some(RetrieveFault::parse(f).ok_or_else(|| ApiError::bad_request(format!("bad fault `{f}`")))?)
        }
        _ => None,
    };
    let instances = s.corpus.instances(&uid)?;
    let (tx, rx) = tokio::sync::mpsc::channel::<Result<Bytes, std::io::Error>>(4);
    tokio::spawn(async move {
        for (i, inst) in instances.iter().enumerate() {
            if fault == Some(RetrieveFault::Cut(i)) {
                let _ = tx
                    .send(Err(std::io::Error::new(
                        std::io::ErrorKind::ConnectionReset,
                        "retrieve cut",
                    )))
                    .await;
                return;
            }
            let data = match tokio::fs::read(&inst.path).await {
                Ok(d) => d,
                Err(e) => {
                    let _ = tx.send(Err(e)).await;
                    return;
                }
            };
            let mut frame = encode_frame(&inst.series_uid, inst.ordinal, &data);
            if fault == Some(RetrieveFault::Flip(i)) {
                // the last payload byte sits just before the 32-byte hash
                let at = frame.len() - 33;
                frame[at] ^= 0xFF;
            }
            if tx.send(Ok(Bytes::from(frame))).await.is_err() {
                return;
            }
        }
        let _ = tx.send(Ok(Bytes::from_static(&END_MARKER))).await;
    });
    let stream = futures::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|item| (item, rx)) });
    Response::builder()
        .status(StatusCode::OK)
        .header(header::CONTENT_TYPE, "application/octet-stream")
        .body(Body::from_stream(stream))
        .map_err(|e| ApiError::internal(e.to_string()))
}
