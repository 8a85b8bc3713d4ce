//! Error bodies, JSON extraction and listener plumbing shared by every
//! service.

use std::net::SocketAddr;

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Request};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;

use chips_client::wire::{codes, ErrorBody};
use chips_client::ClientError;
use chips_core::dispatch::DispatchError;
use chips_core::fileio::FileIoError;
use chips_core::index::QueryError;
use chips_core::jobs::JobError;
use chips_core::pacs::{AuthError, PacsError, PullError};
use chips_core::workflow::CoreError;

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

pub type ApiResult<T> = Result<Json<T>, ApiError>;

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, codes::BAD_REQUEST, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL, message)
    }

    pub fn unauthorized(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNAUTHORIZED, codes::UNAUTHORIZED, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        let (status, code) = match &e {
            JobError::DuplicateJobKey(_) => (StatusCode::CONFLICT, codes::DUPLICATE_JOB_KEY),
            JobError::MissingInput(_) => (StatusCode::UNPROCESSABLE_ENTITY, codes::MISSING_INPUT),
            JobError::QueueFull => (StatusCode::SERVICE_UNAVAILABLE, codes::QUEUE_FULL),
            JobError::UnknownJob(_) => (StatusCode::NOT_FOUND, codes::UNKNOWN_JOB),
            JobError::InvalidSpec(_) => (StatusCode::BAD_REQUEST, codes::BAD_REQUEST),
            JobError::IllegalTransition { .. } => (StatusCode::CONFLICT, codes::CONFLICT),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<FileIoError> for ApiError {
    fn from(e: FileIoError) -> Self {
        let (status, code) = match &e {
            FileIoError::IntegrityMismatch(_) => (StatusCode::UNPROCESSABLE_ENTITY, codes::INTEGRITY_MISMATCH),
            FileIoError::DestNotEmpty(_) => (StatusCode::CONFLICT, codes::DEST_NOT_EMPTY),
            FileIoError::SymlinkRefused(_) | FileIoError::BadPath(_) => (StatusCode::BAD_REQUEST, codes::BAD_REQUEST),
            FileIoError::UnreadableEntry(_) | FileIoError::Io(_) => {
                (StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL)
            }
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<DispatchError> for ApiError {
    fn from(e: DispatchError) -> Self {
        let (status, code) = match &e {
            DispatchError::NoEligibleNode => (StatusCode::SERVICE_UNAVAILABLE, codes::NO_ELIGIBLE_NODE),
            DispatchError::UnknownStep(_) => (StatusCode::NOT_FOUND, codes::UNKNOWN_STEP),
            DispatchError::InvalidNode(_) | DispatchError::InvalidRequest(_) => {
                (StatusCode::BAD_REQUEST, codes::BAD_REQUEST)
            }
            DispatchError::IllegalPhase { .. } => (StatusCode::CONFLICT, codes::CONFLICT),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<AuthError> for ApiError {
    fn from(e: AuthError) -> Self {
        let (status, code) = match &e {
            AuthError::TokenExpired => (StatusCode::UNAUTHORIZED, codes::TOKEN_EXPIRED),
            AuthError::MissingScope(_) => (StatusCode::FORBIDDEN, codes::FORBIDDEN),
            AuthError::BadCredentialFile(_) => (StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL),
            // one answer for bad secret and unknown account
            AuthError::InvalidCredentials | AuthError::AccountUnknown => {
                return Self::unauthorized("invalid credentials");
            }
            AuthError::InvalidToken => (StatusCode::UNAUTHORIZED, codes::UNAUTHORIZED),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<PacsError> for ApiError {
    fn from(e: PacsError) -> Self {
        match e {
            PacsError::Auth(a) => a.into(),
            PacsError::BadFilterKeyword(_) => {
                Self::new(StatusCode::BAD_REQUEST, codes::BAD_FILTER_KEYWORD, e.to_string())
            }
            PacsError::UnknownStudy(_) => Self::new(StatusCode::NOT_FOUND, codes::UNKNOWN_STUDY, e.to_string()),
            PacsError::Corpus(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<PullError> for ApiError {
    fn from(e: PullError) -> Self {
        let (status, code) = match &e {
            PullError::DuplicatePull(_) => (StatusCode::CONFLICT, codes::DUPLICATE_PULL),
            PullError::PartialPull(_) => (StatusCode::BAD_GATEWAY, codes::PARTIAL_PULL),
            PullError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL),
            PullError::Policy(_) => (StatusCode::BAD_REQUEST, codes::BAD_REQUEST),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let (status, code) = match &e {
            CoreError::NotAuthorized => (StatusCode::FORBIDDEN, codes::FORBIDDEN),
            CoreError::InvalidCredentials => (StatusCode::UNAUTHORIZED, codes::UNAUTHORIZED),
            CoreError::UnknownUser(_)
            | CoreError::UnknownFeed(_)
            | CoreError::UnknownInstance(_)
            | CoreError::UnknownPlugin(_) => (StatusCode::NOT_FOUND, codes::NOT_FOUND),
            CoreError::DuplicateLogin(_) => (StatusCode::CONFLICT, codes::CONFLICT),
            CoreError::DuplicateStudyFeed(_) => (StatusCode::CONFLICT, codes::DUPLICATE_STUDY_FEED),
            CoreError::DuplicatePlugin(_) => (StatusCode::CONFLICT, codes::DUPLICATE_PLUGIN),
            CoreError::SchemaInvalid(_) => (StatusCode::UNPROCESSABLE_ENTITY, codes::SCHEMA_INVALID),
            CoreError::ParamValidation { .. } => (StatusCode::UNPROCESSABLE_ENTITY, codes::PARAM_VALIDATION),
            CoreError::ParentNotReady(_) => (StatusCode::CONFLICT, codes::PARENT_NOT_READY),
            CoreError::BadReceipt(_) | CoreError::BadRequest(_) => (StatusCode::BAD_REQUEST, codes::BAD_REQUEST),
            CoreError::Query(QueryError::BadComparator(_)) => (StatusCode::BAD_REQUEST, codes::BAD_COMPARATOR),
            CoreError::Query(_) => (StatusCode::BAD_REQUEST, codes::BAD_REQUEST),
            CoreError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, codes::INTERNAL),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<ClientError> for ApiError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Api { status, body } => Self {
                status: StatusCode::from_u16(status).unwrap_or(StatusCode::BAD_GATEWAY),
                code: body.error,
                message: body.message,
            },
            ClientError::Pull(p) => p.into(),
            ClientError::FileIo(f) => f.into(),
            other => Self::new(StatusCode::BAD_GATEWAY, codes::UNAVAILABLE, other.to_string()),
        }
    }
}

/// `Json<T>` whose rejections use the common error body.
pub struct JsonBody<T>(pub T);

impl<S, T> FromRequest<S> for JsonBody<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(JsonBody(v)),
            Err(e) => Err(rejection(e)),
        }
    }
}

fn rejection(e: JsonRejection) -> ApiError {
    ApiError::bad_request(e.body_text())
}

pub fn bearer(headers: &axum::http::HeaderMap) -> Option<&str> {
    headers
        .get(axum::http::header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Binds `host:port` and serves `router`. The bound address is printed to
/// stdout as `listening on ADDR` so a parent can use port 0.
pub async fn serve(router: Router, host: &str, port: u16) -> std::io::Result<()> {
    let listener = TcpListener::bind((host, port)).await?;
    let addr = listener.local_addr()?;
    println!("listening on {addr}");
    use std::io::Write;
    std::io::stdout().flush()?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router).await
}

/// Serves `router` on an ephemeral localhost port in the current runtime.
pub async fn spawn(router: Router) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        let _ = axum::serve(listener, router).await;
    });
    Ok((addr, handle))
}
