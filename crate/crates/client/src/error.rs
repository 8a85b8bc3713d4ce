use chips_core::fileio::FileIoError;
use chips_core::pacs::PullError;

use crate::wire::{codes, ErrorBody};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with an error status.
    #[error("{status} {}: {}", body.error, body.message)]
    Api { status: u16, body: ErrorBody },
    /// Connection refused, reset, timed out, or the stream broke.
    #[error("transport: {0}")]
    Transport(String),
    #[error("unexpected response: {0}")]
    Decode(String),
    #[error(transparent)]
    FileIo(#[from] FileIoError),
    #[error(transparent)]
    Pull(#[from] PullError),
    #[error("{0}")]
    Local(String),
}

impl ClientError {
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { body, .. } => Some(&body.error),
            ClientError::FileIo(FileIoError::IntegrityMismatch(_)) => Some(codes::INTEGRITY_MISMATCH),
            ClientError::FileIo(FileIoError::DestNotEmpty(_)) => Some(codes::DEST_NOT_EMPTY),
            ClientError::Pull(PullError::DuplicatePull(_)) => Some(codes::DUPLICATE_PULL),
            ClientError::Pull(PullError::PartialPull(_)) => Some(codes::PARTIAL_PULL),
            _ => None,
        }
    }

    pub fn is(&self, code: &str) -> bool {
        self.code() == Some(code)
    }

    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::Api { status, .. } => Some(*status),
            _ => None,
        }
    }

    /// Worth retrying: the peer was unreachable, the stream broke, the
    /// service was temporarily unable to serve, or the bytes arrived
    /// corrupted.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Api { status, body } => {
                *status >= 500 || body.error == codes::QUEUE_FULL || body.error == codes::UNAVAILABLE
            }
            ClientError::FileIo(FileIoError::IntegrityMismatch(_)) => true,
            _ => false,
        }
    }
}

impl From<reqwest::Error> for ClientError {
    fn from(e: reqwest::Error) -> Self {
        if e.is_decode() {
            ClientError::Decode(e.to_string())
        } else {
            let mut msg = e.to_string();
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                msg.push_str(": ");
                msg.push_str(&s.to_string());
                src = s.source();
            }
            ClientError::Transport(msg)
        }
    }
}

/// Turns a non-2xx response into [`ClientError::Api`].
pub(crate) async fn check(resp: reqwest::Response) -> Result<reqwest::Response, ClientError> {
    if resp.status().is_success() {
        return Ok(resp);
    }
    let status = resp.status().as_u16();
    let text = resp.text().await.unwrap_or_default();
    let body = serde_json::from_str::<ErrorBody>(&text).unwrap_or(ErrorBody {
        error: if status >= 500 {
            codes::INTERNAL
        } else {
            codes::BAD_REQUEST
        }
        .to_string(),
        message: text,
    });
    Err(ClientError::Api { status, body })
}

pub(crate) async fn json<T: serde::de::DeserializeOwned>(resp: reqwest::Response) -> Result<T, ClientError> {
    let resp = check(resp).await?;
    let bytes = resp.bytes().await?;
    serde_json::from_slice(&bytes).map_err(|e| ClientError::Decode(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn api(status: u16, code: &str) -> ClientError {
        ClientError::Api {
            status,
            body: ErrorBody {
                error: code.into(),
                message: String::new(),
            },
        }
    }

    #[test]
    fn local_errors_carry_wire_codes() {
        let e = ClientError::FileIo(FileIoError::IntegrityMismatch("x".into()));
        assert!(e.is(codes::INTEGRITY_MISMATCH) && e.is_transient());
        assert!(ClientError::Pull(PullError::DuplicatePull("s".into())).is(codes::DUPLICATE_PULL));
        assert!(ClientError::Local("x".into()).code().is_none());
    }

    #[test]
    fn transient_classification() {
        assert!(api(503, codes::QUEUE_FULL).is_transient());
        assert!(api(500, codes::INTERNAL).is_transient());
        assert!(!api(404, codes::UNKNOWN_JOB).is_transient());
        assert!(ClientError::Transport("reset".into()).is_transient());
        assert_eq!(api(409, codes::CONFLICT).status(), Some(409));
    }
}
