//! Users, feeds, the plugin registry and workflow trees.

mod model;
mod plugin;
mod state;
mod store;

pub use model::*;
pub use plugin::{render_command, resolve_params, validate_descriptor};
pub use state::{CoreState, StatusUpdate};
pub use store::{Wal, WalEntry};

use crate::index::QueryError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CoreError {
    #[error("not authorized")]
    NotAuthorized,
    #[error("invalid credentials")]
    InvalidCredentials,
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("unknown feed {0}")]
    UnknownFeed(FeedId),
    #[error("unknown plugin instance {0}")]
    UnknownInstance(InstanceId),
    #[error("unknown plugin {0}")]
    UnknownPlugin(String),
    #[error("login {0} already exists")]
    DuplicateLogin(String),
    #[error("a feed for study {0} already exists")]
    DuplicateStudyFeed(String),
    #[error("plugin {0} already registered")]
    DuplicatePlugin(String),
    #[error("invalid plugin schema: {0}")]
    SchemaInvalid(String),
    #[error("parameter `{field}`: {reason}")]
    ParamValidation { field: String, reason: String },
    #[error("parent instance {0} has not succeeded")]
    ParentNotReady(InstanceId),
    #[error("bad pull receipt: {0}")]
    BadReceipt(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error("i/o: {0}")]
    Io(String),
}
