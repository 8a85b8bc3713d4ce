//! Request and response bodies shared by the services and their clients.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use chips_core::fileio::TreeManifest;
use chips_core::pacs::PullReceipt;
use chips_core::workflow::{Role, UserInfo};

/// Every non-2xx response carries this body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    /// Stable machine-readable code, e.g. `UNKNOWN_JOB`.
    pub error: String,
    pub message: String,
}

pub mod codes {
    pub const UNAUTHORIZED: &str = "UNAUTHORIZED";
    pub const TOKEN_EXPIRED: &str = "TOKEN_EXPIRED";
    pub const FORBIDDEN: &str = "NOT_AUTHORIZED";
    pub const BAD_REQUEST: &str = "BAD_REQUEST";
    pub const BAD_FILTER_KEYWORD: &str = "BAD_FILTER_KEYWORD";
    pub const UNKNOWN_STUDY: &str = "UNKNOWN_STUDY";
    pub const DUPLICATE_JOB_KEY: &str = "DUPLICATE_JOB_KEY";
    pub const MISSING_INPUT: &str = "MISSING_INPUT";
    pub const QUEUE_FULL: &str = "QUEUE_FULL";
    pub const UNKNOWN_JOB: &str = "UNKNOWN_JOB";
    pub const UNKNOWN_JOB_KEY: &str = "UNKNOWN_JOB_KEY";
    pub const INTEGRITY_MISMATCH: &str = "INTEGRITY_MISMATCH";
    pub const DEST_NOT_EMPTY: &str = "DEST_NOT_EMPTY";
    pub const REMOTE_REJECTED: &str = "REMOTE_REJECTED";
    pub const UNKNOWN_STEP: &str = "UNKNOWN_STEP";
    pub const NO_ELIGIBLE_NODE: &str = "NO_ELIGIBLE_NODE";
    pub const NOT_FOUND: &str = "NOT_FOUND";
    pub const CONFLICT: &str = "CONFLICT";
    pub const DUPLICATE_STUDY_FEED: &str = "DUPLICATE_STUDY_FEED";
    pub const DUPLICATE_PLUGIN: &str = "DUPLICATE_PLUGIN";
    pub const DUPLICATE_PULL: &str = "DUPLICATE_PULL";
    pub const PARTIAL_PULL: &str = "PARTIAL_PULL";
    pub const SCHEMA_INVALID: &str = "SCHEMA_INVALID";
    pub const PARAM_VALIDATION: &str = "PARAM_VALIDATION";
    pub const PARENT_NOT_READY: &str = "PARENT_NOT_READY";
    pub const BAD_COMPARATOR: &str = "BAD_COMPARATOR";
    pub const UNAVAILABLE: &str = "UNAVAILABLE";
    pub const INTERNAL: &str = "INTERNAL";
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PacsAuthRequest {
    pub id: String,
    pub secret: String,
}

/// Tree manifests a file-IO node holds for one job key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTrees {
    pub input: Option<TreeManifest>,
    pub output: Option<TreeManifest>,
}

/// Header carrying the sender's tree hash on a push.
pub const TREE_HASH_HEADER: &str = "x-chips-tree-hash";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PurgeRequest {
    /// Also delete the working directories of purged jobs.
    #[serde(default)]
    pub remove_dirs: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PurgeResponse {
    pub purged: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStats {
    pub max_parallel: usize,
    pub running: usize,
    /// Highest number of simultaneously STARTED jobs since startup.
    pub running_high_water: usize,
    pub queued: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoginRequest {
    pub login: String,
    pub secret: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoginResponse {
    pub token: String,
    pub expires_at: DateTime<Utc>,
    pub user: UserInfo,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NewUserRequest {
    pub login: String,
    pub secret: String,
    pub role: Role,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateFeedRequest {
    #[serde(default)]
    pub title: String,
    pub receipt: PullReceipt,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShareRequest {
    /// Login name of the user to share with.
    pub user: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateInstanceRequest {
    #[serde(default)]
    pub parent: Option<u64>,
    pub plugin: String,
    #[serde(default)]
    pub version: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CancelResponse {
    /// Instances moved to CANCELLED by this call (the target and its
    /// non-terminal descendants).
    pub cancelled: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PacsPullRequest {
    pub study_uid: String,
}
