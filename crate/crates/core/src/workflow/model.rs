use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::hash;

pub type UserId = u64;
pub type FeedId = u64;
pub type InstanceId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    Clinician,
    Researcher,
    Admin,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct User {
    pub id: UserId,
    pub login: String,
    /// Hex SHA-256 of the secret salted with the login name.
    pub secret_digest: String,
    pub role: Role,
}

impl User {
    pub fn digest_secret(login: &str, secret: &str) -> String {
        hex::encode(hash::salted(login.as_bytes(), secret.as_bytes()))
    }

    pub fn verify(&self, secret: &str) -> bool {
        let given = Self::digest_secret(&self.login, secret);
        hash::ct_eq(given.as_bytes(), self.secret_digest.as_bytes())
    }
}

/// Public view of a user.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserInfo {
    pub id: UserId,
    pub login: String,
    pub role: Role,
}

impl From<&User> for UserInfo {
    fn from(u: &User) -> Self {
        Self {
            id: u.id,
            login: u.login.clone(),
            role: u.role,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comment {
    pub author: UserId,
    pub at: DateTime<Utc>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AnnotateAction {
    AddTag { text: String },
    AddComment { text: String },
    Bookmark,
    Unbookmark,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub author: UserId,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub action: AnnotateAction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feed {
    pub id: FeedId,
    pub owner: UserId,
    pub title: String,
    pub created: DateTime<Utc>,
    pub tags: BTreeSet<String>,
    pub shared_with: BTreeSet<UserId>,
    pub comments: Vec<Comment>,
    pub bookmarked_by: BTreeSet<UserId>,
    /// Directory of the pulled, anonymized study; the root node's output.
    pub root_dir: String,
    /// Anonymized StudyInstanceUID; the image-record id of its metadata.
    pub study_uid: String,
    /// Every annotation in arrival order.
    pub annotations: Vec<Annotation>,
}

impl Feed {
    pub fn can_access(&self, user: UserId) -> bool {
        self.owner == user || self.shared_with.contains(&user)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Text,
    Int,
    Real,
    Flag,
    Choice,
}

impl ParamType {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "text" => ParamType::Text,
            "int" => ParamType::Int,
            "real" => ParamType::Real,
            "flag" => ParamType::Flag,
            "choice" => ParamType::Choice,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    /// One of `text`, `int`, `real`, `flag`, `choice`.
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub choices: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecTemplate {
    /// Executable and arguments. `{input}`/`{output}` are left for the job
    /// manager; `{name}` is replaced with the value of parameter `name`.
    pub command: Vec<String>,
    /// Parameter name to option flag, appended as `flag value` (flags: just
    /// `flag` when true) in schema order.
    #[serde(default)]
    pub arg_map: BTreeMap<String, String>,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub labels: BTreeSet<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

fn default_timeout() -> u64 {
    600
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
    pub template: ExecTemplate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstanceStatus {
    Created,
    Dispatched,
    Running,
    Success,
    Error,
    Cancelled,
}

impl InstanceStatus {
    fn rank(self) -> u8 {
        match self {
            InstanceStatus::Created => 0,
            InstanceStatus::Dispatched => 1,
            InstanceStatus::Running => 2,
            _ => 3,
        }
    }

    pub fn is_terminal(self) -> bool {
        self.rank() == 3
    }

    /// Forward moves only; polling may skip intermediate states.
    pub fn can_transition(self, to: InstanceStatus) -> bool {
        !self.is_terminal() && to.rank() > self.rank()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusStamp {
    pub status: InstanceStatus,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginInstance {
    pub id: InstanceId,
    pub feed_id: FeedId,
    pub plugin: String,
    pub version: String,
    /// `None` when the parent is the feed root.
    pub parent: Option<InstanceId>,
    pub depth: u32,
    pub params: BTreeMap<String, serde_json::Value>,
    pub command: Vec<String>,
    pub status: InstanceStatus,
    pub input_dir: String,
    pub output_dir: String,
    pub step_id: Option<String>,
    pub created_by: UserId,
    pub history: Vec<StatusStamp>,
    #[serde(default)]
    pub diagnostic: Option<String>,
    #[serde(default)]
    pub stderr: Option<String>,
    #[serde(default)]
    pub analysis_records: Vec<u64>,
    #[serde(default)]
    pub analysis_warnings: u32,
}

/// One node of a feed's workflow tree, root first, parents before children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// `None` for the root data node.
    pub id: Option<InstanceId>,
    pub parent: Option<InstanceId>,
    pub depth: u32,
    pub status: InstanceStatus,
    pub plugin: Option<String>,
    pub version: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, serde_json::Value>,
    pub output_dir: String,
    pub files: Vec<String>,
    #[serde(default)]
    pub diagnostic: Option<String>,
    #[serde(default)]
    pub stderr: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedTree {
    pub feed_id: FeedId,
    pub nodes: Vec<TreeNode>,
}
