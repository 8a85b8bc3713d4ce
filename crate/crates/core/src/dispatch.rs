//! Compute-node selection and the step phase machine.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::fileio::TreeManifest;
use crate::jobs::JobState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeHealth {
    Up,
    Down,
    #[default]
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeNode {
    pub id: String,
    pub jobmgr_url: String,
    pub fileio_url: String,
    pub capacity: u32,
    #[serde(default)]
    pub queue_len: u32,
    #[serde(default)]
    pub health: NodeHealth,
    #[serde(default)]
    pub labels: BTreeSet<String>,
}

impl ComputeNode {
    pub fn validate(&self) -> Result<(), DispatchError> {
        if self.id.is_empty() {
            return Err(DispatchError::InvalidNode("empty node id".into()));
        }
        if self.capacity == 0 {
            return Err(DispatchError::InvalidNode(format!("node {} has capacity 0", self.id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirements {
    #[serde(default)]
    pub labels: BTreeSet<String>,
    #[serde(default)]
    pub input_bytes: u64,
}

pub trait SelectionPolicy: Send + Sync {
    fn select<'a>(&self, req: &Requirements, nodes: &'a [ComputeNode]) -> Result<&'a ComputeNode, DispatchError>;
}

/// Minimizes queue length / capacity over UP nodes carrying every required
/// label; ties go to the lexicographically smallest id.
#[derive(Clone, Copy, Debug, Default)]
pub struct LeastLoadRatio;

/// Exact comparison of `a.queue/a.cap` against `b.queue/b.cap`.
pub fn compare_load(a: &ComputeNode, b: &ComputeNode) -> Ordering {
    let lhs = a.queue_len as u64 * b.capacity as u64;
    let rhs = b.queue_len as u64 * a.capacity as u64;
    lhs.cmp(&rhs).then_with(|| a.id.cmp(&b.id))
}

impl SelectionPolicy for LeastLoadRatio {
    fn select<'a>(&self, req: &Requirements, nodes: &'a [ComputeNode]) -> Result<&'a ComputeNode, DispatchError> {
        nodes
            .iter()
            .filter(|n| n.health == NodeHealth::Up && n.capacity > 0)
            .filter(|n| req.labels.is_subset(&n.labels))
            .min_by(|a, b| compare_load(a, b))
            .ok_or(DispatchError::NoEligibleNode)
    }
}

pub fn select_node<'a>(req: &Requirements, nodes: &'a [ComputeNode]) -> Result<&'a ComputeNode, DispatchError> {
    LeastLoadRatio.select(req, nodes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StepPhase {
    Selecting,
    Pushing,
    Submitted,
    Polling,
    Pulling,
    DoneOk,
    DoneErr,
    DoneCancelled,
}

impl StepPhase {
    pub const ALL: [StepPhase; 8] = [
        StepPhase::Selecting,
        StepPhase::Pushing,
        StepPhase::Submitted,
        StepPhase::Polling,
        StepPhase::Pulling,
        StepPhase::DoneOk,
        StepPhase::DoneErr,
        StepPhase::DoneCancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, StepPhase::DoneOk | StepPhase::DoneErr | StepPhase::DoneCancelled)
    }

    /// Forward by exactly one step along the main line, or to DONE_ERR /
    /// DONE_CANCELLED from any live phase.
    pub fn can_transition(self, to: StepPhase) -> bool {
        use StepPhase::*;
        if self.is_terminal() {
            return false;
        }
        match to {
            DoneErr | DoneCancelled => true,
            _ => {
                let next = match self {
                    Selecting => Pushing,
                    Pushing => Submitted,
                    Submitted => Polling,
                    Polling => Pulling,
                    Pulling => DoneOk,
                    _ => return false,
                };
                to == next
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepPhase::Selecting => "SELECTING",
            StepPhase::Pushing => "PUSHING",
            StepPhase::Submitted => "SUBMITTED",
            StepPhase::Polling => "POLLING",
            StepPhase::Pulling => "PULLING",
            StepPhase::DoneOk => "DONE_OK",
            StepPhase::DoneErr => "DONE_ERR",
            StepPhase::DoneCancelled => "DONE_CANCELLED",
        }
    }
}

impl std::fmt::Display for StepPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DiagnosticKind {
    PushFailed,
    SpawnFailed,
    JobFailed,
    PullFailed,
    Timeout,
    NoEligibleNode,
    NodeLost,
}

/// Phase-tagged reason attached to DONE_ERR.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagnosticKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(default)]
    pub detail: String,
}

impl Diagnostic {
    pub fn new(kind: DiagnosticKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            exit_code: None,
            detail: detail.into(),
        }
    }

    pub fn job_failed(code: i32, detail: impl Into<String>) -> Self {
        Self {
            kind: DiagnosticKind::JobFailed,
            exit_code: Some(code),
            detail: detail.into(),
        }
    }
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = serde_json::to_value(self.kind).unwrap();
        let kind = kind.as_str().unwrap_or("?");
        match self.exit_code {
            Some(c) => write!(f, "{kind}({c})")?,
            None => f.write_str(kind)?,
        }
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

/// What core asks the dispatcher to run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRequest {
    pub instance_id: String,
    /// Directory on the data node pushed as the job input.
    pub input_dir: String,
    /// Directory on the data node that receives the job output. Must be
    /// empty or absent.
    pub output_dir: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    pub timeout_secs: u64,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub requirements: Requirements,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStamp {
    pub phase: StepPhase,
    pub at: DateTime<Utc>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub id: String,
    pub instance_id: String,
    pub job_key: String,
    pub node_id: Option<String>,
    pub request: StepRequest,
    pub phase: StepPhase,
    pub diagnostic: Option<Diagnostic>,
    /// Retries spent per phase.
    #[serde(default)]
    pub retries: BTreeMap<StepPhase, u32>,
    pub phase_times: Vec<PhaseStamp>,
    #[serde(default)]
    pub remote_state: Option<JobState>,
    #[serde(default)]
    pub exit_code: Option<i32>,
    /// Tail of the remote stderr, surfaced on failure.
    #[serde(default)]
    pub stderr: Option<String>,
    #[serde(default)]
    pub output_manifest: Option<TreeManifest>,
}

impl StepPlan {
    pub fn new(id: String, job_key: String, request: StepRequest, now: DateTime<Utc>) -> Self {
        Self {
            id,
            instance_id: request.instance_id.clone(),
            job_key,
            node_id: None,
            request,
            phase: StepPhase::Selecting,
            diagnostic: None,
            retries: BTreeMap::new(),
            phase_times: vec![PhaseStamp {
                phase: StepPhase::Selecting,
                at: now,
            }],
            remote_state: None,
            exit_code: None,
            stderr: None,
            output_manifest: None,
        }
    }

    pub fn advance(&mut self, to: StepPhase, now: DateTime<Utc>) -> Result<(), DispatchError> {
        if !self.phase.can_transition(to) {
            return Err(DispatchError::IllegalPhase { from: self.phase, to });
        }
        self.phase = to;
        self.phase_times.push(PhaseStamp { phase: to, at: now });
        Ok(())
    }

    pub fn fail(&mut self, diag: Diagnostic, now: DateTime<Utc>) -> Result<(), DispatchError> {
        self.advance(StepPhase::DoneErr, now)?;
        self.diagnostic = Some(diag);
        Ok(())
    }

    pub fn is_terminal(&self) -> bool {
        self.phase.is_terminal()
    }

    /// Verifies the recorded phase history is a path in the machine.
    pub fn check_history(&self) -> Result<(), String> {
        let phases: Vec<StepPhase> = self.phase_times.iter().map(|p| p.phase).collect();
        if phases.first() != Some(&StepPhase::Selecting) {
            return Err("history does not start at SELECTING".into());
        }
        for w in phases.windows(2) {
            if !w[0].can_transition(w[1]) {
                return Err(format!("illegal phase step {} -> {}", w[0], w[1]));
            }
        }
        if phases.last() != Some(&self.phase) {
            return Err("history tail differs from phase".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DispatchError {
    #[error("no eligible node")]
    NoEligibleNode,
    #[error("unknown step {0}")]
    UnknownStep(String),
    #[error("invalid node: {0}")]
    InvalidNode(String),
    #[error("invalid step request: {0}")]
    InvalidRequest(String),
    #[error("illegal phase transition {from} -> {to}")]
    IllegalPhase { from: StepPhase, to: StepPhase },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: &str, q: u32, cap: u32) -> ComputeNode {
        ComputeNode {
            id: id.into(),
            jobmgr_url: String::new(),
            fileio_url: String::new(),
            capacity: cap,
            queue_len: q,
            health: NodeHealth::Up,
            labels: BTreeSet::new(),
        }
    }

    #[test]
    fn picks_lowest_ratio() {
        let nodes = [node("A", 3, 4), node("B", 0, 2)];
        assert_eq!(select_node(&Requirements::default(), &nodes).unwrap().id, "B");
    }

    #[test]
    fn tie_breaks_by_id() {
        let nodes = [node("B", 1, 2), node("A", 1, 2)];
        assert_eq!(select_node(&Requirements::default(), &nodes).unwrap().id, "A");
        let nodes = [node("B", 2, 4), node("A", 1, 2)];
        assert_eq!(select_node(&Requirements::default(), &nodes).unwrap().id, "A");
    }

    #[test]
    fn down_and_unlabelled_nodes_are_ineligible() {
        let mut a = node("A", 0, 1);
        a.health = NodeHealth::Down;
        let mut b = node("B", 5, 1);
        b.health = NodeHealth::Unknown;
        assert_eq!(
            select_node(&Requirements::default(), &[a.clone(), b]),
            Err(DispatchError::NoEligibleNode)
        );
        let mut c = node("C", 9, 1);
        c.labels.insert("gpu".into());
        let req = Requirements {
            labels: ["gpu".to_string()].into(),
            input_bytes: 0,
        };
        assert_eq!(select_node(&req, &[node("D", 0, 1), c]).unwrap().id, "C");
    }

    #[test]
    fn phase_machine() {
        use StepPhase::*;
        assert!(Selecting.can_transition(Pushing));
        assert!(!Selecting.can_transition(Polling));
        assert!(Polling.can_transition(DoneErr));
        assert!(Pushing.can_transition(DoneCancelled));
        for t in [DoneOk, DoneErr, DoneCancelled] {
            for p in StepPhase::ALL {
                assert!(!t.can_transition(p));
            }
        }
    }

    #[test]
    fn diagnostic_display() {
        assert_eq!(Diagnostic::job_failed(3, "").to_string(), "JOB_FAILED(3)");
        assert_eq!(
            Diagnostic::new(DiagnosticKind::SpawnFailed, "refused").to_string(),
            "SPAWN_FAILED: refused"
        );
    }
}
