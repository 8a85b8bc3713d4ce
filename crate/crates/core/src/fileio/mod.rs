//! Integrity-checked directory-tree transfer: manifests, the framed archive
//! format, and atomic staged restore.

mod archive;
mod manifest;

use serde::{Deserialize, Serialize};

pub use archive::{archive_len, archive_tree, framing_overhead, restore_tree, RestoreSession, ARCHIVE_MAGIC};
pub use manifest::{manifest_of_dir, validate_rel_path, ManifestEntry, TreeManifest};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FileIoError {
    #[error("symlink refused: {0}")]
    SymlinkRefused(String),
    #[error("unreadable entry: {0}")]
    UnreadableEntry(String),
    #[error("integrity mismatch: {0}")]
    IntegrityMismatch(String),
    #[error("destination not empty: {0}")]
    DestNotEmpty(String),
    #[error("bad path {0}")]
    BadPath(String),
    #[error("i/o: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    Push,
    Pull,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReceipt {
    pub job_key: String,
    pub direction: Direction,
    pub manifest: TreeManifest,
    /// Archive bytes on the wire: file contents plus framing.
    pub bytes_transferred: u64,
    pub duration_ms: u64,
}
