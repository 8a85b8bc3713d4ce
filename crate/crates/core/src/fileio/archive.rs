//! Deterministic framed tree archive.
//!
//! ```text
//! archive := "CHIPSTR1" entry* trailer
//! entry   := path_len:u32be path size:u64be content[size] sha256(content)[32]
//! trailer := FF FF FF FF  manifest_len:u32be  manifest lines
//! ```
//!
//! Entries appear in manifest (lexicographic path) order. No timestamps,
//! modes or ownership are recorded, so equal trees give equal bytes.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::RngCore;
use sha2::{Digest, Sha256};

use super::manifest::{list_files, validate_rel_path, ManifestEntry, TreeManifest};
use super::FileIoError;
use crate::hash::{self, HASH_LEN};

pub const ARCHIVE_MAGIC: &[u8; 8] = b"CHIPSTR1";
const TRAILER_SENTINEL: u32 = 0xFFFF_FFFF;
const MAX_PATH_LEN: usize = 4096;
const MAX_MANIFEST_LEN: usize = 64 * 1024 * 1024;

/// Archive bytes beyond the file contents themselves.
pub fn framing_overhead(manifest: &TreeManifest) -> u64 {
    let per_entry: u64 = manifest
        .entries
        .iter()
        .map(|e| (4 + e.path.len() + 8 + HASH_LEN) as u64)
        .sum();
    ARCHIVE_MAGIC.len() as u64 + per_entry + 8 + manifest.lines().len() as u64
}

pub fn archive_len(manifest: &TreeManifest) -> u64 {
    manifest.total_size() + framing_overhead(manifest)
}

/// Archives `dir`, returning the archive bytes and its manifest.
pub fn archive_tree(dir: &Path) -> Result<(Vec<u8>, TreeManifest), FileIoError> {
    let files = list_files(dir)?;
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    let mut entries = Vec::with_capacity(files.len());
    for (rel, path) in files {
        let data = fs::read(&path).map_err(|e| FileIoError::UnreadableEntry(format!("{}: {e}", path.display())))?;
        let digest = hash::sha256(&data);
        out.extend_from_slice(&(rel.len() as u32).to_be_bytes());
        out.extend_from_slice(rel.as_bytes());
        out.extend_from_slice(&(data.len() as u64).to_be_bytes());
        out.extend_from_slice(&data);
        out.extend_from_slice(&digest);
        entries.push(ManifestEntry {
            path: rel,
            size: data.len() as u64,
            hash: hex::encode(digest),
        });
    }
    let manifest = TreeManifest::from_entries(entries);
    let lines = manifest.lines();
    out.extend_from_slice(&TRAILER_SENTINEL.to_be_bytes());
    out.extend_from_slice(&(lines.len() as u32).to_be_bytes());
    out.extend_from_slice(lines.as_bytes());
    Ok((out, manifest))
}

enum State {
    Magic,
    EntryHeader,
    Content {
        remaining: u64,
        file: File,
        hasher: Sha256,
        path: String,
        size: u64,
    },
    EntryHash {
        digest: [u8; HASH_LEN],
        path: String,
        size: u64,
    },
    TrailerLen,
    Trailer {
        len: usize,
    },
    Done,
}

/// Streaming restore into a staging directory next to `dest`. Nothing is
/// visible at `dest` until [`RestoreSession::commit`] verifies the whole
/// tree; dropping an uncommitted session removes the staging directory.
pub struct RestoreSession {
    dest: PathBuf,
    staging: PathBuf,
    expected: Option<TreeManifest>,
    expected_hash: Option<String>,
    buf: Vec<u8>,
    state: State,
    entries: Vec<ManifestEntry>,
    received: u64,
    committed: bool,
}

impl RestoreSession {
    pub fn begin(dest: &Path, expected: Option<TreeManifest>) -> Result<Self, FileIoError> {
        ensure_empty_or_absent(dest)?;
        if let Some(m) = &expected {
            m.verify()?;
        }
        let parent = dest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(io)?;
        let name = dest
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "tree".into());
        let mut tag = [0u8; 6];
        rand::rng().fill_bytes(&mut tag);
        let staging = parent.join(format!(".{name}.staging-{}", hex::encode(tag)));
        fs::create_dir(&staging).map_err(io)?;
        Ok(Self {
            dest: dest.to_path_buf(),
            staging,
            expected,
            expected_hash: None,
            buf: Vec::new(),
            state: State::Magic,
            entries: Vec::new(),
            received: 0,
            committed: false,
        })
    }

    /// Also require the restored tree to hash to `hash`.
    pub fn expect_tree_hash(&mut self, hash: impl Into<String>) {
        self.expected_hash = Some(hash.into());
    }

    pub fn bytes_received(&self) -> u64 {
        self.received
    }

    pub fn push(&mut self, chunk: &[u8]) -> Result<(), FileIoError> {
        self.received += chunk.len() as u64;
        self.buf.extend_from_slice(chunk);
        self.drive()
    }

    fn drive(&mut self) -> Result<(), FileIoError> {
        let mismatch = |s: String| FileIoError::IntegrityMismatch(s);
        loop {
            match &mut self.state {
                State::Magic => {
                    if self.buf.len() < ARCHIVE_MAGIC.len() {
                        return Ok(());
                    }
                    if &self.buf[..8] != ARCHIVE_MAGIC {
                        return Err(mismatch("bad archive magic".into()));
                    }
                    self.buf.drain(..8);
                    self.state = State::EntryHeader;
                }
                State::EntryHeader => {
                    if self.buf.len() < 4 {
                        return Ok(());
                    }
                    let path_len = u32::from_be_bytes(self.buf[..4].try_into().unwrap());
                    if path_len == TRAILER_SENTINEL {
                        self.buf.drain(..4);
                        self.state = State::TrailerLen;
                        continue;
                    }
                    let path_len = path_len as usize;
                    if path_len == 0 || path_len > MAX_PATH_LEN {
                        return Err(mismatch(format!("implausible path length {path_len}")));
                    }
                    if self.buf.len() < 4 + path_len + 8 {
                        return Ok(());
                    }
                    let path = std::str::from_utf8(&self.buf[4..4 + path_len])
                        .map_err(|_| mismatch("entry path is not UTF-8".into()))?
                        .to_string();
                    validate_rel_path(&path).map_err(|e| mismatch(e.to_string()))?;
                    if let Some(prev) = self.entries.last() {
                        if path <= prev.path {
                            return Err(mismatch(format!("entry `{path}` out of order")));
                        }
                    }
                    let size = u64::from_be_bytes(self.buf[4 + path_len..4 + path_len + 8].try_into().unwrap());
                    if let Some(exp) = &self.expected {
                        match exp.entries.get(self.entries.len()) {
                            Some(e) if e.path == path && e.size == size => {}
                            _ => {
                                return Err(mismatch(format!(
                                    "entry `{path}` ({size} bytes) not in expected manifest position"
                                )))
                            }
                        }
                    }
                    self.buf.drain(..4 + path_len + 8);
                    let target = self.staging.join(&path);
                    if let Some(parent) = target.parent() {
                        fs::create_dir_all(parent).map_err(|e| mismatch(format!("`{path}`: {e}")))?;
                    }
                    let file = File::create(&target).map_err(|e| mismatch(format!("`{path}`: {e}")))?;
                    self.state = State::Content {
                        remaining: size,
                        file,
                        hasher: Sha256::new(),
                        path,
                        size,
                    };
                }
                State::Content {
                    remaining,
                    file,
                    hasher,
                    ..
                } => {
                    if *remaining > 0 {
                        if self.buf.is_empty() {
                            return Ok(());
                        }
                        let n = (*remaining).min(self.buf.len() as u64) as usize;
                        file.write_all(&self.buf[..n]).map_err(io)?;
                        hasher.update(&self.buf[..n]);
                        self.buf.drain(..n);
                        *remaining -= n as u64;
                        continue;
                    }
                    let State::Content {
                        file,
                        hasher,
                        path,
                        size,
                        ..
                    } = std::mem::replace(&mut self.state, State::Done)
                    else {
                        unreachable!()
                    };
                    file.sync_all().map_err(io)?;
                    self.state = State::EntryHash {
                        digest: hasher.finalize().into(),
                        path,
                        size,
                    };
                }
                State::EntryHash { digest, path, size } => {
                    if self.buf.len() < HASH_LEN {
                        return Ok(());
                    }
                    if self.buf[..HASH_LEN] != digest[..] {
                        return Err(mismatch(format!("content hash mismatch for `{path}`")));
                    }
                    let entry = ManifestEntry {
                        path: std::mem::take(path),
                        size: *size,
                        hash: hex::encode(*digest),
                    };
                    if let Some(exp) = &self.expected {
                        if exp.entries[self.entries.len()].hash != entry.hash {
                            return Err(mismatch(format!("`{}` differs from expected manifest", entry.path)));
                        }
                    }
                    self.buf.drain(..HASH_LEN);
                    self.entries.push(entry);
                    self.state = State::EntryHeader;
                }
                State::TrailerLen => {
                    if self.buf.len() < 4 {
                        return Ok(());
                    }
                    let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
                    if len > MAX_MANIFEST_LEN {
                        return Err(mismatch(format!("implausible trailer length {len}")));
                    }
                    self.buf.drain(..4);
                    self.state = State::Trailer { len };
                }
                State::Trailer { len } => {
                    let len = *len;
                    if self.buf.len() < len {
                        return Ok(());
                    }
                    let received = TreeManifest::from_entries(self.entries.clone());
                    if self.buf[..len] != *received.lines().as_bytes() {
                        return Err(mismatch("trailer manifest does not match entries".into()));
                    }
                    self.buf.drain(..len);
                    self.state = State::Done;
                }
                State::Done => {
                    if !self.buf.is_empty() {
                        return Err(mismatch("trailing bytes after archive".into()));
                    }
                    return Ok(());
                }
            }
        }
    }

    /// Verifies completeness and the expected manifest, then renames the
    /// staging directory onto `dest`.
    pub fn commit(mut self) -> Result<TreeManifest, FileIoError> {
        if !matches!(self.state, State::Done) {
            return Err(FileIoError::IntegrityMismatch("archive ended early".into()));
        }
        let manifest = TreeManifest::from_entries(std::mem::take(&mut self.entries));
        if let Some(exp) = &self.expected {
            if exp != &manifest {
                return Err(FileIoError::IntegrityMismatch(
                    "restored tree differs from expected manifest".into(),
                ));
            }
        }
        if let Some(h) = &self.expected_hash {
            if h != &manifest.tree_hash {
                return Err(FileIoError::IntegrityMismatch(format!(
                    "tree hash {} does not match announced {h}",
                    manifest.tree_hash
                )));
            }
        }
        ensure_empty_or_absent(&self.dest)?;
        if self.dest.exists() {
            fs::remove_dir(&self.dest).map_err(io)?;
        }
        fs::rename(&self.staging, &self.dest).map_err(io)?;
        self.committed = true;
        Ok(manifest)
    }
}

impl Drop for RestoreSession {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

fn io(e: std::io::Error) -> FileIoError {
    FileIoError::Io(e.to_string())
}

fn ensure_empty_or_absent(dest: &Path) -> Result<(), FileIoError> {
    match fs::read_dir(dest) {
        Ok(mut it) => {
            if it.next().is_some() {
                Err(FileIoError::DestNotEmpty(dest.display().to_string()))
            } else {
                Ok(())
            }
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(_) if dest.exists() => Err(FileIoError::DestNotEmpty(dest.display().to_string())),
        Err(e) => Err(io(e)),
    }
}

/// Restores a complete in-memory archive into `dest` (all-or-nothing).
pub fn restore_tree(archive: &[u8], manifest: &TreeManifest, dest: &Path) -> Result<TreeManifest, FileIoError> {
    let mut session = RestoreSession::begin(dest, Some(manifest.clone()))?;
    session.push(archive)?;
    session.commit()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fileio::manifest_of_dir;

    fn sample_tree() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("sub/deeper")).unwrap();
        fs::write(dir.path().join("a.txt"), "x").unwrap();
        fs::write(dir.path().join("sub/b.txt"), "y").unwrap();
        fs::write(dir.path().join("sub/deeper/empty"), "").unwrap();
        dir
    }

    #[test]
    fn archive_is_deterministic_and_sized() {
        let t = sample_tree();
        let (a1, m1) = archive_tree(t.path()).unwrap();
        let (a2, m2) = archive_tree(t.path()).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(m1, m2);
        assert_eq!(a1.len() as u64, archive_len(&m1));
        assert_eq!(m1.entries.len(), 3);
    }

    #[test]
    fn empty_dir_archive_is_valid() {
        let t = tempfile::tempdir().unwrap();
        let (a, m) = archive_tree(t.path()).unwrap();
        assert!(m.entries.is_empty());
        let out = tempfile::tempdir().unwrap();
        let dest = out.path().join("restored");
        restore_tree(&a, &m, &dest).unwrap();
        assert!(dest.is_dir());
    }

    #[test]
    fn round_trip_restores_identical_tree() {
        let t = sample_tree();
        let (a, m) = archive_tree(t.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let dest = out.path().join("r");
        let got = restore_tree(&a, &m, &dest).unwrap();
        assert_eq!(got, m);
        assert_eq!(manifest_of_dir(&dest).unwrap(), m);
        assert_eq!(fs::read_to_string(dest.join("sub/b.txt")).unwrap(), "y");
        // no staging leftovers
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 1);
    }

    #[test]
    fn flipped_payload_byte_is_rejected_and_nothing_committed() {
        let t = sample_tree();
        let (mut a, m) = archive_tree(t.path()).unwrap();
        // content byte of a.txt: magic(8) + len(4) + "a.txt"(5) + size(8)
        a[8 + 4 + 5 + 8] ^= 0x20;
        let out = tempfile::tempdir().unwrap();
        let dest = out.path().join("r");
        let err = restore_tree(&a, &m, &dest).unwrap_err();
        assert!(matches!(err, FileIoError::IntegrityMismatch(_)), "{err}");
        assert!(!dest.exists());
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
    }

    #[test]
    fn every_single_byte_flip_is_rejected() {
        let t = sample_tree();
        let (a, m) = archive_tree(t.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        for i in 0..a.len() {
            let mut b = a.clone();
            b[i] ^= 0x01;
            let dest = out.path().join(format!("r{i}"));
            let r = restore_tree(&b, &m, &dest);
            assert!(matches!(r, Err(FileIoError::IntegrityMismatch(_))), "offset {i}: {r:?}");
            assert!(!dest.exists());
        }
        assert_eq!(fs::read_dir(out.path()).unwrap().count(), 0);
    }

    #[test]
    fn truncation_is_rejected() {
        let t = sample_tree();
        let (a, m) = archive_tree(t.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        for cut in [0, 7, 20, a.len() / 2, a.len() - 1] {
            let dest = out.path().join(format!("c{cut}"));
            let mut s = RestoreSession::begin(&dest, Some(m.clone())).unwrap();
            let r = s.push(&a[..cut]).and_then(|_| s.commit().map(|_| ()));
            assert!(matches!(r, Err(FileIoError::IntegrityMismatch(_))), "cut {cut}");
            assert!(!dest.exists());
        }
    }

    #[test]
    fn non_empty_destination_refused() {
        let t = sample_tree();
        let (a, m) = archive_tree(t.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        fs::write(out.path().join("keep"), "1").unwrap();
        assert!(matches!(
            restore_tree(&a, &m, out.path()),
            Err(FileIoError::DestNotEmpty(_))
        ));
        // existing empty dir is fine
        let empty = out.path().join("empty");
        fs::create_dir(&empty).unwrap();
        restore_tree(&a, &m, &empty).unwrap();
    }

    #[test]
    fn chunked_push_matches_one_shot() {
        let t = sample_tree();
        let (a, m) = archive_tree(t.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let dest = out.path().join("r");
        let mut s = RestoreSession::begin(&dest, None).unwrap();
        for c in a.chunks(3) {
            s.push(c).unwrap();
        }
        assert_eq!(s.bytes_received(), a.len() as u64);
        assert_eq!(s.commit().unwrap(), m);
    }

    #[test]
    fn announced_tree_hash_must_match() {
        let t = sample_tree();
        let (a, m) = archive_tree(t.path()).unwrap();
        let out = tempfile::tempdir().unwrap();
        let dest = out.path().join("r");
        let mut s = RestoreSession::begin(&dest, None).unwrap();
        s.expect_tree_hash("0".repeat(64));
        s.push(&a).unwrap();
        assert!(matches!(s.commit(), Err(FileIoError::IntegrityMismatch(_))));
        assert!(!dest.exists());
        let mut s = RestoreSession::begin(&dest, None).unwrap();
        s.expect_tree_hash(m.tree_hash.clone());
        s.push(&a).unwrap();
        assert_eq!(s.commit().unwrap(), m);
    }
}
