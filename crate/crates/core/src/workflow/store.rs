//! Append-only JSON-lines log of full record snapshots. Replaying the log
//! in order rebuilds the state; later lines for the same record win.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{Feed, PluginDescriptor, PluginInstance, User};
use crate::dicom::MetadataRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "record", rename_all = "snake_case")]
pub enum WalEntry {
    User(User),
    Feed(Feed),
    Plugin(PluginDescriptor),
    Instance(PluginInstance),
    Metadata(MetadataRecord),
}

pub struct Wal {
    path: PathBuf,
    file: File,
}

impl Wal {
    /// Opens (creating if needed) and returns all intact entries. A torn
    /// final line from an interrupted append is dropped and truncated away;
    /// corruption anywhere else is an error.
    pub fn open(path: &Path) -> std::io::Result<(Self, Vec<WalEntry>)> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut entries = Vec::new();
        let mut good_len = 0u64;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            let mut line = String::new();
            let mut lineno = 0;
            loop {
                line.clear();
                let n = reader.read_line(&mut line)?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                let complete = line.ends_with('\n');
                match serde_json::from_str::<WalEntry>(line.trim_end()) {
                    Ok(e) if complete => {
                        entries.push(e);
                        good_len += n as u64;
                    }
                    _ if !complete => break,
                    Err(e) => {
                        return Err(std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("{}:{lineno}: {e}", path.display()),
                        ))
                    }
                    Ok(_) => unreachable!(),
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            entries,
        ))
    }

    /// Appends a batch and syncs it to disk before returning.
    pub fn append(&mut self, entries: &[WalEntry]) -> std::io::Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in entries {
            serde_json::to_writer(&mut buf, e)?;
            buf.push(b'\n');
        }
        self.file.write_all(&buf)?;
        self.file.sync_data()
    }

    /// Rewrites the log as exactly `entries` via temp file and rename.
    pub fn compact(&mut self, entries: &[WalEntry]) -> std::io::Result<()> {
        let tmp = self.path.with_extension("compact");
        {
            let mut f = File::create(&tmp)?;
            for e in entries {
                serde_json::to_writer(&mut f, e)?;
                f.write_all(b"\n")?;
            }
            f.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        self.file = OpenOptions::new().append(true).open(&self.path)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::model::Role;

    fn user(id: u64) -> WalEntry {
        WalEntry::User(User {
            id,
            login: format!("u{id}"),
            secret_digest: "00".into(),
            role: Role::Researcher,
        })
    }

    #[test]
    fn append_and_replay() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("core.wal");
        let (mut w, e) = Wal::open(&p).unwrap();
        assert!(e.is_empty());
        w.append(&[user(1), user(2)]).unwrap();
        drop(w);
        let (_, e) = Wal::open(&p).unwrap();
        assert_eq!(e, vec![user(1), user(2)]);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("core.wal");
        let (mut w, _) = Wal::open(&p).unwrap();
        w.append(&[user(1)]).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        f.write_all(b"{\"kind\":\"user\",\"rec").unwrap();
        drop(f);
        let (mut w, e) = Wal::open(&p).unwrap();
        assert_eq!(e, vec![user(1)]);
        w.append(&[user(3)]).unwrap();
        drop(w);
        assert_eq!(Wal::open(&p).unwrap().1, vec![user(1), user(3)]);
    }

    #[test]
    fn mid_log_corruption_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("core.wal");
        fs::write(&p, "garbage\n{}\n").unwrap();
        assert!(Wal::open(&p).is_err());
    }

    #[test]
    fn compaction() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("core.wal");
        let (mut w, _) = Wal::open(&p).unwrap();
        w.append(&[user(1), user(1), user(2)]).unwrap();
        w.compact(&[user(1), user(2)]).unwrap();
        w.append(&[user(4)]).unwrap();
        drop(w);
        assert_eq!(Wal::open(&p).unwrap().1, vec![user(1), user(2), user(4)]);
    }
}
