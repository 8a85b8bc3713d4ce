use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::FileIoError;
use crate::hash;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub size: u64,
    /// Lowercase hex SHA-256 of the file content.
    pub hash: String,
}

/// Sorted per-file inventory of a directory tree. Directories themselves are
/// not recorded, so empty directories do not survive a transfer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeManifest {
    pub entries: Vec<ManifestEntry>,
    pub tree_hash: String,
}

impl TreeManifest {
    pub fn from_entries(mut entries: Vec<ManifestEntry>) -> Self {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let tree_hash = hash::sha256_hex(render_lines(&entries).as_bytes());
        Self { entries, tree_hash }
    }

    pub fn empty() -> Self {
        Self::from_entries(Vec::new())
    }

    /// `path<TAB>size<TAB>hash\n` per entry; the tree hash is over this text.
    pub fn lines(&self) -> String {
        render_lines(&self.entries)
    }

    /// Checks sorting, path hygiene and that the tree hash matches the entries.
    pub fn verify(&self) -> Result<(), FileIoError> {
        for e in &self.entries {
            validate_rel_path(&e.path)?;
        }
        for w in self.entries.windows(2) {
            if w[0].path >= w[1].path {
                return Err(FileIoError::BadPath(format!(
                    "manifest not strictly sorted at `{}`",
                    w[1].path
                )));
            }
        }
        if hash::sha256_hex(self.lines().as_bytes()) != self.tree_hash {
            return Err(FileIoError::IntegrityMismatch(
                "tree hash does not match entries".into(),
            ));
        }
        Ok(())
    }

    pub fn total_size(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }
}

fn render_lines(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.path, e.size, e.hash))
        .collect()
}

/// Relative, `/`-separated, no empty / `.` / `..` segments, no control
/// characters or backslashes.
pub fn validate_rel_path(path: &str) -> Result<(), FileIoError> {
    let bad = |why: &str| FileIoError::BadPath(format!("`{}`: {why}", path.escape_debug()));
    if path.is_empty() {
        return Err(bad("empty"));
    }
    if path.len() > 4096 {
        return Err(bad("too long"));
    }
    if path.starts_with('/') {
        return Err(bad("absolute"));
    }
    if path.chars().any(|c| c.is_control() || c == '\\') {
        return Err(bad("control character or backslash"));
    }
    for seg in path.split('/') {
        if seg.is_empty() || seg == "." || seg == ".." {
            return Err(bad("empty, `.` or `..` segment"));
        }
    }
    Ok(())
}

/// Regular files under `root` with their normalized relative paths, sorted.
/// Symlinks are refused; other special files are unreadable.
pub(crate) fn list_files(root: &Path) -> Result<Vec<(String, std::path::PathBuf)>, FileIoError> {
    if !root.is_dir() {
        return Err(FileIoError::UnreadableEntry(root.display().to_string()));
    }
    let mut files = Vec::new();
    for entry in WalkDir::new(root).follow_links(false).min_depth(1) {
        let entry = entry.map_err(|e| FileIoError::UnreadableEntry(e.to_string()))?;
        let ft = entry.file_type();
        if ft.is_symlink() {
            return Err(FileIoError::SymlinkRefused(entry.path().display().to_string()));
        }
        if ft.is_dir() {
            continue;
        }
        if !ft.is_file() {
            return Err(FileIoError::UnreadableEntry(entry.path().display().to_string()));
        }
        let rel = entry
            .path()
            .strip_prefix(root)
            .expect("walkdir yields children of root");
        let rel = rel
            .components()
            .map(|c| c.as_os_str().to_str())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| FileIoError::UnreadableEntry(entry.path().display().to_string()))?
            .join("/");
        validate_rel_path(&rel)?;
        files.push((rel, entry.path().to_path_buf()));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(files)
}

/// Hashes every file under `root`.
pub fn manifest_of_dir(root: &Path) -> Result<TreeManifest, FileIoError> {
    let mut entries = Vec::new();
    for (rel, path) in list_files(root)? {
        let data = fs::read(&path).map_err(|e| FileIoError::UnreadableEntry(format!("{}: {e}", path.display())))?;
        entries.push(ManifestEntry {
            path: rel,
            size: data.len() as u64,
            hash: hash::sha256_hex(&data),
        });
    }
    Ok(TreeManifest::from_entries(entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_listed_tree() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/b.txt"), "y").unwrap();
        fs::write(dir.path().join("a.txt"), "x").unwrap();
        let m = manifest_of_dir(dir.path()).unwrap();
        let expected = vec![
            ManifestEntry {
                path: "a.txt".into(),
                size: 1,
                hash: hash::sha256_hex(b"x"),
            },
            ManifestEntry {
                path: "sub/b.txt".into(),
                size: 1,
                hash: hash::sha256_hex(b"y"),
            },
        ];
        assert_eq!(m.entries, expected);
        let lines = format!(
            "a.txt\t1\t{}\nsub/b.txt\t1\t{}\n",
            hash::sha256_hex(b"x"),
            hash::sha256_hex(b"y")
        );
        assert_eq!(m.tree_hash, hash::sha256_hex(lines.as_bytes()));
        m.verify().unwrap();
    }

    #[test]
    fn empty_tree() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest_of_dir(dir.path()).unwrap();
        assert!(m.entries.is_empty());
        assert_eq!(m.tree_hash, hash::sha256_hex(b""));
    }

    #[test]
    fn rejects_symlinks() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), "x").unwrap();
        std::os::unix::fs::symlink(dir.path().join("a"), dir.path().join("link")).unwrap();
        assert!(matches!(
            manifest_of_dir(dir.path()),
            Err(FileIoError::SymlinkRefused(_))
        ));
    }

    #[test]
    fn path_hygiene() {
        for ok in ["a", "a/b.txt", "x y/ünï"] {
            validate_rel_path(ok).unwrap();
        }
        for bad in ["", "/a", "a/../b", "a//b", "./a", "a\\b", "a\nb", "a/"] {
            assert!(validate_rel_path(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn tampered_manifest_fails_verify() {
        let mut m = TreeManifest::from_entries(vec![ManifestEntry {
            path: "a".into(),
            size: 1,
            hash: hash::sha256_hex(b"x"),
        }]);
        m.entries[0].size = 2;
        assert!(matches!(m.verify(), Err(FileIoError::IntegrityMismatch(_))));
    }
}
