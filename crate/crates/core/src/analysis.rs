//! Structured analysis: turning plugin `results.tsv` files into metadata.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dicom::{MetaSource, MetaValue, MetadataRecord};
use crate::index::parse_number;

pub const RESULTS_FILE: &str = "results.tsv";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedResults {
    pub entries: BTreeMap<String, MetaValue>,
    /// Rows skipped: wrong arity, empty key, or a repeated key.
    pub warnings: u32,
}

/// Parses `key<TAB>value` lines. Numeric values become reals; blank lines
/// are ignored; the first occurrence of a key wins.
pub fn parse_results(text: &str) -> ParsedResults {
    let mut out = ParsedResults::default();
    for line in text.lines() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 || cols[0].trim().is_empty() {
            out.warnings += 1;
            continue;
        }
        let key = cols[0].trim().to_string();
        if out.entries.contains_key(&key) {
            out.warnings += 1;
            continue;
        }
        let value = match parse_number(cols[1]) {
            Some(x) => MetaValue::Real(x),
            None => MetaValue::Text(cols[1].to_string()),
        };
        out.entries.insert(key, value);
    }
    out
}

/// Reads `results.tsv` from an output directory. No file gives no record.
pub fn analyze_output(
    output_dir: &Path,
    image_record_id: &str,
    provenance: &str,
) -> std::io::Result<(Option<MetadataRecord>, u32)> {
    let path = output_dir.join(RESULTS_FILE);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok((None, 0)),
        Err(e) => return Err(e),
    };
    let parsed = parse_results(&String::from_utf8_lossy(&bytes));
    let mut record = MetadataRecord::new(image_record_id, MetaSource::Analysis, provenance);
    record.entries = parsed.entries;
    Ok((Some(record), parsed.warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_real_entries() {
        let p = parse_results("LeftHippocampus\t4100.5\nRightHippocampus\t4250.0\n");
        assert_eq!(p.warnings, 0);
        assert_eq!(p.entries["LeftHippocampus"], MetaValue::Real(4100.5));
        assert_eq!(p.entries["RightHippocampus"], MetaValue::Real(4250.0));
    }

    #[test]
    fn malformed_row_counted() {
        let p = parse_results("a\t1\nbroken row\nb\tx\n");
        assert_eq!(p.entries.len(), 2);
        assert_eq!(p.warnings, 1);
        assert_eq!(p.entries["b"], MetaValue::Text("x".into()));
    }

    #[test]
    fn duplicate_keys_keep_first() {
        let p = parse_results("a\t1\na\t2\r\n\n");
        assert_eq!(p.entries["a"], MetaValue::Real(1.0));
        assert_eq!(p.warnings, 1);
    }

    #[test]
    fn missing_file_is_vacuous() {
        let dir = tempfile::tempdir().unwrap();
        let (rec, w) = analyze_output(dir.path(), "s", "1").unwrap();
        assert!(rec.is_none());
        assert_eq!(w, 0);
    }
}
