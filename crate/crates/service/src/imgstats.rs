//! The demo plugin: counts the files in a tree and sums their pixel bytes.

use std::path::Path;

use walkdir::WalkDir;

use chips_core::analysis::RESULTS_FILE;
use chips_core::dicom::{parse_dataset, tags};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ImgStats {
    pub file_count: u64,
    /// Sum of PixelData lengths over files that parse as DICOM.
    pub voxel_bytes: u64,
    pub total_bytes: u64,
    pub dicom_files: u64,
}

pub fn scan(input: &Path) -> std::io::Result<ImgStats> {
    let mut s = ImgStats::default();
    for entry in WalkDir::new(input).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::other)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = std::fs::read(entry.path())?;
        s.file_count += 1;
        s.total_bytes += bytes.len() as u64;
        if let Ok(ds) = parse_dataset(&bytes) {
            s.dicom_files += 1;
            if let Some(px) = ds.get(tags::PIXEL_DATA) {
                s.voxel_bytes += px.length() as u64;
            }
        }
    }
    Ok(s)
}

pub fn results_tsv(s: &ImgStats) -> String {
    format!(
        "file_count\t{}\ndicom_files\t{}\nvoxel_bytes\t{}\ntotal_bytes\t{}\n",
        s.file_count, s.dicom_files, s.voxel_bytes, s.total_bytes
    )
}

/// Scans `input` and writes `results.tsv` into `output`.
pub fn run(input: &Path, output: &Path) -> std::io::Result<ImgStats> {
    let s = scan(input)?;
    std::fs::create_dir_all(output)?;
    std::fs::write(output.join(RESULTS_FILE), results_tsv(&s))?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chips_core::analysis::parse_results;
    use chips_core::dicom::MetaValue;

    #[test]
    fn counts_plain_files() {
        let d = tempfile::tempdir().unwrap();
        let input = d.path().join("in");
        std::fs::create_dir_all(input.join("sub")).unwrap();
        std::fs::write(input.join("a.txt"), b"abc").unwrap();
        std::fs::write(input.join("sub/b.bin"), [0u8; 10]).unwrap();
        let out = d.path().join("out");
        let s = run(&input, &out).unwrap();
        assert_eq!((s.file_count, s.total_bytes, s.voxel_bytes), (2, 13, 0));
        let p = parse_results(&std::fs::read_to_string(out.join(RESULTS_FILE)).unwrap());
        assert_eq!(p.entries["file_count"], MetaValue::Real(2.0));
        assert_eq!(p.warnings, 0);
    }
}
