//! Data-node side of a retrieve: anonymize each received instance in memory
//! and only then write it under `dest/<study>/<series>/<ordinal>.dcm`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frame::InstanceFrame;
use crate::dicom::{
    anonymize_dataset, extract_metadata, parse_dataset, serialize_dataset, tags, AnonymizationPolicy,
    AnonymizationRecord, DicomDataset, MetadataRecord, Vr,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceFailure {
    /// Frame position in the stream.
    pub index: usize,
    pub ordinal: Option<u32>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullReceipt {
    pub anon_study_uid: String,
    pub study_dir: String,
    pub instances_written: usize,
    pub series_count: usize,
    /// True when the stream reached its end marker.
    pub complete: bool,
    pub failures: Vec<InstanceFailure>,
    pub anonymization: Vec<AnonymizationRecord>,
    /// One record per series, from the first instance received.
    pub metadata: Vec<MetadataRecord>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PullError {
    #[error("study {0} was already pulled into this destination")]
    DuplicatePull(String),
    #[error("partial pull: {} instance(s) written, {} failure(s)", .0.instances_written, .0.failures.len())]
    PartialPull(Box<PullReceipt>),
    #[error("pull i/o: {0}")]
    Io(String),
    #[error("{0}")]
    Policy(String),
}

/// The directory name a study UID maps to under `policy`.
pub fn anonymized_study_uid(policy: &AnonymizationPolicy, study_uid: &str) -> Result<String, PullError> {
    let mut probe = DicomDataset::new();
    probe.put_text(tags::STUDY_INSTANCE_UID, Vr::UI, study_uid);
    let (out, _) = anonymize_dataset(&probe, policy).map_err(|e| PullError::Policy(e.to_string()))?;
    out.text(tags::STUDY_INSTANCE_UID)
        .ok_or_else(|| PullError::Policy("policy removes StudyInstanceUID".into()))
}

fn safe_segment(s: &str) -> bool {
    !s.is_empty() && s.len() <= 64 && s.bytes().all(|b| b.is_ascii_digit() || b == b'.') && s != "." && s != ".."
}

pub struct PullWriter {
    policy: AnonymizationPolicy,
    anon_study: String,
    study_dir: PathBuf,
    seen: BTreeSet<(String, u32)>,
    series_meta: BTreeMap<String, MetadataRecord>,
    series_order: Vec<String>,
    anonymization: Vec<AnonymizationRecord>,
    failures: Vec<InstanceFailure>,
    written: usize,
    index: usize,
}

impl PullWriter {
    /// Claims `dest/<anonymized study uid>`. A second claim on the same
    /// directory fails with [`PullError::DuplicatePull`].
    pub fn begin(dest: &Path, study_uid: &str, policy: AnonymizationPolicy) -> Result<Self, PullError> {
        let anon_study = anonymized_study_uid(&policy, study_uid)?;
        if !safe_segment(&anon_study) {
            return Err(PullError::Policy(format!(
                "study uid `{anon_study}` is not a safe directory name"
            )));
        }
        fs::create_dir_all(dest).map_err(|e| PullError::Io(e.to_string()))?;
        let study_dir = dest.join(&anon_study);
        match fs::create_dir(&study_dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(PullError::DuplicatePull(anon_study));
            }
            Err(e) => return Err(PullError::Io(e.to_string())),
        }
        Ok(Self {
            policy,
            anon_study,
            study_dir,
            seen: BTreeSet::new(),
            series_meta: BTreeMap::new(),
            series_order: Vec::new(),
            anonymization: Vec::new(),
            failures: Vec::new(),
            written: 0,
            index: 0,
        })
    }

    pub fn study_dir(&self) -> &Path {
        &self.study_dir
    }

    /// Records a frame that failed its integrity check.
    pub fn reject(&mut self, reason: impl Into<String>) {
        self.failures.push(InstanceFailure {
            index: self.index,
            ordinal: None,
            reason: reason.into(),
        });
        self.index += 1;
    }

    /// Anonymizes and persists one received instance.
    pub fn accept(&mut self, frame: InstanceFrame) {
        let index = self.index;
        self.index += 1;
        let ordinal = frame.ordinal;
        if let Err(reason) = self.store(frame) {
            self.failures.push(InstanceFailure {
                index,
                ordinal: Some(ordinal),
                reason,
            });
        }
    }

    fn store(&mut self, frame: InstanceFrame) -> Result<(), String> {
        let ds = parse_dataset(&frame.dataset).map_err(|e| format!("parse: {e}"))?;
        let (anon, record) = anonymize_dataset(&ds, &self.policy).map_err(|e| e.to_string())?;
        drop(ds);
        if anon.text(tags::STUDY_INSTANCE_UID).as_deref() != Some(self.anon_study.as_str()) {
            return Err("instance belongs to a different study".into());
        }
        let series = anon
            .text(tags::SERIES_INSTANCE_UID)
            .filter(|s| safe_segment(s))
            .ok_or("missing or unusable SeriesInstanceUID")?;
        if !self.seen.insert((series.clone(), frame.ordinal)) {
            return Err(format!("duplicate instance {series}/{}", frame.ordinal));
        }
        let bytes = serialize_dataset(&anon).map_err(|e| format!("serialize: {e}"))?;
        let dir = self.study_dir.join(&series);
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let name = format!("{}.dcm", frame.ordinal);
        let tmp = dir.join(format!(".{name}.part"));
        let mut f = fs::File::create(&tmp).map_err(|e| e.to_string())?;
        f.write_all(&bytes)
            .and_then(|_| f.sync_all())
            .map_err(|e| e.to_string())?;
        fs::rename(&tmp, dir.join(&name)).map_err(|e| e.to_string())?;
        if !self.series_meta.contains_key(&series) {
            self.series_order.push(series.clone());
            self.series_meta.insert(series, extract_metadata(&anon));
        }
        self.anonymization.push(record);
        self.written += 1;
        Ok(())
    }

    /// Closes the pull. Anything short of a complete, failure-free stream is
    /// a [`PullError::PartialPull`] that still carries what was written.
    pub fn finish(mut self, complete: bool) -> Result<PullReceipt, PullError> {
        let metadata = self
            .series_order
            .iter()
            .map(|s| self.series_meta.remove(s).unwrap())
            .collect::<Vec<_>>();
        let receipt = PullReceipt {
            anon_study_uid: self.anon_study,
            study_dir: self.study_dir.display().to_string(),
            instances_written: self.written,
            series_count: metadata.len(),
            complete,
            failures: self.failures,
            anonymization: self.anonymization,
            metadata,
        };
        if complete && receipt.failures.is_empty() {
            Ok(receipt)
        } else {
            Err(PullError::PartialPull(Box::new(receipt)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pacs::corpus::{synth_instance, StudyProfile, SyntheticPhi};
    use rand::SeedableRng;

    fn frames(n_series: u32, n_inst: u32) -> (String, Vec<InstanceFrame>, SyntheticPhi) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let phi = SyntheticPhi::random(&mut rng);
        let study = "1.2.3.4".to_string();
        let mut out = Vec::new();
        for s in 0..n_series {
            let series = format!("1.2.3.4.{}", s + 1);
            for i in 1..=n_inst {
                let profile = StudyProfile {
                    study_uid: study.clone(),
                    study_date: "20200101".into(),
                    description: "test".into(),
                    sex: "F".into(),
                    age: "041Y".into(),
                    phi: phi.clone(),
                };
                let ds = synth_instance(&profile, &series, s as usize + 1, "MR", i as usize, 4, &mut rng);
                out.push(InstanceFrame {
                    series_uid: series.clone(),
                    ordinal: i,
                    dataset: serialize_dataset(&ds).unwrap(),
                });
            }
        }
        (study, out, phi)
    }

    #[test]
    fn writes_anonymized_layout() {
        let (study, fr, phi) = frames(2, 3);
        let dest = tempfile::tempdir().unwrap();
        let policy = AnonymizationPolicy::default_policy();
        let mut w = PullWriter::begin(dest.path(), &study, policy.clone()).unwrap();
        for f in fr {
            w.accept(f);
        }
        let r = w.finish(true).unwrap();
        assert_eq!(r.instances_written, 6);
        assert_eq!(r.metadata.len(), 2);
        assert_eq!(r.anon_study_uid, policy.pseudonym_uid(&study));
        let series_dir = dest
            .path()
            .join(&r.anon_study_uid)
            .join(policy.pseudonym_uid("1.2.3.4.1"));
        assert!(series_dir.join("1.dcm").is_file());
        for entry in walkdir::WalkDir::new(dest.path()) {
            let entry = entry.unwrap();
            if entry.file_type().is_file() {
                let bytes = fs::read(entry.path()).unwrap();
                for v in phi.values() {
                    assert!(!bytes.windows(v.len()).any(|w| w == v.as_bytes()), "{v}");
                }
            }
        }
    }

    #[test]
    fn second_pull_is_duplicate() {
        let (study, _, _) = frames(1, 1);
        let dest = tempfile::tempdir().unwrap();
        let policy = AnonymizationPolicy::default_policy();
        let _w = PullWriter::begin(dest.path(), &study, policy.clone()).unwrap();
        assert!(matches!(
            PullWriter::begin(dest.path(), &study, policy),
            Err(PullError::DuplicatePull(_))
        ));
    }

    #[test]
    fn interrupted_stream_is_partial() {
        let (study, fr, _) = frames(2, 3);
        let dest = tempfile::tempdir().unwrap();
        let mut w = PullWriter::begin(dest.path(), &study, AnonymizationPolicy::default_policy()).unwrap();
        for f in fr.into_iter().take(3) {
            w.accept(f);
        }
        match w.finish(false) {
            Err(PullError::PartialPull(r)) => {
                assert_eq!(r.instances_written, 3);
                assert!(!r.complete);
            }
            other => panic!("{other:?}"),
        }
    }
}
