//! The simulated PACS corpus: DICOM files on disk plus a JSON-lines manifest
//! (`manifest.jsonl`, one study per line) describing study → series →
//! instance files. Instance paths are relative to the corpus root and listed
//! in ordinal order.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PacsError;
use crate::dicom::{serialize_dataset, tags, DicomDataset, DicomElement, Vr};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSeries {
    pub series_uid: String,
    pub modality: String,
    pub instances: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStudy {
    pub study_uid: String,
    pub patient_id: String,
    pub patient_sex: String,
    pub patient_age: String,
    pub study_date: String,
    pub study_description: String,
    pub series: Vec<CorpusSeries>,
}

impl CorpusStudy {
    pub fn instance_count(&self) -> usize {
        self.series.iter().map(|s| s.instances.len()).sum()
    }
}

/// One instance as served by retrieve: series UID, 1-based ordinal, file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceRef {
    pub series_uid: String,
    pub ordinal: u32,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    studies: Vec<CorpusStudy>,
}

impl Corpus {
    pub fn load(root: impl Into<PathBuf>) -> Result<Self, PacsError> {
        let root = root.into();
        let file = fs::File::open(root.join(MANIFEST_FILE))
            .map_err(|e| PacsError::Corpus(format!("{}: {e}", root.join(MANIFEST_FILE).display())))?;
        let mut studies = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PacsError::Corpus(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let study: CorpusStudy =
                serde_json::from_str(&line).map_err(|e| PacsError::Corpus(format!("manifest line {}: {e}", i + 1)))?;
            for s in &study.series {
                if s.instances.is_empty() {
                    return Err(PacsError::Corpus(format!(
                        "series {} of study {} has no instances",
                        s.series_uid, study.study_uid
                    )));
                }
            }
            if studies.iter().any(|o: &CorpusStudy| o.study_uid == study.study_uid) {
                return Err(PacsError::Corpus(format!("duplicate study {}", study.study_uid)));
            }
            studies.push(study);
        }
        Ok(Self { root, studies })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn studies(&self) -> &[CorpusStudy] {
        &self.studies
    }

    pub fn study(&self, uid: &str) -> Option<&CorpusStudy> {
        self.studies.iter().find(|s| s.study_uid == uid)
    }

    /// Every instance of the study, series in manifest order, each exactly once.
    pub fn instances(&self, uid: &str) -> Result<Vec<InstanceRef>, PacsError> {
        let study = self
            .study(uid)
            .ok_or_else(|| PacsError::UnknownStudy(uid.to_string()))?;
        Ok(study
            .series
            .iter()
            .flat_map(|s| {
                s.instances.iter().enumerate().map(|(i, p)| InstanceRef {
                    series_uid: s.series_uid.clone(),
                    ordinal: i as u32 + 1,
                    path: self.root.join(p),
                })
            })
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub studies: usize,
    pub series_per_study: usize,
    pub instances_per_series: usize,
    pub seed: u64,
    /// Modalities assigned to studies round-robin.
    pub modalities: Vec<String>,
    /// Side length of the square placeholder pixel matrix (16-bit voxels).
    pub matrix: u16,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            studies: 3,
            series_per_study: 2,
            instances_per_series: 3,
            seed: 7,
            modalities: vec!["MR".into(), "CT".into(), "MR".into()],
            matrix: 16,
        }
    }
}

/// Identifying attributes generated for one synthetic patient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticPhi {
    pub patient_name: String,
    pub patient_id: String,
    pub birth_date: String,
    pub address: String,
    pub referring_physician: String,
    pub institution: String,
    pub accession_number: String,
    pub other_patient_ids: String,
}

impl SyntheticPhi {
    pub fn values(&self) -> [&str; 8] {
        [
            &self.patient_name,
            &self.patient_id,
            &self.birth_date,
            &self.address,
            &self.referring_physician,
            &self.institution,
            &self.accession_number,
            &self.other_patient_ids,
        ]
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let word = |rng: &mut dyn rand::RngCore, n: usize| -> String {
            (0..n).map(|_| (b'A' + rng.random_range(0..26u8)) as char).collect()
        };
        let digits = |rng: &mut dyn rand::RngCore, n: usize| -> String {
            (0..n).map(|_| (b'0' + rng.random_range(0..10u8)) as char).collect()
        };
        let year = rng.random_range(1930..2006);
        let month = rng.random_range(1..=12);
        let day = rng.random_range(1..=28);
        Self {
            patient_name: format!("{}^{}", word(rng, 9), word(rng, 7)),
            patient_id: format!("MRN{}", digits(rng, 9)),
            birth_date: format!("{year:04}{month:02}{day:02}"),
            address: format!("{} {} STREET {}", digits(rng, 4), word(rng, 8), word(rng, 6)),
            referring_physician: format!("{}^{}", word(rng, 10), word(rng, 6)),
            institution: format!("{} {} HOSPITAL", word(rng, 8), word(rng, 5)),
            accession_number: format!("ACC{}", digits(rng, 10)),
            other_patient_ids: format!("OID{}", digits(rng, 11)),
        }
    }
}

/// Patient-level and study-level values for a synthetic study.
#[derive(Clone, Debug)]
pub struct StudyProfile {
    pub study_uid: String,
    pub sex: String,
    pub age: String,
    pub study_date: String,
    pub description: String,
    pub phi: SyntheticPhi,
}

fn sop_class(modality: &str) -> &'static str {
    match modality {
        "CT" => "1.2.840.10008.5.1.4.1.1.2",
        _ => "1.2.840.10008.5.1.4.1.1.4",
    }
}

/// Builds one synthetic instance with identifying and acquisition attributes
/// and a placeholder pixel block.
pub fn synth_instance(
    profile: &StudyProfile,
    series_uid: &str,
    series_number: usize,
    modality: &str,
    ordinal: usize,
    matrix: u16,
    rng: &mut impl Rng,
) -> DicomDataset {
    let mut ds = DicomDataset::new();
    let phi = &profile.phi;
    ds.put_text(tags::SOP_CLASS_UID, Vr::UI, sop_class(modality));
    ds.put_text(tags::SOP_INSTANCE_UID, Vr::UI, &format!("{series_uid}.{ordinal}"));
    ds.put_text(tags::STUDY_DATE, Vr::DA, &profile.study_date);
    ds.put_text(tags::ACCESSION_NUMBER, Vr::SH, &phi.accession_number);
    ds.put_text(tags::MODALITY, Vr::CS, modality);
    ds.put_text(tags::INSTITUTION_NAME, Vr::LO, &phi.institution);
    ds.put_text(tags::REFERRING_PHYSICIAN_NAME, Vr::PN, &phi.referring_physician);
    ds.put_text(tags::STUDY_DESCRIPTION, Vr::LO, &profile.description);
    let series_desc = if modality == "MR" { "T1 MPRAGE" } else { "AXIAL HEAD" };
    ds.put_text(tags::SERIES_DESCRIPTION, Vr::LO, series_desc);
    ds.put_text(tags::PATIENT_NAME, Vr::PN, &phi.patient_name);
    ds.put_text(tags::PATIENT_ID, Vr::LO, &phi.patient_id);
    ds.put_text(tags::PATIENT_BIRTH_DATE, Vr::DA, &phi.birth_date);
    ds.put_text(tags::PATIENT_SEX, Vr::CS, &profile.sex);
    ds.put_text(tags::OTHER_PATIENT_IDS, Vr::LO, &phi.other_patient_ids);
    ds.put_text(tags::PATIENT_AGE, Vr::AS, &profile.age);
    ds.put_text(tags::PATIENT_ADDRESS, Vr::LO, &phi.address);
    if modality == "MR" {
        ds.put_text(tags::REPETITION_TIME, Vr::DS, "2300");
        ds.put_text(tags::ECHO_TIME, Vr::DS, "2.98");
    }
    ds.put_text(tags::STUDY_INSTANCE_UID, Vr::UI, &profile.study_uid);
    ds.put_text(tags::SERIES_INSTANCE_UID, Vr::UI, series_uid);
    ds.put_text(tags::SERIES_NUMBER, Vr::IS, &series_number.to_string());
    ds.put_text(tags::INSTANCE_NUMBER, Vr::IS, &ordinal.to_string());
    ds.insert(DicomElement::u16s(tags::ROWS, &[matrix]));
    ds.insert(DicomElement::u16s(tags::COLUMNS, &[matrix]));
    ds.insert(DicomElement::u16s(tags::BITS_ALLOCATED, &[16]));
    let voxels = matrix as usize * matrix as usize * 2;
    let pixels: Vec<u8> = (0..voxels).map(|_| rng.random()).collect();
    ds.insert(DicomElement::from_bytes(tags::PIXEL_DATA, Vr::OW, pixels));
    ds
}

/// Writes a synthetic corpus under `root` and returns it loaded.
pub fn build_corpus(root: &Path, config: &CorpusConfig) -> Result<Corpus, PacsError> {
    let io = |e: std::io::Error| PacsError::Corpus(e.to_string());
    fs::create_dir_all(root).map_err(io)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut manifest = fs::File::create(root.join(MANIFEST_FILE)).map_err(io)?;
    let uid_root = format!("1.2.826.0.1.3680043.10.1137.{}", config.seed);
    let descriptions = ["BRAIN MRI W/O CONTRAST", "HEAD CT", "FETAL MRI", "PEDIATRIC BRAIN"];

    for si in 0..config.studies {
        let modality = config
            .modalities
            .get(si % config.modalities.len().max(1))
            .cloned()
            .unwrap_or_else(|| "MR".into());
        let profile = StudyProfile {
            study_uid: format!("{uid_root}.{}", si + 1),
            sex: if si % 2 == 0 { "F" } else { "M" }.to_string(),
            age: format!("{:03}Y", rng.random_range(1..90)),
            study_date: format!(
                "20{:02}{:02}{:02}",
                rng.random_range(10..25),
                rng.random_range(1..=12),
                rng.random_range(1..=28)
            ),
            description: descriptions[si % descriptions.len()].to_string(),
            phi: SyntheticPhi::random(&mut rng),
        };
        let mut series = Vec::new();
        for se in 0..config.series_per_study {
            let series_uid = format!("{}.{}", profile.study_uid, se + 1);
            let mut instances = Vec::new();
            for inst in 0..config.instances_per_series {
                let ds = synth_instance(
                    &profile,
                    &series_uid,
                    se + 1,
                    &modality,
                    inst + 1,
                    config.matrix,
                    &mut rng,
                );
                let rel = format!("study{:04}/series{:02}/{:04}.dcm", si + 1, se + 1, inst + 1);
                let path = root.join(&rel);
                fs::create_dir_all(path.parent().expect("has parent")).map_err(io)?;
                let bytes = serialize_dataset(&ds).map_err(|e| PacsError::Corpus(e.to_string()))?;
                fs::write(&path, bytes).map_err(io)?;
                instances.push(rel);
            }
            series.push(CorpusSeries {
                series_uid,
                modality: modality.clone(),
                instances,
            });
        }
        let study = CorpusStudy {
            study_uid: profile.study_uid.clone(),
            patient_id: profile.phi.patient_id.clone(),
            patient_sex: profile.sex.clone(),
            patient_age: profile.age.clone(),
            study_date: profile.study_date.clone(),
            study_description: profile.description.clone(),
            series,
        };
        let line = serde_json::to_string(&study).map_err(|e| PacsError::Corpus(e.to_string()))?;
        writeln!(manifest, "{line}").map_err(io)?;
    }
    manifest.flush().map_err(io)?;
    Corpus::load(root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::parse_dataset;

    #[test]
    fn builds_default_shape() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = build_corpus(dir.path(), &CorpusConfig::default()).unwrap();
        assert_eq!(corpus.studies().len(), 3);
        for s in corpus.studies() {
            assert_eq!(s.series.len(), 2);
            assert_eq!(s.instance_count(), 6);
        }
        let uid = corpus.studies()[0].study_uid.clone();
        let inst = corpus.instances(&uid).unwrap();
        assert_eq!(inst.len(), 6);
        let ds = parse_dataset(&fs::read(&inst[0].path).unwrap()).unwrap();
        assert_eq!(ds.text(tags::STUDY_INSTANCE_UID).unwrap(), uid);
        assert_eq!(ds.text(tags::PATIENT_SEX).as_deref(), Some("F"));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        build_corpus(a.path(), &CorpusConfig::default()).unwrap();
        build_corpus(b.path(), &CorpusConfig::default()).unwrap();
        let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        let f = "study0002/series01/0003.dcm";
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
    }

    #[test]
    fn unknown_study() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = build_corpus(dir.path(), &CorpusConfig::default()).unwrap();
        assert!(matches!(corpus.instances("1.2.3"), Err(PacsError::UnknownStudy(_))));
    }

    #[test]
    fn rejects_empty_series() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_FILE),
            r#"{"study_uid":"1","patient_id":"p","patient_sex":"F","patient_age":"001Y","study_date":"20200101","study_description":"d","series":[{"series_uid":"1.1","modality":"MR","instances":[]}]}"#,
        )
        .unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(PacsError::Corpus(_))));
    }
}
