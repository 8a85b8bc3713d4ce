use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{tags, DecodedValue, DicomDataset, VrKind};

/// Suffix appended to the key of an element whose value could not be decoded.
/// The entry value is the element's byte length.
pub const RAW_SKIPPED_SUFFIX: &str = ".raw_skipped";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Text(String),
    Integer(i64),
    Real(f64),
}

impl MetaValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            MetaValue::Integer(i) => Some(*i as f64),
            MetaValue::Real(r) => Some(*r),
            MetaValue::Text(_) => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            MetaValue::Text(t) => Some(t),
            _ => None,
        }
    }
}

impl fmt::Display for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaValue::Text(t) => f.write_str(t),
            MetaValue::Integer(i) => write!(f, "{i}"),
            MetaValue::Real(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MetaSource {
    Dicom,
    Analysis,
}

/// Flattened key/value projection attached to an image record (a study).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    /// Assigned by the index on insert; zero until then.
    #[serde(default)]
    pub id: u64,
    pub image_record_id: String,
    pub source: MetaSource,
    /// Series UID for DICOM records, plugin-instance id for analysis records.
    pub provenance: String,
    pub entries: BTreeMap<String, MetaValue>,
}

impl MetadataRecord {
    pub fn new(image_record_id: impl Into<String>, source: MetaSource, provenance: impl Into<String>) -> Self {
        Self {
            id: 0,
            image_record_id: image_record_id.into(),
            source,
            provenance: provenance.into(),
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&MetaValue> {
        self.entries.get(key)
    }
}

/// One entry per non-binary, non-sequence element, keyed by the attribute's
/// keyword. The image record is the study UID; provenance is the series UID.
pub fn extract_metadata(ds: &DicomDataset) -> MetadataRecord {
    let image = ds
        .text(tags::STUDY_INSTANCE_UID)
        .unwrap_or_else(|| "unknown".to_string());
    let series = ds.text(tags::SERIES_INSTANCE_UID).unwrap_or_default();
    let mut record = MetadataRecord::new(image, MetaSource::Dicom, series);

    for element in ds.iter() {
        if matches!(element.vr.kind(), VrKind::Bytes | VrKind::Sequence) {
            continue;
        }
        let key = element.tag.display_name();
        let empty_text = element.vr.is_textual() && element.as_text().is_some_and(|t| t.is_empty());
        let value = if empty_text {
            Some(MetaValue::Text(String::new()))
        } else {
            match element.decode() {
                Ok(DecodedValue::Text(t)) => Some(MetaValue::Text(t)),
                Ok(DecodedValue::Integers(v)) if v.len() == 1 => Some(MetaValue::Integer(v[0])),
                Ok(DecodedValue::Reals(v)) if v.len() == 1 => Some(MetaValue::Real(v[0])),
                Ok(DecodedValue::Integers(v)) => Some(MetaValue::Text(join(&v))),
                Ok(DecodedValue::Reals(v)) => Some(MetaValue::Text(join(&v))),
                Ok(_) | Err(_) => None,
            }
        };
        match value {
            Some(v) => {
                record.entries.insert(key, v);
            }
            None => {
                record.entries.insert(
                    format!("{key}{RAW_SKIPPED_SUFFIX}"),
                    MetaValue::Integer(element.length() as i64),
                );
            }
        }
    }
    record
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join("\\")
}
