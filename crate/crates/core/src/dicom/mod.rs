//! DICOM datasets: explicit VR little endian codec, policy-driven
//! anonymization, and tag extraction into metadata records.

mod anonymize;
mod codec;
pub mod dictionary;
mod element;
mod metadata;
mod tag;
mod vr;

pub use anonymize::{
    anonymize_dataset, Action, AnonError, AnonymizationMapping, AnonymizationPolicy, AnonymizationRecord,
    DEFAULT_POLICY_TEXT, PSEUDONYM_UID_ROOT,
};
pub use codec::{parse_dataset, serialize_dataset, DicomError, MAGIC, PREAMBLE_LEN};
pub use dictionary::tags;
pub use element::{DecodedValue, DicomDataset, DicomElement, ElementValue, EXPLICIT_VR_LITTLE_ENDIAN};
pub use metadata::{extract_metadata, MetaSource, MetaValue, MetadataRecord, RAW_SKIPPED_SUFFIX};
pub use tag::{DicomTag, TagParseError};
pub use vr::{Vr, VrKind};
