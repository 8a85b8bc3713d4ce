//! Small built-in data dictionary: the attributes this system produces,
//! anonymizes, queries or indexes. Tags outside it are still parsed; they
//! just render as `(GGGG,EEEE)` instead of a keyword.

use super::{DicomTag, Vr};

pub struct DictEntry {
    pub tag: DicomTag,
    pub keyword: &'static str,
    pub vr: Vr,
}

macro_rules! dict {
    ($(($g:expr, $e:expr, $kw:literal, $vr:ident)),* $(,)?) => {
        &[$(DictEntry { tag: DicomTag::new($g, $e), keyword: $kw, vr: Vr::$vr }),*]
    };
}

// Sorted by tag; `lookup` relies on it.
static ENTRIES: &[DictEntry] = dict![
    (0x0002, 0x0000, "FileMetaInformationGroupLength", UL),
    (0x0002, 0x0001, "FileMetaInformationVersion", OB),
    (0x0002, 0x0002, "MediaStorageSOPClassUID", UI),
    (0x0002, 0x0003, "MediaStorageSOPInstanceUID", UI),
    (0x0002, 0x0010, "TransferSyntaxUID", UI),
    (0x0002, 0x0012, "ImplementationClassUID", UI),
    (0x0008, 0x0005, "SpecificCharacterSet", CS),
    (0x0008, 0x0008, "ImageType", CS),
    (0x0008, 0x0016, "SOPClassUID", UI),
    (0x0008, 0x0018, "SOPInstanceUID", UI),
    (0x0008, 0x0020, "StudyDate", DA),
    (0x0008, 0x0021, "SeriesDate", DA),
    (0x0008, 0x0030, "StudyTime", TM),
    (0x0008, 0x0031, "SeriesTime", TM),
    (0x0008, 0x0050, "AccessionNumber", SH),
    (0x0008, 0x0060, "Modality", CS),
    (0x0008, 0x0070, "Manufacturer", LO),
    (0x0008, 0x0080, "InstitutionName", LO),
    (0x0008, 0x0081, "InstitutionAddress", ST),
    (0x0008, 0x0090, "ReferringPhysicianName", PN),
    (0x0008, 0x1030, "StudyDescription", LO),
    (0x0008, 0x103E, "SeriesDescription", LO),
    (0x0008, 0x1090, "ManufacturerModelName", LO),
    (0x0008, 0x1140, "ReferencedImageSequence", SQ),
    (0x0008, 0x1150, "ReferencedSOPClassUID", UI),
    (0x0008, 0x1155, "ReferencedSOPInstanceUID", UI),
    (0x0010, 0x0010, "PatientName", PN),
    (0x0010, 0x0020, "PatientID", LO),
    (0x0010, 0x0030, "PatientBirthDate", DA),
    (0x0010, 0x0040, "PatientSex", CS),
    (0x0010, 0x1000, "OtherPatientIDs", LO),
    (0x0010, 0x1010, "PatientAge", AS),
    (0x0010, 0x1020, "PatientSize", DS),
    (0x0010, 0x1030, "PatientWeight", DS),
    (0x0010, 0x1040, "PatientAddress", LO),
    (0x0018, 0x0015, "BodyPartExamined", CS),
    (0x0018, 0x0020, "ScanningSequence", CS),
    (0x0018, 0x0050, "SliceThickness", DS),
    (0x0018, 0x0080, "RepetitionTime", DS),
    (0x0018, 0x0081, "EchoTime", DS),
    (0x0018, 0x0082, "InversionTime", DS),
    (0x0018, 0x0087, "MagneticFieldStrength", DS),
    (0x0018, 0x1030, "ProtocolName", LO),
    (0x0018, 0x1314, "FlipAngle", DS),
    (0x0020, 0x000D, "StudyInstanceUID", UI),
    (0x0020, 0x000E, "SeriesInstanceUID", UI),
    (0x0020, 0x0010, "StudyID", SH),
    (0x0020, 0x0011, "SeriesNumber", IS),
    (0x0020, 0x0013, "InstanceNumber", IS),
    (0x0020, 0x0032, "ImagePositionPatient", DS),
    (0x0020, 0x0037, "ImageOrientationPatient", DS),
    (0x0020, 0x0052, "FrameOfReferenceUID", UI),
    (0x0028, 0x0002, "SamplesPerPixel", US),
    (0x0028, 0x0004, "PhotometricInterpretation", CS),
    (0x0028, 0x0010, "Rows", US),
    (0x0028, 0x0011, "Columns", US),
    (0x0028, 0x0030, "PixelSpacing", DS),
    (0x0028, 0x0100, "BitsAllocated", US),
    (0x0028, 0x0101, "BitsStored", US),
    (0x0028, 0x0102, "HighBit", US),
    (0x0028, 0x0103, "PixelRepresentation", US),
    (0x0040, 0x0275, "RequestAttributesSequence", SQ),
    (0x7FE0, 0x0010, "PixelData", OW),
];

pub fn lookup(tag: DicomTag) -> Option<&'static DictEntry> {
    ENTRIES.binary_search_by(|e| e.tag.cmp(&tag)).ok().map(|i| &ENTRIES[i])
}

pub fn by_keyword(keyword: &str) -> Option<&'static DictEntry> {
    ENTRIES.iter().find(|e| e.keyword == keyword)
}

pub fn entries() -> &'static [DictEntry] {
    ENTRIES
}

/// Well-known tags used across the crate.
pub mod tags {
    use super::DicomTag;

    pub const TRANSFER_SYNTAX_UID: DicomTag = DicomTag::new(0x0002, 0x0010);
    pub const FILE_META_GROUP_LENGTH: DicomTag = DicomTag::new(0x0002, 0x0000);
    pub const SOP_CLASS_UID: DicomTag = DicomTag::new(0x0008, 0x0016);
    pub const SOP_INSTANCE_UID: DicomTag = DicomTag::new(0x0008, 0x0018);
    pub const STUDY_DATE: DicomTag = DicomTag::new(0x0008, 0x0020);
    pub const ACCESSION_NUMBER: DicomTag = DicomTag::new(0x0008, 0x0050);
    pub const MODALITY: DicomTag = DicomTag::new(0x0008, 0x0060);
    pub const INSTITUTION_NAME: DicomTag = DicomTag::new(0x0008, 0x0080);
    pub const REFERRING_PHYSICIAN_NAME: DicomTag = DicomTag::new(0x0008, 0x0090);
    pub const STUDY_DESCRIPTION: DicomTag = DicomTag::new(0x0008, 0x1030);
    pub const SERIES_DESCRIPTION: DicomTag = DicomTag::new(0x0008, 0x103E);
    pub const REFERENCED_IMAGE_SEQUENCE: DicomTag = DicomTag::new(0x0008, 0x1140);
    pub const REFERENCED_SOP_CLASS_UID: DicomTag = DicomTag::new(0x0008, 0x1150);
    pub const REFERENCED_SOP_INSTANCE_UID: DicomTag = DicomTag::new(0x0008, 0x1155);
    pub const PATIENT_NAME: DicomTag = DicomTag::new(0x0010, 0x0010);
    pub const PATIENT_ID: DicomTag = DicomTag::new(0x0010, 0x0020);
    pub const PATIENT_BIRTH_DATE: DicomTag = DicomTag::new(0x0010, 0x0030);
    pub const PATIENT_SEX: DicomTag = DicomTag::new(0x0010, 0x0040);
    pub const OTHER_PATIENT_IDS: DicomTag = DicomTag::new(0x0010, 0x1000);
    pub const PATIENT_AGE: DicomTag = DicomTag::new(0x0010, 0x1010);
    pub const PATIENT_ADDRESS: DicomTag = DicomTag::new(0x0010, 0x1040);
    pub const ECHO_TIME: DicomTag = DicomTag::new(0x0018, 0x0081);
    pub const REPETITION_TIME: DicomTag = DicomTag::new(0x0018, 0x0080);
    pub const STUDY_INSTANCE_UID: DicomTag = DicomTag::new(0x0020, 0x000D);
    pub const SERIES_INSTANCE_UID: DicomTag = DicomTag::new(0x0020, 0x000E);
    pub const SERIES_NUMBER: DicomTag = DicomTag::new(0x0020, 0x0011);
    pub const INSTANCE_NUMBER: DicomTag = DicomTag::new(0x0020, 0x0013);
    pub const ROWS: DicomTag = DicomTag::new(0x0028, 0x0010);
    pub const COLUMNS: DicomTag = DicomTag::new(0x0028, 0x0011);
    pub const BITS_ALLOCATED: DicomTag = DicomTag::new(0x0028, 0x0100);
    pub const PIXEL_DATA: DicomTag = DicomTag::new(0x7FE0, 0x0010);
}
