//! Explicit VR little endian reader and writer.
//!
//! Element layout: tag group (u16 LE), tag element (u16 LE), two ASCII VR
//! bytes, then either a u16 length (short VRs) or two reserved zero bytes
//! followed by a u32 length (OB, OW, SQ, UN, UT). Sequence values hold items
//! `(FFFE,E000)` + u32 length + nested element stream, always with defined
//! lengths.

use super::element::EXPLICIT_VR_LITTLE_ENDIAN;
use super::{tags, DicomDataset, DicomElement, DicomTag, ElementValue, Vr};

pub const PREAMBLE_LEN: usize = 128;
pub const MAGIC: &[u8; 4] = b"DICM";
const ITEM_TAG: DicomTag = DicomTag::new(0xFFFE, 0xE000);
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const MAX_NESTING: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DicomError {
    #[error("input truncated at byte {offset}")]
    TruncatedInput { offset: usize },
    #[error("unsupported VR {code:?} at byte {offset}")]
    UnsupportedVr { offset: usize, code: String },
    #[error("unsupported transfer syntax `{0}`")]
    UnsupportedTransferSyntax(String),
    #[error("undefined-length encoding for {tag} is not supported")]
    UndefinedLengthSequence { tag: DicomTag },
    #[error("odd value length {length} for {tag}")]
    OddLengthValue { tag: DicomTag, length: usize },
    #[error("value of {tag} is {length} bytes, too long for its VR")]
    ValueTooLong { tag: DicomTag, length: usize },
    #[error("tag {tag} follows {previous}; elements must be strictly ascending")]
    OutOfOrderTag { previous: DicomTag, tag: DicomTag },
    #[error("malformed sequence at byte {offset}: {reason}")]
    MalformedSequence { offset: usize, reason: String },
    #[error("value of {tag} cannot be decoded for its VR")]
    Undecodable { tag: DicomTag },
}

/// Parses a `.dcm` byte stream. Accepts either preamble + `DICM` + file meta
/// group, or a bare element stream (headerless).
pub fn parse_dataset(bytes: &[u8]) -> Result<DicomDataset, DicomError> {
    if bytes.is_empty() {
        return Err(DicomError::TruncatedInput { offset: 0 });
    }
    let mut pos = 0;
    if bytes.len() >= PREAMBLE_LEN + 4 && &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] == MAGIC {
        pos = PREAMBLE_LEN + 4;
    }

    // File meta group (0002). Present after the magic; tolerated headerless too.
    let had_header = pos > 0;
    let mut transfer_syntax: Option<String> = None;
    let mut meta_seen = false;
    while bytes.len() >= pos + 2 && u16::from_le_bytes([bytes[pos], bytes[pos + 1]]) == 0x0002 {
        meta_seen = true;
        let (element, next) = read_element(bytes, pos, 0)?;
        if element.tag == tags::TRANSFER_SYNTAX_UID {
            transfer_syntax = element.as_text();
        }
        pos = next;
    }
    if had_header || meta_seen {
        match transfer_syntax {
            Some(ts) if ts == EXPLICIT_VR_LITTLE_ENDIAN => {}
            Some(ts) => return Err(DicomError::UnsupportedTransferSyntax(ts)),
            None => return Err(DicomError::UnsupportedTransferSyntax(String::new())),
        }
    }

    read_elements(bytes, pos, bytes.len(), 0)
}

fn read_elements(bytes: &[u8], mut pos: usize, end: usize, depth: usize) -> Result<DicomDataset, DicomError> {
    let mut ds = DicomDataset::new();
    let mut previous: Option<DicomTag> = None;
    while pos < end {
        let (element, next) = read_element(&bytes[..end], pos, depth)?;
        if let Some(prev) = previous {
            if element.tag <= prev {
                return Err(DicomError::OutOfOrderTag {
                    previous: prev,
                    tag: element.tag,
                });
            }
        }
        previous = Some(element.tag);
        ds.insert(element);
        pos = next;
    }
    Ok(ds)
}

fn take(bytes: &[u8], pos: usize, n: usize) -> Result<&[u8], DicomError> {
    bytes.get(pos..pos + n).ok_or(DicomError::TruncatedInput {
        offset: bytes.len().min(pos),
    })
}

fn read_u16(bytes: &[u8], pos: usize) -> Result<u16, DicomError> {
    let b = take(bytes, pos, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(bytes: &[u8], pos: usize) -> Result<u32, DicomError> {
    let b = take(bytes, pos, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_element(bytes: &[u8], pos: usize, depth: usize) -> Result<(DicomElement, usize), DicomError> {
    let tag = DicomTag::new(read_u16(bytes, pos)?, read_u16(bytes, pos + 2)?);
    if tag.is_item_marker() {
        return Err(DicomError::MalformedSequence {
            offset: pos,
            reason: format!("item marker {tag} outside a sequence"),
        });
    }
    let code = take(bytes, pos + 4, 2)?;
    let vr = Vr::from_code([code[0], code[1]]).ok_or_else(|| DicomError::UnsupportedVr {
        offset: pos + 4,
        code: String::from_utf8_lossy(code).into_owned(),
    })?;
    let (length, value_pos) = if vr.has_long_length() {
        (read_u32(bytes, pos + 8)?, pos + 12)
    } else {
        (read_u16(bytes, pos + 6)? as u32, pos + 8)
    };
    if length == UNDEFINED_LENGTH {
        return Err(DicomError::UndefinedLengthSequence { tag });
    }
    let length = length as usize;
    if length % 2 == 1 {
        return Err(DicomError::OddLengthValue { tag, length });
    }
    let raw = take(bytes, value_pos, length)?;
    let next = value_pos + length;
    let value = if vr == Vr::SQ {
        ElementValue::Sequence(read_items(bytes, value_pos, next, depth + 1)?)
    } else {
        ElementValue::Bytes(raw.to_vec())
    };
    Ok((DicomElement { tag, vr, value }, next))
}

fn read_items(bytes: &[u8], mut pos: usize, end: usize, depth: usize) -> Result<Vec<DicomDataset>, DicomError> {
    if depth > MAX_NESTING {
        return Err(DicomError::MalformedSequence {
            offset: pos,
            reason: "sequence nesting too deep".into(),
        });
    }
    let scope = &bytes[..end];
    let mut items = Vec::new();
    while pos < end {
        let tag = DicomTag::new(read_u16(scope, pos)?, read_u16(scope, pos + 2)?);
        if tag != ITEM_TAG {
            return Err(DicomError::MalformedSequence {
                offset: pos,
                reason: format!("expected item tag, found {tag}"),
            });
        }
        let length = read_u32(scope, pos + 4)?;
        if length == UNDEFINED_LENGTH {
            return Err(DicomError::UndefinedLengthSequence { tag });
        }
        let start = pos + 8;
        let item_end = start + length as usize;
        if item_end > end {
            return Err(DicomError::TruncatedInput { offset: end });
        }
        items.push(read_elements(bytes, start, item_end, depth)?);
        pos = item_end;
    }
    Ok(items)
}

/// Encodes `ds` as a `.dcm` file: zero preamble, `DICM`, a minimal file meta
/// group (group length + transfer syntax), then the element stream.
pub fn serialize_dataset(ds: &DicomDataset) -> Result<Vec<u8>, DicomError> {
    let mut out = Vec::with_capacity(PREAMBLE_LEN + 64 + ds.encoded_len());
    out.extend_from_slice(&[0u8; PREAMBLE_LEN]);
    out.extend_from_slice(MAGIC);

    let ts = DicomElement::text(tags::TRANSFER_SYNTAX_UID, Vr::UI, EXPLICIT_VR_LITTLE_ENDIAN);
    let mut meta_body = Vec::new();
    write_element(&mut meta_body, &ts)?;
    let group_len = DicomElement::u32s(tags::FILE_META_GROUP_LENGTH, &[meta_body.len() as u32]);
    write_element(&mut out, &group_len)?;
    out.extend_from_slice(&meta_body);

    write_elements(&mut out, ds)?;
    Ok(out)
}

fn write_elements(out: &mut Vec<u8>, ds: &DicomDataset) -> Result<(), DicomError> {
    for element in ds.iter() {
        write_element(out, element)?;
    }
    Ok(())
}

fn write_element(out: &mut Vec<u8>, element: &DicomElement) -> Result<(), DicomError> {
    let tag = element.tag;
    let length = element.length();
    if length % 2 == 1 {
        return Err(DicomError::OddLengthValue { tag, length });
    }
    out.extend_from_slice(&tag.group.to_le_bytes());
    out.extend_from_slice(&tag.element.to_le_bytes());
    out.extend_from_slice(element.vr.as_str().as_bytes());
    if element.vr.has_long_length() {
        if length >= UNDEFINED_LENGTH as usize {
            return Err(DicomError::ValueTooLong { tag, length });
        }
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(length as u32).to_le_bytes());
    } else {
        if length > u16::MAX as usize {
            return Err(DicomError::ValueTooLong { tag, length });
        }
        out.extend_from_slice(&(length as u16).to_le_bytes());
    }
    match &element.value {
        ElementValue::Bytes(b) => out.extend_from_slice(b),
        ElementValue::Sequence(items) => {
            for item in items {
                out.extend_from_slice(&ITEM_TAG.group.to_le_bytes());
                out.extend_from_slice(&ITEM_TAG.element.to_le_bytes());
                out.extend_from_slice(&(item.encoded_len() as u32).to_le_bytes());
                write_elements(out, item)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-encoded `(0010,0040) CS "M "`.
    const PATIENT_SEX_M: [u8; 10] = [0x10, 0x00, 0x40, 0x00, b'C', b'S', 0x02, 0x00, b'M', b' '];

    fn minimal_meta() -> Vec<u8> {
        let mut v = vec![0u8; 128];
        v.extend_from_slice(b"DICM");
        // (0002,0000) UL 4 -> 28
        v.extend_from_slice(&[0x02, 0x00, 0x00, 0x00, b'U', b'L', 0x04, 0x00, 28, 0, 0, 0]);
        // (0002,0010) UI 20 "1.2.840.10008.1.2.1\0"
        v.extend_from_slice(&[0x02, 0x00, 0x10, 0x00, b'U', b'I', 20, 0x00]);
        v.extend_from_slice(b"1.2.840.10008.1.2.1\0");
        v
    }

    #[test]
    fn parses_hand_encoded_headerless_element() {
        let ds = parse_dataset(&PATIENT_SEX_M).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.text(tags::PATIENT_SEX).as_deref(), Some("M"));
    }

    #[test]
    fn serializes_to_hand_encoded_bytes() {
        let mut ds = DicomDataset::new();
        ds.put_text(tags::PATIENT_SEX, Vr::CS, "M");
        let mut expected = minimal_meta();
        expected.extend_from_slice(&PATIENT_SEX_M);
        assert_eq!(serialize_dataset(&ds).unwrap(), expected);
    }

    #[test]
    fn empty_dataset_is_preamble_and_meta_only() {
        let bytes = serialize_dataset(&DicomDataset::new()).unwrap();
        assert_eq!(bytes, minimal_meta());
        assert_eq!(bytes.len(), 132 + 12 + 28);
        assert!(parse_dataset(&bytes).unwrap().is_empty());
    }

    #[test]
    fn empty_stream_is_truncated() {
        assert_eq!(parse_dataset(&[]), Err(DicomError::TruncatedInput { offset: 0 }));
    }

    #[test]
    fn truncated_value_is_reported() {
        let err = parse_dataset(&PATIENT_SEX_M[..9]).unwrap_err();
        assert!(matches!(err, DicomError::TruncatedInput { .. }));
        let err = parse_dataset(&PATIENT_SEX_M[..5]).unwrap_err();
        assert!(matches!(err, DicomError::TruncatedInput { .. }));
    }

    #[test]
    fn rejects_unknown_vr() {
        let mut b = PATIENT_SEX_M;
        b[4] = b'Z';
        b[5] = b'Z';
        assert!(matches!(parse_dataset(&b), Err(DicomError::UnsupportedVr { .. })));
    }

    #[test]
    fn rejects_other_transfer_syntax() {
        let mut b = vec![0u8; 128];
        b.extend_from_slice(b"DICM");
        b.extend_from_slice(&[0x02, 0x00, 0x10, 0x00, b'U', b'I', 18, 0x00]);
        b.extend_from_slice(b"1.2.840.10008.1.2\0");
        assert_eq!(
            parse_dataset(&b),
            Err(DicomError::UnsupportedTransferSyntax("1.2.840.10008.1.2".into()))
        );
    }

    #[test]
    fn rejects_undefined_length_sequence() {
        let mut b = vec![0x08, 0x00, 0x40, 0x11, b'S', b'Q', 0, 0];
        b.extend_from_slice(&UNDEFINED_LENGTH.to_le_bytes());
        assert!(matches!(
            parse_dataset(&b),
            Err(DicomError::UndefinedLengthSequence { .. })
        ));
    }

    #[test]
    fn rejects_out_of_order_tags() {
        let mut b = PATIENT_SEX_M.to_vec();
        // (0008,0060) CS "MR" after (0010,0040)
        b.extend_from_slice(&[0x08, 0x00, 0x60, 0x00, b'C', b'S', 0x02, 0x00, b'M', b'R']);
        assert!(matches!(parse_dataset(&b), Err(DicomError::OutOfOrderTag { .. })));
        // duplicates are not ascending either
        let mut b = PATIENT_SEX_M.to_vec();
        b.extend_from_slice(&PATIENT_SEX_M);
        assert!(matches!(parse_dataset(&b), Err(DicomError::OutOfOrderTag { .. })));
    }

    #[test]
    fn rejects_odd_lengths_both_ways() {
        let b = [0x10, 0x00, 0x40, 0x00, b'C', b'S', 0x01, 0x00, b'M'];
        assert!(matches!(parse_dataset(&b), Err(DicomError::OddLengthValue { .. })));
        let mut ds = DicomDataset::new();
        ds.insert(DicomElement::from_bytes(tags::PATIENT_SEX, Vr::CS, b"M".to_vec()));
        assert!(matches!(serialize_dataset(&ds), Err(DicomError::OddLengthValue { .. })));
    }

    #[test]
    fn short_vr_length_limit() {
        let mut ds = DicomDataset::new();
        ds.insert(DicomElement::from_bytes(
            tags::STUDY_DESCRIPTION,
            Vr::LO,
            vec![b'a'; 65536],
        ));
        assert!(matches!(serialize_dataset(&ds), Err(DicomError::ValueTooLong { .. })));
    }

    #[test]
    fn sequence_round_trip() {
        let mut item = DicomDataset::new();
        item.put_text(tags::REFERENCED_SOP_CLASS_UID, Vr::UI, "1.2.840.10008.5.1.4.1.1.4");
        item.put_text(tags::REFERENCED_SOP_INSTANCE_UID, Vr::UI, "1.2.3.4");
        let mut ds = DicomDataset::new();
        ds.put_text(tags::PATIENT_SEX, Vr::CS, "F");
        ds.insert(DicomElement::sequence(tags::REFERENCED_IMAGE_SEQUENCE, vec![item]));
        let bytes = serialize_dataset(&ds).unwrap();
        let back = parse_dataset(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(serialize_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn item_marker_outside_sequence_is_malformed() {
        let b = [0xFE, 0xFF, 0x00, 0xE0, 0, 0, 0, 0];
        assert!(matches!(parse_dataset(&b), Err(DicomError::MalformedSequence { .. })));
    }
}
