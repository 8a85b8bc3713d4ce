use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DicomError, DicomTag, Vr, VrKind};

/// Explicit VR little endian, the only transfer syntax this codec speaks.
pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ElementValue {
    Bytes(Vec<u8>),
    Sequence(Vec<DicomDataset>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DicomElement {
    pub tag: DicomTag,
    pub vr: Vr,
    pub value: ElementValue,
}

/// Decoded view of an element's value.
#[derive(Clone, Debug, PartialEq)]
pub enum DecodedValue {
    Text(String),
    Integers(Vec<i64>),
    Reals(Vec<f64>),
    Binary(usize),
    Sequence(usize),
}

impl DicomElement {
    /// Raw value bytes as given. Callers are responsible for even length.
    pub fn from_bytes(tag: DicomTag, vr: Vr, bytes: Vec<u8>) -> Self {
        debug_assert!(vr != Vr::SQ);
        Self {
            tag,
            vr,
            value: ElementValue::Bytes(bytes),
        }
    }

    /// String value padded to even length with the VR's padding byte.
    pub fn text(tag: DicomTag, vr: Vr, text: &str) -> Self {
        let mut bytes = text.as_bytes().to_vec();
        if bytes.len() % 2 == 1 {
            bytes.push(vr.padding_byte());
        }
        Self::from_bytes(tag, vr, bytes)
    }

    pub fn u16s(tag: DicomTag, values: &[u16]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_bytes(tag, Vr::US, bytes)
    }

    pub fn u32s(tag: DicomTag, values: &[u32]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::from_bytes(tag, Vr::UL, bytes)
    }

    pub fn sequence(tag: DicomTag, items: Vec<DicomDataset>) -> Self {
        Self {
            tag,
            vr: Vr::SQ,
            value: ElementValue::Sequence(items),
        }
    }

    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.value {
            ElementValue::Bytes(b) => Some(b),
            ElementValue::Sequence(_) => None,
        }
    }

    pub fn items(&self) -> Option<&[DicomDataset]> {
        match &self.value {
            ElementValue::Sequence(items) => Some(items),
            ElementValue::Bytes(_) => None,
        }
    }

    /// Encoded value length in bytes. For sequences this includes item headers.
    pub fn length(&self) -> usize {
        match &self.value {
            ElementValue::Bytes(b) => b.len(),
            ElementValue::Sequence(items) => items.iter().map(|i| 8 + i.encoded_len()).sum(),
        }
    }

    /// Text value with trailing padding removed, for textual VRs.
    pub fn as_text(&self) -> Option<String> {
        if !self.vr.is_textual() {
            return None;
        }
        let b = self.bytes()?;
        Some(trim_padding(&String::from_utf8_lossy(b)).to_string())
    }

    pub fn decode(&self) -> Result<DecodedValue, DicomError> {
        let undecodable = || DicomError::Undecodable { tag: self.tag };
        match (self.vr.kind(), &self.value) {
            (VrKind::Sequence, ElementValue::Sequence(items)) => Ok(DecodedValue::Sequence(items.len())),
            (VrKind::Bytes, ElementValue::Bytes(b)) => Ok(DecodedValue::Binary(b.len())),
            (VrKind::Text, ElementValue::Bytes(b)) => {
                let s = std::str::from_utf8(b).map_err(|_| undecodable())?;
                Ok(DecodedValue::Text(trim_padding(s).to_string()))
            }
            (VrKind::IntegerText, ElementValue::Bytes(b)) => {
                let s = std::str::from_utf8(b).map_err(|_| undecodable())?;
                let vals = components(s)
                    .map(|c| c.parse::<i64>().map_err(|_| undecodable()))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(DecodedValue::Integers(vals))
            }
            (VrKind::RealText, ElementValue::Bytes(b)) => {
                let s = std::str::from_utf8(b).map_err(|_| undecodable())?;
                let vals = components(s)
                    .map(|c| match c.parse::<f64>() {
                        Ok(v) if v.is_finite() => Ok(v),
                        _ => Err(undecodable()),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(DecodedValue::Reals(vals))
            }
            (VrKind::BinaryInt { width, signed }, ElementValue::Bytes(b)) => {
                if b.is_empty() || b.len() % width != 0 {
                    return Err(undecodable());
                }
                let vals = b
                    .chunks_exact(width)
                    .map(|c| match (width, signed) {
                        (2, false) => u16::from_le_bytes([c[0], c[1]]) as i64,
                        (2, true) => i16::from_le_bytes([c[0], c[1]]) as i64,
                        (4, false) => u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64,
                        _ => i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64,
                    })
                    .collect();
                Ok(DecodedValue::Integers(vals))
            }
            (VrKind::BinaryFloat { width }, ElementValue::Bytes(b)) => {
                if b.is_empty() || b.len() % width != 0 {
                    return Err(undecodable());
                }
                let vals: Vec<f64> = b
                    .chunks_exact(width)
                    .map(|c| {
                        if width == 4 {
                            f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64
                        } else {
                            f64::from_le_bytes(c.try_into().expect("8-byte chunk"))
                        }
                    })
                    .collect();
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(undecodable());
                }
                Ok(DecodedValue::Reals(vals))
            }
            _ => Err(undecodable()),
        }
    }
}

fn trim_padding(s: &str) -> &str {
    s.trim_end_matches([' ', '\0'])
}

fn components(s: &str) -> impl Iterator<Item = &str> {
    trim_padding(s).split('\\').map(str::trim)
}

/// Ordered collection of elements; iteration is in ascending tag order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DicomDataset {
    elements: BTreeMap<DicomTag, DicomElement>,
}

impl DicomDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn transfer_syntax(&self) -> &'static str {
        EXPLICIT_VR_LITTLE_ENDIAN
    }

    pub fn insert(&mut self, element: DicomElement) -> Option<DicomElement> {
        self.elements.insert(element.tag, element)
    }

    pub fn put_text(&mut self, tag: DicomTag, vr: Vr, text: &str) {
        self.insert(DicomElement::text(tag, vr, text));
    }

    pub fn get(&self, tag: DicomTag) -> Option<&DicomElement> {
        self.elements.get(&tag)
    }

    pub fn remove(&mut self, tag: DicomTag) -> Option<DicomElement> {
        self.elements.remove(&tag)
    }

    pub fn contains(&self, tag: DicomTag) -> bool {
        self.elements.contains_key(&tag)
    }

    pub fn text(&self, tag: DicomTag) -> Option<String> {
        self.get(tag).and_then(DicomElement::as_text)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DicomElement> {
        self.elements.values()
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Byte length of the encoded element stream (no preamble or meta group).
    pub fn encoded_len(&self) -> usize {
        self.iter()
            .map(|e| {
                let header = if e.vr.has_long_length() { 12 } else { 8 };
                header + e.length()
            })
            .sum()
    }
}

impl FromIterator<DicomElement> for DicomDataset {
    fn from_iter<I: IntoIterator<Item = DicomElement>>(iter: I) -> Self {
        let mut ds = DicomDataset::new();
        for e in iter {
            ds.insert(e);
        }
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dicom::tags;

    #[test]
    fn text_is_padded_to_even_length() {
        let e = DicomElement::text(tags::PATIENT_SEX, Vr::CS, "M");
        assert_eq!(e.bytes().unwrap(), b"M ");
        let e = DicomElement::text(tags::STUDY_INSTANCE_UID, Vr::UI, "1.2.3");
        assert_eq!(e.bytes().unwrap(), b"1.2.3\0");
        assert_eq!(e.as_text().unwrap(), "1.2.3");
    }

    #[test]
    fn decodes_numeric_vrs() {
        let ds = DicomElement::text(tags::ECHO_TIME, Vr::DS, "4.2");
        assert_eq!(ds.decode().unwrap(), DecodedValue::Reals(vec![4.2]));
        let is = DicomElement::text(tags::INSTANCE_NUMBER, Vr::IS, "12\\-3");
        assert_eq!(is.decode().unwrap(), DecodedValue::Integers(vec![12, -3]));
        let us = DicomElement::u16s(tags::ROWS, &[512]);
        assert_eq!(us.decode().unwrap(), DecodedValue::Integers(vec![512]));
        let ss = DicomElement::from_bytes(tags::ROWS, Vr::SS, (-2i16).to_le_bytes().to_vec());
        assert_eq!(ss.decode().unwrap(), DecodedValue::Integers(vec![-2]));
        let fd = DicomElement::from_bytes(tags::ECHO_TIME, Vr::FD, 2.5f64.to_le_bytes().to_vec());
        assert_eq!(fd.decode().unwrap(), DecodedValue::Reals(vec![2.5]));
    }

    #[test]
    fn bad_numeric_text_is_undecodable() {
        let e = DicomElement::text(tags::ECHO_TIME, Vr::DS, "abc");
        assert!(matches!(e.decode(), Err(DicomError::Undecodable { .. })));
        let e = DicomElement::from_bytes(tags::ROWS, Vr::US, vec![1, 2, 3, 4, 5, 6]);
        assert!(e.decode().is_ok());
        let e = DicomElement::from_bytes(tags::ROWS, Vr::UL, vec![1, 2]);
        assert!(e.decode().is_err());
    }

    #[test]
    fn sequence_length_counts_item_headers() {
        let mut item = DicomDataset::new();
        item.put_text(tags::REFERENCED_SOP_INSTANCE_UID, Vr::UI, "1.2");
        let sq = DicomElement::sequence(tags::REFERENCED_IMAGE_SEQUENCE, vec![item]);
        // item header (8) + element header (8) + "1.2\0" (4)
        assert_eq!(sq.length(), 20);
    }
}
