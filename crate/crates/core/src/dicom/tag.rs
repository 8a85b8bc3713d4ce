use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::dictionary;

/// A DICOM attribute tag. Ordering is by group, then element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DicomTag {
    pub group: u16,
    pub element: u16,
}

impl DicomTag {
    pub const fn new(group: u16, element: u16) -> Self {
        Self { group, element }
    }

    /// Standard keyword for this tag, if it is in the built-in dictionary.
    pub fn keyword(&self) -> Option<&'static str> {
        dictionary::lookup(*self).map(|e| e.keyword)
    }

    /// Keyword when known, canonical `(GGGG,EEEE)` text otherwise.
    pub fn display_name(&self) -> String {
        self.keyword().map(str::to_string).unwrap_or_else(|| self.to_string())
    }

    pub(crate) fn is_item_marker(&self) -> bool {
        self.group == 0xFFFE
    }
}

impl fmt::Display for DicomTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.group, self.element)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid tag text `{0}`")]
pub struct TagParseError(pub String);

impl FromStr for DicomTag {
    type Err = TagParseError;

    /// Accepts canonical `(GGGG,EEEE)` text (case-insensitive hex) or a dictionary keyword.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if let Some(inner) = t.strip_prefix('(').and_then(|r| r.strip_suffix(')')) {
            let (g, e) = inner.split_once(',').ok_or_else(|| TagParseError(s.to_string()))?;
            let (g, e) = (g.trim(), e.trim());
            if g.len() != 4 || e.len() != 4 {
                return Err(TagParseError(s.to_string()));
            }
            let group = u16::from_str_radix(g, 16).map_err(|_| TagParseError(s.to_string()))?;
            let element = u16::from_str_radix(e, 16).map_err(|_| TagParseError(s.to_string()))?;
            return Ok(DicomTag::new(group, element));
        }
        dictionary::by_keyword(t)
            .map(|e| e.tag)
            .ok_or_else(|| TagParseError(s.to_string()))
    }
}

impl Serialize for DicomTag {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DicomTag {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_is_uppercase_zero_padded() {
        assert_eq!(DicomTag::new(0x10, 0x40).to_string(), "(0010,0040)");
        assert_eq!(DicomTag::new(0x7fe0, 0x10).to_string(), "(7FE0,0010)");
        assert_eq!(DicomTag::new(0x0008, 0x103e).to_string(), "(0008,103E)");
    }

    #[test]
    fn parses_text_and_keywords() {
        assert_eq!("(0008,103e)".parse::<DicomTag>().unwrap(), DicomTag::new(8, 0x103e));
        assert_eq!("PatientSex".parse::<DicomTag>().unwrap(), DicomTag::new(0x10, 0x40));
        assert!("(10,40)".parse::<DicomTag>().is_err());
        assert!("NotAKeyword".parse::<DicomTag>().is_err());
    }

    #[test]
    fn orders_by_group_then_element() {
        let mut tags = vec![
            DicomTag::new(0x0010, 0x0010),
            DicomTag::new(0x0008, 0xFFFF),
            DicomTag::new(0x0010, 0x0001),
        ];
        tags.sort();
        assert_eq!(
            tags,
            vec![
                DicomTag::new(0x0008, 0xFFFF),
                DicomTag::new(0x0010, 0x0001),
                DicomTag::new(0x0010, 0x0010),
            ]
        );
    }
}
