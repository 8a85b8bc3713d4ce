use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Value representations understood by the codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Vr {
    AE,
    AS,
    CS,
    DA,
    DS,
    DT,
    FL,
    FD,
    IS,
    LO,
    LT,
    OB,
    OW,
    PN,
    SH,
    SL,
    SQ,
    SS,
    ST,
    TM,
    UI,
    UL,
    UN,
    US,
    UT,
}

/// How a value of a given VR is interpreted when decoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VrKind {
    Text,
    /// Text VRs whose components are integers (IS).
    IntegerText,
    /// Text VRs whose components are reals (DS).
    RealText,
    BinaryInt {
        width: usize,
        signed: bool,
    },
    BinaryFloat {
        width: usize,
    },
    Bytes,
    Sequence,
}

impl Vr {
    pub const ALL: [Vr; 25] = [
        Vr::AE,
        Vr::AS,
        Vr::CS,
        Vr::DA,
        Vr::DS,
        Vr::DT,
        Vr::FL,
        Vr::FD,
        Vr::IS,
        Vr::LO,
        Vr::LT,
        Vr::OB,
        Vr::OW,
        Vr::PN,
        Vr::SH,
        Vr::SL,
        Vr::SQ,
        Vr::SS,
        Vr::ST,
        Vr::TM,
        Vr::UI,
        Vr::UL,
        Vr::UN,
        Vr::US,
        Vr::UT,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Vr::AE => "AE",
            Vr::AS => "AS",
            Vr::CS => "CS",
            Vr::DA => "DA",
            Vr::DS => "DS",
            Vr::DT => "DT",
            Vr::FL => "FL",
            Vr::FD => "FD",
            Vr::IS => "IS",
            Vr::LO => "LO",
            Vr::LT => "LT",
            Vr::OB => "OB",
            Vr::OW => "OW",
            Vr::PN => "PN",
            Vr::SH => "SH",
            Vr::SL => "SL",
            Vr::SQ => "SQ",
            Vr::SS => "SS",
            Vr::ST => "ST",
            Vr::TM => "TM",
            Vr::UI => "UI",
            Vr::UL => "UL",
            Vr::UN => "UN",
            Vr::US => "US",
            Vr::UT => "UT",
        }
    }

    pub fn from_code(code: [u8; 2]) -> Option<Vr> {
        Vr::ALL.iter().copied().find(|v| v.as_str().as_bytes() == code)
    }

    /// Explicit VR encodings with 2 reserved bytes and a 32-bit length field.
    pub fn has_long_length(&self) -> bool {
        matches!(self, Vr::OB | Vr::OW | Vr::SQ | Vr::UN | Vr::UT)
    }

    pub fn kind(&self) -> VrKind {
        match self {
            Vr::IS => VrKind::IntegerText,
            Vr::DS => VrKind::RealText,
            Vr::US => VrKind::BinaryInt {
                width: 2,
                signed: false,
            },
            Vr::SS => VrKind::BinaryInt { width: 2, signed: true },
            Vr::UL => VrKind::BinaryInt {
                width: 4,
                signed: false,
            },
            Vr::SL => VrKind::BinaryInt { width: 4, signed: true },
            Vr::FL => VrKind::BinaryFloat { width: 4 },
            Vr::FD => VrKind::BinaryFloat { width: 8 },
            Vr::OB | Vr::OW | Vr::UN => VrKind::Bytes,
            Vr::SQ => VrKind::Sequence,
            _ => VrKind::Text,
        }
    }

    pub fn is_textual(&self) -> bool {
        matches!(self.kind(), VrKind::Text | VrKind::IntegerText | VrKind::RealText)
    }

    /// Byte used to pad odd-length values to even length.
    pub fn padding_byte(&self) -> u8 {
        match self {
            Vr::UI | Vr::OB | Vr::UN => 0,
            _ if self.is_textual() => b' ',
            _ => 0,
        }
    }
}

impl fmt::Display for Vr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Vr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let b = s.as_bytes();
        if b.len() != 2 {
            return Err(format!("unsupported VR `{s}`"));
        }
        Vr::from_code([b[0], b[1]]).ok_or_else(|| format!("unsupported VR `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip() {
        for vr in Vr::ALL {
            let b = vr.as_str().as_bytes();
            assert_eq!(Vr::from_code([b[0], b[1]]), Some(vr));
        }
        assert_eq!(Vr::from_code(*b"AT"), None);
        assert_eq!(Vr::from_code(*b"xx"), None);
    }

    #[test]
    fn long_length_set() {
        let long: Vec<_> = Vr::ALL.iter().filter(|v| v.has_long_length()).collect();
        assert_eq!(long, vec![&Vr::OB, &Vr::OW, &Vr::SQ, &Vr::UN, &Vr::UT]);
    }
}
