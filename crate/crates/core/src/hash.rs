//! SHA-256 helpers. SHA-256 is the single content hash used throughout:
//! PACS frame trailers, tree manifests, and anonymization digests.

use sha2::{Digest, Sha256};

pub const HASH_LEN: usize = 32;

pub fn sha256(data: &[u8]) -> [u8; HASH_LEN] {
    Sha256::digest(data).into()
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(sha256(data))
}

/// Digest of `value` keyed by `salt`. The separator keeps `(ab, c)` and
/// `(a, bc)` apart.
pub fn salted(salt: &[u8], value: &[u8]) -> [u8; HASH_LEN] {
    let mut h = Sha256::new();
    h.update((salt.len() as u64).to_be_bytes());
    h.update(salt);
    h.update([0u8]);
    h.update(value);
    h.finalize().into()
}

/// Constant-time equality for secrets of equal length; unequal lengths
/// return false without an early exit on content.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    let mut diff = (a.len() != b.len()) as u8;
    for i in 0..a.len().max(b.len()) {
        let x = a.get(i).copied().unwrap_or(0);
        let y = b.get(i).copied().unwrap_or(0);
        diff |= x ^ y;
    }
    diff == 0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn salted_separates_boundaries() {
        assert_ne!(salted(b"ab", b"c"), salted(b"a", b"bc"));
        assert_eq!(salted(b"s", b"v"), salted(b"s", b"v"));
    }

    #[test]
    fn ct_eq_matches_eq() {
        assert!(ct_eq(b"secret", b"secret"));
        assert!(!ct_eq(b"secret", b"secreT"));
        assert!(!ct_eq(b"secret", b"secret!"));
        assert!(!ct_eq(b"", b"x"));
        assert!(ct_eq(b"", b""));
    }
}
