//! Retrieve stream framing.
//!
//! ```text
//! frame   := length:u32be  payload[length]  sha256(payload)[32]
//! payload := uid_len:u16be  series_uid[uid_len]  ordinal:u32be  dataset bytes
//! end     := 00 00 00 00
//! ```
//!
//! A stream that stops before the end marker was interrupted.

use crate::hash::{sha256, HASH_LEN};

/// Upper bound on a single frame; larger lengths are treated as corruption.
pub const MAX_FRAME_LEN: usize = 256 * 1024 * 1024;
pub const END_MARKER: [u8; 4] = [0; 4];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceFrame {
    pub series_uid: String,
    pub ordinal: u32,
    pub dataset: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    /// Payload hash mismatch; the stream can continue with the next frame.
    #[error("integrity check failed for frame {index}")]
    IntegrityMismatch { index: usize },
    /// Framing is broken; nothing after this point can be trusted.
    #[error("malformed frame {index}: {reason}")]
    Malformed { index: usize, reason: String },
}

pub fn encode_frame(series_uid: &str, ordinal: u32, dataset: &[u8]) -> Vec<u8> {
    let mut payload = Vec::with_capacity(6 + series_uid.len() + dataset.len());
    payload.extend_from_slice(&(series_uid.len() as u16).to_be_bytes());
    payload.extend_from_slice(series_uid.as_bytes());
    payload.extend_from_slice(&ordinal.to_be_bytes());
    payload.extend_from_slice(dataset);

    let mut out = Vec::with_capacity(4 + payload.len() + HASH_LEN);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&sha256(&payload));
    out
}

/// Incremental decoder: push bytes as they arrive, pull frames out.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    index: usize,
    finished: bool,
    broken: bool,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// True once the end marker has been read.
    pub fn finished(&self) -> bool {
        self.finished
    }

    /// Bytes received but not yet consumed.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, `None` if more input is needed (or after the end
    /// marker / a fatal error).
    pub fn next_frame(&mut self) -> Option<Result<InstanceFrame, FrameError>> {
        if self.finished || self.broken || self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        let index = self.index;
        if len == 0 {
            self.finished = true;
            self.buf.drain(..4);
            return None;
        }
        if len > MAX_FRAME_LEN {
            self.broken = true;
            return Some(Err(FrameError::Malformed {
                index,
                reason: format!("frame length {len} exceeds limit"),
            }));
        }
        let total = 4 + len + HASH_LEN;
        if self.buf.len() < total {
            return None;
        }
        let frame: Vec<u8> = self.buf.drain(..total).collect();
        self.index += 1;
        let payload = &frame[4..4 + len];
        if sha256(payload)[..] != frame[4 + len..] {
            return Some(Err(FrameError::IntegrityMismatch { index }));
        }
        Some(decode_payload(payload).map_err(|reason| {
            self.broken = true;
            FrameError::Malformed { index, reason }
        }))
    }
}

fn decode_payload(payload: &[u8]) -> Result<InstanceFrame, String> {
    if payload.len() < 2 {
        return Err("payload too short".into());
    }
    let uid_len = u16::from_be_bytes([payload[0], payload[1]]) as usize;
    let rest = &payload[2..];
    if rest.len() < uid_len + 4 {
        return Err("payload header truncated".into());
    }
    let series_uid = std::str::from_utf8(&rest[..uid_len])
        .map_err(|_| "series uid not UTF-8".to_string())?
        .to_string();
    let ordinal = u32::from_be_bytes(rest[uid_len..uid_len + 4].try_into().unwrap());
    Ok(InstanceFrame {
        series_uid,
        ordinal,
        dataset: rest[uid_len + 4..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream() -> Vec<u8> {
        let mut s = encode_frame("1.2.3", 1, b"abcd");
        s.extend(encode_frame("1.2.3", 2, b""));
        s.extend(encode_frame("1.2.4", 1, &[0u8; 300]));
        s.extend_from_slice(&END_MARKER);
        s
    }

    #[test]
    fn decodes_byte_by_byte() {
        let mut d = FrameDecoder::new();
        let mut frames = Vec::new();
        for b in stream() {
            d.push(&[b]);
            while let Some(f) = d.next_frame() {
                frames.push(f.unwrap());
            }
        }
        assert!(d.finished());
        assert_eq!(frames.len(), 3);
        assert_eq!(frames[0].dataset, b"abcd");
        assert_eq!(frames[1].ordinal, 2);
        assert_eq!(frames[2].series_uid, "1.2.4");
    }

    #[test]
    fn flipped_payload_byte_fails_only_that_frame() {
        let mut s = stream();
        // inside frame 0's dataset bytes
        s[4 + 2 + 5 + 4 + 1] ^= 0x01;
        let mut d = FrameDecoder::new();
        d.push(&s);
        assert_eq!(d.next_frame(), Some(Err(FrameError::IntegrityMismatch { index: 0 })));
        assert!(d.next_frame().unwrap().is_ok());
        assert!(d.next_frame().unwrap().is_ok());
        assert_eq!(d.next_frame(), None);
        assert!(d.finished());
    }

    #[test]
    fn truncated_stream_never_finishes() {
        let s = stream();
        let mut d = FrameDecoder::new();
        d.push(&s[..s.len() - 10]);
        let mut n = 0;
        while let Some(f) = d.next_frame() {
            f.unwrap();
            n += 1;
        }
        assert_eq!(n, 2);
        assert!(!d.finished());
    }

    #[test]
    fn absurd_length_is_fatal() {
        let mut d = FrameDecoder::new();
        d.push(&[0xFF, 0xFF, 0xFF, 0xFF, 1, 2, 3]);
        assert!(matches!(d.next_frame(), Some(Err(FrameError::Malformed { .. }))));
        assert_eq!(d.next_frame(), None);
    }
}
