//! Framed key stream written by the QKD background service.
//!
//! Wire layout (46 bytes, big-endian integers):
//!
//! ```text
//! +------+-----------+----------------+--------+--------+
//! | sync | key_id    | key_data       | status | crc    |
//! | 1 B  | 8 B (u64) | 32 B           | 1 B    | 4 B    |
//! +------+-----------+----------------+--------+--------+
//! ```
//!
//! `sync` is always [`SYNC_BYTE`]. Only the least-significant bit of the
//! status byte carries information (1 = used). The CRC-32 (IEEE) covers
//! `key_id || key_data || status` and excludes the sync byte.

use std::io::{self, Read};

use serde::{Deserialize, Serialize};

pub const SYNC_BYTE: u8 = 0xA5;
pub const KEY_LEN: usize = 32;
pub const FRAME_LEN: usize = 1 + 8 + KEY_LEN + 1 + 4;

const ID_AT: usize = 1;
const KEY_AT: usize = ID_AT + 8;
const STATUS_AT: usize = KEY_AT + KEY_LEN;
const CRC_AT: usize = STATUS_AT + 1;

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    #[error("no sync marker in {consumed} bytes")]
    BadSync { consumed: usize },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    BadCrc {
        stored: u32,
        computed: u32,
        consumed: usize,
    },
    #[error("need {needed} bytes after offset {skipped}, have {available}")]
    Truncated {
        skipped: usize,
        needed: usize,
        available: usize,
    },
    #[error("key data must be {KEY_LEN} bytes, got {0}")]
    BadLength(usize),
    #[error("read failed at offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: io::Error,
    },
}

impl FrameError {
    pub fn code(&self) -> &'static str {
        match self {
            FrameError::BadSync { .. } => "bad-sync",
            FrameError::BadCrc { .. } => "bad-crc",
            FrameError::Truncated { .. } => "truncated",
            FrameError::BadLength(_) => "bad-length",
            FrameError::Io { .. } => "io-error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyStatus {
    Unused,
    Used,
}

impl KeyStatus {
    fn to_byte(self) -> u8 {
        match self {
            KeyStatus::Unused => 0,
            KeyStatus::Used => 1,
        }
    }

    fn from_byte(b: u8) -> Self {
        if b & 1 == 1 {
            KeyStatus::Used
        } else {
            KeyStatus::Unused
        }
    }
}

/// One record of the key feed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFrame {
    pub key_id: u64,
    /// Always 32 bytes when produced by the parser. Upstream producers can
    /// hand over anything, which is why this is not a fixed array.
    pub key_data: Vec<u8>,
    pub status: KeyStatus,
}

impl KeyFrame {
    pub fn new(key_id: u64, key_data: [u8; KEY_LEN]) -> Self {
        Self {
            key_id,
            key_data: key_data.to_vec(),
            status: KeyStatus::Unused,
        }
    }

    /// CRC this frame carries on the wire.
    pub fn crc(&self) -> Result<u32, FrameError> {
        let bytes = serialize_frame(self)?;
        Ok(u32::from_be_bytes(bytes[CRC_AT..].try_into().unwrap()))
    }
}

fn crc_of(covered: &[u8]) -> u32 {
    crc32fast::hash(covered)
}

pub fn serialize_frame(frame: &KeyFrame) -> Result<[u8; FRAME_LEN], FrameError> {
    if frame.key_data.len() != KEY_LEN {
        return Err(FrameError::BadLength(frame.key_data.len()));
    }
    let mut out = [0u8; FRAME_LEN];
    out[0] = SYNC_BYTE;
    out[ID_AT..KEY_AT].copy_from_slice(&frame.key_id.to_be_bytes());
    out[KEY_AT..STATUS_AT].copy_from_slice(&frame.key_data);
    out[STATUS_AT] = frame.status.to_byte();
    let crc = crc_of(&out[ID_AT..CRC_AT]);
    out[CRC_AT..].copy_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Raw decode of the 46 bytes at the start of `buf`, without judging the CRC.
fn decode_at(buf: &[u8]) -> (KeyFrame, u32, u32) {
    let key_id = u64::from_be_bytes(buf[ID_AT..KEY_AT].try_into().unwrap());
    let frame = KeyFrame {
        key_id,
        key_data: buf[KEY_AT..STATUS_AT].to_vec(),
        status: KeyStatus::from_byte(buf[STATUS_AT]),
    };
    let stored = u32::from_be_bytes(buf[CRC_AT..FRAME_LEN].try_into().unwrap());
    let computed = crc_of(&buf[ID_AT..CRC_AT]);
    (frame, stored, computed)
}

/// Parse the first frame in `buf`, scanning forward to a sync marker if
/// needed. On success returns the frame and the number of bytes consumed
/// (skipped garbage included).
///
/// Every error variant reports how many bytes may be discarded. A CRC
/// failure consumes a whole frame when the next byte after it is a sync
/// marker (or the end of the buffer), which is how a corrupted frame in an
/// aligned stream looks; otherwise only the false sync byte is consumed so
/// the scan can resynchronize.
pub fn parse_frame(buf: &[u8]) -> Result<(KeyFrame, usize), FrameError> {
    let Some(start) = buf.iter().position(|&b| b == SYNC_BYTE) else {
        return Err(FrameError::BadSync { consumed: buf.len() });
    };
    let rest = &buf[start..];
    if rest.len() < FRAME_LEN {
        return Err(FrameError::Truncated {
            skipped: start,
            needed: FRAME_LEN,
            available: rest.len(),
        });
    }
    let (frame, stored, computed) = decode_at(rest);
    if stored != computed {
        let aligned = rest.len() == FRAME_LEN || rest[FRAME_LEN] == SYNC_BYTE;
        let consumed = start + if aligned { FRAME_LEN } else { 1 };
        return Err(FrameError::BadCrc {
            stored,
            computed,
            consumed,
        });
    }
    Ok((frame, start + FRAME_LEN))
}

/// A frame position found while inspecting a file, valid or not.
#[derive(Debug, Clone)]
pub struct ScannedFrame {
    pub offset: u64,
    pub frame: KeyFrame,
    pub stored_crc: u32,
    pub crc_ok: bool,
}

/// Walk `buf` frame by frame for diagnostics, reporting CRC failures
/// instead of discarding them. Assumes the stream is frame-aligned after
/// each sync byte that is followed by a full frame.
pub fn scan_frames(buf: &[u8]) -> Vec<ScannedFrame> {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while let Some(skip) = buf[pos..].iter().position(|&b| b == SYNC_BYTE) {
        let at = pos + skip;
        if buf.len() - at < FRAME_LEN {
            break;
        }
        let (frame, stored, computed) = decode_at(&buf[at..]);
        out.push(ScannedFrame {
            offset: at as u64,
            frame,
            stored_crc: stored,
            crc_ok: stored == computed,
        });
        pos = at + FRAME_LEN;
    }
    out
}

/// Tail-following reader over an append-only key file.
///
/// Each [`read_frames`](Self::read_frames) call drains whatever the source
/// currently has, returns complete valid frames and keeps a trailing partial
/// frame buffered for the next call.
#[derive(Debug)]
pub struct KeyFileReader<R> {
    source: R,
    pending: Vec<u8>,
    /// Absolute stream offset of `pending[0]`.
    offset: u64,
    crc_failures: u64,
    frames_read: u64,
}

impl<R: Read> KeyFileReader<R> {
    pub fn new(source: R) -> Self {
        Self {
            source,
            pending: Vec::new(),
            offset: 0,
            crc_failures: 0,
            frames_read: 0,
        }
    }

    pub fn read_frames(&mut self) -> Result<Vec<KeyFrame>, FrameError> {
        let end = self.offset + self.pending.len() as u64;
        self.source
            .read_to_end(&mut self.pending)
            .map_err(|source| FrameError::Io { offset: end, source })?;

        let mut frames = Vec::new();
        let mut pos = 0usize;
        while pos < self.pending.len() {
            match parse_frame(&self.pending[pos..]) {
                Ok((frame, used)) => {
                    frames.push(frame);
                    pos += used;
                }
                Err(FrameError::BadCrc { consumed, .. }) => {
                    tracing::warn!(offset = self.offset + pos as u64, "key frame failed crc");
                    self.crc_failures += 1;
                    pos += consumed;
                }
                Err(FrameError::BadSync { consumed }) => pos += consumed,
                Err(FrameError::Truncated { skipped, .. }) => {
                    pos += skipped;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        self.pending.drain(..pos);
        self.offset += pos as u64;
        self.frames_read += frames.len() as u64;
        Ok(frames)
    }

    /// Stream offset up to which bytes have been fully processed.
    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn crc_failures(&self) -> u64 {
        self.crc_failures
    }

    pub fn frames_read(&self) -> u64 {
        self.frames_read
    }

    pub fn buffered(&self) -> usize {
        self.pending.len()
    }
}

/// Convenience for one-shot reads of a whole byte stream.
pub fn read_key_file<R: Read>(source: R) -> Result<Vec<KeyFrame>, FrameError> {
    KeyFileReader::new(source).read_frames()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn frame(id: u64, fill: u8) -> KeyFrame {
        KeyFrame::new(id, [fill; KEY_LEN])
    }

    #[test]
    fn zero_frame_layout() {
        let bytes = serialize_frame(&frame(0, 0)).unwrap();
        assert_eq!(bytes.len(), 46);
        assert_eq!(bytes[0], SYNC_BYTE);
        assert!(bytes[1..42].iter().all(|&b| b == 0));
    }

    #[test]
    fn serialize_rejects_short_key() {
        let f = KeyFrame {
            key_id: 1,
            key_data: vec![0; 31],
            status: KeyStatus::Unused,
        };
        assert_eq!(serialize_frame(&f).unwrap_err().code(), "bad-length");
    }

    #[test]
    fn key_id_change_is_local() {
        let a = serialize_frame(&frame(1, 9)).unwrap();
        let b = serialize_frame(&frame(2, 9)).unwrap();
        let diff: Vec<usize> = (0..FRAME_LEN).filter(|&i| a[i] != b[i]).collect();
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|&i| (ID_AT..KEY_AT).contains(&i) || i >= CRC_AT));
    }

    #[test]
    fn errors_for_garbage_and_short_input() {
        assert_eq!(parse_frame(&[0u8; 10]).unwrap_err().code(), "bad-sync");
        let bytes = serialize_frame(&frame(3, 1)).unwrap();
        assert_eq!(parse_frame(&bytes[..20]).unwrap_err().code(), "truncated");
    }

    #[test]
    fn resyncs_past_garbage() {
        let mut buf = vec![0x00, 0x13, SYNC_BYTE, 0x77, 0x42];
        buf.extend_from_slice(&serialize_frame(&frame(5, 2)).unwrap());
        let mut pos = 0;
        let found = loop {
            match parse_frame(&buf[pos..]) {
                Ok((f, _)) => break f,
                Err(FrameError::BadCrc { consumed, .. }) => pos += consumed,
                Err(FrameError::BadSync { consumed }) => pos += consumed,
                Err(e) => panic!("unexpected {e}"),
            }
        };
        assert_eq!(found, frame(5, 2));
    }

    #[test]
    fn reader_empty_and_in_order() {
        assert!(read_key_file(Cursor::new(Vec::new())).unwrap().is_empty());
        let mut data = Vec::new();
        for id in [10, 11, 12] {
            data.extend_from_slice(&serialize_frame(&frame(id, id as u8)).unwrap());
        }
        let ids: Vec<u64> = read_key_file(Cursor::new(data))
            .unwrap()
            .iter()
            .map(|f| f.key_id)
            .collect();
        assert_eq!(ids, vec![10, 11, 12]);
    }

    #[test]
    fn reader_skips_corrupt_frame_and_counts_it() {
        let mut data = Vec::new();
        for id in 0..3 {
            data.extend_from_slice(&serialize_frame(&frame(id, 0x5a)).unwrap());
        }
        data[FRAME_LEN + KEY_AT + 4] ^= 0x10;
        let mut reader = KeyFileReader::new(Cursor::new(data));
        let ids: Vec<u64> = reader.read_frames().unwrap().iter().map(|f| f.key_id).collect();
        assert_eq!(ids, vec![0, 2]);
        assert_eq!(reader.crc_failures(), 1);
    }

    #[test]
    fn scan_reports_bad_frames() {
        let mut data = Vec::new();
        for id in 0..2 {
            data.extend_from_slice(&serialize_frame(&frame(id, 0)).unwrap());
        }
        data[KEY_AT] ^= 1;
        let scanned = scan_frames(&data);
        assert_eq!(scanned.len(), 2);
        assert!(!scanned[0].crc_ok);
        assert!(scanned[1].crc_ok);
        assert_eq!(scanned[1].offset, FRAME_LEN as u64);
    }
}
