//! Node-private pool of single-use 16-byte initialization vectors.

use std::collections::VecDeque;
use std::io::{self, Read};
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub const IV_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InitVector {
    pub index: u64,
    pub value: [u8; IV_LEN],
}

#[derive(Debug, thiserror::Error)]
pub enum IvError {
    #[error("iv pool exhausted")]
    Exhausted,
    #[error("entropy source: {0}")]
    Source(#[from] io::Error),
}

impl IvError {
    pub fn code(&self) -> &'static str {
        match self {
            IvError::Exhausted => "iv-exhausted",
            IvError::Source(_) => "io-error",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvCounters {
    pub added: u64,
    pub available: u64,
    pub used: u64,
}

/// Where IV entropy comes from.
pub trait RandomSource: Send {
    /// Fill as much of `buf` as the source can; returns bytes written.
    /// Zero means the source is exhausted for now.
    fn fill(&mut self, buf: &mut [u8]) -> io::Result<usize>;
}

/// Captured QRNG output read from a file or stream.
pub struct ReaderSource<R>(pub R);

impl<R: Read + Send> RandomSource for ReaderSource<R> {
    fn fill(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut filled = 0;
        while filled < buf.len() {
            match self.0.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e),
            }
        }
        Ok(filled)
    }
}

/// ChaCha20 stand-in for a hardware QRNG.
pub struct CsprngSource(ChaCha20Rng);

impl CsprngSource {
    pub fn from_seed(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn from_entropy() -> Self {
        Self(ChaCha20Rng::from_entropy())
    }
}

impl RandomSource for CsprngSource {
    fn fill(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.0.fill_bytes(buf);
        Ok(buf.len())
    }
}

#[derive(Debug, Default)]
struct Pool {
    unused: VecDeque<InitVector>,
    leftover: Vec<u8>,
    next_index: u64,
    added: u64,
    used: u64,
}

#[derive(Debug, Default)]
pub struct IvStore {
    pool: Mutex<Pool>,
}

impl IvStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Split `entropy` into 16-byte IVs. A trailing partial chunk is kept and
    /// completed by the next call.
    pub fn chunk(&self, entropy: &[u8]) -> u64 {
        let mut p = self.pool.lock().unwrap();
        let mut bytes = std::mem::take(&mut p.leftover);
        bytes.extend_from_slice(entropy);
        let mut chunks = bytes.chunks_exact(IV_LEN);
        let mut added = 0;
        for chunk in chunks.by_ref() {
            let iv = InitVector {
                index: p.next_index,
                value: chunk.try_into().unwrap(),
            };
            p.next_index += 1;
            p.unused.push_back(iv);
            added += 1;
        }
        p.leftover = chunks.remainder().to_vec();
        p.added += added;
        added
    }

    /// Pull `bytes` from `source` into the pool.
    pub fn refill(&self, source: &mut dyn RandomSource, bytes: usize) -> Result<u64, IvError> {
        let mut buf = vec![0u8; bytes];
        let n = source.fill(&mut buf)?;
        Ok(self.chunk(&buf[..n]))
    }

    /// Take the lowest-index unused IV. It is never handed out again.
    pub fn next_iv(&self) -> Result<InitVector, IvError> {
        let mut p = self.pool.lock().unwrap();
        let iv = p.unused.pop_front().ok_or(IvError::Exhausted)?;
        p.used += 1;
        Ok(iv)
    }

    pub fn counters(&self) -> IvCounters {
        let p = self.pool.lock().unwrap();
        IvCounters {
            added: p.added,
            available: p.unused.len() as u64,
            used: p.used,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn whole_chunks() {
        let s = IvStore::new();
        assert_eq!(s.chunk(&[7u8; 48]), 3);
        assert_eq!(s.chunk(&[]), 0);
    }

    #[test]
    fn partial_chunk_is_buffered() {
        let s = IvStore::new();
        assert_eq!(s.chunk(&[1u8; 40]), 2);
        assert_eq!(s.chunk(&[2u8; 8]), 1);
        let _ = s.next_iv().unwrap();
        let _ = s.next_iv().unwrap();
        let third = s.next_iv().unwrap();
        let mut want = [1u8; 16];
        want[8..].fill(2);
        assert_eq!(third.value, want);
    }

    #[test]
    fn ordered_then_exhausted() {
        let s = IvStore::new();
        s.chunk(&[0u8; 48]);
        assert_eq!(s.next_iv().unwrap().index, 0);
        assert_eq!(s.next_iv().unwrap().index, 1);
        assert_eq!(s.next_iv().unwrap().index, 2);
        assert_eq!(s.next_iv().unwrap_err().code(), "iv-exhausted");
        assert_eq!(IvStore::new().next_iv().unwrap_err().code(), "iv-exhausted");
    }

    #[test]
    fn ten_thousand_distinct() {
        let s = IvStore::new();
        s.refill(&mut CsprngSource::from_seed(1), 16 * 10_000).unwrap();
        let seen: HashSet<[u8; 16]> = (0..10_000).map(|_| s.next_iv().unwrap().value).collect();
        assert_eq!(seen.len(), 10_000);
        let c = s.counters();
        assert_eq!(c.added, c.available + c.used);
    }

    #[test]
    fn reader_source_stops_at_eof() {
        let s = IvStore::new();
        let mut src = ReaderSource(std::io::Cursor::new(vec![9u8; 20]));
        assert_eq!(s.refill(&mut src, 64).unwrap(), 1);
        assert_eq!(s.refill(&mut src, 64).unwrap(), 0);
    }
}
