//! Simulated QKD key feed: identical frame streams for both parties at a
//! stochastic rate.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::sync::{Arc, Mutex};

use rand::{RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::keyframe::{serialize_frame, KeyFrame, KEY_LEN};

pub const DEFAULT_WARMUP_KEYS: u64 = 950;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "UPPERCASE")]
pub enum JitterModel {
    Constant,
    /// Per-second rate drawn from N(mean, std_dev), clamped at zero.
    Gaussian {
        std_dev: f64,
    },
    /// Zero rate for `duration_s` starting at `start_s`, Gaussian otherwise.
    Dropout {
        start_s: f64,
        duration_s: f64,
        #[serde(default)]
        std_dev: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeySourceConfig {
    pub mean_keys_per_sec: f64,
    #[serde(default = "constant")]
    pub jitter: JitterModel,
    /// Stop emitting after this long; unbounded when absent.
    #[serde(default)]
    pub duration_s: Option<f64>,
    /// Frames emitted at time zero.
    #[serde(default = "warmup")]
    pub warmup_keys: u64,
    #[serde(default = "first_serial")]
    pub first_serial: u64,
}

fn constant() -> JitterModel {
    JitterModel::Constant
}

fn warmup() -> u64 {
    DEFAULT_WARMUP_KEYS
}

fn first_serial() -> u64 {
    1
}

impl Default for KeySourceConfig {
    fn default() -> Self {
        Self {
            mean_keys_per_sec: 2.0,
            jitter: JitterModel::Constant,
            duration_s: None,
            warmup_keys: DEFAULT_WARMUP_KEYS,
            first_serial: 1,
        }
    }
}

impl KeySourceConfig {
    /// Name of the first invalid field, with the reason.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.mean_keys_per_sec) || self.mean_keys_per_sec == 0.0 {
            return Err(("key_source.mean_keys_per_sec", "must be a positive number".into()));
        }
        match self.jitter {
            JitterModel::Constant => {}
            JitterModel::Gaussian { std_dev } => {
                if !finite_nonneg(std_dev) {
                    return Err(("key_source.jitter.std_dev", "must be non-negative".into()));
                }
            }
            JitterModel::Dropout {
                start_s,
                duration_s,
                std_dev,
            } => {
                if !finite_nonneg(start_s) || !finite_nonneg(duration_s) || !finite_nonneg(std_dev) {
                    return Err(("key_source.jitter", "dropout parameters must be non-negative".into()));
                }
            }
        }
        if let Some(d) = self.duration_s {
            if !(d.is_finite() && d > 0.0) {
                return Err(("key_source.duration_s", "must be positive".into()));
            }
        }
        Ok(())
    }

    fn std_dev(&self) -> f64 {
        match self.jitter {
            JitterModel::Constant => 0.0,
            JitterModel::Gaussian { std_dev } | JitterModel::Dropout { std_dev, .. } => std_dev,
        }
    }

    fn in_dropout(&self, second: u64) -> bool {
        match self.jitter {
            JitterModel::Dropout {
                start_s, duration_s, ..
            } => {
                let t = second as f64;
                t >= start_s && t < start_s + duration_s
            }
            _ => false,
        }
    }
}

/// Deterministic frame generator driven by elapsed time.
#[derive(Debug)]
pub struct KeySource {
    cfg: KeySourceConfig,
    keys: ChaCha20Rng,
    jitter: ChaCha8Rng,
    next_serial: u64,
    emitted: u64,
    elapsed_ms: u64,
    /// Accumulated rate × milliseconds; one key per 1000.
    acc: f64,
    second: Option<(u64, f64)>,
    started: bool,
}

impl KeySource {
    pub fn new(cfg: KeySourceConfig, seed: u64) -> Self {
        Self {
            next_serial: cfg.first_serial,
            cfg,
            keys: ChaCha20Rng::seed_from_u64(seed),
            jitter: ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908),
            emitted: 0,
            elapsed_ms: 0,
            acc: 0.0,
            second: None,
            started: false,
        }
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn config(&self) -> &KeySourceConfig {
        &self.cfg
    }

    fn frame(&mut self) -> KeyFrame {
        let mut key = [0u8; KEY_LEN];
        self.keys.fill_bytes(&mut key);
        let f = KeyFrame::new(self.next_serial, key);
        self.next_serial += 1;
        self.emitted += 1;
        f
    }

    fn rate(&mut self, second: u64) -> f64 {
        if let Some((s, r)) = self.second {
            if s == second {
                return r;
            }
        }
        let r = if self.cfg.in_dropout(second) {
            0.0
        } else {
            let sd = self.cfg.std_dev();
            if sd > 0.0 {
                let n = Normal::new(self.cfg.mean_keys_per_sec, sd).expect("validated std_dev");
                n.sample(&mut self.jitter).max(0.0)
            } else {
                self.cfg.mean_keys_per_sec
            }
        };
        self.second = Some((second, r));
        r
    }

    /// Frames due between the previous call and `elapsed_ms`.
    pub fn advance_to(&mut self, elapsed_ms: u64) -> Vec<KeyFrame> {
        let mut out = Vec::new();
        if !self.started {
            self.started = true;
            for _ in 0..self.cfg.warmup_keys {
                out.push(self.frame());
            }
        }
        let end = match self.cfg.duration_s {
            Some(d) => elapsed_ms.min((d * 1000.0) as u64),
            None => elapsed_ms,
        };
        while self.elapsed_ms < end {
            let second = self.elapsed_ms / 1000;
            let seg_end = ((second + 1) * 1000).min(end);
            let rate = self.rate(second);
            self.acc += rate * (seg_end - self.elapsed_ms) as f64;
            self.elapsed_ms = seg_end;
            while self.acc >= 1000.0 {
                self.acc -= 1000.0;
                out.push(self.frame());
            }
        }
        self.elapsed_ms = self.elapsed_ms.max(elapsed_ms);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySourceSummary {
    pub frames: u64,
}

/// Emit the whole configured run to both sinks at once. Requires a bounded
/// `duration_s`.
pub fn run_key_source(cfg: &KeySourceConfig, seed: u64, sinks: [&mut dyn Write; 2]) -> io::Result<KeySourceSummary> {
    let duration = cfg
        .duration_s
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "duration_s is required"))?;
    let mut src = KeySource::new(cfg.clone(), seed);
    let frames = src.advance_to((duration * 1000.0) as u64);
    let mut bytes = Vec::with_capacity(frames.len() * crate::keyframe::FRAME_LEN);
    for f in &frames {
        bytes.extend_from_slice(&serialize_frame(f).expect("generated frames are well-formed"));
    }
    for sink in sinks {
        sink.write_all(&bytes)?;
        sink.flush()?;
    }
    Ok(KeySourceSummary {
        frames: frames.len() as u64,
    })
}

/// In-memory byte pipe: writes append, reads drain. Reading an empty pipe
/// returns 0 so a tailing reader simply finds nothing new.
#[derive(Debug, Clone, Default)]
pub struct KeyPipe(Arc<Mutex<VecDeque<u8>>>);

impl KeyPipe {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Write for KeyPipe {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap().extend(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Read for KeyPipe {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let mut q = self.0.lock().unwrap();
        let n = buf.len().min(q.len());
        for (dst, src) in buf.iter_mut().zip(q.drain(..n)) {
            *dst = src;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyframe::read_key_file;

    fn cfg(jitter: JitterModel, secs: f64) -> KeySourceConfig {
        KeySourceConfig {
            mean_keys_per_sec: 2.0,
            jitter,
            duration_s: Some(secs),
            warmup_keys: 0,
            first_serial: 1,
        }
    }

    #[test]
    fn constant_rate_writes_identical_sinks() {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        let s = run_key_source(&cfg(JitterModel::Constant, 10.0), 9, [&mut a, &mut b]).unwrap();
        assert_eq!(s.frames, 20);
        assert_eq!(a, b);
        let frames = read_key_file(&a[..]).unwrap();
        assert_eq!(frames.first().unwrap().key_id, 1);
        assert_eq!(frames.last().unwrap().key_id, 20);
    }

    #[test]
    fn incremental_matches_batch() {
        let c = cfg(JitterModel::Gaussian { std_dev: 0.7 }, 30.0);
        let batch = KeySource::new(c.clone(), 3).advance_to(30_000);
        let mut src = KeySource::new(c, 3);
        let mut inc = Vec::new();
        for t in (0..=30_000).step_by(100) {
            inc.extend(src.advance_to(t));
        }
        assert_eq!(batch, inc);
    }

    #[test]
    fn dropout_window_is_flat() {
        let c = cfg(
            JitterModel::Dropout {
                start_s: 10.0,
                duration_s: 30.0,
                std_dev: 0.0,
            },
            60.0,
        );
        let mut src = KeySource::new(c, 1);
        src.advance_to(10_000);
        let before = src.emitted();
        assert!(src.advance_to(40_000).is_empty());
        assert_eq!(src.emitted(), before);
        assert_eq!(src.advance_to(41_000).len(), 2);
    }

    #[test]
    fn warmup_and_seed_reproducibility() {
        let c = KeySourceConfig {
            warmup_keys: 5,
            ..cfg(JitterModel::Gaussian { std_dev: 1.0 }, 20.0)
        };
        let a = KeySource::new(c.clone(), 42).advance_to(20_000);
        let b = KeySource::new(c.clone(), 42).advance_to(20_000);
        let other = KeySource::new(c, 43).advance_to(20_000);
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert!(a.len() >= 5);
    }

    #[test]
    fn pipe_tails() {
        let mut p = KeyPipe::new();
        let mut r = p.clone();
        let mut buf = [0u8; 4];
        assert_eq!(r.read(&mut buf).unwrap(), 0);
        p.write_all(&[1, 2, 3]).unwrap();
        assert_eq!(r.read(&mut buf).unwrap(), 3);
        assert!(p.is_empty());
    }

    #[test]
    fn validation_names_field() {
        let c = KeySourceConfig {
            mean_keys_per_sec: -1.0,
            ..KeySourceConfig::default()
        };
        assert_eq!(c.validate().unwrap_err().0, "key_source.mean_keys_per_sec");
    }
}
