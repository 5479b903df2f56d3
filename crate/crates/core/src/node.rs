//! One authenticating endpoint: key table, IV pool, verifier and counters
//! bundled behind a single handle.

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::authcodec::{create_payload, CreateError, Created, FreshnessPolicy, VerificationVerdict, Verifier};
use crate::clock::Clock;
use crate::ivstore::{IvError, IvStore, RandomSource};
use crate::keyframe::KeyFrame;
use crate::keystore::{IngestReport, KeyStore, PartyRole, PoolPolicy};
use crate::stats::{StatsEvent, StatsRecorder, StatsSnapshot};

/// IVs kept on hand before the entropy source is asked for more.
pub const IV_LOW_WATER: u64 = 64;
/// Bytes requested per refill (256 IVs).
pub const IV_REFILL_BYTES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignEvent {
    pub t_ms: u64,
    pub serial: u64,
    pub fresh: bool,
    pub unused_before: u64,
    pub iv_index: u64,
    pub iv: [u8; 16],
}

pub struct Node {
    pub id: String,
    pub role: PartyRole,
    pub pool: PoolPolicy,
    pub keys: KeyStore,
    pub ivs: IvStore,
    pub verifier: Verifier,
    pub stats: StatsRecorder,
    clock: Arc<dyn Clock>,
    entropy: Mutex<Option<Box<dyn RandomSource>>>,
    sign_log: Mutex<Vec<SignEvent>>,
}

impl Node {
    pub fn new(
        id: impl Into<String>,
        role: PartyRole,
        pool: PoolPolicy,
        freshness: FreshnessPolicy,
        keys: KeyStore,
        clock: Arc<dyn Clock>,
    ) -> Self {
        let start = clock.now_ms();
        Self {
            id: id.into(),
            role,
            pool,
            keys,
            ivs: IvStore::new(),
            verifier: Verifier::new(role, freshness),
            stats: StatsRecorder::new(start),
            clock,
            entropy: Mutex::new(None),
            sign_log: Mutex::new(Vec::new()),
        }
    }

    /// Entropy source used to top up the IV pool when it runs low.
    pub fn with_entropy(self, source: Box<dyn RandomSource>) -> Self {
        *self.entropy.lock().unwrap() = Some(source);
        self
    }

    pub fn clock(&self) -> &dyn Clock {
        &*self.clock
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn ingest(&self, frames: &[KeyFrame]) -> IngestReport {
        let report = self.keys.ingest(frames);
        self.stats.record(StatsEvent::KeysIngested {
            accepted: report.accepted,
            rejected: report.rejected(),
        });
        report
    }

    pub fn chunk_ivs(&self, entropy: &[u8]) -> u64 {
        let n = self.ivs.chunk(entropy);
        self.stats.record(StatsEvent::IvsAdded(n));
        n
    }

    pub fn refill_ivs(&self, source: &mut dyn RandomSource, bytes: usize) -> Result<u64, IvError> {
        let n = self.ivs.refill(source, bytes)?;
        self.stats.record(StatsEvent::IvsAdded(n));
        Ok(n)
    }

    fn top_up_ivs(&self) {
        if self.ivs.counters().available >= IV_LOW_WATER {
            return;
        }
        let mut guard = self.entropy.lock().unwrap();
        if let Some(source) = guard.as_mut() {
            if let Err(e) = self.refill_ivs(source.as_mut(), IV_REFILL_BYTES) {
                tracing::warn!(node = %self.id, error = %e, "IV refill failed");
            }
        }
    }

    /// Authenticate `message` for `topic` and log which key and IV were used.
    pub fn create(&self, message: &[u8], topic: &str) -> Result<Created, CreateError> {
        self.top_up_ivs();
        let result = create_payload(
            message,
            topic,
            self.role,
            self.pool,
            &self.keys,
            &self.ivs,
            &*self.clock,
        );
        match &result {
            Ok(c) => {
                self.stats.record(StatsEvent::IvUsed);
                if c.fresh_key {
                    self.stats.record(StatsEvent::KeyUsed);
                }
                self.sign_log.lock().unwrap().push(SignEvent {
                    t_ms: c.payload.total.timestamp_ms,
                    serial: c.payload.total.key_serial,
                    fresh: c.fresh_key,
                    unused_before: c.unused_before,
                    iv_index: c.iv_index,
                    iv: c.payload.iv,
                });
            }
            // The IV was drawn before the key lookup failed.
            Err(CreateError::Key(_)) => self.stats.record(StatsEvent::IvUsed),
            Err(_) => {}
        }
        result
    }

    pub fn verify_bytes(&self, bytes: &[u8], expected_topic: &str) -> VerificationVerdict {
        let before = self.verifier.watermark();
        let verdict = self
            .verifier
            .verify_bytes(bytes, expected_topic, &self.keys, &*self.clock);
        if verdict.accepted && self.verifier.watermark() != before {
            self.stats.record(StatsEvent::KeyUsed);
        }
        self.stats.record(StatsEvent::Verified(verdict));
        verdict
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        self.stats.snapshot(&self.id, self.clock.now_ms())
    }

    pub fn sign_log(&self) -> Vec<SignEvent> {
        self.sign_log.lock().unwrap().clone()
    }
}
