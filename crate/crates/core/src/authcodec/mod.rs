//! Create and verify authenticated payloads.
//!
//! A sender builds `m || t || n || ts`, tags it with GMAC under the key with
//! serial `n` and a single-use IV, and ships `(tm, iv, mac)`. The receiver
//! runs four checks in a fixed order, stopping at the first failure:
//!
//! 1. key: `n` belongs to the counterpart, is not older than the last serial
//!    accepted from it, and (when equal to it) comes with an IV not seen yet;
//! 2. freshness: `|now - ts| <= delta`;
//! 3. topic: the authenticated topic equals the topic it arrived on;
//! 4. MAC: recomputed tag equals the received one (constant time).

mod gmac;
mod payload;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use gmac::{gmac_tag, gmac_tag_any, gmac_verify, gmac_verify_any, GmacError, TAG_LEN};
pub use payload::{decode_payload, encode_payload, valid_topic, AuthPayload, DecodeError, TotalMessage, DELIMITER};

use crate::clock::Clock;
use crate::ivstore::{IvError, IvStore, IV_LEN};
use crate::keystore::{KeyStore, KeyStoreError, PartyRole, PoolPolicy};

pub const DEFAULT_DELTA_MS: u64 = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VerdictReason {
    Ok,
    MacMismatch,
    TopicMismatch,
    StaleTimestamp,
    KeyReplayed,
    UnknownKey,
    Malformed,
}

impl VerdictReason {
    pub const FAILURES: [VerdictReason; 6] = [
        VerdictReason::MacMismatch,
        VerdictReason::TopicMismatch,
        VerdictReason::StaleTimestamp,
        VerdictReason::KeyReplayed,
        VerdictReason::UnknownKey,
        VerdictReason::Malformed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerdictReason::Ok => "OK",
            VerdictReason::MacMismatch => "MAC_MISMATCH",
            VerdictReason::TopicMismatch => "TOPIC_MISMATCH",
            VerdictReason::StaleTimestamp => "STALE_TIMESTAMP",
            VerdictReason::KeyReplayed => "KEY_REPLAYED",
            VerdictReason::UnknownKey => "UNKNOWN_KEY",
            VerdictReason::Malformed => "MALFORMED",
        }
    }
}

impl fmt::Display for VerdictReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerdictReason {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        std::iter::once(VerdictReason::Ok)
            .chain(VerdictReason::FAILURES)
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown verdict reason {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub accepted: bool,
    pub reason: VerdictReason,
}

impl VerificationVerdict {
    pub fn ok() -> Self {
        Self {
            accepted: true,
            reason: VerdictReason::Ok,
        }
    }

    pub fn reject(reason: VerdictReason) -> Self {
        debug_assert_ne!(reason, VerdictReason::Ok);
        Self {
            accepted: false,
            reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreshnessPolicy {
    pub delta_ms: u64,
}

impl FreshnessPolicy {
    pub fn new(delta_ms: u64) -> Option<Self> {
        (delta_ms > 0).then_some(Self { delta_ms })
    }
}

impl Default for FreshnessPolicy {
    fn default() -> Self {
        Self {
            delta_ms: DEFAULT_DELTA_MS,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CreateError {
    #[error("topic {0:?} contains the payload delimiter")]
    BadTopic(String),
    #[error(transparent)]
    Key(#[from] KeyStoreError),
    #[error(transparent)]
    Iv(#[from] IvError),
}

impl CreateError {
    pub fn code(&self) -> &'static str {
        match self {
            CreateError::BadTopic(_) => "bad-topic",
            CreateError::Key(e) => e.code(),
            CreateError::Iv(e) => e.code(),
        }
    }
}

/// A freshly created payload plus bookkeeping about how it was keyed.
#[derive(Debug, Clone)]
pub struct Created {
    pub payload: AuthPayload,
    pub fresh_key: bool,
    pub unused_before: u64,
    pub iv_index: u64,
}

/// Build and tag an outgoing payload.
///
/// The IV is drawn first; an exhausted IV pool leaves the key table
/// untouched. Both are flagged used as soon as they are drawn.
pub fn create_payload(
    message: &[u8],
    topic: &str,
    role: PartyRole,
    policy: PoolPolicy,
    keys: &KeyStore,
    ivs: &IvStore,
    clock: &dyn Clock,
) -> Result<Created, CreateError> {
    if !valid_topic(topic) {
        return Err(CreateError::BadTopic(topic.to_string()));
    }
    let iv = ivs.next_iv()?;
    let key = keys.next_signing_key(role, policy)?;
    let total = TotalMessage {
        message: message.to_vec(),
        topic: topic.to_string(),
        key_serial: key.serial,
        timestamp_ms: clock.now_ms(),
    };
    let mac = gmac_tag(key.secret.as_bytes(), &iv.value, &total.canonical_bytes())
        .expect("key and iv lengths are fixed by their types");
    Ok(Created {
        payload: AuthPayload {
            total,
            iv: iv.value,
            mac,
        },
        fresh_key: key.fresh,
        unused_before: key.unused_before,
        iv_index: iv.index,
    })
}

#[derive(Debug, Default)]
struct Watermark {
    serial: Option<u64>,
    /// IVs accepted under `serial`; a reused key must bring a new one.
    ivs: HashSet<[u8; IV_LEN]>,
    last_ts: Option<u64>,
    ts_regressions: u64,
}

/// Receiver-side state for one counterpart.
#[derive(Debug)]
pub struct Verifier {
    own_role: PartyRole,
    policy: FreshnessPolicy,
    state: Mutex<Watermark>,
}

impl Verifier {
    pub fn new(own_role: PartyRole, policy: FreshnessPolicy) -> Self {
        Self {
            own_role,
            policy,
            state: Mutex::new(Watermark::default()),
        }
    }

    pub fn policy(&self) -> FreshnessPolicy {
        self.policy
    }

    /// Last serial accepted from the counterpart.
    pub fn watermark(&self) -> Option<u64> {
        self.state.lock().unwrap().serial
    }

    /// Accepted messages whose timestamp went backwards. Flagged, not rejected.
    pub fn timestamp_regressions(&self) -> u64 {
        self.state.lock().unwrap().ts_regressions
    }

    pub fn verify(
        &self,
        p: &AuthPayload,
        expected_topic: &str,
        keys: &KeyStore,
        clock: &dyn Clock,
    ) -> VerificationVerdict {
        let mut st = self.state.lock().unwrap();
        let serial = p.total.key_serial;

        if self.own_role.owns(serial) {
            return VerificationVerdict::reject(VerdictReason::KeyReplayed);
        }
        let continuing = st.serial == Some(serial);
        let secret = match st.serial {
            Some(w) if serial < w => return VerificationVerdict::reject(VerdictReason::KeyReplayed),
            Some(_) if continuing => {
                if st.ivs.contains(&p.iv) {
                    return VerificationVerdict::reject(VerdictReason::KeyReplayed);
                }
                match keys.secret(serial) {
                    Some(s) => s,
                    None => return VerificationVerdict::reject(VerdictReason::UnknownKey),
                }
            }
            _ => match keys.lookup_for_verify(serial) {
                Ok(s) => s,
                Err(KeyStoreError::UnknownSerial(_)) => return VerificationVerdict::reject(VerdictReason::UnknownKey),
                Err(_) => return VerificationVerdict::reject(VerdictReason::KeyReplayed),
            },
        };

        let now = clock.now_ms();
        if now.abs_diff(p.total.timestamp_ms) > self.policy.delta_ms {
            return VerificationVerdict::reject(VerdictReason::StaleTimestamp);
        }
        if p.total.topic != expected_topic {
            return VerificationVerdict::reject(VerdictReason::TopicMismatch);
        }
        let data = p.total.canonical_bytes();
        if !gmac_verify(secret.as_bytes(), &p.iv, &data, &p.mac).unwrap_or(false) {
            return VerificationVerdict::reject(VerdictReason::MacMismatch);
        }

        if !continuing {
            st.serial = Some(serial);
            st.ivs.clear();
            if let Err(e) = keys.mark_verified(serial) {
                tracing::warn!("could not journal verified key {serial}: {e}");
            }
        }
        st.ivs.insert(p.iv);
        if st.last_ts.is_some_and(|last| p.total.timestamp_ms < last) {
            st.ts_regressions += 1;
            tracing::warn!(serial, "timestamp went backwards");
        }
        st.last_ts = st.last_ts.max(Some(p.total.timestamp_ms));
        VerificationVerdict::ok()
    }

    /// Decode then verify; undecodable input is `MALFORMED`.
    pub fn verify_bytes(
        &self,
        bytes: &[u8],
        expected_topic: &str,
        keys: &KeyStore,
        clock: &dyn Clock,
    ) -> VerificationVerdict {
        match decode_payload(bytes) {
            Ok(p) => self.verify(&p, expected_topic, keys, clock),
            Err(_) => VerificationVerdict::reject(VerdictReason::Malformed),
        }
    }
}

/// Empty per-reason failure table with every reason present.
pub fn empty_reason_counts() -> BTreeMap<VerdictReason, u64> {
    VerdictReason::FAILURES.iter().map(|&r| (r, 0)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::keyframe::KeyFrame;

    struct Pair {
        sender: KeyStore,
        receiver: KeyStore,
        ivs: IvStore,
        clock: ManualClock,
        verifier: Verifier,
    }

    fn pair(n_keys: u64) -> Pair {
        let frames: Vec<KeyFrame> = (1..=n_keys).map(|i| KeyFrame::new(i, [(i * 7) as u8; 32])).collect();
        let (sender, receiver) = (KeyStore::new(), KeyStore::new());
        sender.ingest(&frames);
        receiver.ingest(&frames);
        let ivs = IvStore::new();
        ivs.chunk(&(0..=255u8).cycle().take(16 * 64).collect::<Vec<_>>());
        Pair {
            sender,
            receiver,
            ivs,
            clock: ManualClock::new(1_000_000),
            verifier: Verifier::new(PartyRole::Even, FreshnessPolicy::default()),
        }
    }

    fn send(p: &Pair, msg: &[u8], topic: &str) -> Created {
        create_payload(
            msg,
            topic,
            PartyRole::Odd,
            PoolPolicy::default(),
            &p.sender,
            &p.ivs,
            &p.clock,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_ok() {
        let p = pair(40);
        let c = send(&p, b"setpoint=5", "PV/Control");
        let v = p.verifier.verify(&c.payload, "PV/Control", &p.receiver, &p.clock);
        assert_eq!(v, VerificationVerdict::ok());
        assert!(p.receiver.record(c.payload.total.key_serial).unwrap().used.is_some());
    }

    #[test]
    fn topic_is_authenticated() {
        let p = pair(40);
        let c = send(&p, b"x", "PV/Control");
        assert_eq!(c.payload.total.topic, "PV/Control");
        let v = p.verifier.verify(&c.payload, "PV/Measurement", &p.receiver, &p.clock);
        assert_eq!(v.reason, VerdictReason::TopicMismatch);
    }

    #[test]
    fn replay_is_key_replayed() {
        let p = pair(40);
        let c = send(&p, b"x", "t");
        assert!(p.verifier.verify(&c.payload, "t", &p.receiver, &p.clock).accepted);
        let again = p.verifier.verify(&c.payload, "t", &p.receiver, &p.clock);
        assert_eq!(again.reason, VerdictReason::KeyReplayed);
    }

    #[test]
    fn reuse_mode_gets_new_iv_and_verifies() {
        // 31 keys: first payload advances (31 > 30), then the pool is at 30.
        let p = pair(31);
        let a = send(&p, b"a", "t");
        let b = send(&p, b"a", "t");
        assert!(a.fresh_key && !b.fresh_key);
        assert_eq!(a.payload.total.key_serial, b.payload.total.key_serial);
        assert_ne!(a.payload.iv, b.payload.iv);
        assert_ne!(a.payload.mac, b.payload.mac);
        for c in [&a, &b] {
            assert!(p.verifier.verify(&c.payload, "t", &p.receiver, &p.clock).accepted);
        }
        let again = p.verifier.verify(&a.payload, "t", &p.receiver, &p.clock);
        assert_eq!(again.reason, VerdictReason::KeyReplayed);
    }

    #[test]
    fn stale_window_is_symmetric() {
        let p = pair(40);
        let c = send(&p, b"x", "t");
        p.clock.advance(DEFAULT_DELTA_MS + 1);
        let v = p.verifier.verify(&c.payload, "t", &p.receiver, &p.clock);
        assert_eq!(v.reason, VerdictReason::StaleTimestamp);
        let early = ManualClock::new(1_000_000 - DEFAULT_DELTA_MS - 1);
        let v = p.verifier.verify(&c.payload, "t", &p.receiver, &early);
        assert_eq!(v.reason, VerdictReason::StaleTimestamp);
        let edge = ManualClock::new(1_000_000 + DEFAULT_DELTA_MS);
        assert!(p.verifier.verify(&c.payload, "t", &p.receiver, &edge).accepted);
    }

    #[test]
    fn forged_mac_does_not_burn_key() {
        let p = pair(40);
        let c = send(&p, b"x", "t");
        let mut forged = c.payload.clone();
        forged.total.message[0] ^= 1;
        let v = p.verifier.verify(&forged, "t", &p.receiver, &p.clock);
        assert_eq!(v.reason, VerdictReason::MacMismatch);
        assert!(p.verifier.verify(&c.payload, "t", &p.receiver, &p.clock).accepted);
    }

    #[test]
    fn own_partition_and_unknown_serials() {
        let p = pair(40);
        let mut c = send(&p, b"x", "t").payload;
        c.total.key_serial = 4;
        assert_eq!(
            p.verifier.verify(&c, "t", &p.receiver, &p.clock).reason,
            VerdictReason::KeyReplayed
        );
        c.total.key_serial = 999;
        assert_eq!(
            p.verifier.verify(&c, "t", &p.receiver, &p.clock).reason,
            VerdictReason::UnknownKey
        );
    }

    #[test]
    fn malformed_bytes() {
        let p = pair(40);
        let v = p.verifier.verify_bytes(b"not-a-payload", "t", &p.receiver, &p.clock);
        assert_eq!(v.reason, VerdictReason::Malformed);
    }

    #[test]
    fn bad_topic_consumes_nothing() {
        let p = pair(40);
        let before = p.ivs.counters();
        let err = create_payload(
            b"x",
            "PV-Control",
            PartyRole::Odd,
            PoolPolicy::default(),
            &p.sender,
            &p.ivs,
            &p.clock,
        )
        .unwrap_err();
        assert_eq!(err.code(), "bad-topic");
        assert_eq!(p.ivs.counters(), before);
    }

    #[test]
    fn reason_names_round_trip() {
        for r in VerdictReason::FAILURES {
            assert_eq!(r.as_str().parse::<VerdictReason>().unwrap(), r);
            assert_eq!(serde_json::to_string(&r).unwrap(), format!("\"{}\"", r.as_str()));
        }
    }
}
