//! Authenticated message layout and its text encoding.
//!
//! The MAC covers the canonical bytes of [`TotalMessage`]: for each of
//! message, topic, serial and timestamp a 4-byte big-endian length followed
//! by the field bytes (serial and timestamp as 8-byte big-endian integers).
//!
//! On the wire a payload is six `-` separated ASCII fields:
//! `base64(m)-t-n-ts-base64(iv)-base64(mac)`, with `n` and `ts` in canonical
//! decimal. Topics may not contain `-`.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use super::gmac::TAG_LEN;
use crate::ivstore::IV_LEN;

pub const DELIMITER: char = '-';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TotalMessage {
    pub message: Vec<u8>,
    pub topic: String,
    pub key_serial: u64,
    /// Unix epoch milliseconds.
    pub timestamp_ms: u64,
}

impl TotalMessage {
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.message.len() + self.topic.len() + 32);
        let mut field = |bytes: &[u8]| {
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(bytes);
        };
        field(&self.message);
        field(self.topic.as_bytes());
        field(&self.key_serial.to_be_bytes());
        field(&self.timestamp_ms.to_be_bytes());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthPayload {
    pub total: TotalMessage,
    pub iv: [u8; IV_LEN],
    pub mac: [u8; TAG_LEN],
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("payload is not UTF-8")]
    NotText,
    #[error("expected 6 fields, found {0}")]
    FieldCount(usize),
    #[error("field {field}: {reason}")]
    Field { field: &'static str, reason: String },
}

pub fn valid_topic(topic: &str) -> bool {
    !topic.contains(DELIMITER)
}

pub fn encode_payload(p: &AuthPayload) -> String {
    debug_assert!(valid_topic(&p.total.topic));
    format!(
        "{}{d}{}{d}{}{d}{}{d}{}{d}{}",
        STANDARD.encode(&p.total.message),
        p.total.topic,
        p.total.key_serial,
        p.total.timestamp_ms,
        STANDARD.encode(p.iv),
        STANDARD.encode(p.mac),
        d = DELIMITER,
    )
}

fn decimal(field: &'static str, s: &str) -> Result<u64, DecodeError> {
    let bad = |reason: &str| DecodeError::Field {
        field,
        reason: reason.to_string(),
    };
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad("not a decimal integer"));
    }
    if s.len() > 1 && s.starts_with('0') {
        return Err(bad("leading zero"));
    }
    s.parse().map_err(|_| bad("out of range"))
}

fn binary<const N: usize>(field: &'static str, s: &str) -> Result<[u8; N], DecodeError> {
    let bytes = STANDARD.decode(s).map_err(|e| DecodeError::Field {
        field,
        reason: e.to_string(),
    })?;
    let len = bytes.len();
    bytes.try_into().map_err(|_| DecodeError::Field {
        field,
        reason: format!("expected {N} bytes, got {len}"),
    })
}

pub fn decode_payload(bytes: &[u8]) -> Result<AuthPayload, DecodeError> {
    let text = std::str::from_utf8(bytes).map_err(|_| DecodeError::NotText)?;
    let fields: Vec<&str> = text.split(DELIMITER).collect();
    let [m, t, n, ts, iv, mac] = fields[..] else {
        return Err(DecodeError::FieldCount(fields.len()));
    };
    let message = STANDARD.decode(m).map_err(|e| DecodeError::Field {
        field: "message",
        reason: e.to_string(),
    })?;
    Ok(AuthPayload {
        total: TotalMessage {
            message,
            topic: t.to_string(),
            key_serial: decimal("serial", n)?,
            timestamp_ms: decimal("timestamp", ts)?,
        },
        iv: binary("iv", iv)?,
        mac: binary("mac", mac)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(message: &[u8], topic: &str) -> AuthPayload {
        AuthPayload {
            total: TotalMessage {
                message: message.to_vec(),
                topic: topic.into(),
                key_serial: 42,
                timestamp_ms: 1_700_000_000_123,
            },
            iv: [0xab; 16],
            mac: [0xcd; 16],
        }
    }

    #[test]
    fn delimiter_in_message_round_trips() {
        let p = sample(b"a-b--c-", "PV/Control");
        assert_eq!(decode_payload(encode_payload(&p).as_bytes()).unwrap(), p);
    }

    #[test]
    fn truncated_is_malformed() {
        let enc = encode_payload(&sample(b"x", "PV/Measurement"));
        for cut in [0, 5, enc.len() / 2, enc.len() - 1] {
            assert!(decode_payload(&enc.as_bytes()[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn rejects_noncanonical_numbers_and_lengths() {
        let enc = encode_payload(&sample(b"x", "t"));
        let bad_serial = enc.replacen("-42-", "-042-", 1);
        assert!(decode_payload(bad_serial.as_bytes()).is_err());
        let mut parts: Vec<String> = enc.split('-').map(String::from).collect();
        parts[4] = STANDARD.encode([0u8; 12]);
        assert!(decode_payload(parts.join("-").as_bytes()).is_err());
    }

    #[test]
    fn canonical_bytes_layout() {
        let tm = TotalMessage {
            message: b"hi".to_vec(),
            topic: "T".into(),
            key_serial: 1,
            timestamp_ms: 2,
        };
        let b = tm.canonical_bytes();
        assert_eq!(b.len(), 4 + 2 + 4 + 1 + 4 + 8 + 4 + 8);
        assert_eq!(&b[..6], &[0, 0, 0, 2, b'h', b'i']);
        assert_eq!(&b[11..15], &[0, 0, 0, 8]);
    }

    proptest! {
        #[test]
        fn round_trip(message in proptest::collection::vec(any::<u8>(), 0..300),
                      topic in "[A-Za-z0-9/_ .]{0,24}",
                      serial in any::<u64>(), ts in any::<u64>(),
                      iv in any::<[u8; 16]>(), mac in any::<[u8; 16]>()) {
            let p = AuthPayload {
                total: TotalMessage { message, topic, key_serial: serial, timestamp_ms: ts },
                iv, mac,
            };
            prop_assert_eq!(decode_payload(encode_payload(&p).as_bytes()).unwrap(), p);
        }

        #[test]
        fn canonical_bytes_injective(a in proptest::collection::vec(any::<u8>(), 0..8),
                                     b in proptest::collection::vec(any::<u8>(), 0..8),
                                     ta in "[a-z]{0,4}", tb in "[a-z]{0,4}") {
            let x = TotalMessage { message: a.clone(), topic: ta.clone(), key_serial: 1, timestamp_ms: 1 };
            let y = TotalMessage { message: b.clone(), topic: tb.clone(), key_serial: 1, timestamp_ms: 1 };
            prop_assert_eq!(x.canonical_bytes() == y.canonical_bytes(), a == b && ta == tb);
        }
    }
}
