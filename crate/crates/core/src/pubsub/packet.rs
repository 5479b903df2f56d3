//! Control packets and their length-prefixed framing.
//!
//! Frame: 4-byte big-endian body length, then the body. The body starts
//! with a one-byte packet type followed by type-specific fields. Strings are
//! a 2-byte big-endian length plus UTF-8 bytes; a PUBLISH payload runs to
//! the end of the body.

use serde::{Deserialize, Serialize};

pub const MAX_FRAME: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Qos {
    #[serde(rename = "0")]
    AtMostOnce,
    #[serde(rename = "1")]
    AtLeastOnce,
    #[serde(rename = "2")]
    ExactlyOnce,
}

impl Qos {
    pub fn level(self) -> u8 {
        self as u8
    }

    pub fn from_level(level: u8) -> Option<Qos> {
        match level {
            0 => Some(Qos::AtMostOnce),
            1 => Some(Qos::AtLeastOnce),
            2 => Some(Qos::ExactlyOnce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect {
        client_id: String,
    },
    ConnAck {
        accepted: bool,
    },
    Publish {
        packet_id: u16,
        topic: String,
        qos: Qos,
        dup: bool,
        payload: Vec<u8>,
    },
    PubAck {
        packet_id: u16,
    },
    PubRec {
        packet_id: u16,
    },
    PubRel {
        packet_id: u16,
    },
    PubComp {
        packet_id: u16,
    },
    Subscribe {
        packet_id: u16,
        topic: String,
        qos: Qos,
    },
    SubAck {
        packet_id: u16,
        granted: Qos,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PacketError {
    #[error("empty packet")]
    Empty,
    #[error("unknown packet type {0:#04x}")]
    UnknownType(u8),
    #[error("packet truncated")]
    Truncated,
    #[error("invalid qos {0}")]
    BadQos(u8),
    #[error("topic is not UTF-8")]
    BadString,
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
}

const CONNECT: u8 = 1;
const CONNACK: u8 = 2;
const PUBLISH: u8 = 3;
const PUBACK: u8 = 4;
const PUBREC: u8 = 5;
const PUBREL: u8 = 6;
const PUBCOMP: u8 = 7;
const SUBSCRIBE: u8 = 8;
const SUBACK: u8 = 9;

const DUP_FLAG: u8 = 0x08;

impl Packet {
    pub fn kind(&self) -> &'static str {
        match self {
            Packet::Connect { .. } => "CONNECT",
            Packet::ConnAck { .. } => "CONNACK",
            Packet::Publish { .. } => "PUBLISH",
            Packet::PubAck { .. } => "PUBACK",
            Packet::PubRec { .. } => "PUBREC",
            Packet::PubRel { .. } => "PUBREL",
            Packet::PubComp { .. } => "PUBCOMP",
            Packet::Subscribe { .. } => "SUBSCRIBE",
            Packet::SubAck { .. } => "SUBACK",
        }
    }

    /// Packet body without the length prefix.
    pub fn encode_body(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let put_str = |b: &mut Vec<u8>, s: &str| {
            b.extend_from_slice(&(s.len() as u16).to_be_bytes());
            b.extend_from_slice(s.as_bytes());
        };
        match self {
            Packet::Connect { client_id } => {
                b.push(CONNECT);
                put_str(&mut b, client_id);
            }
            Packet::ConnAck { accepted } => {
                b.push(CONNACK);
                b.push(u8::from(*accepted));
            }
            Packet::Publish {
                packet_id,
                topic,
                qos,
                dup,
                payload,
            } => {
                b.push(PUBLISH);
                b.push(qos.level() | if *dup { DUP_FLAG } else { 0 });
                b.extend_from_slice(&packet_id.to_be_bytes());
                put_str(&mut b, topic);
                b.extend_from_slice(payload);
            }
            Packet::PubAck { packet_id } => id_packet(&mut b, PUBACK, *packet_id),
            Packet::PubRec { packet_id } => id_packet(&mut b, PUBREC, *packet_id),
            Packet::PubRel { packet_id } => id_packet(&mut b, PUBREL, *packet_id),
            Packet::PubComp { packet_id } => id_packet(&mut b, PUBCOMP, *packet_id),
            Packet::Subscribe { packet_id, topic, qos } => {
                b.push(SUBSCRIBE);
                b.extend_from_slice(&packet_id.to_be_bytes());
                put_str(&mut b, topic);
                b.push(qos.level());
            }
            Packet::SubAck { packet_id, granted } => {
                b.push(SUBACK);
                b.extend_from_slice(&packet_id.to_be_bytes());
                b.push(granted.level());
            }
        }
        b
    }

    /// Length-prefixed frame ready for a stream socket.
    pub fn encode_frame(&self) -> Vec<u8> {
        let body = self.encode_body();
        let mut out = Vec::with_capacity(body.len() + 4);
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn decode_body(body: &[u8]) -> Result<Packet, PacketError> {
        let (&kind, rest) = body.split_first().ok_or(PacketError::Empty)?;
        let mut r = Reader(rest);
        let packet = match kind {
            CONNECT => Packet::Connect { client_id: r.string()? },
            CONNACK => Packet::ConnAck { accepted: r.u8()? != 0 },
            PUBLISH => {
                let flags = r.u8()?;
                let qos = Qos::from_level(flags & 0x03).ok_or(PacketError::BadQos(flags & 0x03))?;
                let packet_id = r.u16()?;
                let topic = r.string()?;
                let payload = std::mem::take(&mut r.0).to_vec();
                Packet::Publish {
                    packet_id,
                    topic,
                    qos,
                    dup: flags & DUP_FLAG != 0,
                    payload,
                }
            }
            PUBACK => Packet::PubAck { packet_id: r.u16()? },
            PUBREC => Packet::PubRec { packet_id: r.u16()? },
            PUBREL => Packet::PubRel { packet_id: r.u16()? },
            PUBCOMP => Packet::PubComp { packet_id: r.u16()? },
            SUBSCRIBE => {
                let packet_id = r.u16()?;
                let topic = r.string()?;
                let level = r.u8()?;
                Packet::Subscribe {
                    packet_id,
                    topic,
                    qos: Qos::from_level(level).ok_or(PacketError::BadQos(level))?,
                }
            }
            SUBACK => {
                let packet_id = r.u16()?;
                let level = r.u8()?;
                Packet::SubAck {
                    packet_id,
                    granted: Qos::from_level(level).ok_or(PacketError::BadQos(level))?,
                }
            }
            other => return Err(PacketError::UnknownType(other)),
        };
        if !r.0.is_empty() {
            return Err(PacketError::Trailing(r.0.len()));
        }
        Ok(packet)
    }
}

fn id_packet(b: &mut Vec<u8>, kind: u8, id: u16) {
    b.push(kind);
    b.extend_from_slice(&id.to_be_bytes());
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], PacketError> {
        if self.0.len() < n {
            return Err(PacketError::Truncated);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, PacketError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, PacketError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, PacketError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| PacketError::BadString)
    }
}

/// Incremental frame splitter for byte streams.
#[derive(Debug, Default)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete packet, if one is buffered.
    pub fn next_packet(&mut self) -> Option<Result<Packet, PacketError>> {
        if self.buf.len() < 4 {
            return None;
        }
        let len = u32::from_be_bytes(self.buf[..4].try_into().unwrap()) as usize;
        if len > MAX_FRAME {
            return Some(Err(PacketError::TooLarge(len)));
        }
        if self.buf.len() < 4 + len {
            return None;
        }
        let packet = Packet::decode_body(&self.buf[4..4 + len]);
        self.buf.drain(..4 + len);
        Some(packet)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn qos() -> impl Strategy<Value = Qos> {
        prop_oneof![Just(Qos::AtMostOnce), Just(Qos::AtLeastOnce), Just(Qos::ExactlyOnce)]
    }

    fn packet() -> impl Strategy<Value = Packet> {
        prop_oneof![
            "[a-zA-Z0-9]{0,12}".prop_map(|client_id| Packet::Connect { client_id }),
            any::<bool>().prop_map(|accepted| Packet::ConnAck { accepted }),
            (
                any::<u16>(),
                "[a-zA-Z/]{1,16}",
                qos(),
                any::<bool>(),
                proptest::collection::vec(any::<u8>(), 0..64)
            )
                .prop_map(|(packet_id, topic, qos, dup, payload)| Packet::Publish {
                    packet_id,
                    topic,
                    qos,
                    dup,
                    payload
                }),
            any::<u16>().prop_map(|packet_id| Packet::PubAck { packet_id }),
            any::<u16>().prop_map(|packet_id| Packet::PubRec { packet_id }),
            any::<u16>().prop_map(|packet_id| Packet::PubRel { packet_id }),
            any::<u16>().prop_map(|packet_id| Packet::PubComp { packet_id }),
            (any::<u16>(), "[a-zA-Z/]{1,16}", qos()).prop_map(|(packet_id, topic, qos)| Packet::Subscribe {
                packet_id,
                topic,
                qos
            }),
            (any::<u16>(), qos()).prop_map(|(packet_id, granted)| Packet::SubAck { packet_id, granted }),
        ]
    }

    proptest! {
        #[test]
        fn frames_round_trip_through_buffer(packets in proptest::collection::vec(packet(), 1..8), split in 0usize..64) {
            let bytes: Vec<u8> = packets.iter().flat_map(|p| p.encode_frame()).collect();
            let split = split.min(bytes.len());
            let mut fb = FrameBuffer::default();
            let mut out = Vec::new();
            for part in [&bytes[..split], &bytes[split..]] {
                fb.extend(part);
                while let Some(p) = fb.next_packet() {
                    out.push(p.unwrap());
                }
            }
            prop_assert_eq!(out, packets);
        }
    }

    #[test]
    fn publish_wire_layout() {
        let p = Packet::Publish {
            packet_id: 0x0102,
            topic: "a".into(),
            qos: Qos::ExactlyOnce,
            dup: true,
            payload: vec![0xff],
        };
        assert_eq!(p.encode_frame(), vec![0, 0, 0, 8, 3, 0x0a, 1, 2, 0, 1, b'a', 0xff]);
    }

    #[test]
    fn rejects_bad_bodies() {
        assert_eq!(Packet::decode_body(&[]), Err(PacketError::Empty));
        assert_eq!(Packet::decode_body(&[42]), Err(PacketError::UnknownType(42)));
        assert_eq!(Packet::decode_body(&[PUBACK, 0]), Err(PacketError::Truncated));
        assert_eq!(Packet::decode_body(&[SUBACK, 0, 1, 3]), Err(PacketError::BadQos(3)));
        assert_eq!(Packet::decode_body(&[PUBACK, 0, 1, 9]), Err(PacketError::Trailing(1)));
    }
}
