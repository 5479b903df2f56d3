#![allow(dead_code)]

use std::sync::Arc;

use aes::cipher::{BlockEncrypt, KeyInit};
use aes::{Aes128, Aes192, Aes256};
use qgrid_core::agents::{KeySource, KeySourceConfig};
use qgrid_core::authcodec::FreshnessPolicy;
use qgrid_core::clock::{Clock, ManualClock};
use qgrid_core::ivstore::CsprngSource;
use qgrid_core::keyframe::KeyFrame;
use qgrid_core::keystore::{KeyStore, PartyRole, PoolPolicy};
use qgrid_core::node::Node;

pub const EPOCH_MS: u64 = 1_700_000_000_000;

/// Bitwise reflected CRC-32 (poly 0xEDB88320).
pub fn crc32_bitwise(data: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn aes_block(key: &[u8], block: u128) -> u128 {
    let mut b = block.to_be_bytes().into();
    match key.len() {
        16 => Aes128::new_from_slice(key).unwrap().encrypt_block(&mut b),
        24 => Aes192::new_from_slice(key).unwrap().encrypt_block(&mut b),
        32 => Aes256::new_from_slice(key).unwrap().encrypt_block(&mut b),
        n => panic!("bad key length {n}"),
    }
    u128::from_be_bytes(b.into())
}

/// Multiplication in GF(2^128) with the GCM bit order, shift-and-add.
fn gf_mul(x: u128, y: u128) -> u128 {
    const R: u128 = 0xE1 << 120;
    let mut z = 0u128;
    let mut v = y;
    for i in 0..128 {
        if (x >> (127 - i)) & 1 == 1 {
            z ^= v;
        }
        v = if v & 1 == 1 { (v >> 1) ^ R } else { v >> 1 };
    }
    z
}

fn ghash(h: u128, data: &[u8]) -> u128 {
    let mut y = 0u128;
    for chunk in data.chunks(16) {
        let mut block = [0u8; 16];
        block[..chunk.len()].copy_from_slice(chunk);
        y = gf_mul(y ^ u128::from_be_bytes(block), h);
    }
    y
}

fn padded(data: &[u8]) -> Vec<u8> {
    let mut v = data.to_vec();
    v.resize(data.len().div_ceil(16) * 16, 0);
    v
}

/// Reference GCM tag with an empty plaintext and `aad` as associated data.
pub fn gcm_oracle_tag(key: &[u8], iv: &[u8], aad: &[u8]) -> [u8; 16] {
    let h = aes_block(key, 0);
    let j0 = if iv.len() == 12 {
        let mut b = [0u8; 16];
        b[..12].copy_from_slice(iv);
        b[15] = 1;
        u128::from_be_bytes(b)
    } else {
        let mut s = padded(iv);
        s.extend_from_slice(&[0u8; 8]);
        s.extend_from_slice(&((iv.len() as u64) * 8).to_be_bytes());
        ghash(h, &s)
    };
    let mut s = padded(aad);
    s.extend_from_slice(&((aad.len() as u64) * 8).to_be_bytes());
    s.extend_from_slice(&0u64.to_be_bytes());
    (aes_block(key, j0) ^ ghash(h, &s)).to_be_bytes()
}

pub struct NistVector {
    pub key: Vec<u8>,
    pub iv: Vec<u8>,
    pub aad: Vec<u8>,
    pub tag: Vec<u8>,
}

/// AES-256 GCM vectors with empty plaintext: `key iv aad tag` per line.
pub fn nist_vectors() -> Vec<NistVector> {
    include_str!("../data/gmac_aes256_aad_only.txt")
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<Vec<u8>> = l.split_whitespace().map(|h| hex::decode(h).unwrap()).collect();
            NistVector {
                key: f[0].clone(),
                iv: f[1].clone(),
                aad: f[2].clone(),
                tag: f[3].clone(),
            }
        })
        .collect()
}

pub fn frames(count: u64, seed: u64) -> Vec<KeyFrame> {
    let cfg = KeySourceConfig {
        warmup_keys: count,
        duration_s: Some(1.0),
        mean_keys_per_sec: 1.0,
        ..KeySourceConfig::default()
    };
    let mut f = KeySource::new(cfg, seed).advance_to(0);
    f.truncate(count as usize);
    f
}

pub fn node(id: &str, role: PartyRole, clock: &ManualClock, seed: u64) -> Arc<Node> {
    Arc::new(
        Node::new(
            id,
            role,
            PoolPolicy::default(),
            FreshnessPolicy::default(),
            KeyStore::new(),
            Arc::new(clock.clone()) as Arc<dyn Clock>,
        )
        .with_entropy(Box::new(CsprngSource::from_seed(seed))),
    )
}

/// An ODD sender and EVEN receiver sharing `keys` frames, on one manual clock.
pub fn pair(keys: u64, seed: u64) -> (Arc<Node>, Arc<Node>, ManualClock) {
    let clock = ManualClock::new(EPOCH_MS);
    let sender = node("INTEL", PartyRole::Odd, &clock, seed);
    let receiver = node("PV", PartyRole::Even, &clock, seed ^ 1);
    let f = frames(keys, seed);
    sender.ingest(&f);
    receiver.ingest(&f);
    (sender, receiver, clock)
}

use qgrid_core::authcodec::{encode_payload, VerdictReason};
use qgrid_core::pubsub::{Fault, FaultSchedule, InProcessBus, Qos};

pub const TOPIC: &str = "PV/Measurement";

pub struct DropRun {
    pub packets: u64,
    pub settled: bool,
    pub verdicts: Vec<VerdictReason>,
}

/// Publish one authenticated message at `qos`, dropping the packet at
/// `drop` (counted from the PUBLISH), then retransmit until quiet.
pub fn single_drop_run(qos: Qos, drop: Option<u64>) -> DropRun {
    let bus = InProcessBus::new();
    let publisher = bus.connect("INTEL").unwrap();
    let subscriber = bus.connect("PV").unwrap();
    subscriber.subscribe(TOPIC, qos).unwrap();
    assert!(bus.settle(4));
    assert_eq!(subscriber.granted(TOPIC), Some(qos));

    let (sender, receiver, _clock) = pair(100, 5);
    let created = sender.create(br#"{"p_kw":12.5}"#, TOPIC).unwrap();
    let bytes = encode_payload(&created.payload).into_bytes();

    let base = bus.sent();
    if let Some(d) = drop {
        bus.set_injector(FaultSchedule::single(base + d, Fault::Drop));
    }
    publisher.publish(TOPIC, qos, &bytes).unwrap();
    let settled = bus.settle(16);
    let verdicts = subscriber
        .poll()
        .iter()
        .map(|d| receiver.verify_bytes(&d.payload, &d.topic).reason)
        .collect();
    DropRun {
        packets: bus.sent() - base,
        settled,
        verdicts,
    }
}

/// Every single-drop position of the undisturbed flow, plus the clean run.
pub fn exhaustive_single_drop(qos: Qos) -> Vec<(Option<u64>, DropRun)> {
    let clean = single_drop_run(qos, None);
    let mut out: Vec<(Option<u64>, DropRun)> = (0..clean.packets)
        .map(|i| (Some(i), single_drop_run(qos, Some(i))))
        .collect();
    out.insert(0, (None, clean));
    out
}
