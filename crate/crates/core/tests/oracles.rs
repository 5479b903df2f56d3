mod common;

use common::*;
use proptest::prelude::*;
use qgrid_core::authcodec::{gmac_tag_any, gmac_verify_any};
use qgrid_core::keyframe::{parse_frame, serialize_frame, FrameError, KeyFrame, KeyStatus, FRAME_LEN, KEY_LEN};
use qgrid_core::keystore::{KeyStore, PartyRole, PoolPolicy};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

#[test]
fn oracle_reproduces_nist_vectors() {
    let v = nist_vectors();
    assert_eq!(v.len(), 60);
    for t in &v {
        assert_eq!(gcm_oracle_tag(&t.key, &t.iv, &t.aad).to_vec(), t.tag);
    }
}

#[test]
fn gmac_matches_nist_vectors() {
    for t in nist_vectors() {
        let tag = gmac_tag_any(&t.key, &t.iv, &t.aad).unwrap();
        assert_eq!(tag.to_vec(), t.tag);
        assert!(gmac_verify_any(&t.key, &t.iv, &t.aad, &tag).unwrap());
    }
}

#[test]
fn gmac_matches_oracle_on_random_inputs() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for key_len in [16, 24, 32] {
        for iv_len in [12, 16] {
            for _ in 0..50 {
                let mut key = vec![0u8; key_len];
                let mut iv = vec![0u8; iv_len];
                let mut aad = vec![0u8; rng.gen_range(0..300)];
                rng.fill_bytes(&mut key);
                rng.fill_bytes(&mut iv);
                rng.fill_bytes(&mut aad);
                assert_eq!(gmac_tag_any(&key, &iv, &aad).unwrap(), gcm_oracle_tag(&key, &iv, &aad));
            }
        }
    }
}

#[test]
fn crc_oracle_check_value() {
    assert_eq!(crc32_bitwise(b"123456789"), 0xCBF4_3926);
    assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
}

#[test]
fn frame_crc_matches_oracle_over_body() {
    for f in frames(200, 3) {
        let bytes = serialize_frame(&f).unwrap();
        let stored = u32::from_be_bytes(bytes[FRAME_LEN - 4..].try_into().unwrap());
        assert_eq!(stored, crc32_bitwise(&bytes[1..FRAME_LEN - 4]));
    }
}

fn status() -> impl Strategy<Value = KeyStatus> {
    prop_oneof![Just(KeyStatus::Unused), Just(KeyStatus::Used)]
}

proptest! {
    #[test]
    fn frame_round_trip(id in any::<u64>(), key in prop::array::uniform32(any::<u8>()), st in status()) {
        let f = KeyFrame { key_id: id, key_data: key.to_vec(), status: st };
        let bytes = serialize_frame(&f).unwrap();
        let (back, used) = parse_frame(&bytes).unwrap();
        prop_assert_eq!(used, FRAME_LEN);
        prop_assert_eq!(back, f);
    }

    #[test]
    fn single_bit_flips_never_parse(id in any::<u64>(), key in prop::array::uniform32(any::<u8>()), bit in 8usize..FRAME_LEN * 8) {
        let mut bytes = serialize_frame(&KeyFrame::new(id, key)).unwrap();
        bytes[bit / 8] ^= 1 << (bit % 8);
        let is_crc_error = matches!(parse_frame(&bytes), Err(FrameError::BadCrc { .. }));
        prop_assert!(is_crc_error);
    }

    #[test]
    fn parity_and_reserve(n in 40u64..200, t in 0u64..60, draws in 1usize..300) {
        let store = KeyStore::new();
        let frames: Vec<KeyFrame> = (1..=n).map(|i| KeyFrame::new(i, [i as u8; KEY_LEN])).collect();
        store.ingest(&frames);
        let policy = PoolPolicy { threshold: t };
        let mut last = [None::<u64>; 2];
        for i in 0..draws {
            let role = if i % 3 == 0 { PartyRole::Even } else { PartyRole::Odd };
            let slot = (role == PartyRole::Even) as usize;
            match store.next_signing_key(role, policy) {
                Ok(k) => {
                    prop_assert!(role.owns(k.serial));
                    if k.fresh {
                        prop_assert!(k.unused_before > t);
                        prop_assert!(last[slot].is_none_or(|l| k.serial > l));
                    } else {
                        prop_assert_eq!(Some(k.serial), last[slot]);
                    }
                    last[slot] = Some(k.serial);
                }
                Err(e) => {
                    prop_assert_eq!(e.code(), "no-key-ever");
                    prop_assert!(last[slot].is_none());
                }
            }
        }
        let c = store.counters();
        prop_assert_eq!(c.added, c.available + c.used + c.rejected);
    }
}
