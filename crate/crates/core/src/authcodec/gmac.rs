//! GMAC: AES-GCM with an empty plaintext and the data as associated data.

use aes::{Aes128, Aes192, Aes256};
use aes_gcm::aead::consts::{U12, U16};
use aes_gcm::aead::generic_array::GenericArray;
use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::AesGcm;

use crate::ivstore::IV_LEN;
use crate::keyframe::KEY_LEN;

pub const TAG_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GmacError {
    #[error("unsupported key length {0}")]
    BadKeyLength(usize),
    #[error("unsupported iv length {0}")]
    BadIvLength(usize),
}

impl GmacError {
    pub fn code(&self) -> &'static str {
        match self {
            GmacError::BadKeyLength(_) => "bad-key-length",
            GmacError::BadIvLength(_) => "bad-iv-length",
        }
    }
}

macro_rules! with_cipher {
    ($key:expr, $iv:expr, |$c:ident, $n:ident| $body:expr) => {{
        let key: &[u8] = $key;
        let iv: &[u8] = $iv;
        match (key.len(), iv.len()) {
            (16, 12) => {
                let $c = AesGcm::<Aes128, U12>::new_from_slice(key).unwrap();
                let $n = GenericArray::<u8, U12>::from_slice(iv);
                $body
            }
            (16, 16) => {
                let $c = AesGcm::<Aes128, U16>::new_from_slice(key).unwrap();
                let $n = GenericArray::<u8, U16>::from_slice(iv);
                $body
            }
            (24, 12) => {
                let $c = AesGcm::<Aes192, U12>::new_from_slice(key).unwrap();
                let $n = GenericArray::<u8, U12>::from_slice(iv);
                $body
            }
            (24, 16) => {
                let $c = AesGcm::<Aes192, U16>::new_from_slice(key).unwrap();
                let $n = GenericArray::<u8, U16>::from_slice(iv);
                $body
            }
            (32, 12) => {
                let $c = AesGcm::<Aes256, U12>::new_from_slice(key).unwrap();
                let $n = GenericArray::<u8, U12>::from_slice(iv);
                $body
            }
            (32, 16) => {
                let $c = AesGcm::<Aes256, U16>::new_from_slice(key).unwrap();
                let $n = GenericArray::<u8, U16>::from_slice(iv);
                $body
            }
            (16 | 24 | 32, other) => return Err(GmacError::BadIvLength(other)),
            (other, _) => return Err(GmacError::BadKeyLength(other)),
        }
    }};
}

/// GMAC tag for any AES key size (128/192/256-bit) and a 96- or 128-bit IV.
pub fn gmac_tag_any(key: &[u8], iv: &[u8], data: &[u8]) -> Result<[u8; TAG_LEN], GmacError> {
    with_cipher!(key, iv, |cipher, nonce| {
        let tag = cipher
            .encrypt_in_place_detached(nonce, data, &mut [])
            .expect("empty plaintext is within GCM limits");
        Ok(tag.into())
    })
}

/// Constant-time check of `tag` against the GMAC of `data`.
pub fn gmac_verify_any(key: &[u8], iv: &[u8], data: &[u8], tag: &[u8; TAG_LEN]) -> Result<bool, GmacError> {
    with_cipher!(key, iv, |cipher, nonce| {
        Ok(cipher
            .decrypt_in_place_detached(nonce, data, &mut [], GenericArray::from_slice(tag))
            .is_ok())
    })
}

/// Protocol GMAC: 256-bit key, 128-bit IV.
pub fn gmac_tag(key: &[u8], iv: &[u8], data: &[u8]) -> Result<[u8; TAG_LEN], GmacError> {
    check_protocol_lengths(key, iv)?;
    gmac_tag_any(key, iv, data)
}

pub fn gmac_verify(key: &[u8], iv: &[u8], data: &[u8], tag: &[u8; TAG_LEN]) -> Result<bool, GmacError> {
    check_protocol_lengths(key, iv)?;
    gmac_verify_any(key, iv, data, tag)
}

fn check_protocol_lengths(key: &[u8], iv: &[u8]) -> Result<(), GmacError> {
    if key.len() != KEY_LEN {
        return Err(GmacError::BadKeyLength(key.len()));
    }
    if iv.len() != IV_LEN {
        return Err(GmacError::BadIvLength(iv.len()));
    }
    Ok(())
}
