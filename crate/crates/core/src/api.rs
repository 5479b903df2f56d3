//! JSON bodies exchanged with a node service.

use serde::{Deserialize, Serialize};

use crate::authcodec::VerdictReason;
use crate::ivstore::IvCounters;
use crate::keyframe::ScannedFrame;
use crate::keystore::{IngestReport, KeyCounters, PartyRole};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub node_id: String,
    pub party: PartyRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyStatus {
    pub counters: KeyCounters,
    pub reserve_threshold: u64,
    pub last_signing_serial: Option<u64>,
    pub counterpart_watermark: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestResult {
    pub frames: u64,
    pub crc_failures: u64,
    pub report: IngestReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvStatus {
    pub counters: IvCounters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkResult {
    pub added: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateRequest {
    pub message: String,
    pub topic: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateResponse {
    pub payload: String,
    pub key_serial: u64,
    pub fresh_key: bool,
    pub iv_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyRequest {
    pub payload: String,
    pub topic: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyResponse {
    pub accepted: bool,
    pub reason: VerdictReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameInfo {
    pub offset: u64,
    pub key_id: u64,
    pub status: String,
    pub crc: String,
    pub crc_ok: bool,
}

impl From<&ScannedFrame> for FrameInfo {
    fn from(s: &ScannedFrame) -> Self {
        Self {
            offset: s.offset,
            key_id: s.frame.key_id,
            status: format!("{:?}", s.frame.status).to_uppercase(),
            crc: format!("{:08x}", s.stored_crc),
            crc_ok: s.crc_ok,
        }
    }
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
    pub message: String,
}
