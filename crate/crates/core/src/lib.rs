//! Authentication of publish/subscribe SCADA traffic with pre-shared keys
//! taken from a QKD key feed.
//!
//! Each node keeps an identical table of 256-bit keys (odd serials for one
//! party, even for the other), a private pool of single-use 128-bit IVs, and
//! tags every outgoing message with GMAC over `message || topic || serial ||
//! timestamp`.

pub mod agents;
pub mod api;
pub mod authcodec;
pub mod bench;
pub mod clock;
pub mod ivstore;
pub mod keyframe;
pub mod keystore;
pub mod node;
pub mod pubsub;
pub mod stats;
