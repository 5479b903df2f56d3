//! Minimal publish/subscribe bus with QoS 0/1/2.
//!
//! Protocol state lives in [`BrokerCore`] and [`ClientSession`], which
//! consume and produce [`Packet`]s without doing any I/O. Two transports
//! drive them: [`InProcessBus`] for deterministic tests with fault
//! injection, and a TCP transport with length-prefixed frames.
//!
//! Topic filters are exact matches. Nothing is retained.

pub mod broker;
pub mod inproc;
pub mod packet;
pub mod session;
pub mod tcp;

pub use broker::{BrokerAction, BrokerCore, ConnId};
pub use inproc::{Fault, FaultInjector, FaultSchedule, InProcClient, InProcessBus, RandomFaults, Transit};
pub use packet::{FrameBuffer, Packet, PacketError, Qos};
pub use session::{ClientSession, SessionEvent};
pub use tcp::{spawn_broker, BrokerHandle, TcpClient};

pub const DEFAULT_PORT: u16 = 1883;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub topic: String,
    pub payload: Vec<u8>,
    pub qos: Qos,
    pub dup: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    /// Zero for QoS 0.
    pub packet_id: u16,
    pub qos: Qos,
}

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("broker unavailable: {0}")]
    BrokerUnavailable(String),
    #[error("session is not connected")]
    NotConnected,
    #[error("topic filter must be non-empty")]
    BadTopic,
}

impl BusError {
    pub fn code(&self) -> &'static str {
        match self {
            BusError::BrokerUnavailable(_) => "broker-unavailable",
            BusError::NotConnected => "not-connected",
            BusError::BadTopic => "bad-topic",
        }
    }
}

pub(crate) fn check_topic(topic: &str) -> Result<(), BusError> {
    if topic.is_empty() {
        Err(BusError::BadTopic)
    } else {
        Ok(())
    }
}
