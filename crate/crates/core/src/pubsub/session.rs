//! Transport-independent client state.

use std::collections::{BTreeMap, HashSet, VecDeque};

use super::packet::{Packet, Qos};
use super::Delivery;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Awaiting {
    Ack,
    Rec,
    Comp,
}

#[derive(Debug, Clone)]
struct Outbound {
    topic: String,
    qos: Qos,
    payload: Vec<u8>,
    state: Awaiting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionEvent {
    Connected,
    Subscribed {
        packet_id: u16,
        granted: Qos,
    },
    /// Publisher-side flow for this packet id finished.
    Completed {
        packet_id: u16,
    },
}

#[derive(Debug)]
pub struct ClientSession {
    client_id: String,
    connected: bool,
    next_id: u16,
    outbound: BTreeMap<u16, Outbound>,
    pending_subs: BTreeMap<u16, (String, Qos)>,
    granted: BTreeMap<String, Qos>,
    inbound_qos2: HashSet<u16>,
    deliveries: VecDeque<Delivery>,
    events: VecDeque<SessionEvent>,
}

impl ClientSession {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            connected: false,
            next_id: 0,
            outbound: BTreeMap::new(),
            pending_subs: BTreeMap::new(),
            granted: BTreeMap::new(),
            inbound_qos2: HashSet::new(),
            deliveries: VecDeque::new(),
            events: VecDeque::new(),
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn connect(&self) -> Packet {
        Packet::Connect {
            client_id: self.client_id.clone(),
        }
    }

    fn alloc_id(&mut self) -> u16 {
        loop {
            self.next_id = self.next_id.wrapping_add(1);
            if self.next_id != 0
                && !self.outbound.contains_key(&self.next_id)
                && !self.pending_subs.contains_key(&self.next_id)
            {
                return self.next_id;
            }
        }
    }

    pub fn subscribe(&mut self, topic: &str, qos: Qos) -> (u16, Packet) {
        let packet_id = self.alloc_id();
        self.pending_subs.insert(packet_id, (topic.to_string(), qos));
        (
            packet_id,
            Packet::Subscribe {
                packet_id,
                topic: topic.to_string(),
                qos,
            },
        )
    }

    /// Returns the packet id (0 for QoS 0) and the PUBLISH to send.
    pub fn publish(&mut self, topic: &str, qos: Qos, payload: &[u8]) -> (u16, Packet) {
        let packet_id = match qos {
            Qos::AtMostOnce => 0,
            _ => {
                let id = self.alloc_id();
                self.outbound.insert(
                    id,
                    Outbound {
                        topic: topic.to_string(),
                        qos,
                        payload: payload.to_vec(),
                        state: if qos == Qos::AtLeastOnce {
                            Awaiting::Ack
                        } else {
                            Awaiting::Rec
                        },
                    },
                );
                id
            }
        };
        (
            packet_id,
            Packet::Publish {
                packet_id,
                topic: topic.to_string(),
                qos,
                dup: false,
                payload: payload.to_vec(),
            },
        )
    }

    /// Feed a packet from the broker; returns the replies to send.
    pub fn handle(&mut self, packet: Packet) -> Vec<Packet> {
        let mut out = Vec::new();
        match packet {
            Packet::ConnAck { accepted } => {
                if accepted && !self.connected {
                    self.connected = true;
                    self.events.push_back(SessionEvent::Connected);
                }
            }
            Packet::SubAck { packet_id, granted } => {
                if let Some((topic, _)) = self.pending_subs.remove(&packet_id) {
                    self.granted.insert(topic, granted);
                    self.events.push_back(SessionEvent::Subscribed { packet_id, granted });
                }
            }
            Packet::Publish {
                packet_id,
                topic,
                qos,
                dup,
                payload,
            } => {
                let deliver = match qos {
                    Qos::AtMostOnce => true,
                    Qos::AtLeastOnce => {
                        out.push(Packet::PubAck { packet_id });
                        true
                    }
                    Qos::ExactlyOnce => {
                        out.push(Packet::PubRec { packet_id });
                        self.inbound_qos2.insert(packet_id)
                    }
                };
                if deliver {
                    self.deliveries.push_back(Delivery {
                        topic,
                        payload,
                        qos,
                        dup,
                    });
                }
            }
            Packet::PubRel { packet_id } => {
                self.inbound_qos2.remove(&packet_id);
                out.push(Packet::PubComp { packet_id });
            }
            Packet::PubAck { packet_id } => {
                if self.state(packet_id) == Some(Awaiting::Ack) {
                    self.finish(packet_id);
                }
            }
            Packet::PubRec { packet_id } => {
                if let Some(o) = self.outbound.get_mut(&packet_id) {
                    if o.state != Awaiting::Ack {
                        o.state = Awaiting::Comp;
                        out.push(Packet::PubRel { packet_id });
                    }
                }
            }
            Packet::PubComp { packet_id } => {
                if self.state(packet_id) == Some(Awaiting::Comp) {
                    self.finish(packet_id);
                }
            }
            Packet::Connect { .. } | Packet::Subscribe { .. } => {}
        }
        out
    }

    fn state(&self, packet_id: u16) -> Option<Awaiting> {
        self.outbound.get(&packet_id).map(|o| o.state)
    }

    fn finish(&mut self, packet_id: u16) {
        self.outbound.remove(&packet_id);
        self.events.push_back(SessionEvent::Completed { packet_id });
    }

    /// Everything still unacknowledged, in protocol order.
    pub fn retransmit(&self) -> Vec<Packet> {
        let mut out = Vec::new();
        if !self.connected {
            out.push(self.connect());
        }
        for (&packet_id, (topic, qos)) in &self.pending_subs {
            out.push(Packet::Subscribe {
                packet_id,
                topic: topic.clone(),
                qos: *qos,
            });
        }
        for (&packet_id, o) in &self.outbound {
            out.push(match o.state {
                Awaiting::Comp => Packet::PubRel { packet_id },
                _ => Packet::Publish {
                    packet_id,
                    topic: o.topic.clone(),
                    qos: o.qos,
                    dup: true,
                    payload: o.payload.clone(),
                },
            });
        }
        out
    }

    /// Connection lost: in-flight state survives, the handshake restarts.
    pub fn reset_connection(&mut self) {
        self.connected = false;
        for (topic, qos) in std::mem::take(&mut self.granted) {
            let id = self.alloc_id();
            self.pending_subs.insert(id, (topic, qos));
        }
    }

    pub fn take_deliveries(&mut self) -> Vec<Delivery> {
        self.deliveries.drain(..).collect()
    }

    pub fn take_events(&mut self) -> Vec<SessionEvent> {
        self.events.drain(..).collect()
    }

    pub fn granted(&self, topic: &str) -> Option<Qos> {
        self.granted.get(topic).copied()
    }

    pub fn inflight(&self) -> usize {
        self.outbound.len() + self.pending_subs.len()
    }
}
