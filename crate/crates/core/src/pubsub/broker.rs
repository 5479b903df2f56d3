//! Transport-independent broker state.
//!
//! The broker never looks inside payloads; it only routes them by exact
//! topic match. QoS 2 inbound messages are forwarded on the first PUBLISH
//! and their packet id is remembered until PUBREL, so retransmissions are
//! not forwarded twice.

use std::collections::{BTreeMap, HashSet};

use super::packet::{Packet, Qos};

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BrokerAction {
    Send(ConnId, Packet),
    /// Connection superseded by a newer one with the same client id.
    Close(ConnId),
}

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

#[derive(Debug, Default)]
struct Session {
    conn: ConnId,
    next_id: u16,
    outbound: BTreeMap<u16, Outbound>,
    inbound_qos2: HashSet<u16>,
}

impl Session {
    fn alloc_id(&mut self) -> u16 {
        loop {
            self.next_id = self.next_id.wrapping_add(1);
            if self.next_id != 0 && !self.outbound.contains_key(&self.next_id) {
                return self.next_id;
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct BrokerCore {
    sessions: BTreeMap<String, Session>,
    conns: BTreeMap<ConnId, String>,
    /// topic -> client id -> granted qos
    subscriptions: BTreeMap<String, BTreeMap<String, Qos>>,
}

impl BrokerCore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn handle(&mut self, conn: ConnId, packet: Packet) -> Vec<BrokerAction> {
        let mut out = Vec::new();
        if let Packet::Connect { client_id } = &packet {
            self.connect(conn, client_id, &mut out);
            return out;
        }
        let Some(client) = self.conns.get(&conn).cloned() else {
            tracing::debug!(conn, kind = packet.kind(), "packet before CONNECT ignored");
            return out;
        };
        match packet {
            Packet::Connect { .. } => unreachable!(),
            Packet::Subscribe { packet_id, topic, qos } => {
                self.subscriptions.entry(topic).or_default().insert(client, qos);
                out.push(BrokerAction::Send(
                    conn,
                    Packet::SubAck {
                        packet_id,
                        granted: qos,
                    },
                ));
            }
            Packet::Publish {
                packet_id,
                topic,
                qos,
                payload,
                ..
            } => match qos {
                Qos::AtMostOnce => self.route(&topic, qos, &payload, &mut out),
                Qos::AtLeastOnce => {
                    self.route(&topic, qos, &payload, &mut out);
                    out.push(BrokerAction::Send(conn, Packet::PubAck { packet_id }));
                }
                Qos::ExactlyOnce => {
                    let first = self
                        .sessions
                        .get_mut(&client)
                        .is_some_and(|s| s.inbound_qos2.insert(packet_id));
                    if first {
                        self.route(&topic, qos, &payload, &mut out);
                    }
                    out.push(BrokerAction::Send(conn, Packet::PubRec { packet_id }));
                }
            },
            Packet::PubRel { packet_id } => {
                if let Some(s) = self.sessions.get_mut(&client) {
                    s.inbound_qos2.remove(&packet_id);
                }
                out.push(BrokerAction::Send(conn, Packet::PubComp { packet_id }));
            }
            Packet::PubAck { packet_id } => {
                if let Some(s) = self.sessions.get_mut(&client) {
                    if s.outbound.get(&packet_id).map(|o| o.state) == Some(Awaiting::Ack) {
                        s.outbound.remove(&packet_id);
                    }
                }
            }
            Packet::PubRec { packet_id } => {
                if let Some(s) = self.sessions.get_mut(&client) {
                    if let Some(o) = s.outbound.get_mut(&packet_id) {
                        if o.state != Awaiting::Ack {
                            o.state = Awaiting::Comp;
                            out.push(BrokerAction::Send(conn, Packet::PubRel { packet_id }));
                        }
                    }
                }
            }
            Packet::PubComp { packet_id } => {
                if let Some(s) = self.sessions.get_mut(&client) {
                    if s.outbound.get(&packet_id).map(|o| o.state) == Some(Awaiting::Comp) {
                        s.outbound.remove(&packet_id);
                    }
                }
            }
            Packet::ConnAck { .. } | Packet::SubAck { .. } => {}
        }
        out
    }

    fn connect(&mut self, conn: ConnId, client_id: &str, out: &mut Vec<BrokerAction>) {
        if self.conns.get(&conn).map(String::as_str) == Some(client_id) {
            out.push(BrokerAction::Send(conn, Packet::ConnAck { accepted: true }));
            return;
        }
        if let Some(old) = self.sessions.remove(client_id) {
            self.conns.remove(&old.conn);
            out.push(BrokerAction::Close(old.conn));
        }
        // Clean sessions only: a reconnect starts without subscriptions.
        for subs in self.subscriptions.values_mut() {
            subs.remove(client_id);
        }
        if let Some(prev_id) = self.conns.insert(conn, client_id.to_string()) {
            self.sessions.remove(&prev_id);
        }
        self.sessions.insert(
            client_id.to_string(),
            Session {
                conn,
                ..Session::default()
            },
        );
        out.push(BrokerAction::Send(conn, Packet::ConnAck { accepted: true }));
    }

    fn route(&mut self, topic: &str, qos: Qos, payload: &[u8], out: &mut Vec<BrokerAction>) {
        let Some(subs) = self.subscriptions.get(topic) else {
            return;
        };
        for (client, granted) in subs {
            let Some(s) = self.sessions.get_mut(client) else {
                continue;
            };
            let qos = qos.min(*granted);
            let packet_id = match qos {
                Qos::AtMostOnce => 0,
                _ => {
                    let id = s.alloc_id();
                    s.outbound.insert(
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
            out.push(BrokerAction::Send(
                s.conn,
                Packet::Publish {
                    packet_id,
                    topic: topic.to_string(),
                    qos,
                    dup: false,
                    payload: payload.to_vec(),
                },
            ));
        }
    }

    /// Connection went away; its session and subscriptions are dropped.
    pub fn disconnect(&mut self, conn: ConnId) {
        if let Some(client) = self.conns.remove(&conn) {
            self.sessions.remove(&client);
            for subs in self.subscriptions.values_mut() {
                subs.remove(&client);
            }
        }
    }

    /// Resend everything still waiting for an acknowledgment.
    pub fn retransmit(&self) -> Vec<BrokerAction> {
        let mut out = Vec::new();
        for s in self.sessions.values() {
            for (&packet_id, o) in &s.outbound {
                let packet = match o.state {
                    Awaiting::Comp => Packet::PubRel { packet_id },
                    _ => Packet::Publish {
                        packet_id,
                        topic: o.topic.clone(),
                        qos: o.qos,
                        dup: true,
                        payload: o.payload.clone(),
                    },
                };
                out.push(BrokerAction::Send(s.conn, packet));
            }
        }
        out
    }

    pub fn inflight(&self) -> usize {
        self.sessions.values().map(|s| s.outbound.len()).sum()
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.sessions.contains_key(client_id)
    }

    pub fn subscribers(&self, topic: &str) -> Vec<(String, Qos)> {
        self.subscriptions
            .get(topic)
            .map(|m| m.iter().map(|(c, q)| (c.clone(), *q)).collect())
            .unwrap_or_default()
    }
}
