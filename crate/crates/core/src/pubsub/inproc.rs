//! Deterministic in-process transport.
//!
//! All packets pass through one ordered queue owned by the bus. Nothing moves
//! until [`InProcessBus::pump`] runs (or automatically after each call when
//! auto-pump is on). A [`FaultInjector`] sees every packet exactly once and
//! may drop, duplicate or delay it; delayed packets are released at the start
//! of the next pump.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::broker::{BrokerAction, BrokerCore, ConnId};
use super::packet::{Packet, Qos};
use super::session::ClientSession;
use super::{check_topic, BusError, Delivery, Receipt};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    Deliver,
    Drop,
    Duplicate,
    Delay,
}

/// A packet in flight, as shown to the fault injector.
#[derive(Debug, Clone)]
pub struct Transit {
    /// Position in the order packets were sent on this bus.
    pub seq: u64,
    pub conn: ConnId,
    pub to_broker: bool,
    pub client_id: String,
    pub packet: Packet,
}

pub trait FaultInjector: Send {
    fn decide(&mut self, transit: &Transit) -> Fault;
}

impl<F: FnMut(&Transit) -> Fault + Send> FaultInjector for F {
    fn decide(&mut self, transit: &Transit) -> Fault {
        self(transit)
    }
}

/// Faults keyed by sequence number.
#[derive(Debug, Clone, Default)]
pub struct FaultSchedule {
    pub faults: BTreeMap<u64, Fault>,
}

impl FaultSchedule {
    pub fn single(seq: u64, fault: Fault) -> Self {
        Self {
            faults: BTreeMap::from([(seq, fault)]),
        }
    }
}

impl FaultInjector for FaultSchedule {
    fn decide(&mut self, transit: &Transit) -> Fault {
        self.faults.get(&transit.seq).copied().unwrap_or(Fault::Deliver)
    }
}

/// Independent seeded faults with fixed probabilities.
#[derive(Debug, Clone)]
pub struct RandomFaults {
    rng: ChaCha8Rng,
    pub drop: f64,
    pub duplicate: f64,
    pub delay: f64,
}

impl RandomFaults {
    pub fn new(seed: u64, drop: f64, duplicate: f64, delay: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            drop,
            duplicate,
            delay,
        }
    }
}

impl FaultInjector for RandomFaults {
    fn decide(&mut self, _: &Transit) -> Fault {
        let x: f64 = self.rng.gen();
        if x < self.drop {
            Fault::Drop
        } else if x < self.drop + self.duplicate {
            Fault::Duplicate
        } else if x < self.drop + self.duplicate + self.delay {
            Fault::Delay
        } else {
            Fault::Deliver
        }
    }
}

struct BusState {
    broker: BrokerCore,
    running: bool,
    auto_pump: bool,
    next_conn: ConnId,
    sessions: BTreeMap<ConnId, ClientSession>,
    closed: BTreeSet<ConnId>,
    queue: VecDeque<Transit>,
    delayed: Vec<Transit>,
    seq: u64,
    injector: Option<Box<dyn FaultInjector>>,
}

impl BusState {
    fn send(&mut self, conn: ConnId, to_broker: bool, packet: Packet) {
        let client_id = self
            .sessions
            .get(&conn)
            .map(|s| s.client_id().to_string())
            .unwrap_or_default();
        self.queue.push_back(Transit {
            seq: self.seq,
            conn,
            to_broker,
            client_id,
            packet,
        });
        self.seq += 1;
    }

    fn broker_actions(&mut self, actions: Vec<BrokerAction>) {
        for action in actions {
            match action {
                BrokerAction::Send(conn, packet) => self.send(conn, false, packet),
                BrokerAction::Close(conn) => {
                    self.closed.insert(conn);
                }
            }
        }
    }

    fn dispatch(&mut self, t: Transit) {
        if t.to_broker {
            if self.running {
                let actions = self.broker.handle(t.conn, t.packet);
                self.broker_actions(actions);
            }
        } else if !self.closed.contains(&t.conn) {
            if let Some(session) = self.sessions.get_mut(&t.conn) {
                let replies = session.handle(t.packet);
                for reply in replies {
                    self.send(t.conn, true, reply);
                }
            }
        }
    }

    fn pump(&mut self) -> usize {
        let mut moved = 0;
        for t in std::mem::take(&mut self.delayed) {
            self.dispatch(t);
            moved += 1;
        }
        while let Some(t) = self.queue.pop_front() {
            let fault = match self.injector.as_mut() {
                Some(inj) => inj.decide(&t),
                None => Fault::Deliver,
            };
            match fault {
                Fault::Deliver => self.dispatch(t),
                Fault::Drop => tracing::trace!(seq = t.seq, kind = t.packet.kind(), "dropped"),
                Fault::Duplicate => {
                    self.dispatch(t.clone());
                    self.dispatch(t);
                }
                Fault::Delay => self.delayed.push(t),
            }
            moved += 1;
        }
        moved
    }

    fn session(&mut self, conn: ConnId) -> Result<&mut ClientSession, BusError> {
        if !self.running {
            return Err(BusError::BrokerUnavailable("broker stopped".into()));
        }
        if self.closed.contains(&conn) {
            return Err(BusError::NotConnected);
        }
        self.sessions.get_mut(&conn).ok_or(BusError::NotConnected)
    }
}

/// Shared handle to an in-process broker and its clients.
#[derive(Clone)]
pub struct InProcessBus {
    state: Arc<Mutex<BusState>>,
}

impl Default for InProcessBus {
    fn default() -> Self {
        Self::new()
    }
}

impl InProcessBus {
    /// Running bus with auto-pump on.
    pub fn new() -> Self {
        Self {
            state: Arc::new(Mutex::new(BusState {
                broker: BrokerCore::new(),
                running: true,
                auto_pump: true,
                next_conn: 1,
                sessions: BTreeMap::new(),
                closed: BTreeSet::new(),
                queue: VecDeque::new(),
                delayed: Vec::new(),
                seq: 0,
                injector: None,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, BusState> {
        self.state.lock().expect("bus state poisoned")
    }

    pub fn set_auto_pump(&self, on: bool) {
        self.lock().auto_pump = on;
    }

    pub fn set_injector(&self, injector: impl FaultInjector + 'static) {
        self.lock().injector = Some(Box::new(injector));
    }

    pub fn clear_injector(&self) {
        self.lock().injector = None;
    }

    /// Number of packets sent so far; the next packet gets this sequence number.
    pub fn sent(&self) -> u64 {
        self.lock().seq
    }

    pub fn is_running(&self) -> bool {
        self.lock().running
    }

    /// Stop the broker. Its state and all queued packets are lost.
    pub fn stop(&self) {
        let mut s = self.lock();
        s.running = false;
        s.broker = BrokerCore::new();
        s.queue.clear();
        s.delayed.clear();
        for session in s.sessions.values_mut() {
            session.reset_connection();
        }
    }

    /// Restart a stopped broker. Clients reconnect on their next retransmit.
    pub fn start(&self) {
        self.lock().running = true;
    }

    pub fn connect(&self, client_id: &str) -> Result<InProcClient, BusError> {
        let mut s = self.lock();
        if !s.running {
            return Err(BusError::BrokerUnavailable("broker stopped".into()));
        }
        let conn = s.next_conn;
        s.next_conn += 1;
        let session = ClientSession::new(client_id);
        let packet = session.connect();
        s.sessions.insert(conn, session);
        s.send(conn, true, packet);
        if s.auto_pump {
            s.pump();
        }
        Ok(InProcClient {
            bus: self.clone(),
            conn,
            client_id: client_id.to_string(),
        })
    }

    /// Move packets until the queue is empty; returns how many were handled.
    pub fn pump(&self) -> usize {
        self.lock().pump()
    }

    /// Resend everything unacknowledged on both sides.
    pub fn retransmit(&self) {
        let mut s = self.lock();
        if !s.running {
            return;
        }
        let conns: Vec<ConnId> = s.sessions.keys().copied().filter(|c| !s.closed.contains(c)).collect();
        for conn in conns {
            let packets = s.sessions[&conn].retransmit();
            for p in packets {
                s.send(conn, true, p);
            }
        }
        let actions = s.broker.retransmit();
        s.broker_actions(actions);
        if s.auto_pump {
            s.pump();
        }
    }

    /// Pump and retransmit until nothing is in flight or `rounds` runs out.
    pub fn settle(&self, rounds: usize) -> bool {
        for _ in 0..rounds {
            self.pump();
            if self.quiescent() {
                return true;
            }
            self.retransmit();
        }
        self.pump();
        self.quiescent()
    }

    /// Nothing queued, delayed or awaiting acknowledgment.
    pub fn quiescent(&self) -> bool {
        let s = self.lock();
        s.queue.is_empty()
            && s.delayed.is_empty()
            && s.broker.inflight() == 0
            && s.sessions
                .iter()
                .filter(|(c, _)| !s.closed.contains(c))
                .all(|(_, sess)| sess.is_connected() && sess.inflight() == 0)
    }

    pub fn broker_inflight(&self) -> usize {
        self.lock().broker.inflight()
    }
}

/// One client connection on an [`InProcessBus`].
pub struct InProcClient {
    bus: InProcessBus,
    conn: ConnId,
    client_id: String,
}

impl InProcClient {
    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn conn(&self) -> ConnId {
        self.conn
    }

    /// Connected and not superseded.
    pub fn is_connected(&self) -> bool {
        let mut s = self.bus.lock();
        s.session(self.conn).map(|x| x.is_connected()).unwrap_or(false)
    }

    pub fn is_closed(&self) -> bool {
        self.bus.lock().closed.contains(&self.conn)
    }

    /// Sends SUBSCRIBE and returns its packet id; see [`Self::granted`].
    pub fn subscribe(&self, topic: &str, qos: Qos) -> Result<u16, BusError> {
        check_topic(topic)?;
        let mut s = self.bus.lock();
        let session = s.session(self.conn)?;
        if !session.is_connected() {
            return Err(BusError::NotConnected);
        }
        let (id, packet) = session.subscribe(topic, qos);
        s.send(self.conn, true, packet);
        if s.auto_pump {
            s.pump();
        }
        Ok(id)
    }

    /// QoS granted for `topic`, once the SUBACK has arrived.
    pub fn granted(&self, topic: &str) -> Option<Qos> {
        self.bus.lock().sessions.get(&self.conn)?.granted(topic)
    }

    pub fn publish(&self, topic: &str, qos: Qos, payload: &[u8]) -> Result<Receipt, BusError> {
        check_topic(topic)?;
        let mut s = self.bus.lock();
        let session = s.session(self.conn)?;
        if !session.is_connected() {
            return Err(BusError::NotConnected);
        }
        let (packet_id, packet) = session.publish(topic, qos, payload);
        s.send(self.conn, true, packet);
        if s.auto_pump {
            s.pump();
        }
        Ok(Receipt { packet_id, qos })
    }

    /// Messages delivered to this client since the last poll.
    pub fn poll(&self) -> Vec<Delivery> {
        let mut s = self.bus.lock();
        s.sessions
            .get_mut(&self.conn)
            .map(|x| x.take_deliveries())
            .unwrap_or_default()
    }

    pub fn inflight(&self) -> usize {
        let s = self.bus.lock();
        s.sessions.get(&self.conn).map_or(0, |x| x.inflight())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(bus: &InProcessBus, qos: Qos) -> (InProcClient, InProcClient) {
        let publisher = bus.connect("pub").unwrap();
        let subscriber = bus.connect("sub").unwrap();
        subscriber.subscribe("PV/Measurement", qos).unwrap();
        (publisher, subscriber)
    }

    #[test]
    fn subscribe_then_publish_delivers() {
        let bus = InProcessBus::new();
        let (p, s) = pair(&bus, Qos::AtMostOnce);
        assert_eq!(s.granted("PV/Measurement"), Some(Qos::AtMostOnce));
        p.publish("PV/Measurement", Qos::AtMostOnce, b"v").unwrap();
        let got = s.poll();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].payload, b"v");
    }

    #[test]
    fn no_retained_messages() {
        let bus = InProcessBus::new();
        let p = bus.connect("pub").unwrap();
        p.publish("t", Qos::AtLeastOnce, b"early").unwrap();
        let s = bus.connect("sub").unwrap();
        s.subscribe("t", Qos::AtLeastOnce).unwrap();
        assert!(s.poll().is_empty());
    }

    #[test]
    fn fan_out_and_topic_isolation() {
        let bus = InProcessBus::new();
        let p = bus.connect("pub").unwrap();
        let a = bus.connect("a").unwrap();
        let b = bus.connect("b").unwrap();
        let c = bus.connect("c").unwrap();
        a.subscribe("t", Qos::AtLeastOnce).unwrap();
        b.subscribe("t", Qos::ExactlyOnce).unwrap();
        c.subscribe("other", Qos::ExactlyOnce).unwrap();
        p.publish("t", Qos::ExactlyOnce, b"x").unwrap();
        assert_eq!(a.poll().len(), 1);
        assert_eq!(b.poll().len(), 1);
        assert!(c.poll().is_empty());
        assert!(bus.quiescent());
    }

    #[test]
    fn stopped_broker_refuses_connect() {
        let bus = InProcessBus::new();
        bus.stop();
        assert_eq!(bus.connect("x").err().unwrap().code(), "broker-unavailable");
    }

    #[test]
    fn supersession() {
        let bus = InProcessBus::new();
        let first = bus.connect("dup").unwrap();
        let second = bus.connect("dup").unwrap();
        assert!(first.is_closed());
        assert!(second.is_connected());
        assert_eq!(
            first.publish("t", Qos::AtMostOnce, b"").unwrap_err().code(),
            "not-connected"
        );
    }

    #[test]
    fn empty_topic_rejected() {
        let bus = InProcessBus::new();
        let c = bus.connect("c").unwrap();
        assert!(matches!(c.subscribe("", Qos::AtMostOnce), Err(BusError::BadTopic)));
    }

    #[test]
    fn restart_reconnects_on_retransmit() {
        let bus = InProcessBus::new();
        let (p, s) = pair(&bus, Qos::AtLeastOnce);
        bus.stop();
        assert!(p.publish("PV/Measurement", Qos::AtLeastOnce, b"x").is_err());
        bus.start();
        assert!(bus.settle(4));
        p.publish("PV/Measurement", Qos::AtLeastOnce, b"y").unwrap();
        assert_eq!(s.poll().len(), 1);
    }

    #[test]
    fn broker_leaves_payload_untouched() {
        let bus = InProcessBus::new();
        let (p, s) = pair(&bus, Qos::ExactlyOnce);
        let payload: Vec<u8> = (0..=255).collect();
        p.publish("PV/Measurement", Qos::ExactlyOnce, &payload).unwrap();
        assert_eq!(s.poll()[0].payload, payload);
    }

    #[test]
    fn random_faults_still_deliver_qos2_once() {
        let bus = InProcessBus::new();
        let (p, s) = pair(&bus, Qos::ExactlyOnce);
        bus.set_injector(RandomFaults::new(7, 0.2, 0.1, 0.0));
        for i in 0..50u8 {
            p.publish("PV/Measurement", Qos::ExactlyOnce, &[i]).unwrap();
        }
        assert!(bus.settle(200));
        let mut got: Vec<u8> = s.poll().iter().map(|d| d.payload[0]).collect();
        got.sort();
        assert_eq!(got, (0..50).collect::<Vec<_>>());
    }
}
