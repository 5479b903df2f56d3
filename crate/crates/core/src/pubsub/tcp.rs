//! TCP transport: length-prefixed frames over tokio streams.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use super::broker::{BrokerAction, BrokerCore, ConnId};
use super::packet::{FrameBuffer, Packet, Qos};
use super::session::{ClientSession, SessionEvent};
use super::{check_topic, BusError, Delivery, Receipt};

pub const DEFAULT_RETRANSMIT: Duration = Duration::from_secs(1);

enum Event {
    Packet(ConnId, Packet),
    Closed(ConnId),
}

/// A running broker task.
pub struct BrokerHandle {
    addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    task: JoinHandle<()>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.task.await;
    }

    /// Wait until the broker task ends on its own.
    pub async fn join(self) {
        let _ = self.task.await;
    }
}

/// Bind `addr` and serve until shut down. One task owns the broker state;
/// each connection gets a reader and a writer task.
pub async fn spawn_broker(addr: SocketAddr, retransmit_every: Duration) -> io::Result<BrokerHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let (shutdown, mut stop) = watch::channel(false);
    let task = tokio::spawn(async move {
        let (events_tx, mut events) = mpsc::unbounded_channel();
        let mut broker = BrokerCore::new();
        let mut writers: HashMap<ConnId, mpsc::UnboundedSender<Packet>> = HashMap::new();
        let mut next_conn: ConnId = 1;
        let mut tick = tokio::time::interval(retransmit_every);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            let actions = tokio::select! {
                _ = stop.changed() => break,
                accepted = listener.accept() => {
                    match accepted {
                        Ok((stream, peer)) => {
                            let conn = next_conn;
                            next_conn += 1;
                            tracing::debug!(conn, %peer, "accepted");
                            let _ = stream.set_nodelay(true);
                            writers.insert(conn, spawn_conn(conn, stream, events_tx.clone()));
                        }
                        Err(e) => tracing::warn!(error = %e, "accept failed"),
                    }
                    continue;
                }
                Some(event) = events.recv() => match event {
                    Event::Packet(conn, packet) => broker.handle(conn, packet),
                    Event::Closed(conn) => {
                        broker.disconnect(conn);
                        writers.remove(&conn);
                        continue;
                    }
                },
                _ = tick.tick() => broker.retransmit(),
            };
            for action in actions {
                match action {
                    BrokerAction::Send(conn, packet) => {
                        if let Some(w) = writers.get(&conn) {
                            let _ = w.send(packet);
                        }
                    }
                    BrokerAction::Close(conn) => {
                        writers.remove(&conn);
                    }
                }
            }
        }
    });
    Ok(BrokerHandle { addr, shutdown, task })
}

fn spawn_conn(conn: ConnId, stream: TcpStream, events: mpsc::UnboundedSender<Event>) -> mpsc::UnboundedSender<Packet> {
    let (mut rd, wr) = stream.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    tokio::spawn(write_loop(wr, rx));
    tokio::spawn(async move {
        let mut frames = FrameBuffer::default();
        let mut buf = vec![0u8; 8192];
        'read: loop {
            match rd.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => frames.extend(&buf[..n]),
            }
            while let Some(p) = frames.next_packet() {
                match p {
                    Ok(p) => {
                        if events.send(Event::Packet(conn, p)).is_err() {
                            break 'read;
                        }
                    }
                    Err(e) => {
                        tracing::warn!(conn, error = %e, "bad frame; closing");
                        break 'read;
                    }
                }
            }
        }
        let _ = events.send(Event::Closed(conn));
    });
    tx
}

async fn write_loop(mut wr: OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<Packet>) {
    while let Some(p) = rx.recv().await {
        if wr.write_all(&p.encode_frame()).await.is_err() {
            return;
        }
    }
    let _ = wr.shutdown().await;
}

enum Command {
    Subscribe {
        topic: String,
        qos: Qos,
        reply: oneshot::Sender<Qos>,
    },
    Publish {
        topic: String,
        qos: Qos,
        payload: Vec<u8>,
        reply: oneshot::Sender<Receipt>,
    },
}

/// Client connection driven by a background task that also retransmits.
pub struct TcpClient {
    client_id: String,
    commands: mpsc::UnboundedSender<Command>,
    deliveries: mpsc::UnboundedReceiver<Delivery>,
}

fn lost() -> BusError {
    BusError::BrokerUnavailable("connection closed".into())
}

impl TcpClient {
    pub async fn connect(addr: SocketAddr, client_id: &str, timeout: Duration) -> Result<TcpClient, BusError> {
        let unavailable = |e: String| BusError::BrokerUnavailable(format!("{addr}: {e}"));
        let stream = tokio::time::timeout(timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| unavailable("connect timed out".into()))?
            .map_err(|e| unavailable(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
        let (del_tx, del_rx) = mpsc::unbounded_channel();
        let (ready_tx, ready_rx) = oneshot::channel();
        let session = ClientSession::new(client_id);
        tokio::spawn(client_loop(stream, session, cmd_rx, del_tx, ready_tx));
        tokio::time::timeout(timeout, ready_rx)
            .await
            .map_err(|_| unavailable("no CONNACK".into()))?
            .map_err(|_| unavailable("connection closed".into()))?;
        Ok(TcpClient {
            client_id: client_id.to_string(),
            commands: cmd_tx,
            deliveries: del_rx,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn is_open(&self) -> bool {
        !self.commands.is_closed()
    }

    /// Waits for the SUBACK and returns the granted QoS.
    pub async fn subscribe(&self, topic: &str, qos: Qos) -> Result<Qos, BusError> {
        check_topic(topic)?;
        let (reply, rx) = oneshot::channel();
        self.commands
            .send(Command::Subscribe {
                topic: topic.to_string(),
                qos,
                reply,
            })
            .map_err(|_| lost())?;
        rx.await.map_err(|_| lost())
    }

    /// Queues a PUBLISH; acknowledgment and retransmission happen in the background.
    pub async fn publish(&self, topic: &str, qos: Qos, payload: &[u8]) -> Result<Receipt, BusError> {
        check_topic(topic)?;
        let (reply, rx) = oneshot::channel();
        self.commands
            .send(Command::Publish {
                topic: topic.to_string(),
                qos,
                payload: payload.to_vec(),
                reply,
            })
            .map_err(|_| lost())?;
        rx.await.map_err(|_| lost())
    }

    /// Next delivery; `None` once the connection is gone.
    pub async fn recv(&mut self) -> Option<Delivery> {
        self.deliveries.recv().await
    }

    pub fn try_recv(&mut self) -> Option<Delivery> {
        self.deliveries.try_recv().ok()
    }
}

async fn client_loop(
    stream: TcpStream,
    mut session: ClientSession,
    mut commands: mpsc::UnboundedReceiver<Command>,
    deliveries: mpsc::UnboundedSender<Delivery>,
    ready: oneshot::Sender<()>,
) {
    let (mut rd, mut wr) = stream.into_split();
    let mut ready = Some(ready);
    let mut pending_subs: HashMap<u16, oneshot::Sender<Qos>> = HashMap::new();
    let mut frames = FrameBuffer::default();
    let mut buf = vec![0u8; 8192];
    let mut tick = tokio::time::interval(DEFAULT_RETRANSMIT);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    tick.tick().await;
    if wr.write_all(&session.connect().encode_frame()).await.is_err() {
        return;
    }
    loop {
        let mut outgoing = Vec::new();
        tokio::select! {
            read = rd.read(&mut buf) => {
                let n = match read {
                    Ok(0) | Err(_) => break,
                    Ok(n) => n,
                };
                frames.extend(&buf[..n]);
                while let Some(p) = frames.next_packet() {
                    match p {
                        Ok(p) => outgoing.extend(session.handle(p)),
                        Err(e) => {
                            tracing::warn!(error = %e, "bad frame from broker");
                            return;
                        }
                    }
                }
            }
            cmd = commands.recv() => match cmd {
                None => break,
                Some(Command::Subscribe { topic, qos, reply }) => {
                    let (id, packet) = session.subscribe(&topic, qos);
                    pending_subs.insert(id, reply);
                    outgoing.push(packet);
                }
                Some(Command::Publish { topic, qos, payload, reply }) => {
                    let (packet_id, packet) = session.publish(&topic, qos, &payload);
                    let _ = reply.send(Receipt { packet_id, qos });
                    outgoing.push(packet);
                }
            },
            _ = tick.tick() => outgoing.extend(session.retransmit()),
        }
        for event in session.take_events() {
            match event {
                SessionEvent::Connected => {
                    if let Some(r) = ready.take() {
                        let _ = r.send(());
                    }
                }
                SessionEvent::Subscribed { packet_id, granted } => {
                    if let Some(r) = pending_subs.remove(&packet_id) {
                        let _ = r.send(granted);
                    }
                }
                SessionEvent::Completed { .. } => {}
            }
        }
        for d in session.take_deliveries() {
            let _ = deliveries.send(d);
        }
        for p in outgoing {
            if wr.write_all(&p.encode_frame()).await.is_err() {
                return;
            }
        }
    }
}
