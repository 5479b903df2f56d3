//! The two demonstration agents and the scenario harness around them.
//!
//! [`Agent`] holds no transport. Its driver feeds it time and deliveries and
//! carries out the [`Action`]s it returns, either on the deterministic
//! in-process bus ([`scenario`]) or over TCP ([`live`]).
//!
//! Before subscribing to a peer's data topics an agent waits for an
//! authenticated HELLO from that peer on `hello/<ROLE>`. Until it has one it
//! re-sends its own HELLO every slow period; the first HELLO it accepts is
//! answered once.

pub mod keysource;
pub mod live;
pub mod scenario;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::authcodec::{encode_payload, VerificationVerdict};
use crate::keyframe::KeyFileReader;
use crate::keystore::PartyRole;
use crate::node::Node;
use crate::pubsub::{Delivery, Qos};
use crate::stats::StatsSnapshot;

pub use keysource::{
    run_key_source, JitterModel, KeyPipe, KeySource, KeySourceConfig, KeySourceSummary, DEFAULT_WARMUP_KEYS,
};

pub const DEFAULT_FAST_PERIOD_MS: u64 = 1000;
pub const DEFAULT_SLOW_PERIOD_MS: u64 = 5000;
pub const DEFAULT_STATS_PERIOD_MS: u64 = 5000;
pub const DEFAULT_KEY_POLL_MS: u64 = 5000;

pub const TOPIC_MEASUREMENT: &str = "PV/Measurement";
pub const TOPIC_CONFIGURATION: &str = "PV/Configuration";
pub const TOPIC_CONTROL: &str = "PV/Control";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AgentRole {
    Intel,
    Pv,
}

impl AgentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Intel => "INTEL",
            AgentRole::Pv => "PV",
        }
    }

    pub fn peer(self) -> AgentRole {
        match self {
            AgentRole::Intel => AgentRole::Pv,
            AgentRole::Pv => AgentRole::Intel,
        }
    }

    pub fn default_party(self) -> PartyRole {
        match self {
            AgentRole::Intel => PartyRole::Odd,
            AgentRole::Pv => PartyRole::Even,
        }
    }

    pub fn hello_topic(self) -> String {
        format!("hello/{}", self.as_str())
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "INTEL" => Ok(AgentRole::Intel),
            "PV" => Ok(AgentRole::Pv),
            _ => Err(format!("unknown role {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rate {
    Fast,
    Slow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PubTopic {
    pub topic: String,
    pub rate: Rate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub role: AgentRole,
    pub party: PartyRole,
    #[serde(default = "fast")]
    pub fast_period_ms: u64,
    #[serde(default = "slow")]
    pub slow_period_ms: u64,
    pub topics_pub: Vec<PubTopic>,
    pub topics_sub: Vec<String>,
    #[serde(default = "stats_period")]
    pub stats_period_ms: u64,
    #[serde(default = "key_poll")]
    pub key_poll_ms: u64,
    #[serde(default = "qos")]
    pub qos: Qos,
    /// Offset added to this agent's clock.
    #[serde(default)]
    pub skew_ms: i64,
}

fn fast() -> u64 {
    DEFAULT_FAST_PERIOD_MS
}
fn slow() -> u64 {
    DEFAULT_SLOW_PERIOD_MS
}
fn stats_period() -> u64 {
    DEFAULT_STATS_PERIOD_MS
}
fn key_poll() -> u64 {
    DEFAULT_KEY_POLL_MS
}
fn qos() -> Qos {
    Qos::ExactlyOnce
}

impl AgentConfig {
    /// Standard topics for `role` with default periods.
    pub fn for_role(role: AgentRole) -> Self {
        let (topics_pub, topics_sub) = match role {
            AgentRole::Intel => (
                vec![PubTopic {
                    topic: TOPIC_CONTROL.into(),
                    rate: Rate::Slow,
                }],
                vec![TOPIC_MEASUREMENT.into()],
            ),
            AgentRole::Pv => (
                vec![
                    PubTopic {
                        topic: TOPIC_MEASUREMENT.into(),
                        rate: Rate::Fast,
                    },
                    PubTopic {
                        topic: TOPIC_CONFIGURATION.into(),
                        rate: Rate::Slow,
                    },
                ],
                vec![TOPIC_CONTROL.into()],
            ),
        };
        Self {
            role,
            party: role.default_party(),
            fast_period_ms: DEFAULT_FAST_PERIOD_MS,
            slow_period_ms: DEFAULT_SLOW_PERIOD_MS,
            topics_pub,
            topics_sub,
            stats_period_ms: DEFAULT_STATS_PERIOD_MS,
            key_poll_ms: DEFAULT_KEY_POLL_MS,
            qos: Qos::ExactlyOnce,
            skew_ms: 0,
        }
    }

    pub fn node_id(&self) -> &'static str {
        self.role.as_str()
    }

    /// Field name and reason for the first invalid setting.
    pub fn validate(&self, prefix: &str) -> Result<(), (String, String)> {
        let field = |f: &str| format!("{prefix}.{f}");
        for (name, v) in [
            ("fast_period_ms", self.fast_period_ms),
            ("slow_period_ms", self.slow_period_ms),
            ("stats_period_ms", self.stats_period_ms),
            ("key_poll_ms", self.key_poll_ms),
        ] {
            if v == 0 {
                return Err((field(name), "must be positive".into()));
            }
        }
        if self.fast_period_ms >= self.slow_period_ms {
            return Err((field("fast_period_ms"), "must be less than slow_period_ms".into()));
        }
        for t in &self.topics_pub {
            if t.topic.is_empty() || t.topic.contains('-') {
                return Err((field("topics_pub"), format!("invalid topic {:?}", t.topic)));
            }
        }
        if self.topics_sub.iter().any(|t| t.is_empty()) {
            return Err((field("topics_sub"), "empty topic".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Subscribe { topic: String, qos: Qos },
    Publish { topic: String, payload: Vec<u8>, qos: Qos },
}

/// One point of a time series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub elapsed_ms: u64,
    pub value: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSeries {
    pub added_keys: Vec<Sample>,
    pub available_keys: Vec<Sample>,
    pub authenticated: Vec<Sample>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentCounters {
    /// Payloads created and handed to the bus, HELLOs included.
    pub authenticated: u64,
    pub hello_sent: u64,
    /// Failed publish attempts by error code; each is retried next period.
    pub publish_errors: BTreeMap<String, u64>,
    pub received: u64,
    pub key_read_errors: u64,
}

struct Schedule {
    period: u64,
    next: u64,
}

impl Schedule {
    fn new(start: u64, period: u64, first_offset: u64) -> Self {
        Self {
            period,
            next: start + first_offset,
        }
    }

    fn due(&mut self, now: u64) -> bool {
        if now < self.next {
            return false;
        }
        self.next += self.period;
        if self.next <= now {
            self.next = now + self.period;
        }
        true
    }
}

pub struct Agent {
    pub cfg: AgentConfig,
    node: Arc<Node>,
    keys: KeyFileReader<Box<dyn Read + Send>>,
    rng: ChaCha8Rng,
    start_ms: u64,
    fast: Schedule,
    slow: Schedule,
    key_poll: Schedule,
    stats: Schedule,
    seq: u64,
    peer_authenticated_at: Option<u64>,
    counters: AgentCounters,
    series: AgentSeries,
    snapshots: Vec<StatsSnapshot>,
}

impl Agent {
    pub fn new(cfg: AgentConfig, node: Arc<Node>, key_feed: Box<dyn Read + Send>, seed: u64) -> Self {
        let start = node.now_ms();
        Self {
            fast: Schedule::new(start, cfg.fast_period_ms, cfg.fast_period_ms),
            slow: Schedule::new(start, cfg.slow_period_ms, 0),
            key_poll: Schedule::new(start, cfg.key_poll_ms, 0),
            stats: Schedule::new(start, cfg.stats_period_ms, cfg.stats_period_ms),
            cfg,
            node,
            keys: KeyFileReader::new(key_feed),
            rng: ChaCha8Rng::seed_from_u64(seed),
            start_ms: start,
            seq: 0,
            peer_authenticated_at: None,
            counters: AgentCounters::default(),
            series: AgentSeries::default(),
            snapshots: Vec::new(),
        }
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.node
    }

    pub fn counters(&self) -> &AgentCounters {
        &self.counters
    }

    pub fn series(&self) -> &AgentSeries {
        &self.series
    }

    pub fn snapshots(&self) -> &[StatsSnapshot] {
        &self.snapshots
    }

    pub fn peer_authenticated_at(&self) -> Option<u64> {
        self.peer_authenticated_at
    }

    /// Subscriptions to make right after connecting.
    pub fn start(&mut self) -> Vec<Action> {
        vec![Action::Subscribe {
            topic: self.cfg.role.peer().hello_topic(),
            qos: self.cfg.qos,
        }]
    }

    /// Read whatever the key feed has produced since the last poll.
    pub fn poll_keys(&mut self) -> u64 {
        match self.keys.read_frames() {
            Ok(frames) => self.node.ingest(&frames).accepted,
            Err(e) => {
                self.counters.key_read_errors += 1;
                tracing::warn!(node = self.cfg.node_id(), error = %e, "key feed read failed");
                0
            }
        }
    }

    fn authenticated(&mut self, topic: &str, message: &[u8]) -> Option<Action> {
        match self.node.create(message, topic) {
            Ok(c) => {
                self.counters.authenticated += 1;
                Some(Action::Publish {
                    topic: topic.to_string(),
                    payload: encode_payload(&c.payload).into_bytes(),
                    qos: self.cfg.qos,
                })
            }
            Err(e) => {
                *self.counters.publish_errors.entry(e.code().to_string()).or_default() += 1;
                tracing::debug!(node = self.cfg.node_id(), error = %e, "publish skipped");
                None
            }
        }
    }

    fn hello(&mut self) -> Option<Action> {
        let body = serde_json::json!({ "hello": self.cfg.role.as_str(), "party": self.cfg.party });
        let action = self.authenticated(&self.cfg.role.hello_topic(), body.to_string().as_bytes());
        if action.is_some() {
            self.counters.hello_sent += 1;
        }
        action
    }

    fn message(&mut self, topic: &str) -> Vec<u8> {
        self.seq += 1;
        let r = &mut self.rng;
        let body = match (self.cfg.role, topic) {
            (AgentRole::Pv, TOPIC_CONFIGURATION) => serde_json::json!({
                "seq": self.seq,
                "p_max_kw": 25.0,
                "forecast_kw": round3(r.gen_range(0.0..25.0)),
            }),
            (AgentRole::Pv, _) => serde_json::json!({
                "seq": self.seq,
                "voltage": round3(r.gen_range(228.0..232.0)),
                "current": round3(r.gen_range(10.0..40.0)),
                "frequency": round3(r.gen_range(59.95..60.05)),
                "phase": round3(r.gen_range(-0.2..0.2)),
            }),
            (AgentRole::Intel, _) => serde_json::json!({
                "seq": self.seq,
                "setpoint_id": r.gen_range(1..=8),
                "value": round3(r.gen_range(0.0..1.0)),
            }),
        };
        body.to_string().into_bytes()
    }

    /// Advance to `now`: poll keys, then everything due to be published.
    pub fn tick(&mut self, now: u64) -> Vec<Action> {
        if self.key_poll.due(now) {
            self.poll_keys();
        }
        let mut out = Vec::new();
        let fast_due = self.fast.due(now);
        let slow_due = self.slow.due(now);
        if slow_due && self.peer_authenticated_at.is_none() {
            out.extend(self.hello());
        }
        let topics = self.cfg.topics_pub.clone();
        for t in topics {
            let due = match t.rate {
                Rate::Fast => fast_due,
                Rate::Slow => slow_due && now > self.start_ms,
            };
            if due {
                let msg = self.message(&t.topic);
                out.extend(self.authenticated(&t.topic, &msg));
            }
        }
        out
    }

    /// Verify a delivery; a first valid HELLO triggers data subscriptions
    /// and one HELLO in reply.
    pub fn on_delivery(&mut self, d: &Delivery, now: u64) -> (VerificationVerdict, Vec<Action>) {
        self.counters.received += 1;
        let verdict = self.node.verify_bytes(&d.payload, &d.topic);
        let mut out = Vec::new();
        if verdict.accepted && d.topic == self.cfg.role.peer().hello_topic() && self.peer_authenticated_at.is_none() {
            self.peer_authenticated_at = Some(now);
            tracing::info!(node = self.cfg.node_id(), peer = %self.cfg.role.peer(), "peer authenticated");
            for topic in self.cfg.topics_sub.clone() {
                out.push(Action::Subscribe {
                    topic,
                    qos: self.cfg.qos,
                });
            }
            out.extend(self.hello());
        }
        (verdict, out)
    }

    /// Snapshot counters if the stats period has elapsed. The returned action
    /// publishes the snapshot on `stats/<node>` without authentication.
    pub fn stats_tick(&mut self, now: u64) -> Option<Action> {
        if !self.stats.due(now) {
            return None;
        }
        let snap = self.node.snapshot();
        let elapsed_ms = now - self.start_ms;
        self.series.added_keys.push(Sample {
            elapsed_ms,
            value: snap.keys_added,
        });
        self.series.available_keys.push(Sample {
            elapsed_ms,
            value: snap.keys_available,
        });
        self.series.authenticated.push(Sample {
            elapsed_ms,
            value: self.counters.authenticated,
        });
        let payload = serde_json::to_vec(&snap).expect("snapshot serializes");
        self.snapshots.push(snap);
        Some(Action::Publish {
            topic: stats_topic(self.cfg.node_id()),
            payload,
            qos: Qos::AtMostOnce,
        })
    }
}

pub fn stats_topic(node_id: &str) -> String {
    format!("stats/{node_id}")
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}
