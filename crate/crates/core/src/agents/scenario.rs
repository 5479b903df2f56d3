//! Deterministic single-process scenario on virtual time.
//!
//! Every tick runs the same fixed sequence: the key source emits into both
//! agents' feeds, each agent polls keys and publishes what is due, the bus is
//! pumped, deliveries are verified (replies are pumped in the same tick), and
//! finally stats are snapshotted and published on `stats/<node>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::keysource::{KeyPipe, KeySource, KeySourceConfig};
use super::{stats_topic, Action, Agent, AgentConfig, AgentCounters, AgentRole, AgentSeries, Sample};
use crate::authcodec::{FreshnessPolicy, VerdictReason, DEFAULT_DELTA_MS};
use crate::clock::{Clock, ManualClock, SkewedClock};
use crate::ivstore::CsprngSource;
use crate::keyframe::serialize_frame;
use crate::keystore::{KeyStore, PoolPolicy, DEFAULT_RESERVE_THRESHOLD};
use crate::node::{Node, SignEvent};
use crate::pubsub::{InProcClient, InProcessBus, Qos, RandomFaults};
use crate::stats::{self, ExportFormat, StatsSnapshot};

/// Virtual epoch for scenario clocks.
pub const SCENARIO_EPOCH_MS: u64 = 1_700_000_000_000;
pub const DEFAULT_TICK_MS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultConfig {
    #[serde(default)]
    pub drop: f64,
    #[serde(default)]
    pub duplicate: f64,
    #[serde(default)]
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    /// Only the in-process transport is used by scenario runs.
    #[serde(default = "inproc")]
    pub transport: String,
    #[serde(default)]
    pub faults: Option<FaultConfig>,
}

fn inproc() -> String {
    "inproc".into()
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            transport: inproc(),
            faults: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub broker: BrokerConfig,
    pub key_source: KeySourceConfig,
    pub agents: Vec<AgentConfig>,
    pub duration_s: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "delta")]
    pub delta_ms: u64,
    #[serde(default = "threshold")]
    pub reserve_threshold: u64,
    #[serde(default = "tick")]
    pub tick_ms: u64,
}

fn delta() -> u64 {
    DEFAULT_DELTA_MS
}
fn threshold() -> u64 {
    DEFAULT_RESERVE_THRESHOLD
}
fn tick() -> u64 {
    DEFAULT_TICK_MS
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{field}: {reason}")]
    Config { field: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl ScenarioError {
    pub fn code(&self) -> &'static str {
        match self {
            ScenarioError::Config { .. } => "config-error",
            ScenarioError::Io { .. } => "io-error",
        }
    }

    fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ScenarioError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl Scenario {
    /// Two agents with standard topics and the given key source.
    pub fn standard(key_source: KeySourceConfig, duration_s: u64, seed: u64) -> Self {
        Self {
            broker: BrokerConfig::default(),
            key_source,
            agents: vec![
                AgentConfig::for_role(AgentRole::Intel),
                AgentConfig::for_role(AgentRole::Pv),
            ],
            duration_s,
            seed,
            delta_ms: DEFAULT_DELTA_MS,
            reserve_threshold: DEFAULT_RESERVE_THRESHOLD,
            tick_ms: DEFAULT_TICK_MS,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::config("scenario", e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.broker.transport != "inproc" {
            return Err(ScenarioError::config(
                "broker.transport",
                "only \"inproc\" is supported",
            ));
        }
        if let Some(f) = self.broker.faults {
            for (name, p) in [("drop", f.drop), ("duplicate", f.duplicate), ("delay", f.delay)] {
                if !(0.0..1.0).contains(&p) {
                    return Err(ScenarioError::config(
                        format!("broker.faults.{name}"),
                        "must be in [0, 1)",
                    ));
                }
            }
            if f.drop + f.duplicate + f.delay >= 1.0 {
                return Err(ScenarioError::config("broker.faults", "probabilities must sum below 1"));
            }
        }
        self.key_source
            .validate()
            .map_err(|(field, reason)| ScenarioError::config(field, reason))?;
        if self.agents.len() != 2 {
            return Err(ScenarioError::config("agents", "exactly two agents are required"));
        }
        for (i, a) in self.agents.iter().enumerate() {
            a.validate(&format!("agents[{i}]"))
                .map_err(|(field, reason)| ScenarioError::config(field, reason))?;
        }
        if self.agents[0].party == self.agents[1].party {
            return Err(ScenarioError::config(
                "agents[1].party",
                "both agents have the same parity",
            ));
        }
        if self.agents[0].role == self.agents[1].role {
            return Err(ScenarioError::config(
                "agents[1].role",
                "both agents have the same role",
            ));
        }
        if self.duration_s == 0 {
            return Err(ScenarioError::config("duration_s", "must be positive"));
        }
        if self.delta_ms == 0 {
            return Err(ScenarioError::config("delta_ms", "must be positive"));
        }
        if self.tick_ms == 0 || self.tick_ms > 1000 {
            return Err(ScenarioError::config("tick_ms", "must be between 1 and 1000"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentReport {
    pub node_id: String,
    pub role: AgentRole,
    pub counters: AgentCounters,
    pub series: AgentSeries,
    pub snapshots: Vec<StatsSnapshot>,
    pub sign_log: Vec<SignEvent>,
    pub verdicts: BTreeMap<VerdictReason, u64>,
    pub peer_authenticated_at_ms: Option<u64>,
}

impl AgentReport {
    pub fn final_snapshot(&self) -> Option<&StatsSnapshot> {
        self.snapshots.last()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub duration_s: u64,
    pub seed: u64,
    pub frames_emitted: u64,
    pub agents: Vec<AgentReport>,
    /// Snapshots the collector received over `stats/<node>`.
    pub collected: Vec<StatsSnapshot>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
}

impl ScenarioReport {
    pub fn agent(&self, role: AgentRole) -> &AgentReport {
        self.agents.iter().find(|a| a.role == role).expect("both roles present")
    }
}

struct Slot {
    agent: Agent,
    client: InProcClient,
    feed: KeyPipe,
    verdicts: BTreeMap<VerdictReason, u64>,
}

fn apply(slot: &mut Slot, actions: Vec<Action>) {
    for a in actions {
        let result = match a {
            Action::Subscribe { topic, qos } => slot.client.subscribe(&topic, qos).map(|_| ()),
            Action::Publish { topic, payload, qos } => slot.client.publish(&topic, qos, &payload).map(|_| ()),
        };
        if let Err(e) = result {
            tracing::warn!(client = slot.client.client_id(), error = %e, "bus operation failed");
        }
    }
}

/// Run `scn` to completion in virtual time. Series files go to `out_dir`
/// when one is given.
pub fn run_scenario(scn: &Scenario, out_dir: Option<&Path>) -> Result<ScenarioReport, ScenarioError> {
    scn.validate()?;
    let clock = ManualClock::new(SCENARIO_EPOCH_MS);
    let bus = InProcessBus::new();
    bus.set_auto_pump(false);
    let freshness = FreshnessPolicy::new(scn.delta_ms).expect("validated");
    let pool = PoolPolicy {
        threshold: scn.reserve_threshold,
    };

    let collector = bus.connect("collector").expect("bus running");
    let mut slots = Vec::new();
    for (i, cfg) in scn.agents.iter().enumerate() {
        let agent_clock: Arc<dyn Clock> = Arc::new(SkewedClock {
            inner: clock.clone(),
            skew_ms: cfg.skew_ms,
        });
        let node = Node::new(cfg.node_id(), cfg.party, pool, freshness, KeyStore::new(), agent_clock)
            .with_entropy(Box::new(CsprngSource::from_seed(scn.seed.wrapping_add(101 + i as u64))));
        let feed = KeyPipe::new();
        let agent = Agent::new(
            cfg.clone(),
            Arc::new(node),
            Box::new(feed.clone()),
            scn.seed.wrapping_add(201 + i as u64),
        );
        let client = bus.connect(cfg.node_id()).expect("bus running");
        slots.push(Slot {
            agent,
            client,
            feed,
            verdicts: BTreeMap::new(),
        });
    }
    bus.pump();
    for slot in &slots {
        collector
            .subscribe(&stats_topic(slot.agent.cfg.node_id()), Qos::AtMostOnce)
            .expect("collector connected");
    }
    for slot in &mut slots {
        let actions = slot.agent.start();
        apply(slot, actions);
    }
    bus.pump();
    // Faults start once every session is connected and subscribed.
    if let Some(f) = scn.broker.faults {
        bus.set_injector(RandomFaults::new(scn.seed ^ 0xb5, f.drop, f.duplicate, f.delay));
    }

    let mut source = KeySource::new(scn.key_source.clone(), scn.seed);
    let mut collected = Vec::new();
    let end_ms = scn.duration_s * 1000;
    let mut elapsed = 0;
    while elapsed <= end_ms {
        clock.set(SCENARIO_EPOCH_MS + elapsed);
        let frames = source.advance_to(elapsed);
        if !frames.is_empty() {
            let mut bytes = Vec::with_capacity(frames.len() * crate::keyframe::FRAME_LEN);
            for f in &frames {
                bytes.extend_from_slice(&serialize_frame(f).expect("generated frames are well-formed"));
            }
            for slot in &mut slots {
                slot.feed.write_all(&bytes).expect("in-memory pipe");
            }
        }
        let now = clock.now_ms();
        for slot in &mut slots {
            let actions = slot.agent.tick(now);
            apply(slot, actions);
        }
        if scn.broker.faults.is_some() {
            bus.retransmit();
        }
        // Replies to HELLOs go out and are verified within the same tick.
        for _ in 0..4 {
            bus.pump();
            let mut any = false;
            for slot in &mut slots {
                for d in slot.client.poll() {
                    any = true;
                    let (v, actions) = slot.agent.on_delivery(&d, now);
                    *slot.verdicts.entry(v.reason).or_default() += 1;
                    apply(slot, actions);
                }
            }
            if !any {
                break;
            }
        }
        for slot in &mut slots {
            if let Some(a) = slot.agent.stats_tick(now) {
                apply(slot, vec![a]);
            }
        }
        bus.pump();
        for d in collector.poll() {
            match serde_json::from_slice::<StatsSnapshot>(&d.payload) {
                Ok(s) => collected.push(s),
                Err(e) => tracing::warn!(error = %e, "undecodable stats message"),
            }
        }
        elapsed += scn.tick_ms;
    }

    let agents: Vec<AgentReport> = slots
        .iter()
        .map(|s| AgentReport {
            node_id: s.agent.cfg.node_id().to_string(),
            role: s.agent.cfg.role,
            counters: s.agent.counters().clone(),
            series: s.agent.series().clone(),
            snapshots: s.agent.snapshots().to_vec(),
            sign_log: s.agent.node().sign_log(),
            verdicts: s.verdicts.clone(),
            peer_authenticated_at_ms: s.agent.peer_authenticated_at().map(|t| t - SCENARIO_EPOCH_MS),
        })
        .collect();
    let mut report = ScenarioReport {
        duration_s: scn.duration_s,
        seed: scn.seed,
        frames_emitted: source.emitted(),
        agents,
        collected,
        files: Vec::new(),
    };
    if let Some(dir) = out_dir {
        report.files = write_outputs(&report, dir)?;
    }
    Ok(report)
}

/// File names of the three series for one agent.
pub fn series_files(node_id: &str) -> [String; 3] {
    [
        format!("{node_id}_added_keys.csv"),
        format!("{node_id}_available_keys.csv"),
        format!("{node_id}_authenticated.csv"),
    ]
}

fn write_series(path: &Path, samples: &[Sample]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["elapsed_ms", "value"])?;
    for s in samples {
        w.serialize((s.elapsed_ms, s.value))?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    fs::write(path, bytes)
}

fn write_outputs(report: &ScenarioReport, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    let mut written = Vec::new();
    let result = (|| -> Result<(), (PathBuf, io::Error)> {
        fs::create_dir_all(dir).map_err(|e| (dir.to_path_buf(), e))?;
        for a in &report.agents {
            let names = series_files(&a.node_id);
            let series = [&a.series.added_keys, &a.series.available_keys, &a.series.authenticated];
            for (name, samples) in names.iter().zip(series) {
                let path = dir.join(name);
                write_series(&path, samples).map_err(|e| (path.clone(), e))?;
                written.push(path);
            }
            if !a.snapshots.is_empty() {
                let path = dir.join(format!("{}_stats.csv", a.node_id));
                stats::export(&a.snapshots, ExportFormat::Csv, &path)
                    .map_err(|e| (path.clone(), io::Error::other(e.to_string())))?;
                written.push(path);
            }
        }
        let path = dir.join("summary.json");
        let json = serde_json::to_vec_pretty(report).map_err(|e| (path.clone(), io::Error::other(e)))?;
        fs::write(&path, json).map_err(|e| (path.clone(), e))?;
        written.push(path);
        Ok(())
    })();
    match result {
        Ok(()) => Ok(written),
        Err((path, source)) => {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            Err(ScenarioError::Io { path, source })
        }
    }
}
