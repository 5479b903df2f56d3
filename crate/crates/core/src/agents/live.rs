//! Real-time agent driver over the TCP transport.

use std::collections::BTreeMap;
use std::future::Future;
use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Action, Agent, AgentConfig, AgentCounters};
use crate::authcodec::VerdictReason;
use crate::node::Node;
use crate::pubsub::{BusError, TcpClient};
use crate::stats::StatsSnapshot;

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub broker: SocketAddr,
    pub connect_timeout: Duration,
    pub tick: Duration,
    /// Run until shutdown when absent.
    pub duration: Option<Duration>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiveSummary {
    pub node_id: String,
    pub counters: AgentCounters,
    pub verdicts: BTreeMap<VerdictReason, u64>,
    pub last_snapshot: StatsSnapshot,
    pub peer_authenticated: bool,
}

async fn apply(client: &TcpClient, actions: Vec<Action>) -> Result<(), BusError> {
    for a in actions {
        match a {
            Action::Subscribe { topic, qos } => {
                client.subscribe(&topic, qos).await?;
            }
            Action::Publish { topic, payload, qos } => {
                client.publish(&topic, qos, &payload).await?;
            }
        }
    }
    Ok(())
}

/// Connect, run the agent until `shutdown` resolves or the duration ends.
/// Losing the broker ends the run with `broker-unavailable`.
pub async fn run_agent(
    cfg: AgentConfig,
    node: Arc<Node>,
    key_feed: Box<dyn Read + Send>,
    opts: LiveOptions,
    shutdown: impl Future<Output = ()>,
) -> Result<LiveSummary, BusError> {
    let mut client = TcpClient::connect(opts.broker, cfg.node_id(), opts.connect_timeout).await?;
    let mut agent = Agent::new(cfg, node.clone(), key_feed, opts.seed);
    let mut verdicts = BTreeMap::new();
    let start = agent.start();
    apply(&client, start).await?;

    let deadline = opts.duration.map(|d| tokio::time::Instant::now() + d);
    let mut ticker = tokio::time::interval(opts.tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            _ = ticker.tick() => {}
        }
        if deadline.is_some_and(|d| tokio::time::Instant::now() >= d) {
            break;
        }
        if !client.is_open() {
            return Err(BusError::BrokerUnavailable("connection lost".into()));
        }
        let now = node.now_ms();
        let actions = agent.tick(now);
        apply(&client, actions).await?;
        while let Some(d) = client.try_recv() {
            let (v, actions) = agent.on_delivery(&d, now);
            *verdicts.entry(v.reason).or_insert(0u64) += 1;
            if !v.accepted {
                tracing::warn!(topic = %d.topic, reason = %v.reason, "verification failed");
            }
            apply(&client, actions).await?;
        }
        if let Some(a) = agent.stats_tick(now) {
            apply(&client, vec![a]).await?;
        }
    }
    Ok(LiveSummary {
        node_id: agent.cfg.node_id().to_string(),
        counters: agent.counters().clone(),
        verdicts,
        last_snapshot: node.snapshot(),
        peer_authenticated: agent.peer_authenticated_at().is_some(),
    })
}
