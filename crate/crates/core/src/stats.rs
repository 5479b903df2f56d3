//! Per-node operational counters and their CSV / JSON-lines export.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::authcodec::{empty_reason_counts, VerdictReason, VerificationVerdict};
use crate::clock::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatsEvent {
    /// Frames offered to the key table, split by outcome.
    KeysIngested {
        accepted: u64,
        rejected: u64,
    },
    KeyUsed,
    IvsAdded(u64),
    IvUsed,
    Verified(VerificationVerdict),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub node_id: String,
    pub t_ms: u64,
    pub keys_added: u64,
    pub keys_available: u64,
    pub keys_used: u64,
    pub keys_rejected: u64,
    pub ivs_added: u64,
    pub ivs_available: u64,
    pub ivs_used: u64,
    pub verify_ok: u64,
    pub verify_fail: u64,
    pub fail_reasons: BTreeMap<VerdictReason, u64>,
}

impl StatsSnapshot {
    /// Conservation identities every snapshot must satisfy.
    pub fn is_conserved(&self) -> bool {
        self.keys_added == self.keys_available + self.keys_used + self.keys_rejected
            && self.ivs_added == self.ivs_available + self.ivs_used
            && self.verify_fail == self.fail_reasons.values().sum::<u64>()
    }
}

#[derive(Debug, Default)]
struct Counters {
    keys_added: u64,
    keys_used: u64,
    keys_rejected: u64,
    ivs_added: u64,
    ivs_used: u64,
    verify_ok: u64,
    fail_reasons: BTreeMap<VerdictReason, u64>,
}

/// Thread-safe counter set. Every event and every snapshot takes the same
/// short lock, so a snapshot never mixes counters from different instants.
#[derive(Debug)]
pub struct StatsRecorder {
    start_ms: u64,
    counters: Mutex<Counters>,
}

impl StatsRecorder {
    pub fn new(start_ms: u64) -> Self {
        Self {
            start_ms,
            counters: Mutex::new(Counters {
                fail_reasons: empty_reason_counts(),
                ..Counters::default()
            }),
        }
    }

    pub fn record(&self, event: StatsEvent) {
        let mut c = self.counters.lock().unwrap();
        match event {
            StatsEvent::KeysIngested { accepted, rejected } => {
                c.keys_added += accepted + rejected;
                c.keys_rejected += rejected;
            }
            StatsEvent::KeyUsed => c.keys_used += 1,
            StatsEvent::IvsAdded(n) => c.ivs_added += n,
            StatsEvent::IvUsed => c.ivs_used += 1,
            StatsEvent::Verified(v) if v.accepted => c.verify_ok += 1,
            StatsEvent::Verified(v) => *c.fail_reasons.entry(v.reason).or_default() += 1,
        }
    }

    pub fn snapshot(&self, node_id: &str, now_ms: u64) -> StatsSnapshot {
        let c = self.counters.lock().unwrap();
        StatsSnapshot {
            node_id: node_id.to_string(),
            t_ms: now_ms.saturating_sub(self.start_ms),
            keys_added: c.keys_added,
            keys_available: c.keys_added - c.keys_used - c.keys_rejected,
            keys_used: c.keys_used,
            keys_rejected: c.keys_rejected,
            ivs_added: c.ivs_added,
            ivs_available: c.ivs_added - c.ivs_used,
            ivs_used: c.ivs_used,
            verify_ok: c.verify_ok,
            verify_fail: c.fail_reasons.values().sum(),
            fail_reasons: c.fail_reasons.clone(),
        }
    }
}

/// Take `count` snapshots, one per `period`, on the current tokio runtime.
pub async fn collect_periodic(
    recorder: &StatsRecorder,
    node_id: &str,
    clock: &dyn Clock,
    period: Duration,
    count: usize,
) -> Vec<StatsSnapshot> {
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        ticker.tick().await;
        out.push(recorder.snapshot(node_id, clock.now_ms()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("nothing to export")]
    Empty,
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("parse: {0}")]
    Parse(String),
}

impl ExportError {
    pub fn code(&self) -> &'static str {
        match self {
            ExportError::Empty => "empty-series",
            ExportError::Parse(_) => "parse-error",
            _ => "io-error",
        }
    }
}

const FIXED_COLUMNS: [&str; 10] = [
    "node_id",
    "t_ms",
    "keys_added",
    "keys_available",
    "keys_used",
    "ivs_added",
    "ivs_available",
    "ivs_used",
    "verify_ok",
    "verify_fail",
];

/// CSV header: the fixed columns, one column per failure reason, then
/// `keys_rejected`.
pub fn csv_header() -> Vec<String> {
    FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(VerdictReason::FAILURES.iter().map(|r| r.as_str().to_string()))
        .chain(std::iter::once("keys_rejected".to_string()))
        .collect()
}

fn csv_row(s: &StatsSnapshot) -> Vec<String> {
    let mut row = vec![
        s.node_id.clone(),
        s.t_ms.to_string(),
        s.keys_added.to_string(),
        s.keys_available.to_string(),
        s.keys_used.to_string(),
        s.ivs_added.to_string(),
        s.ivs_available.to_string(),
        s.ivs_used.to_string(),
        s.verify_ok.to_string(),
        s.verify_fail.to_string(),
    ];
    for r in VerdictReason::FAILURES {
        row.push(s.fail_reasons.get(&r).copied().unwrap_or(0).to_string());
    }
    row.push(s.keys_rejected.to_string());
    row
}

pub fn write_series<W: Write>(out: W, series: &[StatsSnapshot], format: ExportFormat) -> Result<(), ExportError> {
    match format {
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(csv_header())?;
            for s in series {
                w.write_record(csv_row(s))?;
            }
            w.flush()?;
        }
        ExportFormat::Jsonl => {
            let mut out = out;
            for s in series {
                serde_json::to_writer(&mut out, s).map_err(io::Error::from)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// Write `series` to `path`. Nothing is created for an empty series, and a
/// failed write leaves no partial file behind.
pub fn export(series: &[StatsSnapshot], format: ExportFormat, path: &Path) -> Result<(), ExportError> {
    if series.is_empty() {
        return Err(ExportError::Empty);
    }
    let tmp = path.with_extension("partial");
    let result = File::create(&tmp)
        .map_err(ExportError::from)
        .and_then(|f| write_series(BufWriter::new(f), series, format))
        .and_then(|_| fs::rename(&tmp, path).map_err(ExportError::from));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn import(path: &Path, format: ExportFormat) -> Result<Vec<StatsSnapshot>, ExportError> {
    let file = File::open(path)?;
    match format {
        ExportFormat::Jsonl => BufReader::new(file)
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|l| {
                let l = l?;
                serde_json::from_str(&l).map_err(|e| ExportError::Parse(e.to_string()))
            })
            .collect(),
        ExportFormat::Csv => {
            let mut r = csv::Reader::from_reader(file);
            let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
            if header != csv_header() {
                return Err(ExportError::Parse("unexpected csv header".into()));
            }
            let mut out = Vec::new();
            for rec in r.records() {
                let rec = rec?;
                let num = |i: usize| -> Result<u64, ExportError> {
                    rec.get(i)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| ExportError::Parse(format!("column {}", header[i])))
                };
                let mut fail_reasons = BTreeMap::new();
                for (k, r) in VerdictReason::FAILURES.iter().enumerate() {
                    fail_reasons.insert(*r, num(FIXED_COLUMNS.len() + k)?);
                }
                out.push(StatsSnapshot {
                    node_id: rec.get(0).unwrap_or_default().to_string(),
                    t_ms: num(1)?,
                    keys_added: num(2)?,
                    keys_available: num(3)?,
                    keys_used: num(4)?,
                    ivs_added: num(5)?,
                    ivs_available: num(6)?,
                    ivs_used: num(7)?,
                    verify_ok: num(8)?,
                    verify_fail: num(9)?,
                    fail_reasons,
                    keys_rejected: num(header.len() - 1)?,
                });
            }
            Ok(out)
        }
    }
}
