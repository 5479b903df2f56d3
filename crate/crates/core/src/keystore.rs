//! Shared key table: serial numbering, odd/even partitioning between the two
//! parties, used-flag tracking and reserve-pool gating.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::keyframe::{KeyFrame, KEY_LEN};

pub const DEFAULT_RESERVE_THRESHOLD: u64 = 30;

/// 256-bit shared secret. `Debug` never prints the bytes.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Secret(pub [u8; KEY_LEN]);

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(..)")
    }
}

impl Secret {
    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }
}

/// Which half of the serial space a party signs with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PartyRole {
    Odd,
    Even,
}

impl PartyRole {
    pub fn owns(self, serial: u64) -> bool {
        match self {
            PartyRole::Odd => serial % 2 == 1,
            PartyRole::Even => serial.is_multiple_of(2),
        }
    }

    pub fn counterpart(self) -> PartyRole {
        match self {
            PartyRole::Odd => PartyRole::Even,
            PartyRole::Even => PartyRole::Odd,
        }
    }

    fn slot(self) -> usize {
        match self {
            PartyRole::Odd => 0,
            PartyRole::Even => 1,
        }
    }

    fn of(serial: u64) -> PartyRole {
        if serial % 2 == 1 {
            PartyRole::Odd
        } else {
            PartyRole::Even
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolPolicy {
    /// Unused keys that must remain in the table before a fresh key may be
    /// taken. At or below it the last key is reused with a new IV.
    pub threshold: u64,
}

impl Default for PoolPolicy {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_RESERVE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UseKind {
    Sign,
    Verify,
}

#[derive(Debug, Clone)]
pub struct KeyRecord {
    pub serial: u64,
    pub secret: Secret,
    pub used: Option<UseKind>,
}

/// Outcome of [`KeyStore::next_signing_key`].
#[derive(Debug, Clone, Copy)]
pub struct SigningKey {
    pub serial: u64,
    pub secret: Secret,
    /// `false` when the previous key is being reused under the reserve rule.
    pub fresh: bool,
    /// Unused keys in the table before this call consumed anything.
    pub unused_before: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: u64,
    pub duplicates: u64,
    pub bad_length: u64,
}

impl IngestReport {
    pub fn rejected(&self) -> u64 {
        self.duplicates + self.bad_length
    }
}

/// Key-table counters. `added` counts every frame offered to the table, so
/// `added == available + used + rejected` always holds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyCounters {
    pub added: u64,
    pub available: u64,
    pub used: u64,
    pub rejected: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum KeyStoreError {
    #[error("no signing key yet: {available} unused keys, reserve threshold {threshold}")]
    NoKeyEver { available: u64, threshold: u64 },
    #[error("key serial {0} is not in the table")]
    UnknownSerial(u64),
    #[error("key serial {0} was already consumed")]
    AlreadyConsumed(u64),
    #[error("journal: {0}")]
    Journal(#[from] io::Error),
}

impl KeyStoreError {
    pub fn code(&self) -> &'static str {
        match self {
            KeyStoreError::NoKeyEver { .. } => "no-key-ever",
            KeyStoreError::UnknownSerial(_) => "unknown-serial",
            KeyStoreError::AlreadyConsumed(_) => "already-consumed",
            KeyStoreError::Journal(_) => "io-error",
        }
    }
}

#[derive(Debug, Default)]
struct Table {
    records: BTreeMap<u64, KeyRecord>,
    /// Unused serials split by parity, indexed by `PartyRole::slot`.
    unused: [BTreeSet<u64>; 2],
    /// Most recent signing key per party.
    last_signing: [Option<u64>; 2],
    /// Use events replayed from a journal for keys not ingested yet.
    pending_use: BTreeMap<u64, UseKind>,
    added: u64,
    used: u64,
    rejected: u64,
}

impl Table {
    fn unused_total(&self) -> u64 {
        (self.unused[0].len() + self.unused[1].len()) as u64
    }

    fn mark(&mut self, serial: u64, kind: UseKind) -> bool {
        let Some(rec) = self.records.get_mut(&serial) else {
            return false;
        };
        if rec.used.is_some() {
            return false;
        }
        rec.used = Some(kind);
        self.unused[PartyRole::of(serial).slot()].remove(&serial);
        self.used += 1;
        true
    }
}

/// Internally synchronized key table. One ingest writer, one signer and one
/// verifier may share it; every operation runs under a single lock.
#[derive(Debug, Default)]
pub struct KeyStore {
    table: Mutex<Table>,
    journal: Option<Mutex<File>>,
}

impl KeyStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Store with an append-only journal at `path`. Use events already in
    /// the journal are re-applied as the corresponding keys are ingested.
    pub fn with_journal(path: &Path) -> Result<Self, KeyStoreError> {
        let state = if path.exists() {
            JournalState::load(path)?
        } else {
            JournalState::default()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut table = Table::default();
        for (&serial, &kind) in &state.used {
            table.pending_use.insert(serial, kind);
            if kind == UseKind::Sign {
                let slot = PartyRole::of(serial).slot();
                table.last_signing[slot] = table.last_signing[slot].max(Some(serial));
            }
        }
        Ok(Self {
            table: Mutex::new(table),
            journal: Some(Mutex::new(file)),
        })
    }

    fn log(&self, line: fmt::Arguments<'_>) -> Result<(), KeyStoreError> {
        if let Some(j) = &self.journal {
            let mut f = j.lock().unwrap();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    /// Add frames in feed order. Wrong-length keys and serials already in the
    /// table are rejected and counted, never raised.
    pub fn ingest(&self, frames: &[KeyFrame]) -> IngestReport {
        let mut report = IngestReport::default();
        let mut new_serials = Vec::new();
        {
            let mut t = self.table.lock().unwrap();
            for frame in frames {
                t.added += 1;
                let Ok(secret) = <[u8; KEY_LEN]>::try_from(frame.key_data.as_slice()) else {
                    report.bad_length += 1;
                    t.rejected += 1;
                    continue;
                };
                if t.records.contains_key(&frame.key_id) {
                    report.duplicates += 1;
                    t.rejected += 1;
                    continue;
                }
                let serial = frame.key_id;
                t.records.insert(
                    serial,
                    KeyRecord {
                        serial,
                        secret: Secret(secret),
                        used: None,
                    },
                );
                t.unused[PartyRole::of(serial).slot()].insert(serial);
                if let Some(kind) = t.pending_use.remove(&serial) {
                    t.mark(serial, kind);
                }
                report.accepted += 1;
                new_serials.push(serial);
            }
        }
        for serial in new_serials {
            if let Err(e) = self.log(format_args!("ADD {serial}")) {
                tracing::warn!("key journal write failed: {e}");
            }
        }
        report
    }

    /// Pick the key to sign the next outgoing message with.
    ///
    /// While more than `policy.threshold` keys are unused, advance to the
    /// lowest unused serial of `role`'s parity above its previous key and mark
    /// it used. Otherwise reuse the previous key (`fresh == false`); the
    /// caller must pair it with a new IV.
    pub fn next_signing_key(&self, role: PartyRole, policy: PoolPolicy) -> Result<SigningKey, KeyStoreError> {
        let key = {
            let mut t = self.table.lock().unwrap();
            let unused_before = t.unused_total();
            let slot = role.slot();
            let last = t.last_signing[slot];
            let candidate = if unused_before > policy.threshold {
                let floor = last.map_or(0, |s| s + 1);
                t.unused[slot].range(floor..).next().copied()
            } else {
                None
            };
            match (candidate, last) {
                (Some(serial), _) => {
                    t.mark(serial, UseKind::Sign);
                    t.last_signing[slot] = Some(serial);
                    SigningKey {
                        serial,
                        secret: t.records[&serial].secret,
                        fresh: true,
                        unused_before,
                    }
                }
                (None, Some(serial)) => match t.records.get(&serial) {
                    Some(rec) => SigningKey {
                        serial,
                        secret: rec.secret,
                        fresh: false,
                        unused_before,
                    },
                    None => return Err(KeyStoreError::UnknownSerial(serial)),
                },
                (None, None) => {
                    return Err(KeyStoreError::NoKeyEver {
                        available: unused_before,
                        threshold: policy.threshold,
                    })
                }
            }
        };
        if key.fresh {
            self.log(format_args!("USE {} sign", key.serial))?;
        }
        Ok(key)
    }

    /// Secret for a counterpart's serial that has not been verified yet.
    /// Does not mark anything; see [`mark_verified`](Self::mark_verified).
    pub fn lookup_for_verify(&self, serial: u64) -> Result<Secret, KeyStoreError> {
        let t = self.table.lock().unwrap();
        let rec = t.records.get(&serial).ok_or(KeyStoreError::UnknownSerial(serial))?;
        if rec.used.is_some() {
            return Err(KeyStoreError::AlreadyConsumed(serial));
        }
        Ok(rec.secret)
    }

    /// Secret for any ingested serial regardless of its used flag.
    pub fn secret(&self, serial: u64) -> Option<Secret> {
        self.table.lock().unwrap().records.get(&serial).map(|r| r.secret)
    }

    /// Flag a counterpart's key as used after a successful verification.
    /// Returns `false` if it was already flagged.
    pub fn mark_verified(&self, serial: u64) -> Result<bool, KeyStoreError> {
        let marked = self.table.lock().unwrap().mark(serial, UseKind::Verify);
        if marked {
            self.log(format_args!("USE {serial} verify"))?;
        }
        Ok(marked)
    }

    pub fn counters(&self) -> KeyCounters {
        let t = self.table.lock().unwrap();
        KeyCounters {
            added: t.added,
            available: t.unused_total(),
            used: t.used,
            rejected: t.rejected,
        }
    }

    pub fn record(&self, serial: u64) -> Option<KeyRecord> {
        self.table.lock().unwrap().records.get(&serial).cloned()
    }

    pub fn last_signing_serial(&self, role: PartyRole) -> Option<u64> {
        self.table.lock().unwrap().last_signing[role.slot()]
    }

    pub fn len(&self) -> usize {
        self.table.lock().unwrap().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parsed contents of a key journal.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct JournalState {
    pub added: BTreeSet<u64>,
    pub used: BTreeMap<u64, UseKind>,
}

impl JournalState {
    pub fn load(path: &Path) -> io::Result<Self> {
        let mut state = Self::default();
        let reader = BufReader::new(File::open(path)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let bad = || {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("journal line {}: {line:?}", lineno + 1),
                )
            };
            let mut parts = line.split_whitespace();
            let verb = parts.next();
            let serial: u64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            match (verb, parts.next()) {
                (Some("ADD"), None) => {
                    state.added.insert(serial);
                }
                (Some("USE"), Some("sign")) => {
                    state.used.insert(serial, UseKind::Sign);
                }
                (Some("USE"), Some("verify")) => {
                    state.used.insert(serial, UseKind::Verify);
                }
                _ => return Err(bad()),
            }
        }
        Ok(state)
    }
}
