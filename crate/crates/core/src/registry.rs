//! The collection registry.
//!
//! Holds the catalog of registered collections, their harvest configuration,
//! and the attempt log. All state is a fold over an append-only event log;
//! persisted registries keep the log as JSON lines next to a periodic
//! snapshot of the folded state.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::{FailureCategory, HarvestConfig, HarvestMode, HarvestOutcome};
use crate::model::{DcElement, DcName, DeletedPolicy};
use crate::validator::{ValidationReport, Verdict};

const LOG_FILE: &str = "log.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("collection cannot be registered without a passing validation report: {0}")]
    ValidationRequired(String),
    #[error("{base_url} (set {set:?}, format {format}) is already registered as {existing}")]
    DuplicateBaseUrlSet {
        base_url: String,
        set: Option<String>,
        format: String,
        existing: String,
    },
    #[error("unknown collection {0}")]
    UnknownCollection(String),
    #[error("invalid collection: {0}")]
    InvalidCollection(String),
    #[error("invalid attempt: {0}")]
    InvalidAttempt(String),
    #[error("collection {collection} already has attempt {attempt} running")]
    AttemptRunning { collection: String, attempt: String },
    #[error("registry storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt registry {path} line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Re-sync knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryPolicy {
    /// Consecutive failures that force the next harvest to be full.
    pub resync_failures: u32,
    /// For providers without persistent deletes, every n-th scheduled
    /// harvest is full.
    pub resync_every: u32,
}

impl Default for RegistryPolicy {
    fn default() -> Self {
        RegistryPolicy {
            resync_failures: 3,
            resync_every: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionRecord {
    pub collection_id: String,
    pub description: Vec<DcElement>,
    #[serde(default)]
    pub provider_contacts: Vec<String>,
    pub active: bool,
}

impl CollectionRecord {
    pub fn title(&self) -> Option<&str> {
        self.description
            .iter()
            .find(|e| e.name == DcName::Title)
            .map(|e| e.value.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestAttempt {
    pub attempt_id: String,
    pub collection_id: String,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub mode: HarvestMode,
    pub outcome: HarvestOutcome,
    pub records_seen: u64,
    pub new_watermark: Option<DateTime<Utc>>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl HarvestAttempt {
    pub fn is_success(&self) -> bool {
        self.outcome == HarvestOutcome::Success
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionState {
    pub collection_id: String,
    pub watermark: Option<DateTime<Utc>>,
    pub consecutive_failures: u32,
    pub last_full_harvest: Option<DateTime<Utc>>,
    pub deleted_policy: DeletedPolicy,
    pub schedule_days: u32,
    pub enabled: bool,
    pub last_started: Option<DateTime<Utc>>,
    pub last_finished: Option<DateTime<Utc>>,
    /// Attempt begun but not yet recorded.
    pub running: Option<String>,
    pub attempts: u64,
}

impl CollectionState {
    fn fresh(collection_id: &str, config: &HarvestConfig, policy: DeletedPolicy) -> Self {
        CollectionState {
            collection_id: collection_id.to_string(),
            watermark: None,
            consecutive_failures: 0,
            last_full_harvest: None,
            deleted_policy: policy,
            schedule_days: config.schedule_days,
            enabled: config.enabled,
            last_started: None,
            last_finished: None,
            running: None,
            attempts: 0,
        }
    }

    pub fn schedule(&self) -> Duration {
        Duration::days(i64::from(self.schedule_days))
    }
}

/// Full when there is no watermark, when failures have piled up, or when a
/// provider that does not keep deletions is due for its periodic re-sync.
pub fn decide_mode(state: &CollectionState, policy: &RegistryPolicy, now: DateTime<Utc>) -> HarvestMode {
    let Some(since) = state.watermark else {
        return HarvestMode::Full;
    };
    if state.consecutive_failures >= policy.resync_failures {
        return HarvestMode::Full;
    }
    if state.deleted_policy != DeletedPolicy::Persistent {
        let interval = state.schedule() * policy.resync_every.saturating_sub(1) as i32;
        match state.last_full_harvest {
            None => return HarvestMode::Full,
            Some(last) if now - last >= interval => return HarvestMode::Full,
            _ => {}
        }
    }
    HarvestMode::Incremental { since }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegistryEvent {
    Registered {
        at: DateTime<Utc>,
        record: CollectionRecord,
        config: HarvestConfig,
        deleted_policy: DeletedPolicy,
    },
    Started {
        at: DateTime<Utc>,
        attempt_id: String,
        collection_id: String,
        mode: HarvestMode,
    },
    Finished {
        attempt: HarvestAttempt,
    },
    Enabled {
        at: DateTime<Utc>,
        collection_id: String,
        enabled: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub record: CollectionRecord,
    pub config: HarvestConfig,
    pub state: CollectionState,
}

/// The folded registry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryState {
    pub entries: BTreeMap<String, Entry>,
    pub attempts: Vec<HarvestAttempt>,
    pub events_applied: u64,
}

impl RegistryState {
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a RegistryEvent>) -> Result<Self, RegistryError> {
        let mut state = RegistryState::default();
        for e in events {
            state.apply(e)?;
        }
        Ok(state)
    }

    fn entry(&self, id: &str) -> Result<&Entry, RegistryError> {
        self.entries
            .get(id)
            .ok_or_else(|| RegistryError::UnknownCollection(id.to_string()))
    }

    /// Validate an event against the current state without changing it.
    pub fn check(&self, event: &RegistryEvent) -> Result<(), RegistryError> {
        match event {
            RegistryEvent::Registered { record, config, .. } => {
                if self.entries.contains_key(&record.collection_id) {
                    return Err(RegistryError::InvalidCollection(format!(
                        "id {} already taken",
                        record.collection_id
                    )));
                }
                if record.collection_id != config.collection_id {
                    return Err(RegistryError::InvalidCollection(
                        "record and config disagree on the collection id".into(),
                    ));
                }
                if record.title().is_none() {
                    return Err(RegistryError::InvalidCollection(
                        "description needs a title".into(),
                    ));
                }
                if config.schedule_days < 1 {
                    return Err(RegistryError::InvalidCollection(
                        "schedule must be at least one day".into(),
                    ));
                }
                if config.format_prefix.is_empty() {
                    return Err(RegistryError::InvalidCollection("empty format prefix".into()));
                }
                if let Some(existing) = self.find_source(config) {
                    return Err(RegistryError::DuplicateBaseUrlSet {
                        base_url: config.base_url.clone(),
                        set: config.set_spec.clone(),
                        format: config.format_prefix.clone(),
                        existing: existing.to_string(),
                    });
                }
                Ok(())
            }
            RegistryEvent::Started { collection_id, .. } => {
                let entry = self.entry(collection_id)?;
                if let Some(attempt) = &entry.state.running {
                    return Err(RegistryError::AttemptRunning {
                        collection: collection_id.clone(),
                        attempt: attempt.clone(),
                    });
                }
                Ok(())
            }
            RegistryEvent::Finished { attempt } => {
                let entry = self.entry(&attempt.collection_id)?;
                if attempt.finished_at < attempt.started_at {
                    return Err(RegistryError::InvalidAttempt(format!(
                        "{} finished before it started",
                        attempt.attempt_id
                    )));
                }
                if entry.state.last_started.is_some_and(|t| attempt.started_at < t)
                    && entry.state.running.as_deref() != Some(attempt.attempt_id.as_str())
                {
                    return Err(RegistryError::InvalidAttempt(format!(
                        "{} starts before an earlier attempt of {}",
                        attempt.attempt_id, attempt.collection_id
                    )));
                }
                if !attempt.is_success() && attempt.new_watermark.is_some() {
                    return Err(RegistryError::InvalidAttempt(format!(
                        "failed attempt {} carries a watermark",
                        attempt.attempt_id
                    )));
                }
                if let HarvestMode::Incremental { .. } = attempt.mode {
                    if entry.state.watermark.is_none() {
                        return Err(RegistryError::InvalidAttempt(format!(
                            "incremental attempt {} before any successful harvest",
                            attempt.attempt_id
                        )));
                    }
                }
                Ok(())
            }
            RegistryEvent::Enabled { collection_id, .. } => self.entry(collection_id).map(|_| ()),
        }
    }

    pub fn apply(&mut self, event: &RegistryEvent) -> Result<(), RegistryError> {
        self.check(event)?;
        match event {
            RegistryEvent::Registered {
                record,
                config,
                deleted_policy,
                ..
            } => {
                let state = CollectionState::fresh(&record.collection_id, config, *deleted_policy);
                self.entries.insert(
                    record.collection_id.clone(),
                    Entry {
                        record: record.clone(),
                        config: config.clone(),
                        state,
                    },
                );
            }
            RegistryEvent::Started {
                at,
                attempt_id,
                collection_id,
                ..
            } => {
                let state = &mut self.entries.get_mut(collection_id).expect("checked").state;
                state.running = Some(attempt_id.clone());
                state.last_started = Some(*at);
            }
            RegistryEvent::Finished { attempt } => {
                let state = &mut self
                    .entries
                    .get_mut(&attempt.collection_id)
                    .expect("checked")
                    .state;
                if state.running.as_deref() == Some(attempt.attempt_id.as_str()) {
                    state.running = None;
                }
                state.last_started = Some(state.last_started.map_or(attempt.started_at, |t| t.max(attempt.started_at)));
                state.last_finished = Some(attempt.finished_at);
                state.attempts += 1;
                match attempt.outcome {
                    HarvestOutcome::Success => {
                        if let Some(w) = attempt.new_watermark {
                            state.watermark = Some(state.watermark.map_or(w, |old| old.max(w)));
                        }
                        state.consecutive_failures = 0;
                        if attempt.mode == HarvestMode::Full {
                            state.last_full_harvest = Some(attempt.finished_at);
                        }
                    }
                    HarvestOutcome::Failure(_) => state.consecutive_failures += 1,
                }
                self.attempts.push(attempt.clone());
            }
            RegistryEvent::Enabled {
                collection_id,
                enabled,
                ..
            } => {
                let entry = self.entries.get_mut(collection_id).expect("checked");
                entry.state.enabled = *enabled;
                entry.config.enabled = *enabled;
            }
        }
        self.events_applied += 1;
        Ok(())
    }

    fn find_source(&self, config: &HarvestConfig) -> Option<&str> {
        self.entries
            .values()
            .find(|e| {
                e.config.base_url == config.base_url
                    && e.config.set_spec == config.set_spec
                    && e.config.format_prefix == config.format_prefix
            })
            .map(|e| e.record.collection_id.as_str())
    }
}

/// Stable id derived from the harvest source.
pub fn collection_id_for(config: &HarvestConfig) -> String {
    let mut h = Sha256::new();
    h.update(config.base_url.as_bytes());
    h.update([0]);
    h.update(config.set_spec.as_deref().unwrap_or("").as_bytes());
    h.update([0]);
    h.update(config.format_prefix.as_bytes());
    let digest = h.finalize();
    format!("c{}", hex::encode(&digest[..4]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionStats {
    pub collection_id: String,
    pub attempts: u64,
    pub successes: u64,
    pub failures: u64,
    pub failure_rate: Option<f64>,
    pub breakdown: BTreeMap<FailureCategory, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub schema: String,
    pub since: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
    pub attempts: u64,
    pub successes: u64,
    pub failures: u64,
    /// Null for an empty window.
    pub failure_rate: Option<f64>,
    pub breakdown: BTreeMap<FailureCategory, u64>,
    pub per_collection: Vec<CollectionStats>,
}

pub const STATS_SCHEMA: &str = "oaiagg.stats/1";

fn empty_breakdown() -> BTreeMap<FailureCategory, u64> {
    FailureCategory::ALL.iter().map(|c| (*c, 0)).collect()
}

fn rate(failures: u64, attempts: u64) -> Option<f64> {
    (attempts > 0).then(|| failures as f64 / attempts as f64)
}

/// Attempt statistics for attempts started within `[since, until)`.
pub fn stats(
    attempts: &[HarvestAttempt],
    since: Option<DateTime<Utc>>,
    until: Option<DateTime<Utc>>,
) -> StatsReport {
    let mut report = StatsReport {
        schema: STATS_SCHEMA.into(),
        since,
        until,
        attempts: 0,
        successes: 0,
        failures: 0,
        failure_rate: None,
        breakdown: empty_breakdown(),
        per_collection: Vec::new(),
    };
    let mut per: BTreeMap<&str, CollectionStats> = BTreeMap::new();
    for a in attempts {
        if since.is_some_and(|s| a.started_at < s) || until.is_some_and(|u| a.started_at >= u) {
            continue;
        }
        let row = per.entry(&a.collection_id).or_insert_with(|| CollectionStats {
            collection_id: a.collection_id.clone(),
            attempts: 0,
            successes: 0,
            failures: 0,
            failure_rate: None,
            breakdown: empty_breakdown(),
        });
        report.attempts += 1;
        row.attempts += 1;
        match a.outcome {
            HarvestOutcome::Success => {
                report.successes += 1;
                row.successes += 1;
            }
            HarvestOutcome::Failure(c) => {
                report.failures += 1;
                row.failures += 1;
                *report.breakdown.entry(c).or_default() += 1;
                *row.breakdown.entry(c).or_default() += 1;
            }
        }
    }
    report.failure_rate = rate(report.failures, report.attempts);
    report.per_collection = per
        .into_values()
        .map(|mut row| {
            row.failure_rate = rate(row.failures, row.attempts);
            row
        })
        .collect();
    report
}

impl StatsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let pct = |r: Option<f64>| r.map_or("n/a".to_string(), |r| format!("{:.1}%", r * 100.0));
        out.push_str(&format!(
            "attempts {}  successes {}  failures {}  failure rate {}\n",
            self.attempts,
            self.successes,
            self.failures,
            pct(self.failure_rate)
        ));
        for (c, n) in &self.breakdown {
            out.push_str(&format!("  {:<20} {n}\n", c.as_str()));
        }
        if !self.per_collection.is_empty() {
            out.push_str(&format!(
                "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
                "collection", "attempts", "ok", "failed", "rate"
            ));
            for row in &self.per_collection {
                out.push_str(&format!(
                    "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
                    row.collection_id,
                    row.attempts,
                    row.successes,
                    row.failures,
                    pct(row.failure_rate)
                ));
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    state: RegistryState,
}

struct Store {
    dir: PathBuf,
    log: File,
}

/// A registry with an optional on-disk log. Mutations go through one
/// `&mut self` writer; each is checked, appended to the log, then folded.
pub struct Registry {
    policy: RegistryPolicy,
    state: RegistryState,
    store: Option<Store>,
    /// Take a snapshot after this many events since the last one.
    snapshot_every: u64,
}

impl Registry {
    pub fn in_memory(policy: RegistryPolicy) -> Self {
        Registry {
            policy,
            state: RegistryState::default(),
            store: None,
            snapshot_every: 256,
        }
    }

    /// Open (or create) a registry directory: load the snapshot, then replay
    /// the log lines it does not cover.
    pub fn open(dir: &Path, policy: RegistryPolicy) -> Result<Self, RegistryError> {
        fs::create_dir_all(dir)?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut state = if snap_path.exists() {
            let text = fs::read_to_string(&snap_path)?;
            let snap: Snapshot = serde_json::from_str(&text).map_err(|e| RegistryError::Corrupt {
                path: snap_path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            if snap.version != SNAPSHOT_VERSION {
                return Err(RegistryError::Corrupt {
                    path: snap_path,
                    line: 0,
                    message: format!("snapshot version {}", snap.version),
                });
            }
            snap.state
        } else {
            RegistryState::default()
        };
        let log_path = dir.join(LOG_FILE);
        let events = read_log(&log_path)?;
        if (events.len() as u64) < state.events_applied {
            return Err(RegistryError::Corrupt {
                path: log_path,
                line: events.len(),
                message: "log is shorter than the snapshot".into(),
            });
        }
        for (i, e) in events.iter().enumerate().skip(state.events_applied as usize) {
            state.apply(e).map_err(|err| RegistryError::Corrupt {
                path: log_path.clone(),
                line: i + 1,
                message: err.to_string(),
            })?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        Ok(Registry {
            policy,
            state,
            store: Some(Store {
                dir: dir.to_path_buf(),
                log,
            }),
            snapshot_every: 256,
        })
    }

    pub fn policy(&self) -> &RegistryPolicy {
        &self.policy
    }

    pub fn state(&self) -> &RegistryState {
        &self.state
    }

    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.state.entries.values()
    }

    pub fn entry(&self, id: &str) -> Option<&Entry> {
        self.state.entries.get(id)
    }

    pub fn attempts(&self) -> &[HarvestAttempt] {
        &self.state.attempts
    }

    pub fn commit(&mut self, event: RegistryEvent) -> Result<(), RegistryError> {
        self.state.check(&event)?;
        if let Some(store) = &mut self.store {
            let line = serde_json::to_string(&event).expect("events serialize");
            writeln!(store.log, "{line}")?;
            store.log.flush()?;
        }
        self.state.apply(&event)?;
        if self.store.is_some() && self.state.events_applied % self.snapshot_every == 0 {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Write the folded state so the next open replays only newer lines.
    pub fn snapshot(&mut self) -> Result<(), RegistryError> {
        let Some(store) = &mut self.store else {
            return Ok(());
        };
        store.log.sync_data()?;
        let snap = Snapshot {
            version: SNAPSHOT_VERSION,
            state: self.state.clone(),
        };
        let tmp = store.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&snap).expect("snapshot serializes"))?;
        fs::rename(&tmp, store.dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }

    /// Register a validated collection. The first harvest will be full.
    pub fn register(
        &mut self,
        description: Vec<DcElement>,
        contacts: Vec<String>,
        mut config: HarvestConfig,
        report: &ValidationReport,
        deleted_policy: DeletedPolicy,
        now: DateTime<Utc>,
    ) -> Result<String, RegistryError> {
        if report.verdict != Verdict::Pass {
            let failed: Vec<_> = report.errors().map(|c| c.check_id.as_str()).collect();
            return Err(RegistryError::ValidationRequired(format!(
                "report for {} failed {}",
                report.provider,
                failed.join(", ")
            )));
        }
        if report.provider != config.base_url {
            return Err(RegistryError::ValidationRequired(format!(
                "report covers {}, not {}",
                report.provider, config.base_url
            )));
        }
        if let Some(existing) = self.state.find_source(&config) {
            return Err(RegistryError::DuplicateBaseUrlSet {
                base_url: config.base_url.clone(),
                set: config.set_spec.clone(),
                format: config.format_prefix.clone(),
                existing: existing.to_string(),
            });
        }
        let mut id = collection_id_for(&config);
        let mut n = 1;
        while self.state.entries.contains_key(&id) {
            n += 1;
            id = format!("{}-{n}", collection_id_for(&config));
        }
        config.collection_id = id.clone();
        let record = CollectionRecord {
            collection_id: id.clone(),
            description,
            provider_contacts: contacts,
            active: true,
        };
        self.commit(RegistryEvent::Registered {
            at: now,
            record,
            config,
            deleted_policy,
        })?;
        Ok(id)
    }

    pub fn set_enabled(&mut self, id: &str, enabled: bool, now: DateTime<Utc>) -> Result<(), RegistryError> {
        self.commit(RegistryEvent::Enabled {
            at: now,
            collection_id: id.to_string(),
            enabled,
        })
    }

    pub fn decide_mode(&self, id: &str, now: DateTime<Utc>) -> Result<HarvestMode, RegistryError> {
        let entry = self.state.entry(id)?;
        Ok(decide_mode(&entry.state, &self.policy, now))
    }

    /// Mark an attempt as running; returns its id.
    pub fn begin_attempt(
        &mut self,
        id: &str,
        mode: HarvestMode,
        now: DateTime<Utc>,
    ) -> Result<String, RegistryError> {
        let entry = self.state.entry(id)?;
        let attempt_id = format!("{id}-{:06}", entry.state.attempts + 1);
        self.commit(RegistryEvent::Started {
            at: now,
            attempt_id: attempt_id.clone(),
            collection_id: id.to_string(),
            mode,
        })?;
        Ok(attempt_id)
    }

    pub fn record_attempt(&mut self, attempt: HarvestAttempt) -> Result<CollectionState, RegistryError> {
        let id = attempt.collection_id.clone();
        self.commit(RegistryEvent::Finished { attempt })?;
        Ok(self.state.entries[&id].state.clone())
    }

    /// Enabled, idle collections whose last attempt finished at least one
    /// schedule interval ago (or that never ran), by id.
    pub fn schedule_due(&self, now: DateTime<Utc>) -> Vec<(String, HarvestMode)> {
        self.state
            .entries
            .values()
            .filter(|e| e.state.enabled && e.record.active && e.state.running.is_none())
            .filter(|e| {
                e.state
                    .last_finished
                    .is_none_or(|t| now - t >= e.state.schedule())
            })
            .map(|e| {
                (
                    e.record.collection_id.clone(),
                    decide_mode(&e.state, &self.policy, now),
                )
            })
            .collect()
    }

    pub fn stats(&self, since: Option<DateTime<Utc>>, until: Option<DateTime<Utc>>) -> StatsReport {
        stats(&self.state.attempts, since, until)
    }
}

/// Every event in a registry log file, in order.
pub fn read_log(path: &Path) -> Result<Vec<RegistryEvent>, RegistryError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| RegistryError::Corrupt {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validator::REPORT_SCHEMA;
    use chrono::TimeZone;

    fn t(day: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2005, 1, day, 0, 0, 0).unwrap()
    }

    fn config(url: &str) -> HarvestConfig {
        HarvestConfig {
            collection_id: String::new(),
            base_url: url.into(),
            set_spec: None,
            format_prefix: "oai_dc".into(),
            schedule_days: 7,
            enabled: true,
        }
    }

    fn report(url: &str, verdict: Verdict) -> ValidationReport {
        ValidationReport {
            schema: REPORT_SCHEMA.into(),
            provider: url.into(),
            format_prefix: "oai_dc".into(),
            checks: Vec::new(),
            verdict,
            generated_at: t(1),
        }
    }

    fn register(reg: &mut Registry, url: &str, policy: DeletedPolicy) -> String {
        reg.register(
            vec![DcElement::new(DcName::Title, "A collection")],
            vec!["admin@example.org".into()],
            config(url),
            &report(url, Verdict::Pass),
            policy,
            t(1),
        )
        .unwrap()
    }

    fn attempt(id: &str, n: u32, mode: HarvestMode, outcome: HarvestOutcome, w: Option<DateTime<Utc>>) -> HarvestAttempt {
        HarvestAttempt {
            attempt_id: format!("{id}-{n}"),
            collection_id: id.into(),
            started_at: t(n),
            finished_at: t(n) + Duration::hours(1),
            mode,
            outcome,
            records_seen: 0,
            new_watermark: w,
            detail: String::new(),
        }
    }

    #[test]
    fn registration_rules() {
        let mut reg = Registry::in_memory(RegistryPolicy::default());
        let id = register(&mut reg, "http://a/oai", DeletedPolicy::Persistent);
        assert!(id.starts_with('c') && id.len() == 9);
        let err = reg
            .register(
                vec![DcElement::new(DcName::Title, "x")],
                vec![],
                config("http://b/oai"),
                &report("http://b/oai", Verdict::Fail),
                DeletedPolicy::No,
                t(1),
            )
            .unwrap_err();
        assert!(matches!(err, RegistryError::ValidationRequired(_)));
        let err = reg
            .register(
                vec![DcElement::new(DcName::Title, "again")],
                vec![],
                config("http://a/oai"),
                &report("http://a/oai", Verdict::Pass),
                DeletedPolicy::No,
                t(1),
            )
            .unwrap_err();
        assert!(matches!(err, RegistryError::DuplicateBaseUrlSet { .. }));
        let err = reg
            .register(vec![], vec![], config("http://c/oai"), &report("http://c/oai", Verdict::Pass), DeletedPolicy::No, t(1))
            .unwrap_err();
        assert!(matches!(err, RegistryError::InvalidCollection(_)));
    }

    #[test]
    fn mode_decisions() {
        let mut reg = Registry::in_memory(RegistryPolicy::default());
        let id = register(&mut reg, "http://a/oai", DeletedPolicy::Persistent);
        assert_eq!(reg.decide_mode(&id, t(1)).unwrap(), HarvestMode::Full);
        reg.record_attempt(attempt(&id, 2, HarvestMode::Full, HarvestOutcome::Success, Some(t(2))))
            .unwrap();
        assert_eq!(reg.decide_mode(&id, t(9)).unwrap(), HarvestMode::Incremental { since: t(2) });

        let mut state = reg.entry(&id).unwrap().state.clone();
        state.deleted_policy = DeletedPolicy::Transient;
        let policy = RegistryPolicy::default();
        assert_eq!(decide_mode(&state, &policy, t(2) + Duration::days(90)), HarvestMode::Full);
        assert!(matches!(
            decide_mode(&state, &policy, t(2) + Duration::days(20)),
            HarvestMode::Incremental { .. }
        ));
    }

    #[test]
    fn failures_keep_watermark_and_force_resync() {
        let mut reg = Registry::in_memory(RegistryPolicy::default());
        let id = register(&mut reg, "http://a/oai", DeletedPolicy::Persistent);
        reg.record_attempt(attempt(&id, 2, HarvestMode::Full, HarvestOutcome::Success, Some(t(2))))
            .unwrap();
        let inc = HarvestMode::Incremental { since: t(2) };
        for n in 3..=5 {
            let s = reg
                .record_attempt(attempt(&id, n, inc, HarvestOutcome::Failure(FailureCategory::Transient), None))
                .unwrap();
            assert_eq!(s.watermark, Some(t(2)));
            assert_eq!(s.consecutive_failures, n - 2);
            let expect_full = n == 5;
            assert_eq!(reg.decide_mode(&id, t(n + 1)).unwrap() == HarvestMode::Full, expect_full);
        }
        let bad = attempt(&id, 6, inc, HarvestOutcome::Failure(FailureCategory::DataFormat), Some(t(6)));
        assert!(matches!(reg.record_attempt(bad), Err(RegistryError::InvalidAttempt(_))));
    }

    #[test]
    fn schedule_excludes_running_and_disabled() {
        let mut reg = Registry::in_memory(RegistryPolicy::default());
        let a = register(&mut reg, "http://a/oai", DeletedPolicy::Persistent);
        let b = register(&mut reg, "http://b/oai", DeletedPolicy::Persistent);
        let c = register(&mut reg, "http://c/oai", DeletedPolicy::Persistent);
        reg.record_attempt(attempt(&a, 2, HarvestMode::Full, HarvestOutcome::Success, Some(t(2))))
            .unwrap();
        reg.begin_attempt(&b, HarvestMode::Full, t(3)).unwrap();
        let due: Vec<_> = reg.schedule_due(t(4)).into_iter().map(|(id, _)| id).collect();
        assert_eq!(due, vec![c.clone()]);
        assert!(matches!(
            reg.begin_attempt(&b, HarvestMode::Full, t(3)),
            Err(RegistryError::AttemptRunning { .. })
        ));
        let due: Vec<_> = reg.schedule_due(t(10)).into_iter().map(|(id, _)| id).collect();
        let mut expect = vec![a.clone(), c.clone()];
        expect.sort();
        assert_eq!(due, expect);
        for id in [&a, &b, &c] {
            reg.set_enabled(id, false, t(10)).unwrap();
        }
        assert!(reg.schedule_due(t(30)).is_empty());
    }

    #[test]
    fn stats_arithmetic() {
        let mut reg = Registry::in_memory(RegistryPolicy::default());
        let id = register(&mut reg, "http://a/oai", DeletedPolicy::Persistent);
        assert_eq!(reg.stats(None, None).failure_rate, None);
        let cats = [FailureCategory::Transient, FailureCategory::DataFormat, FailureCategory::DataFormat, FailureCategory::ProtocolViolation];
        for n in 1..=10u32 {
            let outcome = if n <= 6 {
                HarvestOutcome::Success
            } else {
                HarvestOutcome::Failure(cats[(n - 7) as usize])
            };
            let w = (outcome == HarvestOutcome::Success).then(|| t(n));
            reg.record_attempt(attempt(&id, n, HarvestMode::Full, outcome, w)).unwrap();
        }
        let s = reg.stats(None, None);
        assert_eq!(s.attempts, 10);
        assert_eq!(s.failure_rate, Some(0.4));
        assert_eq!(s.breakdown.values().sum::<u64>(), s.failures);
        assert_eq!(s.breakdown[&FailureCategory::DataFormat], 2);
        let windowed = reg.stats(Some(t(7)), None);
        assert_eq!(windowed.attempts, 4);
    }

    #[test]
    fn persisted_log_replays() {
        let dir = tempfile::tempdir().unwrap();
        let id;
        {
            let mut reg = Registry::open(dir.path(), RegistryPolicy::default()).unwrap();
            reg.snapshot_every = 2;
            id = register(&mut reg, "http://a/oai", DeletedPolicy::Persistent);
            reg.record_attempt(attempt(&id, 2, HarvestMode::Full, HarvestOutcome::Success, Some(t(2))))
                .unwrap();
            reg.record_attempt(attempt(
                &id,
                3,
                HarvestMode::Incremental { since: t(2) },
                HarvestOutcome::Failure(FailureCategory::Transient),
                None,
            ))
            .unwrap();
        }
        let reg = Registry::open(dir.path(), RegistryPolicy::default()).unwrap();
        let s = &reg.entry(&id).unwrap().state;
        assert_eq!(s.watermark, Some(t(2)));
        assert_eq!(s.consecutive_failures, 1);
        let events = read_log(&dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(&RegistryState::replay(&events).unwrap(), reg.state());
    }
}
