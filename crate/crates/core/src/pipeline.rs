//! Drives the stages end to end: registry → harvest → safe transform →
//! dbInsert → repository → publish → index.
//!
//! Data directory layout:
//!
//! ```text
//! <data_dir>/
//!   registry/log.jsonl          append-only registry events
//!   registry/snapshot.json      folded registry state
//!   repository/staging.json     staging namespaces
//!   repository/current.json     manifest of the published snapshot
//!   repository/snapshots/*.json published snapshots, by content id
//!   dbinsert/<attempt>.xml      dbInsert document of each successful attempt
//!   index/{metadata,resource,naive}.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{HarvestClient, HarvestConfig, HarvestMode, HarvestOutcome, Transport};
use crate::clock::Clock;
use crate::index::{
    build_metadata_centric, build_naive_identifier, build_resource_centric, fetch_digests, DedupReport, FetchError,
    FetchPolicy, Fetcher, IndexError, IndexKind, SearchIndex,
};
use crate::ingest::{build_db_insert, validate_normalized, SafeTransform, ViolationKind};
use crate::model::{DcElement, DeletedPolicy, MetadataRecord, QualifiedProfile};
use crate::registry::{HarvestAttempt, Registry, RegistryError, RegistryPolicy};
use crate::repository::{RecordKind, Repository, RepositoryConfig, RepositoryError, ServingSnapshot, SharedRepository};
use crate::validator::{validate_provider, ValidationReport, ValidatorOptions};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Repository(#[from] RepositoryError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("could not identify {base_url}: {failure}")]
    Identify { base_url: String, failure: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default)]
pub struct PipelineSettings {
    pub repository: RepositoryConfig,
    pub registry: RegistryPolicy,
    pub fetch: FetchPolicy,
    pub profile: QualifiedProfile,
    pub transform: Option<Arc<SafeTransform>>,
}

/// What a new collection registration needs besides its validation report.
#[derive(Debug, Clone)]
pub struct Registration {
    pub description: Vec<DcElement>,
    pub contacts: Vec<String>,
    pub config: HarvestConfig,
    /// Whether native metadata may be re-exposed in `nsdl_all`.
    pub native_public: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestReport {
    pub collection_id: String,
    pub attempt_id: String,
    pub mode: HarvestMode,
    pub outcome: HarvestOutcome,
    pub records_seen: u64,
    pub inserted: usize,
    pub deleted: usize,
    /// Records dropped for carrying neither identifier nor title after
    /// normalization.
    pub excluded: Vec<String>,
    /// Records served with profile violations.
    pub flagged: usize,
    pub pages: u32,
    pub detail: String,
}

impl HarvestReport {
    pub fn is_success(&self) -> bool {
        self.outcome == HarvestOutcome::Success
    }
}

pub struct Aggregator {
    registry: Registry,
    repository: Arc<SharedRepository>,
    client: HarvestClient,
    transform: Arc<SafeTransform>,
    profile: QualifiedProfile,
    fetch: FetchPolicy,
    clock: Arc<dyn Clock>,
    dir: Option<PathBuf>,
}

impl Aggregator {
    pub fn in_memory(settings: PipelineSettings, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Self {
        let repo = Repository::in_memory(settings.repository).with_profile(settings.profile.clone());
        Aggregator {
            registry: Registry::in_memory(settings.registry),
            repository: Arc::new(SharedRepository::new(repo).expect("in-memory repository")),
            client: HarvestClient::new(transport).with_profile(settings.profile.clone()),
            transform: settings.transform.unwrap_or_default(),
            profile: settings.profile,
            fetch: settings.fetch,
            clock,
            dir: None,
        }
    }

    pub fn open(
        data_dir: &Path,
        settings: PipelineSettings,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, PipelineError> {
        fs::create_dir_all(data_dir)?;
        let repo = Repository::open(&data_dir.join("repository"), settings.repository)?
            .with_profile(settings.profile.clone());
        Ok(Aggregator {
            registry: Registry::open(&data_dir.join("registry"), settings.registry)?,
            repository: Arc::new(SharedRepository::new(repo)?),
            client: HarvestClient::new(transport).with_profile(settings.profile.clone()),
            transform: settings.transform.unwrap_or_default(),
            profile: settings.profile,
            fetch: settings.fetch,
            clock,
            dir: Some(data_dir.to_path_buf()),
        })
    }

    pub fn with_client(mut self, client: HarvestClient) -> Self {
        self.client = client;
        self
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut Registry {
        &mut self.registry
    }

    pub fn repository(&self) -> &Arc<SharedRepository> {
        &self.repository
    }

    pub fn client(&self) -> &HarvestClient {
        &self.client
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn data_dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn validate(&self, base_url: &str, options: &ValidatorOptions) -> ValidationReport {
        validate_provider(&self.client, base_url, options, self.clock.now())
    }

    /// Register a collection that passed validation and inject its
    /// description record into the repository.
    pub fn register(&mut self, reg: Registration, report: &ValidationReport) -> Result<String, PipelineError> {
        let info = self.client.identify(&reg.config.base_url).map_err(|f| PipelineError::Identify {
            base_url: reg.config.base_url.clone(),
            failure: f.error.to_string(),
        })?;
        let now = self.clock.now();
        let id = self.registry.register(
            reg.description.clone(),
            reg.contacts,
            reg.config,
            report,
            info.deleted_policy,
            now,
        )?;
        let mut repo = self.repository.staging();
        repo.register_collection(&id, &reg.description, reg.native_public, now)?;
        repo.save()?;
        Ok(id)
    }

    /// One harvest attempt for a registered collection, in the mode the
    /// registry decides.
    pub fn harvest(&mut self, collection_id: &str) -> Result<HarvestReport, PipelineError> {
        let mode = self.registry.decide_mode(collection_id, self.clock.now())?;
        self.harvest_with_mode(collection_id, mode)
    }

    pub fn harvest_with_mode(&mut self, collection_id: &str, mode: HarvestMode) -> Result<HarvestReport, PipelineError> {
        let entry = self
            .registry
            .entry(collection_id)
            .ok_or_else(|| RegistryError::UnknownCollection(collection_id.to_string()))?;
        let config = entry.config.clone();
        let started_at = self.clock.now();
        let attempt_id = self.registry.begin_attempt(collection_id, mode, started_at)?;
        let result = self.client.harvest(&config, mode);
        let mut report = HarvestReport {
            collection_id: collection_id.to_string(),
            attempt_id: attempt_id.clone(),
            mode,
            outcome: result.outcome,
            records_seen: result.records.len() as u64,
            inserted: 0,
            deleted: 0,
            excluded: Vec::new(),
            flagged: 0,
            pages: result.pages_fetched,
            detail: result.failure_detail.clone(),
        };
        let mut new_watermark = None;
        if result.is_success() {
            match self.store(collection_id, &attempt_id, mode, &result.records, &mut report) {
                Ok(()) => new_watermark = result.completed_through,
                Err(e) => {
                    // storage problems are ours, not the provider's; the
                    // attempt still has to be closed in the log
                    let _ = self.finish(&attempt_id, collection_id, started_at, mode, &report, None);
                    return Err(e);
                }
            }
        }
        self.finish(&attempt_id, collection_id, started_at, mode, &report, new_watermark)?;
        log::info!(
            "{collection_id} {attempt_id}: {:?}, {} seen, {} inserted, {} deleted",
            report.outcome,
            report.records_seen,
            report.inserted,
            report.deleted
        );
        Ok(report)
    }

    fn finish(
        &mut self,
        attempt_id: &str,
        collection_id: &str,
        started_at: chrono::DateTime<chrono::Utc>,
        mode: HarvestMode,
        report: &HarvestReport,
        new_watermark: Option<chrono::DateTime<chrono::Utc>>,
    ) -> Result<(), PipelineError> {
        self.registry.record_attempt(HarvestAttempt {
            attempt_id: attempt_id.to_string(),
            collection_id: collection_id.to_string(),
            started_at,
            finished_at: self.clock.now().max(started_at),
            mode,
            outcome: report.outcome,
            records_seen: report.records_seen,
            new_watermark,
            detail: report.detail.clone(),
        })?;
        Ok(())
    }

    fn store(
        &mut self,
        collection_id: &str,
        attempt_id: &str,
        mode: HarvestMode,
        records: &[MetadataRecord],
        report: &mut HarvestReport,
    ) -> Result<(), PipelineError> {
        let now = self.clock.now();
        let mut pairs = Vec::new();
        let mut deletions = Vec::new();
        for r in records {
            if r.is_deleted() {
                deletions.push(r.identifier().to_string());
                continue;
            }
            let n = self.transform.apply(r);
            if let Err(v) = validate_normalized(&n, &self.profile) {
                if v.iter().any(|v| v.rule == ViolationKind::MinimumContent) {
                    report.excluded.push(r.identifier().to_string());
                    continue;
                }
                report.flagged += 1;
            }
            pairs.push((r.clone(), n));
        }
        let mut repo = self.repository.staging();
        let seen: BTreeSet<String> = pairs.iter().map(|(o, _)| o.identifier().to_string()).collect();
        if !pairs.is_empty() {
            let doc = build_db_insert(pairs, collection_id, attempt_id).map_err(RepositoryError::from)?;
            if let Some(dir) = &self.dir {
                let out = dir.join("dbinsert");
                fs::create_dir_all(&out)?;
                fs::write(out.join(format!("{attempt_id}.xml")), doc.to_xml())?;
            }
            report.inserted = repo.insert(&doc, now)?.len();
        }
        for id in &deletions {
            if repo.delete_source(collection_id, id, now)? {
                report.deleted += 1;
            }
        }
        if mode == HarvestMode::Full {
            // a complete harvest is authoritative: anything not in it is gone
            let stale: Vec<String> = repo
                .records()
                .filter(|r| r.collection_id == collection_id && r.kind == RecordKind::Item && !r.deleted)
                .filter(|r| !seen.contains(&r.source_identifier) && !report.excluded.contains(&r.source_identifier))
                .map(|r| r.repo_identifier.clone())
                .collect();
            for id in stale {
                repo.mark_deleted(&id, now)?;
                report.deleted += 1;
            }
        }
        repo.save()?;
        Ok(())
    }

    /// Harvest every collection the schedule says is due.
    pub fn harvest_due(&mut self) -> Result<Vec<HarvestReport>, PipelineError> {
        let due = self.registry.schedule_due(self.clock.now());
        due.into_iter()
            .map(|(id, mode)| self.harvest_with_mode(&id, mode))
            .collect()
    }

    /// Harvest every enabled collection now, due or not.
    pub fn harvest_all(&mut self) -> Result<Vec<HarvestReport>, PipelineError> {
        let ids: Vec<String> = self
            .registry
            .entries()
            .filter(|e| e.state.enabled && e.record.active)
            .map(|e| e.record.collection_id.clone())
            .collect();
        ids.iter().map(|id| self.harvest(id)).collect()
    }

    pub fn publish(&self) -> Result<Arc<ServingSnapshot>, PipelineError> {
        Ok(self.repository.publish(self.clock.now())?)
    }

    pub fn snapshot(&self) -> Arc<ServingSnapshot> {
        self.repository.current()
    }

    /// Build (and, on disk, save) an index over the current snapshot.
    /// Fetching only matters for the resource-centric kind.
    pub fn build_index(
        &self,
        kind: IndexKind,
        fetcher: Option<&dyn Fetcher>,
    ) -> Result<(SearchIndex, BTreeMap<String, FetchError>), PipelineError> {
        let snap = self.snapshot();
        let mut failed = BTreeMap::new();
        let index = match kind {
            IndexKind::MetadataCentric => {
                let existing = match &self.dir {
                    Some(d) => SearchIndex::load(&d.join("index"), kind)?,
                    None => None,
                };
                match existing {
                    Some(mut idx) if idx.kind == kind => {
                        idx.update(&snap);
                        idx
                    }
                    _ => build_metadata_centric(&snap),
                }
            }
            IndexKind::ResourceCentric => {
                let digests = fetcher.map(|f| {
                    let (ok, bad) = fetch_digests(&snap, f, self.fetch);
                    failed = bad;
                    ok
                });
                build_resource_centric(&snap, digests.as_ref())
            }
            IndexKind::NaiveIdentifier => build_naive_identifier(&snap),
        };
        if let Some(d) = &self.dir {
            index.save(&d.join("index"))?;
        }
        Ok((index, failed))
    }

    pub fn load_index(&self, kind: IndexKind) -> Result<Option<SearchIndex>, PipelineError> {
        match &self.dir {
            Some(d) => Ok(SearchIndex::load(&d.join("index"), kind)?),
            None => Ok(None),
        }
    }

    pub fn dedup_report(&self, fetcher: Option<&dyn Fetcher>) -> DedupReport {
        let snap = self.snapshot();
        let digests = fetcher.map(|f| fetch_digests(&snap, f, self.fetch).0);
        DedupReport::build(&snap, digests.as_ref())
    }

    /// Deletion policy the registry recorded for a collection.
    pub fn deleted_policy(&self, collection_id: &str) -> Option<DeletedPolicy> {
        self.registry.entry(collection_id).map(|e| e.state.deleted_policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{LocalTransport, RetryPolicy};
    use crate::model::DcName;
    use crate::sim::{Scenario, Simulator};
    use crate::validator::Verdict;
    use chrono::{TimeZone, Utc};

    fn setup(n: usize) -> (Arc<Simulator>, Aggregator) {
        let sim = Arc::new(Simulator::new(Scenario::synthetic(n, Utc.with_ymd_and_hms(2005, 1, 1, 0, 0, 0).unwrap())).unwrap());
        let transport = LocalTransport::new();
        transport.mount(sim.base_url().to_string(), sim.clone());
        let transport: Arc<dyn Transport> = Arc::new(transport);
        let agg = Aggregator::in_memory(PipelineSettings::default(), transport.clone(), sim.clone())
            .with_client(HarvestClient::new(transport).with_retry(RetryPolicy::none()));
        (sim, agg)
    }

    fn registration(sim: &Simulator) -> Registration {
        Registration {
            description: vec![DcElement::new(DcName::Title, "Sim collection")],
            contacts: vec!["a@b.c".into()],
            config: HarvestConfig {
                collection_id: String::new(),
                base_url: sim.base_url().to_string(),
                set_spec: None,
                format_prefix: "oai_dc".into(),
                schedule_days: 7,
                enabled: true,
            },
            native_public: false,
        }
    }

    #[test]
    fn register_harvest_publish() {
        let (sim, mut agg) = setup(12);
        let report = agg.validate(sim.base_url(), &ValidatorOptions::default());
        assert_eq!(report.verdict, Verdict::Pass, "{}", report.to_text());
        let id = agg.register(registration(&sim), &report).unwrap();
        assert_eq!(agg.repository().staging().len(), 1);
        let h = agg.harvest(&id).unwrap();
        assert!(h.is_success());
        assert_eq!(h.mode, HarvestMode::Full);
        assert_eq!(h.inserted, 12);
        let snap = agg.publish().unwrap();
        assert_eq!(snap.len(), 13);
        assert!(matches!(agg.harvest(&id).unwrap().mode, HarvestMode::Incremental { .. }));
        assert!(matches!(
            agg.register(registration(&sim), &report),
            Err(PipelineError::Registry(RegistryError::DuplicateBaseUrlSet { .. }))
        ));
    }
}
