//! Immutable serving snapshots and the atomic swap between them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CollectionInfo, ExportBundle, RecordKind, Repository, RepositoryError, StoredRecord};
use crate::model::RecordHeader;

const SNAPSHOT_DIR: &str = "snapshots";
const MANIFEST: &str = "current.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServedRecord {
    pub repo_identifier: String,
    pub collection_id: String,
    pub kind: RecordKind,
    pub served_datestamp: DateTime<Utc>,
    pub deleted: bool,
    /// Export payloads by prefix; empty for deletions.
    pub payloads: BTreeMap<String, String>,
}

impl ServedRecord {
    pub(super) fn from_stored(r: &StoredRecord, exports: Option<&ExportBundle>) -> Self {
        ServedRecord {
            repo_identifier: r.repo_identifier.clone(),
            collection_id: r.collection_id.clone(),
            kind: r.kind,
            served_datestamp: r.served_datestamp,
            deleted: r.deleted,
            payloads: exports.map(|b| b.payloads.clone()).unwrap_or_default(),
        }
    }

    /// Set membership follows the links relation, so collection records
    /// belong to no set.
    pub fn header(&self) -> RecordHeader {
        let set_specs = match self.kind {
            RecordKind::Item => vec![self.collection_id.clone()],
            RecordKind::Collection => Vec::new(),
        };
        RecordHeader {
            identifier: self.repo_identifier.clone(),
            datestamp: self.served_datestamp,
            set_specs,
            deleted: self.deleted,
        }
    }

    pub fn payload(&self, prefix: &str) -> Option<&str> {
        self.payloads.get(prefix).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Body {
    records: Vec<ServedRecord>,
    collections: Vec<CollectionInfo>,
}

/// A frozen view of the repository. Records are ordered by
/// (served datestamp, identifier).
#[derive(Debug, Clone)]
pub struct ServingSnapshot {
    body: Body,
    snapshot_id: String,
    checksum: String,
    published_at: DateTime<Utc>,
    by_id: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub snapshot_id: String,
    pub record_count: usize,
    pub published_at: DateTime<Utc>,
    pub checksum: String,
}

impl ServingSnapshot {
    pub(super) fn new(records: Vec<ServedRecord>, collections: Vec<CollectionInfo>, published_at: DateTime<Utc>) -> Self {
        Self::from_body(Body { records, collections }, published_at)
    }

    fn from_body(body: Body, published_at: DateTime<Utc>) -> Self {
        let checksum = hex::encode(Sha256::digest(body_bytes(&body)));
        let by_id = body
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.repo_identifier.clone(), i))
            .collect();
        ServingSnapshot {
            snapshot_id: checksum[..16].to_string(),
            checksum,
            published_at,
            by_id,
            body,
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new(), Vec::new(), DateTime::<Utc>::UNIX_EPOCH)
    }

    /// Content hash prefix; equal contents give equal ids.
    pub fn id(&self) -> &str {
        &self.snapshot_id
    }

    pub fn published_at(&self) -> DateTime<Utc> {
        self.published_at
    }

    pub fn records(&self) -> &[ServedRecord] {
        &self.body.records
    }

    pub fn collections(&self) -> &[CollectionInfo] {
        &self.body.collections
    }

    pub fn get(&self, repo_identifier: &str) -> Option<&ServedRecord> {
        self.by_id.get(repo_identifier).map(|&i| &self.body.records[i])
    }

    pub fn len(&self) -> usize {
        self.body.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.body.records.is_empty()
    }

    pub fn earliest_datestamp(&self) -> Option<DateTime<Utc>> {
        self.body.records.first().map(|r| r.served_datestamp)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            snapshot_id: self.snapshot_id.clone(),
            record_count: self.len(),
            published_at: self.published_at,
            checksum: self.checksum.clone(),
        }
    }

    /// Serialized body. Publishing the same staging state twice gives the
    /// same bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        body_bytes(&self.body)
    }

    /// Store under `dir/snapshots/` and point the manifest at it.
    pub fn write(&self, dir: &Path) -> Result<(), RepositoryError> {
        let snaps = dir.join(SNAPSHOT_DIR);
        fs::create_dir_all(&snaps)?;
        let path = snaps.join(format!("{}.json", self.snapshot_id));
        if !path.exists() {
            let tmp = snaps.join(format!("{}.json.tmp", self.snapshot_id));
            fs::write(&tmp, self.to_bytes())?;
            fs::rename(&tmp, &path)?;
        }
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(&self.manifest()).expect("manifest serializes"))?;
        fs::rename(&tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    /// The snapshot the manifest under `dir` points at, if any.
    pub fn load_current(dir: &Path) -> Result<Option<Self>, RepositoryError> {
        let mpath = dir.join(MANIFEST);
        if !mpath.exists() {
            return Ok(None);
        }
        let corrupt = |path: &Path, message: String| RepositoryError::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| corrupt(&mpath, e.to_string()))?;
        let spath = dir.join(SNAPSHOT_DIR).join(format!("{}.json", manifest.snapshot_id));
        let bytes = fs::read(&spath)?;
        if hex::encode(Sha256::digest(&bytes)) != manifest.checksum {
            return Err(corrupt(&spath, "checksum mismatch".into()));
        }
        let body: Body = serde_json::from_slice(&bytes).map_err(|e| corrupt(&spath, e.to_string()))?;
        Ok(Some(Self::from_body(body, manifest.published_at)))
    }
}

fn body_bytes(body: &Body) -> Vec<u8> {
    serde_json::to_vec(body).expect("snapshot body serializes")
}

/// Staging behind a lock, with readers holding whichever snapshot was
/// current when they started.
pub struct SharedRepository {
    staging: Mutex<Repository>,
    current: RwLock<Arc<ServingSnapshot>>,
}

impl SharedRepository {
    /// Wraps `repo`, serving the last persisted snapshot if there is one.
    pub fn new(repo: Repository) -> Result<Self, RepositoryError> {
        let current = match repo.dir() {
            Some(dir) => ServingSnapshot::load_current(dir)?.unwrap_or_else(ServingSnapshot::empty),
            None => ServingSnapshot::empty(),
        };
        Ok(SharedRepository {
            staging: Mutex::new(repo),
            current: RwLock::new(Arc::new(current)),
        })
    }

    pub fn staging(&self) -> MutexGuard<'_, Repository> {
        self.staging.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn current(&self) -> Arc<ServingSnapshot> {
        self.current.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Build a snapshot from staging, persist it if the repository is on
    /// disk, and swap it in.
    pub fn publish(&self, now: DateTime<Utc>) -> Result<Arc<ServingSnapshot>, RepositoryError> {
        let repo = self.staging();
        let snap = Arc::new(repo.publish(now));
        if let Some(dir) = repo.dir() {
            repo.save()?;
            snap.write(dir)?;
        }
        *self.current.write().unwrap_or_else(|p| p.into_inner()) = snap.clone();
        Ok(snap)
    }

    /// Pick up a snapshot another process published into the same
    /// directory. Returns whether the current snapshot changed.
    pub fn reload(&self) -> Result<bool, RepositoryError> {
        let Some(dir) = self.staging().dir().map(Path::to_path_buf) else {
            return Ok(false);
        };
        let mpath = dir.join(MANIFEST);
        if !mpath.exists() {
            return Ok(false);
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| RepositoryError::Corrupt {
            path: mpath.clone(),
            message: e.to_string(),
        })?;
        if manifest.snapshot_id == self.current().id() {
            return Ok(false);
        }
        match ServingSnapshot::load_current(&dir)? {
            Some(snap) => {
                *self.current.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(snap);
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{parse_datestamp, DcElement, DcName};
    use crate::repository::RepositoryConfig;

    fn at(s: &str) -> DateTime<Utc> {
        parse_datestamp(s).unwrap()
    }

    fn coll(r: &mut Repository, id: &str) {
        r.register_collection(id, &[DcElement::new(DcName::Title, id)], false, at("2006-01-01T00:00:00Z"))
            .unwrap();
    }

    #[test]
    fn publish_is_deterministic_and_isolated() {
        let mut r = Repository::in_memory(RepositoryConfig::default());
        coll(&mut r, "c2");
        coll(&mut r, "c1");
        let a = r.publish(at("2006-02-01T00:00:00Z"));
        let b = r.publish(at("2006-03-01T00:00:00Z"));
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.id(), b.id());
        let ids: Vec<_> = a.records().iter().map(|r| r.repo_identifier.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        coll(&mut r, "c3");
        assert_eq!(a.len(), 2);
        assert_ne!(r.publish(at("2006-03-01T00:00:00Z")).id(), a.id());
    }

    #[test]
    fn persisted_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Repository::open(dir.path(), RepositoryConfig::default()).unwrap();
        coll(&mut r, "c1");
        let shared = SharedRepository::new(r).unwrap();
        let snap = shared.publish(at("2006-02-01T00:00:00Z")).unwrap();
        let back = ServingSnapshot::load_current(dir.path()).unwrap().unwrap();
        assert_eq!(back.to_bytes(), snap.to_bytes());
        assert_eq!(back.manifest(), snap.manifest());
        let reopened =
            SharedRepository::new(Repository::open(dir.path(), RepositoryConfig::default()).unwrap()).unwrap();
        assert_eq!(reopened.current().id(), snap.id());
        assert!(reopened.staging().collection("c1").is_some());
    }

    #[test]
    fn readers_see_whole_snapshots() {
        let shared = Arc::new(SharedRepository::new(Repository::in_memory(RepositoryConfig::default())).unwrap());
        let writer = {
            let shared = shared.clone();
            std::thread::spawn(move || {
                for i in 0..50 {
                    coll(&mut shared.staging(), &format!("c{i:03}"));
                    shared.publish(at("2006-02-01T00:00:00Z")).unwrap();
                }
            })
        };
        let mut last = 0;
        while !writer.is_finished() {
            let snap = shared.current();
            // every snapshot is a prefix-closed publish: counts only grow
            assert!(snap.len() >= last);
            assert_eq!(snap.collections().len(), snap.len());
            last = snap.len();
        }
        writer.join().unwrap();
        assert_eq!(shared.current().len(), 50);
    }
}
