//! The metadata repository.
//!
//! Staging storage is three ordered namespaces: parsed input (originals and
//! shredded normalized rows), generated exports, and the serving index
//! ordered by served datestamp. [`Repository::publish`] freezes them into an
//! immutable [`ServingSnapshot`]; nothing written afterwards is visible to
//! that snapshot.

pub mod formats;
pub mod snapshot;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ingest::{validate_normalized, DbInsertDocument, DbInsertError, NormalizedRecord};
use crate::ingest::uri::ScrubbedUri;
use crate::model::{DcElement, DcName, QualifiedProfile};
pub use formats::{dumb_down, ExportBundle, EXPORT_FORMATS};
pub use snapshot::{Manifest, ServedRecord, ServingSnapshot, SharedRepository};

const STAGING_FILE: &str = "staging.json";

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("unknown collection {0}")]
    UnknownCollection(String),
    #[error("collection {0} is already known to the repository")]
    DuplicateCollection(String),
    #[error("malformed dbInsert document: {0}")]
    MalformedDocument(#[from] DbInsertError),
    #[error("unknown identifier {0}")]
    UnknownIdentifier(String),
    #[error("repository storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt repository file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepositoryConfig {
    /// Namespace part of minted identifiers.
    pub domain: String,
    #[serde(with = "seconds")]
    pub postdate_offset: Duration,
}

impl Default for RepositoryConfig {
    fn default() -> Self {
        RepositoryConfig {
            domain: "oaiagg.example.org".into(),
            postdate_offset: Duration::hours(3),
        }
    }
}

mod seconds {
    use chrono::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(d.num_seconds())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::seconds(i64::deserialize(d)?))
    }
}

/// One shredded element-value row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementRow {
    pub position: u32,
    pub name: DcName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualifier: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

pub fn shred(elements: &[DcElement]) -> Vec<ElementRow> {
    elements
        .iter()
        .enumerate()
        .map(|(i, e)| ElementRow {
            position: i as u32,
            name: e.name,
            qualifier: e.qualifier.clone(),
            scheme: e.scheme.clone(),
            value: e.value.clone(),
            language: e.language.clone(),
        })
        .collect()
}

pub fn assemble(rows: &[ElementRow]) -> Vec<DcElement> {
    let mut sorted: Vec<&ElementRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.position);
    sorted
        .into_iter()
        .map(|r| DcElement {
            name: r.name,
            qualifier: r.qualifier.clone(),
            scheme: r.scheme.clone(),
            value: r.value.clone(),
            language: r.language.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalPayload {
    pub format_prefix: String,
    /// The provider's own datestamp.
    pub datestamp: DateTime<Utc>,
    pub raw_xml: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Item,
    Collection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRecord {
    pub repo_identifier: String,
    pub kind: RecordKind,
    pub collection_id: String,
    pub source_identifier: String,
    pub original: Option<OriginalPayload>,
    pub rows: Vec<ElementRow>,
    pub served_datestamp: DateTime<Utc>,
    pub deleted: bool,
    pub native_public: bool,
    /// Profile violations found at ingest; the record is served anyway.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schema_warnings: Vec<String>,
}

impl StoredRecord {
    pub fn elements(&self) -> Vec<DcElement> {
        assemble(&self.rows)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectionInfo {
    pub collection_id: String,
    pub name: String,
    /// The collection-description record.
    pub repo_identifier: String,
    pub native_public: bool,
}

/// Staging state. Each map is one namespace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Namespaces {
    collections: BTreeMap<String, CollectionInfo>,
    parsed: BTreeMap<String, StoredRecord>,
    exports: BTreeMap<String, ExportBundle>,
    serving: BTreeSet<(DateTime<Utc>, String)>,
}

pub struct Repository {
    config: RepositoryConfig,
    profile: QualifiedProfile,
    ns: Namespaces,
    dir: Option<PathBuf>,
}

impl Repository {
    pub fn in_memory(config: RepositoryConfig) -> Self {
        Repository {
            config,
            profile: QualifiedProfile::default(),
            ns: Namespaces::default(),
            dir: None,
        }
    }

    /// Open staging storage under `dir` (created if missing).
    pub fn open(dir: &Path, config: RepositoryConfig) -> Result<Self, RepositoryError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(STAGING_FILE);
        let ns = if path.exists() {
            let bytes = fs::read(&path)?;
            serde_json::from_slice(&bytes).map_err(|e| RepositoryError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?
        } else {
            Namespaces::default()
        };
        Ok(Repository {
            config,
            profile: QualifiedProfile::default(),
            ns,
            dir: Some(dir.to_path_buf()),
        })
    }

    pub fn with_profile(mut self, profile: QualifiedProfile) -> Self {
        self.profile = profile;
        self
    }

    pub fn config(&self) -> &RepositoryConfig {
        &self.config
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Write staging state to disk (no-op in memory).
    pub fn save(&self) -> Result<(), RepositoryError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let tmp = dir.join(format!("{STAGING_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_vec(&self.ns).expect("staging serializes"))?;
        fs::rename(&tmp, dir.join(STAGING_FILE))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ns.parsed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ns.parsed.is_empty()
    }

    pub fn get(&self, repo_identifier: &str) -> Option<&StoredRecord> {
        self.ns.parsed.get(repo_identifier)
    }

    pub fn exports(&self, repo_identifier: &str) -> Option<&ExportBundle> {
        self.ns.exports.get(repo_identifier)
    }

    pub fn records(&self) -> impl Iterator<Item = &StoredRecord> {
        self.ns.parsed.values()
    }

    pub fn collection(&self, id: &str) -> Option<&CollectionInfo> {
        self.ns.collections.get(id)
    }

    pub fn collections(&self) -> impl Iterator<Item = &CollectionInfo> {
        self.ns.collections.values()
    }

    pub fn mint_identifier(&self, collection_id: &str, source_identifier: &str) -> String {
        let digest = Sha256::digest(source_identifier.as_bytes());
        format!(
            "oai:{}:{}/{}",
            self.config.domain,
            collection_id,
            hex::encode(&digest[..8])
        )
    }

    pub fn collection_identifier(&self, collection_id: &str) -> String {
        format!("oai:{}:{}/collection", self.config.domain, collection_id)
    }

    fn served_at(&self, now: DateTime<Utc>) -> DateTime<Utc> {
        now + self.config.postdate_offset
    }

    fn put(&mut self, record: StoredRecord, exports: Option<ExportBundle>) {
        if let Some(old) = self.ns.parsed.get(&record.repo_identifier) {
            self.ns
                .serving
                .remove(&(old.served_datestamp, old.repo_identifier.clone()));
        }
        self.ns
            .serving
            .insert((record.served_datestamp, record.repo_identifier.clone()));
        match exports {
            Some(b) => {
                self.ns.exports.insert(record.repo_identifier.clone(), b);
            }
            None => {
                self.ns.exports.remove(&record.repo_identifier);
            }
        }
        self.ns.parsed.insert(record.repo_identifier.clone(), record);
    }

    /// Make a collection known and store its description record, which
    /// item records link to.
    pub fn register_collection(
        &mut self,
        collection_id: &str,
        description: &[DcElement],
        native_public: bool,
        now: DateTime<Utc>,
    ) -> Result<String, RepositoryError> {
        if self.ns.collections.contains_key(collection_id) {
            return Err(RepositoryError::DuplicateCollection(collection_id.to_string()));
        }
        let repo_identifier = self.collection_identifier(collection_id);
        let name = description
            .iter()
            .find(|e| e.name == DcName::Title)
            .map_or_else(|| collection_id.to_string(), |e| e.value.clone());
        self.ns.collections.insert(
            collection_id.to_string(),
            CollectionInfo {
                collection_id: collection_id.to_string(),
                name,
                repo_identifier: repo_identifier.clone(),
                native_public,
            },
        );
        let record = StoredRecord {
            repo_identifier: repo_identifier.clone(),
            kind: RecordKind::Collection,
            collection_id: collection_id.to_string(),
            source_identifier: repo_identifier.clone(),
            original: None,
            rows: shred(description),
            served_datestamp: self.served_at(now),
            deleted: false,
            native_public,
            schema_warnings: Vec::new(),
        };
        let exports = ExportBundle::build(&formats::ExportSource {
            elements: description,
            member_of: None,
            native: None,
            native_public,
        });
        self.put(record, Some(exports));
        Ok(repo_identifier)
    }

    /// Store every entry of a dbInsert document. Re-inserting a source
    /// record keeps its identifier and refreshes its served datestamp.
    pub fn insert(&mut self, doc: &DbInsertDocument, now: DateTime<Utc>) -> Result<Vec<String>, RepositoryError> {
        let info = self
            .ns
            .collections
            .get(&doc.collection_id)
            .cloned()
            .ok_or_else(|| RepositoryError::UnknownCollection(doc.collection_id.clone()))?;
        let served = self.served_at(now);
        let mut ids = Vec::with_capacity(doc.entries.len());
        for entry in &doc.entries {
            let o = &entry.original;
            let repo_identifier = self.mint_identifier(&info.collection_id, o.identifier());
            let raw = String::from_utf8_lossy(&o.raw_xml).into_owned();
            let exports = ExportBundle::build(&formats::ExportSource {
                elements: &entry.normalized.elements,
                member_of: Some(&info.repo_identifier),
                native: Some((&o.format_prefix, &raw)),
                native_public: info.native_public,
            });
            let record = StoredRecord {
                repo_identifier: repo_identifier.clone(),
                kind: RecordKind::Item,
                collection_id: info.collection_id.clone(),
                source_identifier: o.identifier().to_string(),
                original: Some(OriginalPayload {
                    format_prefix: o.format_prefix.clone(),
                    datestamp: o.header.datestamp,
                    raw_xml: raw,
                }),
                rows: shred(&entry.normalized.elements),
                served_datestamp: served,
                deleted: false,
                native_public: info.native_public,
                schema_warnings: schema_warnings(&entry.normalized, &self.profile),
            };
            self.put(record, Some(exports));
            ids.push(repo_identifier);
        }
        Ok(ids)
    }

    /// Parse and insert a serialized dbInsert document.
    pub fn insert_xml(&mut self, xml: &[u8], now: DateTime<Utc>) -> Result<Vec<String>, RepositoryError> {
        let doc = crate::ingest::parse_db_insert(xml)?;
        self.insert(&doc, now)
    }

    /// Turn a record into a persistent deletion: header kept, exports
    /// dropped, served datestamp refreshed.
    pub fn mark_deleted(&mut self, repo_identifier: &str, now: DateTime<Utc>) -> Result<(), RepositoryError> {
        let mut record = self
            .ns
            .parsed
            .get(repo_identifier)
            .cloned()
            .ok_or_else(|| RepositoryError::UnknownIdentifier(repo_identifier.to_string()))?;
        record.deleted = true;
        record.served_datestamp = self.served_at(now);
        record.rows.clear();
        record.original = None;
        record.schema_warnings.clear();
        self.put(record, None);
        Ok(())
    }

    /// Deletion by provider identifier. Unknown records are ignored (a
    /// provider may report deletions of records never harvested); returns
    /// whether anything changed.
    pub fn delete_source(
        &mut self,
        collection_id: &str,
        source_identifier: &str,
        now: DateTime<Utc>,
    ) -> Result<bool, RepositoryError> {
        if !self.ns.collections.contains_key(collection_id) {
            return Err(RepositoryError::UnknownCollection(collection_id.to_string()));
        }
        let id = self.mint_identifier(collection_id, source_identifier);
        match self.ns.parsed.get(&id) {
            Some(r) if !r.deleted => {
                self.mark_deleted(&id, now)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    /// Live item records whose rows satisfy `predicate`, with the matching
    /// rows.
    pub fn query_elements<'a>(
        &'a self,
        predicate: impl Fn(&ElementRow) -> bool,
    ) -> Vec<(&'a StoredRecord, Vec<&'a ElementRow>)> {
        self.ns
            .parsed
            .values()
            .filter(|r| !r.deleted && r.kind == RecordKind::Item)
            .filter_map(|r| {
                let rows: Vec<&ElementRow> = r.rows.iter().filter(|row| predicate(row)).collect();
                (!rows.is_empty()).then_some((r, rows))
            })
            .collect()
    }

    /// Records carrying at least `k` fetchable URI identifiers.
    pub fn count_with_fetchable_uris(&self, k: usize) -> usize {
        if k == 0 {
            return self
                .ns
                .parsed
                .values()
                .filter(|r| !r.deleted && r.kind == RecordKind::Item)
                .count();
        }
        self.query_elements(is_uri_identifier)
            .into_iter()
            .filter(|(_, rows)| rows.len() >= k)
            .count()
    }

    /// Every URI-like identifier value, ordered by repository identifier.
    pub fn uri_identifiers(&self) -> Vec<String> {
        self.query_elements(is_uri_identifier)
            .into_iter()
            .flat_map(|(_, rows)| rows.into_iter().map(|r| r.value.clone()))
            .collect()
    }

    /// Freeze the current staging state.
    pub fn publish(&self, now: DateTime<Utc>) -> ServingSnapshot {
        let records = self
            .ns
            .serving
            .iter()
            .map(|(_, id)| {
                let r = &self.ns.parsed[id];
                ServedRecord::from_stored(r, self.ns.exports.get(id))
            })
            .collect();
        let collections = self.ns.collections.values().cloned().collect();
        ServingSnapshot::new(records, collections, now)
    }
}

pub fn is_uri_identifier(row: &ElementRow) -> bool {
    row.name == DcName::Identifier
        && row.scheme.as_deref() == Some("URI")
        && matches!(crate::ingest::scrub_uri(&row.value), ScrubbedUri::Fetchable(ref u) if *u == row.value)
}

fn schema_warnings(record: &NormalizedRecord, profile: &QualifiedProfile) -> Vec<String> {
    match validate_normalized(record, profile) {
        Ok(()) => Vec::new(),
        Err(v) => v.into_iter().map(|v| v.message).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_db_insert, SafeTransform};
    use crate::model::{parse_datestamp, MetadataRecord, RecordHeader};

    fn at(s: &str) -> DateTime<Utc> {
        parse_datestamp(s).unwrap()
    }

    fn doc(collection: &str, ids: &[(&str, &[&str])]) -> DbInsertDocument {
        let t = SafeTransform::default();
        let pairs = ids
            .iter()
            .map(|(id, urls)| {
                let mut elements = vec![DcElement::new(DcName::Title, format!("Title {id}"))];
                for u in *urls {
                    elements.push(DcElement::new(DcName::Identifier, *u));
                }
                let mut raw = String::new();
                crate::model::dc::write_dc_payload(&mut raw, &elements, crate::model::DcContainer::Simple);
                let o = MetadataRecord {
                    header: RecordHeader::new(*id, at("2005-01-01T00:00:00Z")),
                    format_prefix: "oai_dc".into(),
                    elements,
                    raw_xml: raw.into_bytes(),
                };
                let n = t.apply(&o);
                (o, n)
            })
            .collect();
        build_db_insert(pairs, collection, "a1").unwrap()
    }

    fn repo() -> Repository {
        let mut r = Repository::in_memory(RepositoryConfig::default());
        r.register_collection("c1", &[DcElement::new(DcName::Title, "Coll")], false, at("2006-01-01T00:00:00Z"))
            .unwrap();
        r
    }

    #[test]
    fn postdates_by_offset() {
        let mut r = repo();
        let ids = r.insert(&doc("c1", &[("oai:p:1", &[])]), at("2006-01-25T12:00:00Z")).unwrap();
        assert_eq!(r.get(&ids[0]).unwrap().served_datestamp, at("2006-01-25T15:00:00Z"));
        let again = r.insert(&doc("c1", &[("oai:p:1", &[])]), at("2006-01-26T12:00:00Z")).unwrap();
        assert_eq!(again, ids);
        assert_eq!(r.get(&ids[0]).unwrap().served_datestamp, at("2006-01-26T15:00:00Z"));
        assert!(matches!(
            r.insert(&doc("nope", &[("oai:p:1", &[])]), at("2006-01-26T12:00:00Z")),
            Err(RepositoryError::UnknownCollection(_))
        ));
    }

    #[test]
    fn delete_and_resurrect() {
        let mut r = repo();
        let ids = r.insert(&doc("c1", &[("oai:p:1", &[])]), at("2006-01-25T12:00:00Z")).unwrap();
        r.mark_deleted(&ids[0], at("2006-01-25T13:00:00Z")).unwrap();
        let rec = r.get(&ids[0]).unwrap();
        assert!(rec.deleted);
        assert!(r.exports(&ids[0]).is_none());
        r.insert(&doc("c1", &[("oai:p:1", &[])]), at("2006-01-25T14:00:00Z")).unwrap();
        let rec = r.get(&ids[0]).unwrap();
        assert!(!rec.deleted);
        assert_eq!(rec.served_datestamp, at("2006-01-25T17:00:00Z"));
        assert!(matches!(
            r.mark_deleted("oai:x:nope", at("2006-01-25T14:00:00Z")),
            Err(RepositoryError::UnknownIdentifier(_))
        ));
    }

    #[test]
    fn shred_round_trip_and_census() {
        let mut r = repo();
        let d = doc(
            "c1",
            &[
                ("oai:p:1", &["http://a.org/1", "http://a.org/1b"]),
                ("oai:p:2", &["http://a.org/2"]),
                ("oai:p:3", &["http://a.org/3", "ftp://a.org/3", "doi:10/3"]),
            ],
        );
        let ids = r.insert(&d, at("2006-01-25T12:00:00Z")).unwrap();
        for (id, e) in ids.iter().zip(&d.entries) {
            assert_eq!(r.get(id).unwrap().elements(), e.normalized.elements);
        }
        assert_eq!(r.count_with_fetchable_uris(2), 2);
        assert_eq!(r.count_with_fetchable_uris(3), 0);
        let mut uris = r.uri_identifiers();
        uris.sort();
        assert_eq!(
            uris,
            vec!["ftp://a.org/3", "http://a.org/1", "http://a.org/1b", "http://a.org/2", "http://a.org/3"]
        );
        assert_eq!(Repository::in_memory(RepositoryConfig::default()).count_with_fetchable_uris(1), 0);
    }

    #[test]
    fn staging_persists() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = Repository::open(dir.path(), RepositoryConfig::default()).unwrap();
        r.register_collection("c1", &[DcElement::new(DcName::Title, "Coll")], true, at("2006-01-01T00:00:00Z"))
            .unwrap();
        r.insert(&doc("c1", &[("oai:p:1", &[])]), at("2006-01-25T12:00:00Z")).unwrap();
        r.save().unwrap();
        let back = Repository::open(dir.path(), RepositoryConfig::default()).unwrap();
        assert_eq!(back.ns, r.ns);
    }
}
