//! The search layer.
//!
//! A metadata-centric index holds one document per served record. A
//! resource-centric index holds one document per resource entity: records
//! grouped by shared normalized URLs (phase I) and, when content digests
//! are available, by equal fetched content (phase II). A naive
//! one-document-per-identifier index is kept as a diagnostic.

pub mod fetch;
pub mod url;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest::is_fetchable;
use crate::model::dc::{parse_dc_payload, QUALIFIED_DC};
use crate::model::{DcName, QualifiedProfile};
use crate::repository::formats::NSDL_SEARCH;
use crate::repository::{ServedRecord, ServingSnapshot};
use crate::xml::{parse_document, Element, Node};
pub use fetch::{fetch_all, fetch_content, md5_hex, FetchError, FetchPolicy, FetchedContent, Fetcher, FixtureFetcher, HttpFetcher};
pub use url::{normalize_url, NormalizedUrl, UnparseableUrl};

/// A URL cited by at least this many records is reported as a possible
/// collection splash page.
pub const SPLASH_FANOUT: usize = 3;
/// A title occurrence counts this many times in term frequencies.
const TITLE_WEIGHT: u32 = 3;

pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// What the indexer needs from one served record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordView {
    pub repo_identifier: String,
    pub collection_id: String,
    pub served_datestamp: DateTime<Utc>,
    /// Every dc:identifier value, fetchable or not.
    pub identifiers: Vec<String>,
    /// Normalized fetchable URI identifiers, deduplicated.
    pub urls: Vec<NormalizedUrl>,
    pub fields: BTreeMap<String, String>,
    pub terms: BTreeMap<String, u32>,
}

fn collect_text(e: &Element, out: &mut Vec<String>) {
    for n in &e.children {
        match n {
            Node::Text(t) => out.push(t.clone()),
            Node::Element(c) => collect_text(c, out),
        }
    }
}

impl RecordView {
    /// Built from the search payload; `None` for deletions.
    pub fn from_served(r: &ServedRecord, profile: &QualifiedProfile) -> Option<RecordView> {
        if r.deleted {
            return None;
        }
        let search = r.payload(NSDL_SEARCH)?;
        let root = parse_document(search.as_bytes()).ok()?;
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        let mut identifiers = Vec::new();
        let mut urls: Vec<NormalizedUrl> = Vec::new();
        let mut title = String::new();
        if let Some(qdc) = r.payload(QUALIFIED_DC).and_then(|p| parse_document(p.as_bytes()).ok()) {
            for e in parse_dc_payload(&qdc, profile).unwrap_or_default() {
                match e.name {
                    DcName::Title => {
                        title.push_str(&e.value);
                        title.push(' ');
                    }
                    DcName::Identifier => {
                        if e.scheme.as_deref() == Some("URI") && is_fetchable(&e.value) {
                            if let Ok(u) = normalize_url(&e.value) {
                                if !urls.iter().any(|x| x.canonical == u.canonical) {
                                    urls.push(u);
                                }
                            }
                        }
                        identifiers.push(e.value.clone());
                    }
                    _ => {}
                }
            }
        }
        let mut text = Vec::new();
        collect_text(&root, &mut text);
        let member_of: Vec<String> = root
            .children_named("links")
            .flat_map(|l| l.children_named("memberOf").map(Element::text).collect::<Vec<_>>())
            .collect();
        let mut terms: BTreeMap<String, u32> = BTreeMap::new();
        for t in text.iter().flat_map(|s| tokenize(s)) {
            *terms.entry(t).or_default() += 1;
        }
        for t in tokenize(&title) {
            *terms.entry(t).or_default() += TITLE_WEIGHT - 1;
        }
        fields.insert("title".into(), title.trim_end().to_string());
        fields.insert("text".into(), text.join(" "));
        fields.insert("collection".into(), member_of.join(" "));
        Some(RecordView {
            repo_identifier: r.repo_identifier.clone(),
            collection_id: r.collection_id.clone(),
            served_datestamp: r.served_datestamp,
            identifiers,
            urls,
            fields,
            terms,
        })
    }
}

pub fn record_views(snapshot: &ServingSnapshot) -> Vec<RecordView> {
    let profile = QualifiedProfile::default();
    snapshot
        .records()
        .iter()
        .filter_map(|r| RecordView::from_served(r, &profile))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergedBy {
    UrlOnly,
    ContentHash,
}

/// URLs that were joined because their fetched content had one digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEvidence {
    pub digest: String,
    pub urls: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEntity {
    pub entity_id: String,
    pub member_urls: BTreeSet<String>,
    pub member_records: BTreeSet<String>,
    /// Set when every member URL was fetched and all share one digest.
    pub content_hash: Option<String>,
    pub merged_by: MergedBy,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evidence: Vec<HashEvidence>,
    /// Some member URL is cited by many records, as collection splash pages
    /// are.
    pub splash_suspect: bool,
}

fn entity_id(member_records: &BTreeSet<String>) -> String {
    let first = member_records.iter().next().expect("entities are non-empty");
    format!("e{}", &hex::encode(Sha256::digest(first.as_bytes()))[..16])
}

/// Group records into entities. `digests` maps canonical URLs to content
/// digests; without it only phase I runs.
pub fn build_entities(records: &[RecordView], digests: Option<&BTreeMap<String, [u8; 16]>>) -> Vec<ResourceEntity> {
    let n = records.len();
    let mut uf = UnionFind::new(n);
    let mut by_url: HashMap<&str, usize> = HashMap::new();
    let mut citations: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        for u in &r.urls {
            *citations.entry(&u.canonical).or_default() += 1;
            match by_url.get(u.canonical.as_str()) {
                Some(&j) => {
                    uf.union(i, j);
                }
                None => {
                    by_url.insert(&u.canonical, i);
                }
            }
        }
    }
    let phase_one: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
    if let Some(d) = digests {
        let mut by_digest: HashMap<[u8; 16], usize> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            for u in &r.urls {
                if let Some(h) = d.get(&u.canonical) {
                    match by_digest.get(h) {
                        Some(&j) => {
                            uf.union(i, j);
                        }
                        None => {
                            by_digest.insert(*h, i);
                        }
                    }
                }
            }
        }
    }
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        classes.entry(uf.find(i)).or_default().push(i);
    }
    let mut out: Vec<ResourceEntity> = classes
        .into_values()
        .map(|members| {
            let member_records: BTreeSet<String> =
                members.iter().map(|&i| records[i].repo_identifier.clone()).collect();
            let member_urls: BTreeSet<String> = members
                .iter()
                .flat_map(|&i| records[i].urls.iter().map(|u| u.canonical.clone()))
                .collect();
            let first_classes: BTreeSet<usize> = members.iter().map(|&i| phase_one[i]).collect();
            let merged_by = if first_classes.len() > 1 {
                MergedBy::ContentHash
            } else {
                MergedBy::UrlOnly
            };
            let mut content_hash = None;
            let mut evidence = Vec::new();
            if let Some(d) = digests {
                let known: Vec<(&String, &[u8; 16])> =
                    member_urls.iter().filter_map(|u| d.get(u).map(|h| (u, h))).collect();
                if !member_urls.is_empty()
                    && known.len() == member_urls.len()
                    && known.iter().all(|(_, h)| *h == known[0].1)
                {
                    content_hash = Some(hex::encode(known[0].1));
                }
                if merged_by == MergedBy::ContentHash {
                    let mut groups: BTreeMap<[u8; 16], Vec<String>> = BTreeMap::new();
                    for (u, h) in known {
                        groups.entry(*h).or_default().push(u.clone());
                    }
                    evidence = groups
                        .into_iter()
                        .filter(|(_, urls)| urls.len() > 1)
                        .map(|(h, urls)| HashEvidence {
                            digest: hex::encode(h),
                            urls,
                        })
                        .collect();
                }
            }
            let splash_suspect = member_urls
                .iter()
                .any(|u| citations.get(u.as_str()).copied().unwrap_or(0) >= SPLASH_FANOUT);
            ResourceEntity {
                entity_id: entity_id(&member_records),
                member_urls,
                member_records,
                content_hash,
                merged_by,
                evidence,
                splash_suspect,
            }
        })
        .collect();
    out.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    MetadataCentric,
    ResourceCentric,
    /// One document per dc:identifier value, duplicates and all.
    NaiveIdentifier,
}

impl IndexKind {
    pub fn file_name(self) -> &'static str {
        match self {
            IndexKind::MetadataCentric => "metadata.json",
            IndexKind::ResourceCentric => "resource.json",
            IndexKind::NaiveIdentifier => "naive.json",
        }
    }
}

/// One member record's contribution to a document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocPart {
    pub record: String,
    pub terms: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexDocument {
    pub doc_id: String,
    pub fields: BTreeMap<String, String>,
    pub resource: Option<String>,
    pub parts: Vec<DocPart>,
    /// Canonical URLs of the records behind the document.
    pub urls: Vec<String>,
    pub served_datestamp: DateTime<Utc>,
}

impl IndexDocument {
    fn from_view(doc_id: String, v: &RecordView) -> Self {
        IndexDocument {
            doc_id,
            fields: v.fields.clone(),
            resource: None,
            parts: vec![DocPart {
                record: v.repo_identifier.clone(),
                terms: v.terms.clone(),
            }],
            urls: v.urls.iter().map(|u| u.canonical.clone()).collect(),
            served_datestamp: v.served_datestamp,
        }
    }

    /// Score against `terms`. A document matches when one of its parts
    /// holds every term; merging records into one document therefore never
    /// creates a match that no single record had.
    fn score(&self, terms: &[String]) -> Option<u64> {
        let mut total = 0u64;
        let mut hit = false;
        for p in &self.parts {
            let tfs: Option<Vec<u32>> = terms.iter().map(|t| p.terms.get(t).copied()).collect();
            if let Some(tfs) = tfs {
                hit = true;
                total += tfs.iter().map(|&x| u64::from(x)).sum::<u64>();
            }
        }
        hit.then_some(total)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub score: u64,
    pub records: Vec<String>,
    pub title: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub added: usize,
    pub replaced: usize,
    pub removed: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchIndex {
    pub kind: IndexKind,
    pub snapshot_id: String,
    /// Latest served datestamp reflected in the index.
    pub through: Option<DateTime<Utc>>,
    pub docs: BTreeMap<String, IndexDocument>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<ResourceEntity>,
}

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("index storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index file: {0}")]
    Corrupt(#[from] serde_json::Error),
}

fn latest(snapshot: &ServingSnapshot) -> Option<DateTime<Utc>> {
    snapshot.records().last().map(|r| r.served_datestamp)
}

/// Entity id per record, from phase-I grouping over the documents' URLs.
fn resource_pointers(docs: &BTreeMap<String, IndexDocument>) -> HashMap<String, Option<String>> {
    let views: Vec<RecordView> = docs
        .values()
        .map(|d| RecordView {
            repo_identifier: d.doc_id.clone(),
            collection_id: String::new(),
            served_datestamp: d.served_datestamp,
            identifiers: Vec::new(),
            urls: d
                .urls
                .iter()
                .map(|u| NormalizedUrl {
                    canonical: u.clone(),
                    original: u.clone(),
                })
                .collect(),
            fields: BTreeMap::new(),
            terms: BTreeMap::new(),
        })
        .collect();
    let mut out = HashMap::new();
    for e in build_entities(&views, None) {
        let has_url = !e.member_urls.is_empty();
        for r in e.member_records {
            out.insert(r, has_url.then(|| e.entity_id.clone()));
        }
    }
    out
}

pub fn build_metadata_centric(snapshot: &ServingSnapshot) -> SearchIndex {
    let docs: BTreeMap<String, IndexDocument> = record_views(snapshot)
        .iter()
        .map(|v| (v.repo_identifier.clone(), IndexDocument::from_view(v.repo_identifier.clone(), v)))
        .collect();
    let mut index = SearchIndex {
        kind: IndexKind::MetadataCentric,
        snapshot_id: snapshot.id().to_string(),
        through: latest(snapshot),
        docs,
        entities: Vec::new(),
    };
    index.refresh_pointers();
    index
}

pub fn build_resource_centric(
    snapshot: &ServingSnapshot,
    digests: Option<&BTreeMap<String, [u8; 16]>>,
) -> SearchIndex {
    let views = record_views(snapshot);
    let entities = build_entities(&views, digests);
    let by_id: HashMap<&str, &RecordView> = views.iter().map(|v| (v.repo_identifier.as_str(), v)).collect();
    let docs = entities
        .iter()
        .map(|e| {
            let members: Vec<&RecordView> = e.member_records.iter().map(|r| by_id[r.as_str()]).collect();
            let mut fields: BTreeMap<String, String> = BTreeMap::new();
            for m in &members {
                for (k, v) in &m.fields {
                    let f = fields.entry(k.clone()).or_default();
                    if !f.is_empty() && !v.is_empty() {
                        f.push_str(" | ");
                    }
                    f.push_str(v);
                }
            }
            let doc = IndexDocument {
                doc_id: e.entity_id.clone(),
                fields,
                resource: Some(e.entity_id.clone()),
                parts: members
                    .iter()
                    .map(|m| DocPart {
                        record: m.repo_identifier.clone(),
                        terms: m.terms.clone(),
                    })
                    .collect(),
                urls: e.member_urls.iter().cloned().collect(),
                served_datestamp: members.iter().map(|m| m.served_datestamp).max().expect("non-empty"),
            };
            (e.entity_id.clone(), doc)
        })
        .collect();
    SearchIndex {
        kind: IndexKind::ResourceCentric,
        snapshot_id: snapshot.id().to_string(),
        through: latest(snapshot),
        docs,
        entities,
    }
}

pub fn build_naive_identifier(snapshot: &ServingSnapshot) -> SearchIndex {
    let mut docs = BTreeMap::new();
    for v in record_views(snapshot) {
        if v.identifiers.is_empty() {
            docs.insert(v.repo_identifier.clone(), IndexDocument::from_view(v.repo_identifier.clone(), &v));
        }
        for (i, ident) in v.identifiers.iter().enumerate() {
            let id = format!("{}#{i}", v.repo_identifier);
            let mut d = IndexDocument::from_view(id.clone(), &v);
            d.fields.insert("identifier".into(), ident.clone());
            docs.insert(id, d);
        }
    }
    SearchIndex {
        kind: IndexKind::NaiveIdentifier,
        snapshot_id: snapshot.id().to_string(),
        through: latest(snapshot),
        docs,
        entities: Vec::new(),
    }
}

impl SearchIndex {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    fn refresh_pointers(&mut self) {
        let pointers = resource_pointers(&self.docs);
        for d in self.docs.values_mut() {
            d.resource = pointers.get(&d.doc_id).cloned().flatten();
        }
    }

    /// Conjunctive term search, best first, ties broken by document id.
    pub fn search(&self, query: &str) -> Vec<Hit> {
        let terms: Vec<String> = tokenize(query).collect();
        if terms.is_empty() {
            return Vec::new();
        }
        let mut hits: Vec<Hit> = self
            .docs
            .values()
            .filter_map(|d| {
                d.score(&terms).map(|score| Hit {
                    doc_id: d.doc_id.clone(),
                    score,
                    records: d.parts.iter().map(|p| p.record.clone()).collect(),
                    title: d.fields.get("title").cloned().unwrap_or_default(),
                })
            })
            .collect();
        hits.sort_by(|a, b| b.score.cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
        hits
    }

    /// Bring a metadata-centric index up to `snapshot`, touching only
    /// records served after the index's watermark. Other index kinds are
    /// rebuilt.
    pub fn update(&mut self, snapshot: &ServingSnapshot) -> UpdateStats {
        let mut stats = UpdateStats::default();
        if self.kind != IndexKind::MetadataCentric {
            let rebuilt = match self.kind {
                IndexKind::ResourceCentric => build_resource_centric(snapshot, None),
                _ => build_naive_identifier(snapshot),
            };
            stats.removed = self.docs.keys().filter(|k| !rebuilt.docs.contains_key(*k)).count();
            stats.added = rebuilt.docs.keys().filter(|k| !self.docs.contains_key(*k)).count();
            stats.replaced = rebuilt.docs.len() - stats.added;
            *self = rebuilt;
            return stats;
        }
        let profile = QualifiedProfile::default();
        let fresh = snapshot
            .records()
            .iter()
            .filter(|r| self.through.is_none_or(|t| r.served_datestamp > t));
        for r in fresh {
            match RecordView::from_served(r, &profile) {
                None => {
                    if self.docs.remove(&r.repo_identifier).is_some() {
                        stats.removed += 1;
                    }
                }
                Some(v) => {
                    let doc = IndexDocument::from_view(v.repo_identifier.clone(), &v);
                    if self.docs.insert(v.repo_identifier.clone(), doc).is_some() {
                        stats.replaced += 1;
                    } else {
                        stats.added += 1;
                    }
                }
            }
        }
        self.snapshot_id = snapshot.id().to_string();
        self.through = latest(snapshot).max(self.through);
        self.refresh_pointers();
        stats
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(self.kind.file_name());
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(dir: &Path, kind: IndexKind) -> Result<Option<SearchIndex>, IndexError> {
        let path = dir.join(kind.file_name());
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }
}

/// Entity statistics for a snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupReport {
    pub schema: String,
    pub snapshot_id: String,
    pub records: usize,
    pub identifier_fields: usize,
    pub fetchable_urls: usize,
    pub distinct_urls: usize,
    pub multi_url_records: usize,
    pub records_without_url: usize,
    pub entities: usize,
    pub multi_record_entities: usize,
    pub content_hash_merges: usize,
    pub splash_suspects: usize,
    pub naive_documents: usize,
}

impl DedupReport {
    pub fn build(snapshot: &ServingSnapshot, digests: Option<&BTreeMap<String, [u8; 16]>>) -> DedupReport {
        let views = record_views(snapshot);
        let entities = build_entities(&views, digests);
        let distinct: BTreeSet<&str> = views.iter().flat_map(|v| v.urls.iter().map(|u| u.canonical.as_str())).collect();
        DedupReport {
            schema: "oaiagg.dedup/1".into(),
            snapshot_id: snapshot.id().to_string(),
            records: views.len(),
            identifier_fields: views.iter().map(|v| v.identifiers.len()).sum(),
            fetchable_urls: views.iter().map(|v| v.urls.len()).sum(),
            distinct_urls: distinct.len(),
            multi_url_records: views.iter().filter(|v| v.urls.len() > 1).count(),
            records_without_url: views.iter().filter(|v| v.urls.is_empty()).count(),
            entities: entities.len(),
            multi_record_entities: entities.iter().filter(|e| e.member_records.len() > 1).count(),
            content_hash_merges: entities.iter().filter(|e| e.merged_by == MergedBy::ContentHash).count(),
            splash_suspects: entities.iter().filter(|e| e.splash_suspect).count(),
            naive_documents: views.iter().map(|v| v.identifiers.len().max(1)).sum(),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "snapshot {}\nrecords {}\nidentifier fields {}\nfetchable URLs {} ({} distinct)\nrecords with several URLs {}\nrecords without URL {}\nentities {} ({} with several records, {} merged by content, {} splash suspects)\nnaive identifier documents {}\n",
            self.snapshot_id,
            self.records,
            self.identifier_fields,
            self.fetchable_urls,
            self.distinct_urls,
            self.multi_url_records,
            self.records_without_url,
            self.entities,
            self.multi_record_entities,
            self.content_hash_merges,
            self.splash_suspects,
            self.naive_documents,
        )
    }
}

/// Fetch every distinct URL in the snapshot and return digests for those
/// that succeeded.
pub fn fetch_digests(
    snapshot: &ServingSnapshot,
    fetcher: &dyn Fetcher,
    policy: FetchPolicy,
) -> (BTreeMap<String, [u8; 16]>, BTreeMap<String, FetchError>) {
    let urls: BTreeSet<String> = record_views(snapshot)
        .into_iter()
        .flat_map(|v| v.urls.into_iter().map(|u| u.canonical))
        .collect();
    let urls: Vec<String> = urls.into_iter().collect();
    let mut ok = BTreeMap::new();
    let mut failed = BTreeMap::new();
    for (u, r) in fetch_all(&urls, fetcher, policy) {
        match r {
            Ok(c) => {
                ok.insert(u, c.digest);
            }
            Err(e) => {
                failed.insert(u, e);
            }
        }
    }
    (ok, failed)
}
