//! The dbInsert staging document.
//!
//! A ListRecords-like list of entries, each pairing the harvested record
//! (header plus the payload bytes exactly as received) with its normalized
//! qualified-DC form and the rules that produced it:
//!
//! ```text
//! <dbInsert xmlns="urn:oaiagg:dbinsert:v1" collection_id=".." attempt_id=".." count="N">
//!   <entry identifier="..">
//!     <original metadataPrefix="oai_dc"><record xmlns="OAI ns">header, metadata</record></original>
//!     <normalized><transforms><rule>whitespace</rule>..</transforms><qdc:qualifieddc>..</qdc:qualifieddc></normalized>
//!   </entry>
//! </dbInsert>
//! ```
//!
//! The reader walks entries one at a time, so a document never has to be
//! held as a tree.

use std::io::Write;

use quick_xml::events::Event;
use quick_xml::name::ResolveResult;
use quick_xml::NsReader;
use thiserror::Error;

use super::transform::{NormalizedRecord, Rule};
use crate::model::dc::{self, DcContainer};
use crate::model::response::{parse_record_element, OAI_NS};
use crate::model::writer::write_header;
use crate::model::{MetadataRecord, QualifiedProfile, ResponseError};
use crate::xml::{self, escape_attr, Element, TreeBuilder, XmlError};

pub const DBINSERT_NS: &str = "urn:oaiagg:dbinsert:v1";

#[derive(Debug, Error)]
pub enum DbInsertError {
    #[error("entry {index}: original {original} paired with normalized {normalized}")]
    IdentifierMismatch {
        index: usize,
        original: String,
        normalized: String,
    },
    #[error("a dbInsert document needs at least one entry")]
    Empty,
    #[error("entry {index}: {identifier} is a deletion and has nothing to normalize")]
    DeletedOriginal { index: usize, identifier: String },
    #[error("malformed dbInsert document: {0}")]
    Malformed(String),
    #[error(transparent)]
    Xml(#[from] XmlError),
    #[error("entry {index}: {error}")]
    Record { index: usize, error: ResponseError },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbInsertEntry {
    pub original: MetadataRecord,
    pub normalized: NormalizedRecord,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbInsertDocument {
    pub collection_id: String,
    pub attempt_id: String,
    pub entries: Vec<DbInsertEntry>,
}

/// Pair originals with their normalized forms, in harvest order.
pub fn build_db_insert(
    pairs: Vec<(MetadataRecord, NormalizedRecord)>,
    collection_id: &str,
    attempt_id: &str,
) -> Result<DbInsertDocument, DbInsertError> {
    if pairs.is_empty() {
        return Err(DbInsertError::Empty);
    }
    let mut entries = Vec::with_capacity(pairs.len());
    for (index, (original, normalized)) in pairs.into_iter().enumerate() {
        if original.header.identifier != normalized.source_identifier {
            return Err(DbInsertError::IdentifierMismatch {
                index,
                original: original.header.identifier,
                normalized: normalized.source_identifier,
            });
        }
        if original.header.deleted {
            return Err(DbInsertError::DeletedOriginal {
                index,
                identifier: original.header.identifier,
            });
        }
        entries.push(DbInsertEntry {
            original,
            normalized,
        });
    }
    Ok(DbInsertDocument {
        collection_id: collection_id.to_string(),
        attempt_id: attempt_id.to_string(),
        entries,
    })
}

impl DbInsertDocument {
    pub fn write_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(
            out,
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<dbInsert xmlns=\"{DBINSERT_NS}\" collection_id=\"{}\" attempt_id=\"{}\" count=\"{}\">\n",
            escape_attr(&self.collection_id),
            escape_attr(&self.attempt_id),
            self.entries.len()
        )?;
        let mut buf = String::new();
        for entry in &self.entries {
            buf.clear();
            write_entry(&mut buf, entry);
            out.write_all(buf.as_bytes())?;
        }
        out.write_all(b"</dbInsert>\n")
    }

    pub fn to_xml(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn write_entry(out: &mut String, entry: &DbInsertEntry) {
    let o = &entry.original;
    out.push_str("<entry identifier=\"");
    out.push_str(&escape_attr(&o.header.identifier));
    out.push_str("\">\n<original metadataPrefix=\"");
    out.push_str(&escape_attr(&o.format_prefix));
    out.push_str("\">");
    // prefixes a provider may have bound on its response root
    out.push_str("<record xmlns=\"");
    out.push_str(OAI_NS);
    out.push_str(concat!(
        "\" xmlns:oai_dc=\"http://www.openarchives.org/OAI/2.0/oai_dc/\"",
        " xmlns:dc=\"http://purl.org/dc/elements/1.1/\"",
        " xmlns:dcterms=\"http://purl.org/dc/terms/\"",
        " xmlns:xsi=\"http://www.w3.org/2001/XMLSchema-instance\">"
    ));
    write_header(out, &o.header);
    out.push_str("<metadata>");
    out.push_str(&String::from_utf8_lossy(&o.raw_xml));
    out.push_str("</metadata></record></original>\n<normalized><transforms>");
    for rule in &entry.normalized.transform_log {
        out.push_str("<rule>");
        out.push_str(rule.as_str());
        out.push_str("</rule>");
    }
    out.push_str("</transforms>");
    dc::write_dc_payload(out, &entry.normalized.elements, DcContainer::Qualified);
    out.push_str("</normalized>\n</entry>\n");
}

/// Streaming reader over a dbInsert document.
pub struct DbInsertReader<'a> {
    src: &'a [u8],
    reader: NsReader<&'a [u8]>,
    pub collection_id: String,
    pub attempt_id: String,
    /// Entry count declared on the root, if any.
    pub declared_count: Option<usize>,
    profile: QualifiedProfile,
    index: usize,
    done: bool,
}

impl<'a> DbInsertReader<'a> {
    pub fn new(src: &'a [u8]) -> Result<Self, DbInsertError> {
        Self::with_profile(src, QualifiedProfile::default())
    }

    pub fn with_profile(src: &'a [u8], profile: QualifiedProfile) -> Result<Self, DbInsertError> {
        let text = xml::check_text_bytes(src)?;
        let mut reader = NsReader::from_reader(text.as_bytes());
        reader.config_mut().trim_text(false);
        reader.config_mut().check_end_names = true;
        let mut buf = Vec::new();
        loop {
            let (ns, event) = reader
                .read_resolved_event_into(&mut buf)
                .map_err(|e| DbInsertError::Malformed(e.to_string()))?;
            match event {
                Event::Start(start) => {
                    let bound = matches!(ns, ResolveResult::Bound(n) if n.as_ref() == DBINSERT_NS.as_bytes());
                    if start.local_name().as_ref() != b"dbInsert" || !bound {
                        return Err(DbInsertError::Malformed(format!(
                            "root element is <{}>, expected dbInsert in {DBINSERT_NS}",
                            String::from_utf8_lossy(start.name().as_ref())
                        )));
                    }
                    let mut collection_id = None;
                    let mut attempt_id = None;
                    let mut declared_count = None;
                    for a in start.attributes() {
                        let a = a.map_err(|e| DbInsertError::Malformed(e.to_string()))?;
                        let v = a
                            .unescape_value()
                            .map_err(|e| DbInsertError::Malformed(e.to_string()))?
                            .into_owned();
                        match a.key.as_ref() {
                            b"collection_id" => collection_id = Some(v),
                            b"attempt_id" => attempt_id = Some(v),
                            b"count" => declared_count = v.parse().ok(),
                            _ => {}
                        }
                    }
                    let missing = |n: &str| DbInsertError::Malformed(format!("root lacks {n}"));
                    return Ok(DbInsertReader {
                        src,
                        reader,
                        collection_id: collection_id.ok_or_else(|| missing("collection_id"))?,
                        attempt_id: attempt_id.ok_or_else(|| missing("attempt_id"))?,
                        declared_count,
                        profile,
                        index: 0,
                        done: false,
                    });
                }
                Event::Eof => return Err(DbInsertError::Malformed("no root element".into())),
                Event::Empty(_) => return Err(DbInsertError::Empty),
                _ => {}
            }
            buf.clear();
        }
    }

    fn next_entry(&mut self) -> Result<Option<DbInsertEntry>, DbInsertError> {
        let mut builder = TreeBuilder::default();
        loop {
            let before = self.reader.buffer_position() as usize;
            let (ns, event) = self
                .reader
                .read_resolved_event()
                .map(|(r, e)| (resolved(&r), e.into_owned()))
                .map_err(|e| DbInsertError::Malformed(e.to_string()))?;
            let after = self.reader.buffer_position() as usize;
            if builder.depth() == 0 {
                match event {
                    Event::Start(ref s) if s.local_name().as_ref() == b"entry" => {
                        builder.open(&self.reader, s, ns, before, after, false)?;
                    }
                    Event::End(_) | Event::Eof => return Ok(None),
                    Event::Text(ref t) if t.iter().all(u8::is_ascii_whitespace) => {}
                    Event::Comment(_) => {}
                    other => {
                        return Err(DbInsertError::Malformed(format!(
                            "unexpected {other:?} between entries"
                        )))
                    }
                }
                continue;
            }
            if let Some(entry) = builder.feed(&self.reader, event, ns, before, after)? {
                return self.convert(&entry).map(Some);
            }
        }
    }

    fn convert(&self, entry: &Element) -> Result<DbInsertEntry, DbInsertError> {
        let index = self.index;
        let malformed = |m: &str| DbInsertError::Malformed(format!("entry {index}: {m}"));
        let original_el = entry.child("original").ok_or_else(|| malformed("no <original>"))?;
        let prefix = original_el
            .attr("metadataPrefix")
            .ok_or_else(|| malformed("<original> lacks metadataPrefix"))?;
        let record_el = original_el.child("record").ok_or_else(|| malformed("no <record> in <original>"))?;
        let original = parse_record_element(record_el, self.src, prefix, &self.profile)
            .map_err(|error| DbInsertError::Record { index, error })?;
        let normalized_el = entry.child("normalized").ok_or_else(|| malformed("no <normalized>"))?;
        let mut transform_log = Vec::new();
        if let Some(t) = normalized_el.child("transforms") {
            for r in t.children_named("rule") {
                let name = r.text();
                transform_log.push(
                    Rule::parse(name.trim()).ok_or_else(|| malformed(&format!("unknown rule {name}")))?,
                );
            }
        }
        let payload = normalized_el
            .child("qualifieddc")
            .ok_or_else(|| malformed("no qualified-DC payload in <normalized>"))?;
        let elements = dc::parse_dc_payload(payload, &self.profile).map_err(|e| malformed(&e.to_string()))?;
        if let Some(id) = entry.attr("identifier") {
            if id != original.header.identifier {
                return Err(DbInsertError::IdentifierMismatch {
                    index,
                    original: original.header.identifier.clone(),
                    normalized: id.to_string(),
                });
            }
        }
        Ok(DbInsertEntry {
            normalized: NormalizedRecord {
                source_identifier: original.header.identifier.clone(),
                elements,
                transform_log,
            },
            original,
        })
    }
}

fn resolved(r: &ResolveResult<'_>) -> Option<String> {
    match r {
        ResolveResult::Bound(ns) => Some(String::from_utf8_lossy(ns.as_ref()).into_owned()),
        _ => None,
    }
}

impl Iterator for DbInsertReader<'_> {
    type Item = Result<DbInsertEntry, DbInsertError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_entry() {
            Ok(Some(e)) => {
                self.index += 1;
                Some(Ok(e))
            }
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

pub fn parse_db_insert(src: &[u8]) -> Result<DbInsertDocument, DbInsertError> {
    let mut reader = DbInsertReader::new(src)?;
    let entries = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    if entries.is_empty() {
        return Err(DbInsertError::Empty);
    }
    if let Some(n) = reader.declared_count {
        if n != entries.len() {
            return Err(DbInsertError::Malformed(format!(
                "root declares {n} entries, found {}",
                entries.len()
            )));
        }
    }
    Ok(DbInsertDocument {
        collection_id: reader.collection_id,
        attempt_id: reader.attempt_id,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SafeTransform;
    use crate::model::{parse_datestamp, DcElement, DcName, RecordHeader};

    fn original(id: &str, title: &str) -> MetadataRecord {
        let elements = vec![
            DcElement::new(DcName::Title, title),
            DcElement::new(DcName::Identifier, "http://example.org/a b"),
        ];
        let mut raw = String::new();
        dc::write_dc_payload(&mut raw, &elements, DcContainer::Simple);
        MetadataRecord {
            header: RecordHeader::new(id, parse_datestamp("2005-08-01T00:00:00Z").unwrap()),
            format_prefix: "oai_dc".into(),
            elements,
            raw_xml: raw.replace("<dc:title>", "<dc:title >").into_bytes(),
        }
    }

    fn pair(id: &str, title: &str) -> (MetadataRecord, NormalizedRecord) {
        let o = original(id, title);
        let n = SafeTransform::default().apply(&o);
        (o, n)
    }

    #[test]
    fn round_trip_keeps_originals_byte_exact() {
        let doc = build_db_insert(vec![pair("oai:x:1", "  A  & B "), pair("oai:x:2", "C")], "c1", "c1-000001").unwrap();
        let xml = doc.to_xml();
        let back = parse_db_insert(&xml).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.entries[0].original.raw_xml, doc.entries[0].original.raw_xml);
        assert!(back.entries[0].normalized.transform_log.contains(&Rule::Whitespace));
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        let (o, _) = pair("oai:x:1", "A");
        let (_, n) = pair("oai:x:2", "B");
        assert!(matches!(
            build_db_insert(vec![(o, n)], "c1", "a"),
            Err(DbInsertError::IdentifierMismatch { index: 0, .. })
        ));
        assert!(matches!(build_db_insert(vec![], "c1", "a"), Err(DbInsertError::Empty)));
    }

    #[test]
    fn wrong_root_is_malformed() {
        assert!(matches!(
            DbInsertReader::new(b"<OAI-PMH/>"),
            Err(DbInsertError::Malformed(_)) | Err(DbInsertError::Empty)
        ));
        assert!(matches!(
            DbInsertReader::new(b"<dbInsert collection_id=\"c\" attempt_id=\"a\"></dbInsert>"),
            Err(DbInsertError::Malformed(_))
        ));
    }
}
