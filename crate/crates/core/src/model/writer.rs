//! Serialization of OAI-PMH responses and standalone records.

use chrono::{DateTime, Utc};

use super::datestamp::format_datestamp;
use super::dc::{self, DcContainer};
use super::record::{MetadataRecord, ProtocolError, RecordHeader, ResumptionToken};
use super::response::{IdentifyInfo, MetadataFormat, SetInfo, OAI_NS};
use crate::xml::{escape_attr, escape_text};

/// Builds one OAI-PMH response document.
pub struct ResponseWriter {
    out: String,
    verb_open: Option<String>,
}

impl ResponseWriter {
    /// `request` holds the echoed request arguments; pass an empty slice when
    /// the request was malformed (badVerb / badArgument).
    pub fn new(response_date: DateTime<Utc>, base_url: &str, request: &[(&str, &str)]) -> Self {
        let mut out = String::with_capacity(4096);
        out.push_str(r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        out.push_str(concat!(
            r#"<OAI-PMH xmlns="http://www.openarchives.org/OAI/2.0/""#,
            r#" xmlns:xsi="http://www.w3.org/2001/XMLSchema-instance""#,
            r#" xsi:schemaLocation="http://www.openarchives.org/OAI/2.0/ http://www.openarchives.org/OAI/2.0/OAI-PMH.xsd">"#
        ));
        out.push_str("<responseDate>");
        out.push_str(&format_datestamp(&response_date));
        out.push_str("</responseDate><request");
        for (k, v) in request {
            out.push(' ');
            out.push_str(k);
            out.push_str("=\"");
            out.push_str(&escape_attr(v));
            out.push('"');
        }
        out.push('>');
        out.push_str(&escape_text(base_url));
        out.push_str("</request>");
        Self {
            out,
            verb_open: None,
        }
    }

    pub fn errors(mut self, errors: &[ProtocolError]) -> String {
        for e in errors {
            self.out.push_str("<error code=\"");
            self.out.push_str(e.code.as_str());
            self.out.push_str("\">");
            self.out.push_str(&escape_text(&e.message));
            self.out.push_str("</error>");
        }
        self.finish()
    }

    pub fn open_verb(&mut self, verb: &str) {
        self.out.push('<');
        self.out.push_str(verb);
        self.out.push('>');
        self.verb_open = Some(verb.to_string());
    }

    pub fn identify(mut self, info: &IdentifyInfo) -> String {
        self.open_verb("Identify");
        let o = &mut self.out;
        simple(o, "repositoryName", &info.repository_name);
        simple(o, "baseURL", &info.base_url);
        simple(o, "protocolVersion", &info.protocol_version);
        for email in &info.admin_emails {
            simple(o, "adminEmail", email);
        }
        simple(o, "earliestDatestamp", &format_datestamp(&info.earliest_datestamp));
        simple(o, "deletedRecord", info.deleted_record.as_str());
        simple(o, "granularity", info.granularity.as_str());
        self.finish()
    }

    pub fn metadata_formats(mut self, formats: &[MetadataFormat]) -> String {
        self.open_verb("ListMetadataFormats");
        for f in formats {
            self.out.push_str("<metadataFormat>");
            simple(&mut self.out, "metadataPrefix", &f.prefix);
            simple(&mut self.out, "schema", &f.schema);
            simple(&mut self.out, "metadataNamespace", &f.namespace);
            self.out.push_str("</metadataFormat>");
        }
        self.finish()
    }

    pub fn sets(mut self, sets: &[SetInfo], token: Option<&ResumptionToken>) -> String {
        self.open_verb("ListSets");
        for s in sets {
            self.out.push_str("<set>");
            simple(&mut self.out, "setSpec", &s.spec);
            simple(&mut self.out, "setName", &s.name);
            self.out.push_str("</set>");
        }
        if let Some(t) = token {
            self.token(t);
        }
        self.finish()
    }

    pub fn header(&mut self, header: &RecordHeader) {
        write_header(&mut self.out, header);
    }

    /// A `<record>` whose payload is already serialized. `None` payload means
    /// header only, which is what deleted records get.
    pub fn record(&mut self, header: &RecordHeader, payload: Option<&str>) {
        write_record(&mut self.out, header, payload);
    }

    /// Raw bytes inside the verb container, for fault injection.
    pub fn raw(&mut self, text: &str) {
        self.out.push_str(text);
    }

    pub fn token(&mut self, token: &ResumptionToken) {
        self.out.push_str("<resumptionToken");
        if let Some(exp) = &token.expiration {
            self.out.push_str(" expirationDate=\"");
            self.out.push_str(&format_datestamp(exp));
            self.out.push('"');
        }
        if let Some(size) = token.complete_list_size {
            self.out.push_str(&format!(" completeListSize=\"{size}\""));
        }
        if let Some(cursor) = token.cursor {
            self.out.push_str(&format!(" cursor=\"{cursor}\""));
        }
        if token.token.is_empty() {
            self.out.push_str("/>");
        } else {
            self.out.push('>');
            self.out.push_str(&escape_text(&token.token));
            self.out.push_str("</resumptionToken>");
        }
    }

    pub fn finish(mut self) -> String {
        if let Some(verb) = self.verb_open.take() {
            self.out.push_str("</");
            self.out.push_str(&verb);
            self.out.push('>');
        }
        self.out.push_str("</OAI-PMH>");
        self.out
    }
}

fn simple(out: &mut String, tag: &str, value: &str) {
    out.push('<');
    out.push_str(tag);
    out.push('>');
    out.push_str(&escape_text(value));
    out.push_str("</");
    out.push_str(tag);
    out.push('>');
}

pub fn write_header(out: &mut String, header: &RecordHeader) {
    if header.deleted {
        out.push_str("<header status=\"deleted\">");
    } else {
        out.push_str("<header>");
    }
    simple(out, "identifier", &header.identifier);
    simple(out, "datestamp", &format_datestamp(&header.datestamp));
    for s in &header.set_specs {
        simple(out, "setSpec", s);
    }
    out.push_str("</header>");
}

pub fn write_record(out: &mut String, header: &RecordHeader, payload: Option<&str>) {
    out.push_str("<record>");
    write_header(out, header);
    if let (false, Some(p)) = (header.deleted, payload) {
        out.push_str("<metadata>");
        out.push_str(p);
        out.push_str("</metadata>");
    }
    out.push_str("</record>");
}

/// The metadata payload for a record: re-rendered from the parsed elements for
/// Dublin Core formats, the verbatim bytes otherwise.
pub fn record_payload(record: &MetadataRecord) -> Option<String> {
    if record.header.deleted {
        return None;
    }
    match DcContainer::for_prefix(&record.format_prefix) {
        Some(container) => {
            let mut s = String::new();
            dc::write_dc_payload(&mut s, &record.elements, container);
            Some(s)
        }
        None => Some(String::from_utf8_lossy(&record.raw_xml).into_owned()),
    }
}

/// A standalone `<record>` document in the OAI namespace.
pub fn serialize_record(record: &MetadataRecord) -> Vec<u8> {
    let mut out = String::new();
    out.push_str("<record xmlns=\"");
    out.push_str(OAI_NS);
    out.push_str("\">");
    write_header(&mut out, &record.header);
    if let Some(p) = record_payload(record) {
        out.push_str("<metadata>");
        out.push_str(&p);
        out.push_str("</metadata>");
    }
    out.push_str("</record>");
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::datestamp::parse_datestamp;
    use crate::model::dc::{DcElement, DcName, QUALIFIED_DC, OAI_DC};
    use crate::model::response::parse_record;

    fn header(id: &str) -> RecordHeader {
        RecordHeader::new(id, parse_datestamp("2006-01-25T15:00:00Z").unwrap())
    }

    #[test]
    fn escapes_text() {
        let r = MetadataRecord {
            header: header("oai:x:1"),
            format_prefix: OAI_DC.into(),
            elements: vec![DcElement::new(DcName::Title, "A & B")],
            raw_xml: Vec::new(),
        };
        let s = String::from_utf8(serialize_record(&r)).unwrap();
        assert!(s.contains("A &amp; B"));
    }

    #[test]
    fn deleted_is_header_only() {
        let mut h = header("oai:x:2");
        h.deleted = true;
        let r = MetadataRecord {
            header: h,
            format_prefix: OAI_DC.into(),
            elements: Vec::new(),
            raw_xml: Vec::new(),
        };
        let s = String::from_utf8(serialize_record(&r)).unwrap();
        assert!(s.contains("status=\"deleted\""));
        assert!(!s.contains("<metadata>"));
        assert!(parse_record(s.as_bytes(), OAI_DC).unwrap().is_deleted());
    }

    #[test]
    fn qualified_round_trip() {
        let mut h = header("oai:x:3");
        h.set_specs = vec!["math:algebra".into()];
        let r = MetadataRecord {
            header: h,
            format_prefix: QUALIFIED_DC.into(),
            elements: vec![
                DcElement::new(DcName::Title, "Algebra <basics>"),
                DcElement::new(DcName::Type, "Text").with_scheme("DCMIType"),
                DcElement::new(DcName::Identifier, "http://example.org/a").with_scheme("URI"),
            ],
            raw_xml: Vec::new(),
        };
        let back = parse_record(&serialize_record(&r), QUALIFIED_DC).unwrap();
        assert!(back.same_content(&r));
    }

    #[test]
    fn empty_token_is_self_closing() {
        let mut w = ResponseWriter::new(
            parse_datestamp("2006-01-25T15:00:00Z").unwrap(),
            "http://x/oai",
            &[("verb", "ListRecords")],
        );
        w.open_verb("ListRecords");
        w.token(&ResumptionToken {
            complete_list_size: Some(25),
            cursor: Some(20),
            ..Default::default()
        });
        let s = w.finish();
        assert!(s.contains(r#"<resumptionToken completeListSize="25" cursor="20"/>"#));
        assert!(s.ends_with("</ListRecords></OAI-PMH>"));
    }
}
