//! Parsing of OAI-PMH response documents.
//!
//! Input is treated as hostile: the bytes go through strict UTF-8 and
//! well-formedness checks first, then the response structure is checked
//! element by element. Record payloads are sliced out of the source bytes
//! untouched.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::datestamp::{self, DatestampError};
use super::dc::{self, DcContainer, QualifiedProfile};
use super::record::{
    DeletedPolicy, Granularity, MetadataRecord, ProtocolError, ProtocolErrorCode, RecordHeader,
    ResumptionToken,
};
use crate::xml::{self, Element, XmlError};

pub const OAI_NS: &str = "http://www.openarchives.org/OAI/2.0/";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error("not well-formed: {0}")]
    WellFormedness(#[from] XmlError),
    #[error("provider error {0}")]
    Protocol(ProtocolError),
    #[error("schema violation{}: {message}", identifier.as_ref().map(|i| format!(" in {i}")).unwrap_or_default())]
    Schema {
        message: String,
        identifier: Option<String>,
    },
    #[error("required element <{element}> missing in {context}")]
    MissingElement { element: String, context: String },
    #[error("bad datestamp '{text}' in {context}: {error}")]
    Datestamp {
        context: String,
        text: String,
        error: DatestampError,
    },
}

impl ResponseError {
    fn schema(message: impl Into<String>, identifier: Option<&str>) -> Self {
        ResponseError::Schema {
            message: message.into(),
            identifier: identifier.map(str::to_string),
        }
    }

    fn missing(element: &str, context: &str) -> Self {
        ResponseError::MissingElement {
            element: element.to_string(),
            context: context.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifyInfo {
    pub repository_name: String,
    pub base_url: String,
    pub protocol_version: String,
    pub admin_emails: Vec<String>,
    pub earliest_datestamp: DateTime<Utc>,
    pub deleted_record: DeletedPolicy,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataFormat {
    pub prefix: String,
    pub schema: String,
    pub namespace: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetInfo {
    pub spec: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResponseBody {
    Identify(IdentifyInfo),
    ListMetadataFormats(Vec<MetadataFormat>),
    ListSets {
        sets: Vec<SetInfo>,
        token: Option<ResumptionToken>,
    },
    GetRecord(MetadataRecord),
    ListIdentifiers {
        headers: Vec<RecordHeader>,
        token: Option<ResumptionToken>,
    },
    ListRecords {
        records: Vec<MetadataRecord>,
        token: Option<ResumptionToken>,
    },
    Errors(Vec<ProtocolError>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OaiResponse {
    pub response_date: DateTime<Utc>,
    pub request_verb: Option<String>,
    pub body: ResponseBody,
}

impl OaiResponse {
    pub fn errors(&self) -> &[ProtocolError] {
        match &self.body {
            ResponseBody::Errors(errors) => errors,
            _ => &[],
        }
    }
}

/// Parse any response. Protocol error elements come back as
/// [`ResponseBody::Errors`], not as `Err`.
pub fn parse_response(
    xml: &[u8],
    format_prefix: &str,
    profile: &QualifiedProfile,
) -> Result<OaiResponse, ResponseError> {
    let root = xml::parse_document(xml)?;
    if root.local_name() != "OAI-PMH" || root.ns.as_deref().is_some_and(|ns| ns != OAI_NS) {
        return Err(ResponseError::schema(
            format!("root element is <{}>, expected <OAI-PMH>", root.name),
            None,
        ));
    }
    let date_el = root
        .child("responseDate")
        .ok_or_else(|| ResponseError::missing("responseDate", "OAI-PMH"))?;
    let date_text = date_el.text();
    let response_date =
        datestamp::parse_datestamp(date_text.trim()).map_err(|error| ResponseError::Datestamp {
            context: "responseDate".into(),
            text: date_text.clone(),
            error,
        })?;
    let request = root
        .child("request")
        .ok_or_else(|| ResponseError::missing("request", "OAI-PMH"))?;
    let request_verb = request.attr("verb").map(str::to_string);

    let errors: Vec<&Element> = root.children_named("error").collect();
    if !errors.is_empty() {
        let mut out = Vec::new();
        for e in errors {
            let code_text = e
                .attr("code")
                .ok_or_else(|| ResponseError::schema("error element without code", None))?;
            let code = code_text
                .parse::<ProtocolErrorCode>()
                .map_err(|m| ResponseError::schema(m, None))?;
            out.push(ProtocolError::new(code, e.text().trim()));
        }
        return Ok(OaiResponse {
            response_date,
            request_verb,
            body: ResponseBody::Errors(out),
        });
    }

    let verbs = [
        "Identify",
        "ListMetadataFormats",
        "ListSets",
        "GetRecord",
        "ListIdentifiers",
        "ListRecords",
    ];
    let mut found = root
        .elements()
        .filter(|e| verbs.contains(&e.local_name()));
    let verb_el = found
        .next()
        .ok_or_else(|| ResponseError::missing("verb container", "OAI-PMH"))?;
    if found.next().is_some() {
        return Err(ResponseError::schema("more than one verb container", None));
    }
    let body = match verb_el.local_name() {
        "Identify" => ResponseBody::Identify(parse_identify(verb_el)?),
        "ListMetadataFormats" => ResponseBody::ListMetadataFormats(parse_formats(verb_el)?),
        "ListSets" => {
            let mut sets = Vec::new();
            for s in verb_el.children_named("set") {
                let spec = required_text(s, "setSpec", "set")?;
                let name = required_text(s, "setName", "set")?;
                sets.push(SetInfo { spec, name });
            }
            ResponseBody::ListSets {
                sets,
                token: parse_token(verb_el)?,
            }
        }
        "GetRecord" => {
            let mut records = verb_el.children_named("record");
            let rec = records
                .next()
                .ok_or_else(|| ResponseError::missing("record", "GetRecord"))?;
            if records.next().is_some() {
                return Err(ResponseError::schema("GetRecord with several records", None));
            }
            ResponseBody::GetRecord(parse_record_element(rec, xml, format_prefix, profile)?)
        }
        "ListIdentifiers" => {
            let mut headers = Vec::new();
            for h in verb_el.children_named("header") {
                headers.push(parse_header(h)?);
            }
            ResponseBody::ListIdentifiers {
                headers,
                token: parse_token(verb_el)?,
            }
        }
        "ListRecords" => {
            let mut records = Vec::new();
            for r in verb_el.children_named("record") {
                records.push(parse_record_element(r, xml, format_prefix, profile)?);
            }
            ResponseBody::ListRecords {
                records,
                token: parse_token(verb_el)?,
            }
        }
        _ => unreachable!("filtered above"),
    };
    Ok(OaiResponse {
        response_date,
        request_verb,
        body,
    })
}

/// Parse a ListRecords page into its records and continuation token.
///
/// `noRecordsMatch` is not an error here: it yields an empty page.
pub fn parse_list_response(
    xml: &[u8],
    format_prefix: &str,
) -> Result<(Vec<MetadataRecord>, Option<ResumptionToken>), ResponseError> {
    parse_list_response_with(xml, format_prefix, &QualifiedProfile::default())
}

pub fn parse_list_response_with(
    xml: &[u8],
    format_prefix: &str,
    profile: &QualifiedProfile,
) -> Result<(Vec<MetadataRecord>, Option<ResumptionToken>), ResponseError> {
    let response = parse_response(xml, format_prefix, profile)?;
    match response.body {
        ResponseBody::ListRecords { records, token } => Ok((records, token)),
        ResponseBody::Errors(errors) => {
            if errors
                .iter()
                .all(|e| e.code == ProtocolErrorCode::NoRecordsMatch)
            {
                Ok((Vec::new(), None))
            } else {
                let first = errors
                    .into_iter()
                    .find(|e| e.code != ProtocolErrorCode::NoRecordsMatch)
                    .expect("non-noRecordsMatch error present");
                Err(ResponseError::Protocol(first))
            }
        }
        _ => Err(ResponseError::schema("expected a ListRecords response", None)),
    }
}

/// Parse a standalone `<record>` document (as produced by
/// [`super::writer::serialize_record`]).
pub fn parse_record(xml: &[u8], format_prefix: &str) -> Result<MetadataRecord, ResponseError> {
    let root = xml::parse_document(xml)?;
    if root.local_name() != "record" {
        return Err(ResponseError::schema(
            format!("expected <record>, found <{}>", root.name),
            None,
        ));
    }
    parse_record_element(&root, xml, format_prefix, &QualifiedProfile::default())
}

pub fn parse_header(h: &Element) -> Result<RecordHeader, ResponseError> {
    let identifier = h
        .child("identifier")
        .map(|e| e.text().trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ResponseError::missing("identifier", "header"))?;
    let ds_el = h
        .child("datestamp")
        .ok_or_else(|| ResponseError::missing("datestamp", &identifier))?;
    let text = ds_el.text();
    let datestamp =
        datestamp::parse_datestamp(text.trim()).map_err(|error| ResponseError::Datestamp {
            context: identifier.clone(),
            text: text.clone(),
            error,
        })?;
    let deleted = match h.attr("status") {
        None => false,
        Some("deleted") => true,
        Some(other) => {
            return Err(ResponseError::schema(
                format!("header status '{other}'"),
                Some(&identifier),
            ))
        }
    };
    let set_specs = h
        .children_named("setSpec")
        .map(|s| s.text().trim().to_string())
        .collect();
    Ok(RecordHeader {
        identifier,
        datestamp,
        set_specs,
        deleted,
    })
}

pub(crate) fn parse_record_element(
    rec: &Element,
    src: &[u8],
    format_prefix: &str,
    profile: &QualifiedProfile,
) -> Result<MetadataRecord, ResponseError> {
    let header_el = rec
        .child("header")
        .ok_or_else(|| ResponseError::missing("header", "record"))?;
    let header = parse_header(header_el)?;
    let id = header.identifier.as_str();
    let metadata = rec.child("metadata");
    if header.deleted {
        if metadata.is_some() {
            return Err(ResponseError::schema(
                "deleted record carries metadata",
                Some(id),
            ));
        }
        return Ok(MetadataRecord {
            header,
            format_prefix: format_prefix.to_string(),
            elements: Vec::new(),
            raw_xml: Vec::new(),
        });
    }
    let metadata = metadata.ok_or_else(|| ResponseError::missing("metadata", id))?;
    if metadata.has_text() {
        return Err(ResponseError::schema("text directly inside <metadata>", Some(id)));
    }
    let mut payloads = metadata.elements();
    let payload = payloads
        .next()
        .ok_or_else(|| ResponseError::schema("empty <metadata>", Some(id)))?;
    if payloads.next().is_some() {
        return Err(ResponseError::schema(
            "<metadata> must hold exactly one element",
            Some(id),
        ));
    }
    let raw_xml = src[payload.span.clone()].to_vec();
    let detected = DcContainer::detect(payload);
    let expected = DcContainer::for_prefix(format_prefix);
    let elements = match (expected, detected) {
        (Some(want), Some(got)) if want == got => dc::parse_dc_payload(payload, profile)
            .map_err(|e| ResponseError::schema(e.to_string(), Some(id)))?,
        (Some(want), _) => {
            return Err(ResponseError::schema(
                format!(
                    "payload <{}> does not match format {format_prefix} ({want:?} container expected)",
                    payload.name
                ),
                Some(id),
            ))
        }
        (None, _) => Vec::new(),
    };
    Ok(MetadataRecord {
        header,
        format_prefix: format_prefix.to_string(),
        elements,
        raw_xml,
    })
}

fn required_text(parent: &Element, child: &str, context: &str) -> Result<String, ResponseError> {
    parent
        .child(child)
        .map(|e| e.text().trim().to_string())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ResponseError::missing(child, context))
}

fn parse_identify(el: &Element) -> Result<IdentifyInfo, ResponseError> {
    let repository_name = required_text(el, "repositoryName", "Identify")?;
    let base_url = required_text(el, "baseURL", "Identify")?;
    let protocol_version = required_text(el, "protocolVersion", "Identify")?;
    let admin_emails: Vec<String> = el
        .children_named("adminEmail")
        .map(|e| e.text().trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if admin_emails.is_empty() {
        return Err(ResponseError::missing("adminEmail", "Identify"));
    }
    let deleted_record = required_text(el, "deletedRecord", "Identify")?
        .parse::<DeletedPolicy>()
        .map_err(|m| ResponseError::schema(m, None))?;
    let granularity = required_text(el, "granularity", "Identify")?
        .parse::<Granularity>()
        .map_err(|m| ResponseError::schema(m, None))?;
    let earliest = required_text(el, "earliestDatestamp", "Identify")?;
    let earliest_datestamp =
        datestamp::parse_flexible(&earliest).map_err(|error| ResponseError::Datestamp {
            context: "earliestDatestamp".into(),
            text: earliest.clone(),
            error,
        })?;
    Ok(IdentifyInfo {
        repository_name,
        base_url,
        protocol_version,
        admin_emails,
        earliest_datestamp,
        deleted_record,
        granularity,
    })
}

fn parse_formats(el: &Element) -> Result<Vec<MetadataFormat>, ResponseError> {
    let mut out = Vec::new();
    for f in el.children_named("metadataFormat") {
        out.push(MetadataFormat {
            prefix: required_text(f, "metadataPrefix", "metadataFormat")?,
            schema: required_text(f, "schema", "metadataFormat")?,
            namespace: required_text(f, "metadataNamespace", "metadataFormat")?,
        });
    }
    Ok(out)
}

fn parse_token(verb_el: &Element) -> Result<Option<ResumptionToken>, ResponseError> {
    let Some(t) = verb_el.child("resumptionToken") else {
        return Ok(None);
    };
    let number = |name: &str| -> Result<Option<u64>, ResponseError> {
        t.attr(name)
            .map(|v| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|_| ResponseError::schema(format!("resumptionToken {name}='{v}'"), None))
            })
            .transpose()
    };
    let expiration = t
        .attr("expirationDate")
        .map(|v| {
            datestamp::parse_datestamp(v.trim()).map_err(|error| ResponseError::Datestamp {
                context: "resumptionToken expirationDate".into(),
                text: v.to_string(),
                error,
            })
        })
        .transpose()?;
    Ok(Some(ResumptionToken {
        token: t.text().trim().to_string(),
        complete_list_size: number("completeListSize")?,
        cursor: number("cursor")?,
        expiration,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dc::{DcName, OAI_DC};

    const HEAD: &str = r#"<?xml version="1.0" encoding="UTF-8"?><OAI-PMH xmlns="http://www.openarchives.org/OAI/2.0/"><responseDate>2006-01-25T15:00:00Z</responseDate><request verb="ListRecords">http://x/oai</request>"#;

    fn rec(id: &str, title: &str) -> String {
        format!(
            r#"<record><header><identifier>{id}</identifier><datestamp>2005-08-01T00:00:00Z</datestamp></header><metadata><oai_dc:dc xmlns:oai_dc="http://www.openarchives.org/OAI/2.0/oai_dc/" xmlns:dc="http://purl.org/dc/elements/1.1/"><dc:title>{title}</dc:title></oai_dc:dc></metadata></record>"#
        )
    }

    #[test]
    fn two_records_no_token() {
        let doc = format!(
            "{HEAD}<ListRecords>{}{}</ListRecords></OAI-PMH>",
            rec("a", "One"),
            rec("b", "Two")
        );
        let (records, token) = parse_list_response(doc.as_bytes(), OAI_DC).unwrap();
        assert_eq!(records.len(), 2);
        assert!(token.is_none());
        assert_eq!(records[1].elements[0].name, DcName::Title);
        assert_eq!(records[1].elements[0].value, "Two");
        let raw = std::str::from_utf8(&records[0].raw_xml).unwrap();
        assert!(raw.starts_with("<oai_dc:dc") && raw.ends_with("</oai_dc:dc>"));
        assert!(doc.contains(raw));
    }

    #[test]
    fn no_records_match_is_empty_page() {
        let doc = format!(r#"{HEAD}<error code="noRecordsMatch">none</error></OAI-PMH>"#);
        let response = parse_response(doc.as_bytes(), OAI_DC, &QualifiedProfile::default()).unwrap();
        assert_eq!(response.errors()[0].code, ProtocolErrorCode::NoRecordsMatch);
        let (records, token) = parse_list_response(doc.as_bytes(), OAI_DC).unwrap();
        assert!(records.is_empty() && token.is_none());
    }

    #[test]
    fn other_protocol_errors_surface() {
        let doc = format!(r#"{HEAD}<error code="badResumptionToken">stale</error></OAI-PMH>"#);
        assert!(matches!(
            parse_list_response(doc.as_bytes(), OAI_DC),
            Err(ResponseError::Protocol(e)) if e.code == ProtocolErrorCode::BadResumptionToken
        ));
    }

    #[test]
    fn overlong_utf8_reports_offset() {
        let mut doc = format!("{HEAD}<ListRecords>{}</ListRecords></OAI-PMH>", rec("a", "XX")).into_bytes();
        let at = doc.windows(2).position(|w| w == b"XX").unwrap();
        doc[at] = 0xC0;
        doc[at + 1] = 0x80;
        match parse_list_response(&doc, OAI_DC) {
            Err(ResponseError::WellFormedness(XmlError::InvalidUtf8 { offset, .. })) => {
                assert_eq!(offset, at)
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn token_attributes() {
        let doc = format!(
            r#"{HEAD}<ListRecords>{}<resumptionToken completeListSize="25" cursor="0">abc</resumptionToken></ListRecords></OAI-PMH>"#,
            rec("a", "One")
        );
        let (_, token) = parse_list_response(doc.as_bytes(), OAI_DC).unwrap();
        let token = token.unwrap();
        assert_eq!(token.token, "abc");
        assert_eq!(token.complete_list_size, Some(25));
        assert_eq!(token.cursor, Some(0));
    }

    #[test]
    fn missing_identify_field() {
        let doc = r#"<OAI-PMH xmlns="http://www.openarchives.org/OAI/2.0/"><responseDate>2006-01-25T15:00:00Z</responseDate><request verb="Identify">http://x/oai</request><Identify><baseURL>http://x/oai</baseURL><protocolVersion>2.0</protocolVersion><adminEmail>a@x</adminEmail><earliestDatestamp>2000-01-01T00:00:00Z</earliestDatestamp><deletedRecord>persistent</deletedRecord><granularity>YYYY-MM-DDThh:mm:ssZ</granularity></Identify></OAI-PMH>"#;
        assert!(matches!(
            parse_response(doc.as_bytes(), "", &QualifiedProfile::default()),
            Err(ResponseError::MissingElement { element, .. }) if element == "repositoryName"
        ));
    }

    #[test]
    fn bad_header_datestamp() {
        let doc = format!(
            "{HEAD}<ListRecords>{}</ListRecords></OAI-PMH>",
            rec("a", "One").replace("2005-08-01T00:00:00Z", "01-08-2005")
        );
        assert!(matches!(
            parse_list_response(doc.as_bytes(), OAI_DC),
            Err(ResponseError::Datestamp { .. })
        ));
    }
}
