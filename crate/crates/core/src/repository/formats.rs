//! The five export formats.
//!
//! `nsdl_dc` is the normalized qualified DC; `oai_dc` its dumbed-down form.
//! The other three use small artifact-local containers:
//!
//! - `nsdl_links`: `<links xmlns="urn:oaiagg:links:v1"><memberOf>repo id</memberOf></links>`
//! - `nsdl_search`: `<search xmlns="urn:oaiagg:search:v1">` holding the
//!   `nsdl_dc`, `oai_dc` and `nsdl_links` payloads and a `<native>` element
//!   with the original bytes
//! - `nsdl_all`: the same container, without `<native>` when the provider
//!   keeps its native metadata private

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::dc::{self, DcContainer, OAI_DC, QUALIFIED_DC};
use crate::model::{DcElement, MetadataFormat};
use crate::xml::{escape_attr, escape_text};

pub const NSDL_DC: &str = QUALIFIED_DC;
pub const NSDL_LINKS: &str = "nsdl_links";
pub const NSDL_SEARCH: &str = "nsdl_search";
pub const NSDL_ALL: &str = "nsdl_all";

pub const LINKS_NS: &str = "urn:oaiagg:links:v1";
pub const SEARCH_NS: &str = "urn:oaiagg:search:v1";

pub const EXPORT_FORMATS: [&str; 5] = [NSDL_DC, OAI_DC, NSDL_LINKS, NSDL_SEARCH, NSDL_ALL];

pub fn metadata_formats() -> Vec<MetadataFormat> {
    let f = |prefix: &str, namespace: &str, schema: &str| MetadataFormat {
        prefix: prefix.into(),
        namespace: namespace.into(),
        schema: schema.into(),
    };
    vec![
        f(OAI_DC, dc::OAI_DC_NS, "http://www.openarchives.org/OAI/2.0/oai_dc.xsd"),
        f(NSDL_DC, dc::QDC_NS, "urn:oaiagg:qdc:v1:schema"),
        f(NSDL_LINKS, LINKS_NS, "urn:oaiagg:links:v1:schema"),
        f(NSDL_SEARCH, SEARCH_NS, "urn:oaiagg:search:v1:schema"),
        f(NSDL_ALL, SEARCH_NS, "urn:oaiagg:search:v1:schema"),
    ]
}

/// Erase refinements and encoding schemes. Names are already the fifteen
/// parents; values, languages and order are untouched.
pub fn dumb_down(elements: &[DcElement]) -> Vec<DcElement> {
    elements
        .iter()
        .map(|e| DcElement {
            qualifier: None,
            scheme: None,
            ..e.clone()
        })
        .collect()
}

/// Membership relations for one record. Collection records themselves
/// carry none.
pub fn build_links(member_of: Option<&str>) -> String {
    let mut out = format!("<links xmlns=\"{LINKS_NS}\">");
    if let Some(c) = member_of {
        out.push_str("<memberOf>");
        out.push_str(&escape_text(c));
        out.push_str("</memberOf>");
    }
    out.push_str("</links>");
    out
}

/// What one record's exports are built from.
pub struct ExportSource<'a> {
    pub elements: &'a [DcElement],
    pub member_of: Option<&'a str>,
    /// Original payload and its prefix; collection records have none.
    pub native: Option<(&'a str, &'a str)>,
    pub native_public: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub payloads: BTreeMap<String, String>,
}

impl ExportBundle {
    pub fn build(src: &ExportSource<'_>) -> ExportBundle {
        let mut nsdl_dc = String::new();
        dc::write_dc_payload(&mut nsdl_dc, src.elements, DcContainer::Qualified);
        let mut oai_dc = String::new();
        dc::write_dc_payload(&mut oai_dc, &dumb_down(src.elements), DcContainer::Simple);
        let links = build_links(src.member_of);
        let native = src.native.map(|(prefix, raw)| {
            format!(
                "<native metadataPrefix=\"{}\">{raw}</native>",
                escape_attr(prefix)
            )
        });
        let search = search_container(&nsdl_dc, &oai_dc, &links, native.as_deref());
        let all = if src.native_public {
            search.clone()
        } else {
            search_container(&nsdl_dc, &oai_dc, &links, None)
        };
        let mut payloads = BTreeMap::new();
        payloads.insert(NSDL_DC.to_string(), nsdl_dc);
        payloads.insert(OAI_DC.to_string(), oai_dc);
        payloads.insert(NSDL_LINKS.to_string(), links);
        payloads.insert(NSDL_SEARCH.to_string(), search);
        payloads.insert(NSDL_ALL.to_string(), all);
        ExportBundle { payloads }
    }

    pub fn get(&self, prefix: &str) -> Option<&str> {
        self.payloads.get(prefix).map(String::as_str)
    }
}

fn search_container(nsdl_dc: &str, oai_dc: &str, links: &str, native: Option<&str>) -> String {
    let mut out = String::with_capacity(nsdl_dc.len() * 3);
    out.push_str("<search xmlns=\"");
    out.push_str(SEARCH_NS);
    // bindings a verbatim native payload may rely on
    out.push_str(concat!(
        "\" xmlns:oai_dc=\"http://www.openarchives.org/OAI/2.0/oai_dc/\"",
        " xmlns:dc=\"http://purl.org/dc/elements/1.1/\"",
        " xmlns:dcterms=\"http://purl.org/dc/terms/\"",
        " xmlns:xsi=\"http://www.w3.org/2001/XMLSchema-instance\">"
    ));
    out.push_str(nsdl_dc);
    out.push_str(oai_dc);
    out.push_str(links);
    if let Some(n) = native {
        out.push_str(n);
    }
    out.push_str("</search>");
    out
}
