//! Dublin Core elements and the qualified-DC application profile.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::xml::{self, Element, XML_NS, XSI_NS};

pub const OAI_DC_NS: &str = "http://www.openarchives.org/OAI/2.0/oai_dc/";
pub const DC_NS: &str = "http://purl.org/dc/elements/1.1/";
pub const DCTERMS_NS: &str = "http://purl.org/dc/terms/";
/// Container namespace for the qualified profile payload.
pub const QDC_NS: &str = "urn:oaiagg:qdc:v1";

pub const OAI_DC: &str = "oai_dc";
pub const QUALIFIED_DC: &str = "nsdl_dc";

/// The fifteen unqualified Dublin Core elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcName {
    Title,
    Creator,
    Subject,
    Description,
    Publisher,
    Contributor,
    Date,
    Type,
    Format,
    Identifier,
    Source,
    Language,
    Relation,
    Coverage,
    Rights,
}

impl DcName {
    pub const ALL: [DcName; 15] = [
        DcName::Title,
        DcName::Creator,
        DcName::Subject,
        DcName::Description,
        DcName::Publisher,
        DcName::Contributor,
        DcName::Date,
        DcName::Type,
        DcName::Format,
        DcName::Identifier,
        DcName::Source,
        DcName::Language,
        DcName::Relation,
        DcName::Coverage,
        DcName::Rights,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DcName::Title => "title",
            DcName::Creator => "creator",
            DcName::Subject => "subject",
            DcName::Description => "description",
            DcName::Publisher => "publisher",
            DcName::Contributor => "contributor",
            DcName::Date => "date",
            DcName::Type => "type",
            DcName::Format => "format",
            DcName::Identifier => "identifier",
            DcName::Source => "source",
            DcName::Language => "language",
            DcName::Relation => "relation",
            DcName::Coverage => "coverage",
            DcName::Rights => "rights",
        }
    }
}

impl fmt::Display for DcName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("'{0}' is not a Dublin Core element")]
pub struct UnknownElement(pub String);

impl FromStr for DcName {
    type Err = UnknownElement;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DcName::ALL
            .iter()
            .copied()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| UnknownElement(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DcElement {
    pub name: DcName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qualifier: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    pub value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl DcElement {
    pub fn new(name: DcName, value: impl Into<String>) -> Self {
        Self {
            name,
            qualifier: None,
            scheme: None,
            value: value.into(),
            language: None,
        }
    }

    pub fn with_scheme(mut self, scheme: impl Into<String>) -> Self {
        self.scheme = Some(scheme.into());
        self
    }

    pub fn with_qualifier(mut self, qualifier: impl Into<String>) -> Self {
        self.qualifier = Some(qualifier.into());
        self
    }

    pub fn with_language(mut self, language: impl Into<String>) -> Self {
        self.language = Some(language.into());
        self
    }

    pub fn is_uri(&self) -> bool {
        self.scheme.as_deref() == Some("URI")
    }

    /// `identifier.URI` style label used in logs and reports.
    pub fn label(&self) -> String {
        let mut out = self.name.as_str().to_string();
        if let Some(q) = &self.qualifier {
            out.push('.');
            out.push_str(q);
        }
        if let Some(s) = &self.scheme {
            out.push('.');
            out.push_str(s);
        }
        out
    }
}

/// The qualified-DC application profile: which refinements exist (and which
/// element each refines), which encoding schemes each element may carry, and
/// the minimum-content rule for normalized records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualifiedProfile {
    pub version: u32,
    pub refinements: BTreeMap<String, DcName>,
    pub schemes: BTreeMap<DcName, BTreeSet<String>>,
    /// A normalized record must keep at least one of these.
    pub require_one_of: Vec<DcName>,
}

const DEFAULT_PROFILE: &str = include_str!("../../data/qdc_profile.json");

impl Default for QualifiedProfile {
    fn default() -> Self {
        QualifiedProfile::from_json(DEFAULT_PROFILE).expect("bundled profile parses")
    }
}

impl QualifiedProfile {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn parent_of(&self, refinement: &str) -> Option<DcName> {
        self.refinements.get(refinement).copied()
    }

    pub fn allows_qualifier(&self, name: DcName, qualifier: &str) -> bool {
        self.parent_of(qualifier) == Some(name)
    }

    pub fn allows_scheme(&self, name: DcName, scheme: &str) -> bool {
        self.schemes
            .get(&name)
            .is_some_and(|set| set.contains(scheme))
    }
}

/// Which Dublin Core container a payload uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DcContainer {
    Simple,
    Qualified,
}

impl DcContainer {
    pub fn for_prefix(prefix: &str) -> Option<Self> {
        match prefix {
            OAI_DC => Some(DcContainer::Simple),
            QUALIFIED_DC => Some(DcContainer::Qualified),
            _ => None,
        }
    }

    /// Recognize a payload root element.
    pub fn detect(root: &Element) -> Option<Self> {
        let local = root.local_name();
        match (root.ns.as_deref(), local) {
            (Some(OAI_DC_NS), "dc") => Some(DcContainer::Simple),
            (Some(QDC_NS), "qualifieddc") => Some(DcContainer::Qualified),
            (None, "dc") if root.prefix() == Some("oai_dc") => Some(DcContainer::Simple),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PayloadError {
    #[error("element <{0}> is not allowed in a Dublin Core payload")]
    UnknownElement(String),
    #[error("element <{0}> must not contain child elements")]
    Nested(String),
    #[error("stray text directly inside the Dublin Core container")]
    StrayText,
}

fn is_dc_ns(e: &Element) -> bool {
    match e.ns.as_deref() {
        Some(ns) => ns == DC_NS,
        None => e.prefix() == Some("dc"),
    }
}

fn is_dcterms_ns(e: &Element) -> bool {
    match e.ns.as_deref() {
        Some(ns) => ns == DCTERMS_NS,
        None => matches!(e.prefix(), Some("dcterms") | Some("dct")),
    }
}

/// Parse the children of a DC container into elements, in document order.
pub fn parse_dc_payload(
    root: &Element,
    profile: &QualifiedProfile,
) -> Result<Vec<DcElement>, PayloadError> {
    if root.has_text() {
        return Err(PayloadError::StrayText);
    }
    let mut out = Vec::new();
    for child in root.elements() {
        let local = child.local_name();
        let (name, qualifier) = if is_dc_ns(child) {
            let name = local
                .parse::<DcName>()
                .map_err(|_| PayloadError::UnknownElement(child.name.clone()))?;
            (name, None)
        } else if is_dcterms_ns(child) {
            if let Ok(name) = local.parse::<DcName>() {
                (name, None)
            } else if let Some(parent) = profile.parent_of(local) {
                (parent, Some(local.to_string()))
            } else {
                return Err(PayloadError::UnknownElement(child.name.clone()));
            }
        } else {
            return Err(PayloadError::UnknownElement(child.name.clone()));
        };
        if child.elements().next().is_some() {
            return Err(PayloadError::Nested(child.name.clone()));
        }
        let scheme = child
            .attrs
            .iter()
            .find(|a| {
                a.local_name() == "type"
                    && (a.ns.as_deref() == Some(XSI_NS) || a.name.starts_with("xsi:"))
            })
            .map(|a| xml::local_part(&a.value).to_string());
        let language = child
            .attr_ns(XML_NS, "lang")
            .map(str::to_string);
        out.push(DcElement {
            name,
            qualifier,
            scheme,
            value: child.text(),
            language,
        });
    }
    Ok(out)
}

/// Render a DC container. The simple container drops refinements and schemes.
pub fn write_dc_payload(out: &mut String, elements: &[DcElement], container: DcContainer) {
    match container {
        DcContainer::Simple => {
            out.push_str(concat!(
                r#"<oai_dc:dc xmlns:oai_dc="http://www.openarchives.org/OAI/2.0/oai_dc/""#,
                r#" xmlns:dc="http://purl.org/dc/elements/1.1/""#,
                r#" xmlns:xsi="http://www.w3.org/2001/XMLSchema-instance""#,
                r#" xsi:schemaLocation="http://www.openarchives.org/OAI/2.0/oai_dc/ http://www.openarchives.org/OAI/2.0/oai_dc.xsd">"#
            ));
        }
        DcContainer::Qualified => {
            out.push_str(concat!(
                r#"<qdc:qualifieddc xmlns:qdc="urn:oaiagg:qdc:v1""#,
                r#" xmlns:dc="http://purl.org/dc/elements/1.1/""#,
                r#" xmlns:dcterms="http://purl.org/dc/terms/""#,
                r#" xmlns:xsi="http://www.w3.org/2001/XMLSchema-instance">"#
            ));
        }
    }
    for e in elements {
        let tag = match (container, &e.qualifier) {
            (DcContainer::Qualified, Some(q)) => format!("dcterms:{q}"),
            _ => format!("dc:{}", e.name),
        };
        out.push('<');
        out.push_str(&tag);
        if container == DcContainer::Qualified {
            if let Some(scheme) = &e.scheme {
                out.push_str(" xsi:type=\"dcterms:");
                out.push_str(&xml::escape_attr(scheme));
                out.push('"');
            }
        }
        if let Some(lang) = &e.language {
            out.push_str(" xml:lang=\"");
            out.push_str(&xml::escape_attr(lang));
            out.push('"');
        }
        out.push('>');
        out.push_str(&xml::escape_text(&e.value));
        out.push_str("</");
        out.push_str(&tag);
        out.push('>');
    }
    match container {
        DcContainer::Simple => out.push_str("</oai_dc:dc>"),
        DcContainer::Qualified => out.push_str("</qdc:qualifieddc>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for n in DcName::ALL {
            assert_eq!(n.as_str().parse::<DcName>().unwrap(), n);
        }
        assert!("gradeLevel".parse::<DcName>().is_err());
    }

    #[test]
    fn default_profile_loads() {
        let p = QualifiedProfile::default();
        assert_eq!(p.parent_of("abstract"), Some(DcName::Description));
        assert!(p.allows_scheme(DcName::Identifier, "URI"));
        assert!(p.allows_scheme(DcName::Type, "DCMIType"));
        assert!(!p.allows_qualifier(DcName::Title, "abstract"));
    }

    #[test]
    fn qualified_payload_round_trip() {
        let profile = QualifiedProfile::default();
        let elements = vec![
            DcElement::new(DcName::Title, "A & B").with_language("en"),
            DcElement::new(DcName::Description, "short").with_qualifier("abstract"),
            DcElement::new(DcName::Identifier, "http://example.org/x").with_scheme("URI"),
        ];
        let mut s = String::new();
        write_dc_payload(&mut s, &elements, DcContainer::Qualified);
        assert!(s.contains("A &amp; B"));
        let root = xml::parse_document(s.as_bytes()).unwrap();
        assert_eq!(DcContainer::detect(&root), Some(DcContainer::Qualified));
        assert_eq!(parse_dc_payload(&root, &profile).unwrap(), elements);
    }

    #[test]
    fn nesting_is_rejected() {
        let src = format!(
            r#"<oai_dc:dc xmlns:oai_dc="{OAI_DC_NS}" xmlns:dc="{DC_NS}"><dc:title><dc:title>x</dc:title></dc:title></oai_dc:dc>"#
        );
        let root = xml::parse_document(src.as_bytes()).unwrap();
        assert!(matches!(
            parse_dc_payload(&root, &QualifiedProfile::default()),
            Err(PayloadError::Nested(_))
        ));
    }

    #[test]
    fn unknown_element_is_rejected() {
        let src = format!(
            r#"<oai_dc:dc xmlns:oai_dc="{OAI_DC_NS}" xmlns:dc="{DC_NS}"><dc:gradeLevel>x</dc:gradeLevel></oai_dc:dc>"#
        );
        let root = xml::parse_document(src.as_bytes()).unwrap();
        assert!(matches!(
            parse_dc_payload(&root, &QualifiedProfile::default()),
            Err(PayloadError::UnknownElement(_))
        ));
    }
}
