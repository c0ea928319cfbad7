//! The safe transforms.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::uri::{downgrade_invalid_uri, looks_fetchable, scrub_uri, ScrubbedUri};
use crate::model::{DcElement, DcName, MetadataRecord, QualifiedProfile};

const LANGUAGES: &str = include_str!("../../data/languages.tsv");
const DCMI_TYPES: &str = include_str!("../../data/dcmi_types.txt");
const STOP_PHRASES: &str = include_str!("../../data/stop_phrases.txt");

pub const URI_SCHEME: &str = "URI";
pub const DCMI_TYPE_SCHEME: &str = "DCMIType";
pub const LANGUAGE_SCHEME: &str = "RFC4646";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NoInformation,
    Whitespace,
    Duplicate,
    QualifyScheme,
    NormalizeLanguage,
    ScrubUri,
    DowngradeUri,
}

impl Rule {
    pub const ALL: [Rule; 7] = [
        Rule::NoInformation,
        Rule::Whitespace,
        Rule::Duplicate,
        Rule::QualifyScheme,
        Rule::NormalizeLanguage,
        Rule::ScrubUri,
        Rule::DowngradeUri,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::NoInformation => "no_information",
            Rule::Whitespace => "whitespace",
            Rule::Duplicate => "duplicate",
            Rule::QualifyScheme => "qualify_scheme",
            Rule::NormalizeLanguage => "normalize_language",
            Rule::ScrubUri => "scrub_uri",
            Rule::DowngradeUri => "downgrade_uri",
        }
    }

    pub fn parse(s: &str) -> Option<Rule> {
        Rule::ALL.iter().copied().find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedRecord {
    pub source_identifier: String,
    pub elements: Vec<DcElement>,
    /// One entry per rule firing, in firing order.
    pub transform_log: Vec<Rule>,
}

/// Lookup tables for rule 4.
#[derive(Debug, Clone)]
pub struct Vocabularies {
    /// Lowercased code or English name → two-letter code.
    languages: HashMap<String, String>,
    /// Lowercased term without spaces → canonical term.
    dcmi_types: HashMap<String, String>,
}

impl Default for Vocabularies {
    fn default() -> Self {
        let rows: Vec<Vec<&str>> = data_lines(LANGUAGES)
            .map(|l| l.split('\t').collect::<Vec<_>>())
            .filter(|cols| cols.len() == 4)
            .collect();
        let mut languages = HashMap::new();
        // codes win over names that happen to spell another code
        for cols in &rows {
            for key in &cols[..3] {
                if !key.is_empty() {
                    languages.insert(key.to_string(), cols[0].to_string());
                }
            }
        }
        for cols in &rows {
            let name = cols[3].to_lowercase();
            for alias in std::iter::once(name.as_str()).chain(name.split([';', ','])) {
                languages
                    .entry(alias.trim().to_string())
                    .or_insert_with(|| cols[0].to_string());
            }
        }
        let dcmi_types = data_lines(DCMI_TYPES)
            .map(|t| (t.to_lowercase(), t.to_string()))
            .collect();
        Vocabularies {
            languages,
            dcmi_types,
        }
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
}

impl Vocabularies {
    /// Canonical form of a language value: the two-letter code for any known
    /// code or English name, with region and script subtags re-cased.
    pub fn language(&self, value: &str) -> Option<String> {
        let lower = value.to_lowercase();
        if let Some(code) = self.languages.get(&lower) {
            return Some(code.clone());
        }
        let mut parts = lower.split(['-', '_']);
        let primary = self.languages.get(parts.next()?)?;
        if primary.len() != 2 {
            return None;
        }
        let mut out = primary.clone();
        for sub in parts {
            if sub.is_empty() || sub.len() > 8 || !sub.chars().all(|c| c.is_ascii_alphanumeric()) {
                return None;
            }
            out.push('-');
            match sub.len() {
                2 if sub.chars().all(|c| c.is_ascii_alphabetic()) => out.push_str(&sub.to_ascii_uppercase()),
                4 if sub.chars().all(|c| c.is_ascii_alphabetic()) => {
                    out.push_str(&sub[..1].to_ascii_uppercase());
                    out.push_str(&sub[1..]);
                }
                _ => out.push_str(sub),
            }
        }
        Some(out)
    }

    pub fn dcmi_type(&self, value: &str) -> Option<&str> {
        let key: String = value.split_whitespace().collect::<String>().to_lowercase();
        self.dcmi_types.get(&key).map(String::as_str)
    }
}

/// The one global rule set. There are no per-collection variants.
#[derive(Debug, Clone)]
pub struct SafeTransform {
    stop_phrases: HashSet<String>,
    vocab: Vocabularies,
}

impl Default for SafeTransform {
    fn default() -> Self {
        SafeTransform::with_stop_phrases(data_lines(STOP_PHRASES))
    }
}

pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl SafeTransform {
    pub fn with_stop_phrases<S: AsRef<str>>(phrases: impl IntoIterator<Item = S>) -> Self {
        SafeTransform {
            stop_phrases: phrases
                .into_iter()
                .map(|p| collapse_whitespace(p.as_ref()).to_lowercase())
                .filter(|p| !p.is_empty())
                .collect(),
            vocab: Vocabularies::default(),
        }
    }

    /// The default phrases plus those in a file (one per line, `#` comments).
    pub fn extended_from(path: &Path) -> std::io::Result<Self> {
        let extra = std::fs::read_to_string(path)?;
        Ok(SafeTransform::with_stop_phrases(
            data_lines(STOP_PHRASES).chain(data_lines(&extra)),
        ))
    }

    pub fn vocabularies(&self) -> &Vocabularies {
        &self.vocab
    }

    pub fn is_stop_phrase(&self, value: &str) -> bool {
        let v = collapse_whitespace(value).to_lowercase();
        v.is_empty() || self.stop_phrases.contains(&v)
    }

    pub fn apply(&self, record: &MetadataRecord) -> NormalizedRecord {
        let (elements, transform_log) = self.apply_elements(&record.elements);
        NormalizedRecord {
            source_identifier: record.header.identifier.clone(),
            elements,
            transform_log,
        }
    }

    /// Run the rules in order: stop phrases, whitespace, duplicates, scheme
    /// qualification, URI scrubbing, then a last duplicate pass for values
    /// that rules 4 and 5 made equal. A value that loses a false URI claim is
    /// qualified again without it.
    pub fn apply_elements(&self, input: &[DcElement]) -> (Vec<DcElement>, Vec<Rule>) {
        let mut log = Vec::new();

        let mut elements: Vec<DcElement> = Vec::with_capacity(input.len());
        for e in input {
            if self.is_stop_phrase(&e.value) {
                log.push(Rule::NoInformation);
            } else {
                elements.push(e.clone());
            }
        }

        for e in &mut elements {
            let collapsed = collapse_whitespace(&e.value);
            if collapsed != e.value {
                e.value = collapsed;
                log.push(Rule::Whitespace);
            }
        }

        dedup(&mut elements, &mut log);

        for e in &mut elements {
            self.qualify(e, &mut log);
        }

        for e in &mut elements {
            if e.scheme.as_deref() == Some(URI_SCHEME) {
                let before = e.value.clone();
                let out = downgrade_invalid_uri(e.clone());
                let downgraded = out.scheme.is_none();
                if downgraded {
                    log.push(Rule::DowngradeUri);
                } else if out.value != before {
                    log.push(Rule::ScrubUri);
                }
                *e = out;
                if downgraded {
                    self.qualify(e, &mut log);
                }
            }
        }

        dedup(&mut elements, &mut log);
        (elements, log)
    }

    fn qualify(&self, e: &mut DcElement, log: &mut Vec<Rule>) {
        if e.qualifier.is_some() {
            return;
        }
        match e.name {
            DcName::Identifier | DcName::Relation | DcName::Source
                if e.scheme.is_none() && looks_fetchable(&e.value) =>
            {
                if let ScrubbedUri::Fetchable(url) = scrub_uri(&e.value) {
                    if url != e.value {
                        e.value = url;
                        log.push(Rule::ScrubUri);
                    }
                    e.scheme = Some(URI_SCHEME.into());
                    log.push(Rule::QualifyScheme);
                }
            }
            DcName::Type if matches!(e.scheme.as_deref(), None | Some(DCMI_TYPE_SCHEME)) => {
                if let Some(term) = self.vocab.dcmi_type(&e.value) {
                    if term != e.value || e.scheme.is_none() {
                        e.value = term.to_string();
                        e.scheme = Some(DCMI_TYPE_SCHEME.into());
                        log.push(Rule::QualifyScheme);
                    }
                }
            }
            DcName::Language => {
                if let Some(code) = self.vocab.language(&e.value) {
                    if code != e.value || e.scheme.as_deref() != Some(LANGUAGE_SCHEME) {
                        e.value = code;
                        e.scheme = Some(LANGUAGE_SCHEME.into());
                        log.push(Rule::NormalizeLanguage);
                    }
                }
            }
            _ => {}
        }
    }
}

/// Drop exact repeats, keeping the first occurrence.
fn dedup(elements: &mut Vec<DcElement>, log: &mut Vec<Rule>) {
    let mut seen = HashSet::new();
    elements.retain(|e| {
        let fresh = seen.insert(e.clone());
        if !fresh {
            log.push(Rule::Duplicate);
        }
        fresh
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownQualifier,
    UnknownScheme,
    InvalidUri,
    EmptyValue,
    MinimumContent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Offending element, absent for whole-record rules.
    pub index: Option<usize>,
    pub rule: ViolationKind,
    pub message: String,
}

/// Check a normalized record against the qualified profile and the
/// minimum-content rule.
pub fn validate_normalized(record: &NormalizedRecord, profile: &QualifiedProfile) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for (i, e) in record.elements.iter().enumerate() {
        if let Some(q) = &e.qualifier {
            if !profile.allows_qualifier(e.name, q) {
                out.push(Violation {
                    index: Some(i),
                    rule: ViolationKind::UnknownQualifier,
                    message: format!("{} is not a refinement of {} in the profile", q, e.name),
                });
            }
        }
        if let Some(s) = &e.scheme {
            if !profile.allows_scheme(e.name, s) {
                out.push(Violation {
                    index: Some(i),
                    rule: ViolationKind::UnknownScheme,
                    message: format!("scheme {s} is not allowed on {}", e.name),
                });
            }
            if s == URI_SCHEME && scrub_uri(&e.value) != ScrubbedUri::Fetchable(e.value.clone()) {
                out.push(Violation {
                    index: Some(i),
                    rule: ViolationKind::InvalidUri,
                    message: format!("'{}' is not a fetchable URL", e.value),
                });
            }
        }
        if e.value.trim().is_empty() {
            out.push(Violation {
                index: Some(i),
                rule: ViolationKind::EmptyValue,
                message: format!("empty {}", e.label()),
            });
        }
    }
    if !record
        .elements
        .iter()
        .any(|e| profile.require_one_of.contains(&e.name) && !e.value.trim().is_empty())
    {
        let names: Vec<_> = profile.require_one_of.iter().map(|n| n.as_str()).collect();
        out.push(Violation {
            index: None,
            rule: ViolationKind::MinimumContent,
            message: format!("record keeps none of: {}", names.join(", ")),
        });
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn el(name: DcName, v: &str) -> DcElement {
        DcElement::new(name, v)
    }

    fn run(input: Vec<DcElement>) -> (Vec<DcElement>, Vec<Rule>) {
        SafeTransform::default().apply_elements(&input)
    }

    #[test]
    fn stop_phrase_removed() {
        let (out, log) = run(vec![
            el(DcName::Title, "T"),
            el(DcName::Description, "No abstract  submitted"),
        ]);
        assert_eq!(out, vec![el(DcName::Title, "T")]);
        assert_eq!(log, vec![Rule::NoInformation]);
    }

    #[test]
    fn whitespace_then_duplicates() {
        let (out, log) = run(vec![
            el(DcName::Title, "  A\t\tB  "),
            el(DcName::Subject, "physics"),
            el(DcName::Subject, " physics"),
        ]);
        assert_eq!(out, vec![el(DcName::Title, "A B"), el(DcName::Subject, "physics")]);
        assert_eq!(log, vec![Rule::Whitespace, Rule::Whitespace, Rule::Duplicate]);
    }

    #[test]
    fn qualifies_schemes() {
        let (out, _) = run(vec![
            el(DcName::Identifier, "HTTP://example.org/a b"),
            el(DcName::Identifier, "doi:10.1000/182"),
            el(DcName::Type, "moving image"),
            el(DcName::Language, "English"),
            el(DcName::Language, "eng"),
            el(DcName::Language, "EN_us"),
            el(DcName::Language, "Klingon"),
        ]);
        assert_eq!(
            out,
            vec![
                el(DcName::Identifier, "http://example.org/a%20b").with_scheme("URI"),
                el(DcName::Identifier, "doi:10.1000/182"),
                el(DcName::Type, "MovingImage").with_scheme("DCMIType"),
                el(DcName::Language, "en").with_scheme("RFC4646"),
                el(DcName::Language, "en-US").with_scheme("RFC4646"),
                el(DcName::Language, "Klingon"),
            ]
        );
    }

    #[test]
    fn downgrades_false_uri_claims() {
        let (out, log) = run(vec![el(DcName::Identifier, "not a url").with_scheme("URI")]);
        assert_eq!(out, vec![el(DcName::Identifier, "not a url")]);
        assert_eq!(log, vec![Rule::DowngradeUri]);

        let (out, _) = run(vec![el(DcName::Type, "text").with_scheme("URI")]);
        assert_eq!(out, vec![el(DcName::Type, "Text").with_scheme("DCMIType")]);
        assert_eq!(run(out.clone()).0, out);
    }

    #[test]
    fn normalized_record_is_a_fixed_point() {
        let t = SafeTransform::default();
        let (once, _) = t.apply_elements(&[
            el(DcName::Title, " Algebra  I "),
            el(DcName::Identifier, "http://x.org/a b"),
            el(DcName::Language, "French"),
            el(DcName::Type, "text"),
        ]);
        let (twice, log) = t.apply_elements(&once);
        assert_eq!(once, twice);
        assert!(log.is_empty(), "{log:?}");
    }

    #[test]
    fn extra_stop_phrases() {
        let t = SafeTransform::with_stop_phrases(["TBD"]);
        assert!(t.is_stop_phrase(" tbd "));
        assert!(t.is_stop_phrase("   "));
        assert!(!t.is_stop_phrase("no abstract submitted"));
    }

    #[test]
    fn profile_violations() {
        let profile = QualifiedProfile::default();
        let ok = NormalizedRecord {
            source_identifier: "x".into(),
            elements: vec![el(DcName::Title, "T"), el(DcName::Description, "d").with_qualifier("abstract")],
            transform_log: vec![],
        };
        assert_eq!(validate_normalized(&ok, &profile), Ok(()));
        let mut bad = ok.clone();
        bad.elements.push(el(DcName::Description, "k-2").with_qualifier("gradeLevel2"));
        let v = validate_normalized(&bad, &profile).unwrap_err();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, Some(2));
        assert_eq!(v[0].rule, ViolationKind::UnknownQualifier);
        let empty = NormalizedRecord {
            elements: vec![],
            ..ok
        };
        let v = validate_normalized(&empty, &profile).unwrap_err();
        assert_eq!(v[0].rule, ViolationKind::MinimumContent);
    }
}
