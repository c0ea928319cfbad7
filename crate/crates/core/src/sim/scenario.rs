//! Scenario files: a versioned TOML description of a provider's records,
//! their timeline and the faults it should exhibit.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::fault::FaultSpec;
use crate::model::{DcElement, DcName, DeletedPolicy};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("unsupported scenario version {0} (expected {SCENARIO_VERSION})")]
    Version(u32),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_base_url")]
    pub base_url: String,
    #[serde(default = "default_repository_name")]
    pub repository_name: String,
    #[serde(default = "default_policy")]
    pub deleted_policy: DeletedPolicy,
    #[serde(default = "default_page_size")]
    pub page_size: usize,
    /// Simulator clock at start-up. Records and events dated later stay
    /// pending until the clock is advanced past them.
    pub start: DateTime<Utc>,
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default)]
    pub generate: Option<Generate>,
    #[serde(default)]
    pub records: Vec<RecordSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn default_base_url() -> String {
    "http://sim.invalid/oai".into()
}

fn default_repository_name() -> String {
    "Simulated provider".into()
}

fn default_policy() -> DeletedPolicy {
    DeletedPolicy::Persistent
}

fn default_page_size() -> usize {
    10
}

/// Synthetic records `id_prefix00001` .. `id_prefixNNNNN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generate {
    pub count: usize,
    pub at: DateTime<Utc>,
    #[serde(default = "default_id_prefix")]
    pub id_prefix: String,
    /// Assigned round-robin.
    #[serde(default)]
    pub sets: Vec<String>,
    /// When set, identifier URLs cycle through this many distinct values.
    #[serde(default)]
    pub url_pool: Option<usize>,
}

fn default_id_prefix() -> String {
    "oai:sim:".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ElementSpec {
    Pair(String, String),
    Full {
        name: String,
        value: String,
        #[serde(default)]
        qualifier: Option<String>,
        #[serde(default)]
        scheme: Option<String>,
        #[serde(default)]
        lang: Option<String>,
    },
}

impl ElementSpec {
    pub fn to_element(&self) -> Result<DcElement, ScenarioError> {
        let (name, value, qualifier, scheme, lang) = match self {
            ElementSpec::Pair(n, v) => (n, v, None, None, None),
            ElementSpec::Full {
                name,
                value,
                qualifier,
                scheme,
                lang,
            } => (name, value, qualifier.clone(), scheme.clone(), lang.clone()),
        };
        let name: DcName = name
            .parse()
            .map_err(|e| ScenarioError::Invalid(format!("{e}")))?;
        Ok(DcElement {
            name,
            qualifier,
            scheme,
            value: value.clone(),
            language: lang,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordSpec {
    pub id: String,
    pub at: DateTime<Utc>,
    #[serde(default)]
    pub sets: Vec<String>,
    pub elements: Vec<ElementSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Insert,
    Update,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub at: DateTime<Utc>,
    pub kind: EventKind,
    pub id: String,
    /// New content for inserts (required) and updates (optional; an update
    /// without elements revises the title).
    #[serde(default)]
    pub elements: Option<Vec<ElementSpec>>,
    #[serde(default)]
    pub sets: Option<Vec<String>>,
}

/// A resolved timeline entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineEvent {
    pub at: DateTime<Utc>,
    pub kind: EventKind,
    pub id: String,
    pub elements: Option<Vec<DcElement>>,
    pub sets: Option<Vec<String>>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario: Scenario = toml::from_str(text)?;
        if scenario.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(scenario.version));
        }
        scenario.timeline()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        Scenario::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// A clean provider with `count` generated records dated `start`.
    pub fn synthetic(count: usize, start: DateTime<Utc>) -> Scenario {
        Scenario {
            version: SCENARIO_VERSION,
            name: format!("synthetic-{count}"),
            base_url: default_base_url(),
            repository_name: default_repository_name(),
            deleted_policy: DeletedPolicy::Persistent,
            page_size: default_page_size(),
            start,
            delay_ms: 0,
            generate: Some(Generate {
                count,
                at: start,
                id_prefix: default_id_prefix(),
                sets: Vec::new(),
                url_pool: None,
            }),
            records: Vec::new(),
            events: Vec::new(),
            faults: Vec::new(),
        }
    }

    pub fn generated_elements(g: &Generate, i: usize) -> Vec<DcElement> {
        let url_n = match g.url_pool {
            Some(pool) if pool > 0 => (i - 1) % pool + 1,
            _ => i,
        };
        vec![
            DcElement::new(DcName::Title, format!("Simulated record {i}")),
            DcElement::new(DcName::Creator, format!("Author {}", i % 7)),
            DcElement::new(DcName::Subject, format!("topic{}", i % 5)),
            DcElement::new(
                DcName::Description,
                format!("Synthetic description number {i}."),
            ),
            DcElement::new(DcName::Identifier, format!("http://sim.example.org/items/{url_n}")),
            DcElement::new(DcName::Type, "Text"),
            DcElement::new(DcName::Language, "en"),
        ]
    }

    pub fn generated_id(g: &Generate, i: usize) -> String {
        format!("{}{:05}", g.id_prefix, i)
    }

    /// Every insert/update/delete, sorted by instant (stable for ties), after
    /// checking that each record's own events are strictly ordered and
    /// consistent.
    pub fn timeline(&self) -> Result<Vec<TimelineEvent>, ScenarioError> {
        if self.page_size == 0 {
            return Err(ScenarioError::Invalid("page_size must be at least 1".into()));
        }
        let mut events = Vec::new();
        if let Some(g) = &self.generate {
            for i in 1..=g.count {
                let sets = if g.sets.is_empty() {
                    Vec::new()
                } else {
                    vec![g.sets[(i - 1) % g.sets.len()].clone()]
                };
                events.push(TimelineEvent {
                    at: g.at,
                    kind: EventKind::Insert,
                    id: Scenario::generated_id(g, i),
                    elements: Some(Scenario::generated_elements(g, i)),
                    sets: Some(sets),
                });
            }
        }
        for r in &self.records {
            let elements = r
                .elements
                .iter()
                .map(ElementSpec::to_element)
                .collect::<Result<Vec<_>, _>>()?;
            events.push(TimelineEvent {
                at: r.at,
                kind: EventKind::Insert,
                id: r.id.clone(),
                elements: Some(elements),
                sets: Some(r.sets.clone()),
            });
        }
        for e in &self.events {
            let elements = e
                .elements
                .as_ref()
                .map(|els| els.iter().map(ElementSpec::to_element).collect::<Result<Vec<_>, _>>())
                .transpose()?;
            if e.kind == EventKind::Insert && elements.is_none() {
                return Err(ScenarioError::Invalid(format!("insert of {} without elements", e.id)));
            }
            events.push(TimelineEvent {
                at: e.at,
                kind: e.kind,
                id: e.id.clone(),
                elements,
                sets: e.sets.clone(),
            });
        }
        events.sort_by_key(|e| e.at);

        // per-record consistency
        let mut last: BTreeMap<&str, (DateTime<Utc>, bool)> = BTreeMap::new();
        for e in &events {
            match (last.get(e.id.as_str()), e.kind) {
                (Some((t, _)), _) if *t >= e.at => {
                    return Err(ScenarioError::Invalid(format!(
                        "events for {} are not strictly ordered at {}",
                        e.id, e.at
                    )))
                }
                (Some((_, true)), EventKind::Insert) => {
                    return Err(ScenarioError::Invalid(format!("{} inserted twice", e.id)))
                }
                (None, EventKind::Update | EventKind::Delete) | (Some((_, false)), EventKind::Update | EventKind::Delete) => {
                    return Err(ScenarioError::Invalid(format!(
                        "{:?} of {} which does not exist at {}",
                        e.kind, e.id, e.at
                    )))
                }
                _ => {}
            }
            let alive = e.kind != EventKind::Delete;
            last.insert(e.id.as_str(), (e.at, alive));
        }
        Ok(events)
    }
}
