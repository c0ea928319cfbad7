//! Injectable provider faults and what each one is expected to trip.

use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use crate::client::FailureCategory;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// The connection drops before any response.
    Disconnect,
    Http5xx {
        #[serde(default = "default_status")]
        status: u16,
    },
    /// These bytes are spliced into the target record's title.
    InvalidUtf8 {
        #[serde(default = "default_bad_bytes")]
        bytes: Vec<u8>,
    },
    /// Any resumption-token request is answered with badArgument.
    BrokenToken,
    /// The target record's header datestamp is replaced with this text.
    WrongDatestamp {
        #[serde(default = "default_bad_date")]
        text: String,
    },
    /// A nested element inside the target record's Dublin Core payload.
    SchemaInvalidRecord,
    /// Every second request for the same window loses the window's last
    /// record.
    NonIdempotentWindow,
    /// Claims persistent deletes but leaves tombstones out of any list
    /// response that carries a `from` bound.
    ForgottenDeletes,
    /// Every identifier is replaced by the same landing-page URL.
    SplashPageUrls { url: String },
    /// A raw `&` inside an identifier.
    UnescapedAmpersand,
    /// Identify without repositoryName.
    OmitRepositoryName,
}

fn default_status() -> u16 {
    503
}

fn default_bad_bytes() -> Vec<u8> {
    vec![0xC0, 0x80]
}

fn default_bad_date() -> String {
    "01-08-2005".into()
}

/// What a fired fault should be diagnosed as.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagnosis {
    /// A harvest fails with this category.
    Category(FailureCategory),
    /// The validator fails this check.
    Check(&'static str),
    /// Nothing fails; the resource index shows the collapse.
    SplashMerge,
}

impl Fault {
    pub fn name(&self) -> &'static str {
        match self {
            Fault::Disconnect => "disconnect",
            Fault::Http5xx { .. } => "http5xx",
            Fault::InvalidUtf8 { .. } => "invalid_utf8",
            Fault::BrokenToken => "broken_token",
            Fault::WrongDatestamp { .. } => "wrong_datestamp",
            Fault::SchemaInvalidRecord => "schema_invalid_record",
            Fault::NonIdempotentWindow => "non_idempotent_window",
            Fault::ForgottenDeletes => "forgotten_deletes",
            Fault::SplashPageUrls { .. } => "splash_page_urls",
            Fault::UnescapedAmpersand => "unescaped_ampersand",
            Fault::OmitRepositoryName => "omit_repository_name",
        }
    }

    /// The documented fault → diagnosis table.
    pub fn expected(&self) -> Diagnosis {
        match self {
            Fault::Disconnect | Fault::Http5xx { .. } => {
                Diagnosis::Category(FailureCategory::Transient)
            }
            Fault::InvalidUtf8 { .. } => Diagnosis::Check("utf8"),
            Fault::BrokenToken => Diagnosis::Check("resumption_token"),
            Fault::WrongDatestamp { .. } => Diagnosis::Check("datestamp"),
            Fault::SchemaInvalidRecord => Diagnosis::Check("schema"),
            Fault::NonIdempotentWindow => Diagnosis::Check("idempotency"),
            Fault::ForgottenDeletes => Diagnosis::Check("deleted_policy"),
            Fault::UnescapedAmpersand => Diagnosis::Check("xml_encoding"),
            Fault::OmitRepositoryName => Diagnosis::Check("identify"),
            Fault::SplashPageUrls { .. } => Diagnosis::SplashMerge,
        }
    }

    /// Category a ListRecords harvest sees when this fault fires during it,
    /// if any.
    pub fn harvest_category(&self) -> Option<FailureCategory> {
        match self {
            Fault::Disconnect | Fault::Http5xx { .. } => Some(FailureCategory::Transient),
            Fault::BrokenToken => Some(FailureCategory::ProtocolViolation),
            Fault::InvalidUtf8 { .. }
            | Fault::WrongDatestamp { .. }
            | Fault::SchemaInvalidRecord
            | Fault::UnescapedAmpersand => Some(FailureCategory::DataFormat),
            Fault::NonIdempotentWindow
            | Fault::ForgottenDeletes
            | Fault::SplashPageUrls { .. }
            | Fault::OmitRepositoryName => None,
        }
    }

    /// Verbs whose responses this fault can affect.
    pub fn applies_to(&self, verb: &str) -> bool {
        match self {
            Fault::Disconnect | Fault::Http5xx { .. } => true,
            Fault::InvalidUtf8 { .. }
            | Fault::SchemaInvalidRecord
            | Fault::UnescapedAmpersand
            | Fault::SplashPageUrls { .. } => matches!(verb, "ListRecords" | "GetRecord"),
            Fault::WrongDatestamp { .. } => {
                matches!(verb, "ListRecords" | "GetRecord" | "ListIdentifiers")
            }
            Fault::BrokenToken | Fault::NonIdempotentWindow | Fault::ForgottenDeletes => {
                matches!(verb, "ListRecords" | "ListIdentifiers")
            }
            Fault::OmitRepositoryName => verb == "Identify",
        }
    }
}

/// Which requests a fault fires on. All present conditions must hold; of
/// the matching requests the first `skip` are spared and then `times` fire
/// (all of them when `times` is absent).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    #[serde(default)]
    pub verb: Option<String>,
    /// 1-based page within a list.
    #[serde(default)]
    pub page: Option<u32>,
    /// Only responses that contain this record; content faults target it.
    #[serde(default)]
    pub record: Option<String>,
    #[serde(default)]
    pub skip: u32,
    #[serde(default)]
    pub times: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(flatten)]
    pub fault: Fault,
    #[serde(default)]
    pub trigger: Trigger,
    #[serde(skip)]
    matched: AtomicU32,
}

impl Clone for FaultSpec {
    fn clone(&self) -> Self {
        FaultSpec {
            fault: self.fault.clone(),
            trigger: self.trigger.clone(),
            matched: AtomicU32::new(0),
        }
    }
}

impl PartialEq for FaultSpec {
    fn eq(&self, other: &Self) -> bool {
        self.fault == other.fault && self.trigger == other.trigger
    }
}

/// What the simulator knows about a request when deciding on faults.
pub struct RequestView<'a> {
    pub verb: &'a str,
    pub page: u32,
    pub record_ids: &'a [String],
}

impl FaultSpec {
    pub fn new(fault: Fault) -> Self {
        FaultSpec {
            fault,
            trigger: Trigger::default(),
            matched: AtomicU32::new(0),
        }
    }

    pub fn with_trigger(mut self, trigger: Trigger) -> Self {
        self.trigger = trigger;
        self
    }

    pub fn matches(&self, view: &RequestView<'_>) -> bool {
        if !self.fault.applies_to(view.verb) {
            return false;
        }
        let t = &self.trigger;
        t.verb.as_deref().is_none_or(|v| v == view.verb)
            && t.page.is_none_or(|p| p == view.page)
            && t
                .record
                .as_ref()
                .is_none_or(|r| view.record_ids.iter().any(|id| id == r))
    }

    /// Count a matching request and say whether the fault fires on it.
    pub fn fire(&self, view: &RequestView<'_>) -> bool {
        if !self.matches(view) {
            return false;
        }
        let n = self.matched.fetch_add(1, Ordering::SeqCst) + 1;
        n > self.trigger.skip
            && self
                .trigger
                .times
                .is_none_or(|times| n <= self.trigger.skip + times)
    }

    pub fn reset(&self) {
        self.matched.store(0, Ordering::SeqCst);
    }
}
