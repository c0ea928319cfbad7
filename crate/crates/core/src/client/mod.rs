//! The harvesting client.
//!
//! Issues protocol requests, follows resumption-token chains, runs full and
//! incremental harvests, and sorts every failure into one of three
//! categories.

pub mod transport;

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::datestamp::format_datestamp;
use crate::model::{
    parse_response, DeletedPolicy, Granularity, MetadataRecord, OaiResponse, ProtocolError,
    ProtocolErrorCode, QualifiedProfile, RecordHeader, ResponseBody, ResponseError,
    ResumptionToken,
};
pub use transport::{
    HttpResponse, HttpTransport, LocalTransport, OaiHandler, Transport, TransportError,
    TransportErrorKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    Transient,
    ProtocolViolation,
    DataFormat,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 3] = [
        FailureCategory::Transient,
        FailureCategory::ProtocolViolation,
        FailureCategory::DataFormat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureCategory::Transient => "transient",
            FailureCategory::ProtocolViolation => "protocol_violation",
            FailureCategory::DataFormat => "data_format",
        }
    }
}

impl std::fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Everything that can go wrong on one request.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HarvestError {
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("{0}")]
    Response(#[from] ResponseError),
    #[error("provider answered {verb} with an unexpected {found} body")]
    UnexpectedBody { verb: String, found: String },
    #[error("resumption token '{0}' was returned twice")]
    RepeatedToken(String),
}

/// Total, deterministic mapping from an error to its category.
pub fn classify_failure(error: &HarvestError) -> FailureCategory {
    match error {
        HarvestError::Transport(_) => FailureCategory::Transient,
        HarvestError::HttpStatus(s) if *s >= 500 => FailureCategory::Transient,
        HarvestError::HttpStatus(_) => FailureCategory::ProtocolViolation,
        HarvestError::Response(r) => match r {
            ResponseError::WellFormedness(_)
            | ResponseError::Schema { .. }
            | ResponseError::Datestamp { .. } => FailureCategory::DataFormat,
            ResponseError::Protocol(_) | ResponseError::MissingElement { .. } => {
                FailureCategory::ProtocolViolation
            }
        },
        HarvestError::UnexpectedBody { .. } | HarvestError::RepeatedToken(_) => {
            FailureCategory::ProtocolViolation
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub base_url: String,
    pub repository_name: String,
    pub deleted_policy: DeletedPolicy,
    pub earliest_datestamp: DateTime<Utc>,
    pub granularity: Granularity,
    /// The provider's clock when it answered Identify.
    pub identified_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{category}: {error}")]
pub struct HarvestFailure {
    pub category: FailureCategory,
    pub error: HarvestError,
}

impl From<HarvestError> for HarvestFailure {
    fn from(error: HarvestError) -> Self {
        HarvestFailure {
            category: classify_failure(&error),
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestConfig {
    pub collection_id: String,
    pub base_url: String,
    #[serde(default)]
    pub set_spec: Option<String>,
    pub format_prefix: String,
    pub schedule_days: u32,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HarvestMode {
    Full,
    Incremental { since: DateTime<Utc> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "category", rename_all = "snake_case")]
pub enum HarvestOutcome {
    Success,
    Failure(FailureCategory),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarvestResult {
    /// On failure these are whatever pages arrived before the error, kept for
    /// diagnostics only.
    pub records: Vec<MetadataRecord>,
    pub pages_fetched: u32,
    pub outcome: HarvestOutcome,
    pub failure_detail: String,
    pub completed_through: Option<DateTime<Utc>>,
    /// Identifiers seen more than once across pages (last occurrence kept).
    pub duplicates: Vec<String>,
}

impl HarvestResult {
    pub fn is_success(&self) -> bool {
        self.outcome == HarvestOutcome::Success
    }

    pub fn failure_category(&self) -> Option<FailureCategory> {
        match self.outcome {
            HarvestOutcome::Failure(c) => Some(c),
            HarvestOutcome::Success => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Extra tries after the first, for transient errors only.
    pub retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            retries: 3,
            base_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    pub fn immediate(retries: u32) -> Self {
        RetryPolicy {
            retries,
            base_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

// guards against providers that page forever with fresh tokens
const MAX_PAGES: u32 = 100_000;

#[derive(Clone)]
pub struct HarvestClient {
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    profile: Arc<QualifiedProfile>,
}

impl HarvestClient {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        HarvestClient {
            transport,
            retry: RetryPolicy::default(),
            profile: Arc::new(QualifiedProfile::default()),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_profile(mut self, profile: QualifiedProfile) -> Self {
        self.profile = Arc::new(profile);
        self
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    pub fn profile(&self) -> &QualifiedProfile {
        &self.profile
    }

    /// One HTTP exchange with transient retries; returns the raw body.
    pub fn fetch_raw(
        &self,
        base_url: &str,
        params: &[(String, String)],
    ) -> Result<Vec<u8>, HarvestError> {
        let mut attempt = 0;
        loop {
            let result = match self.transport.get(base_url, params) {
                Ok(r) if r.status == 200 => Ok(r.body),
                Ok(r) => Err(HarvestError::HttpStatus(r.status)),
                Err(e) => Err(HarvestError::Transport(e)),
            };
            match result {
                Err(e) if classify_failure(&e) == FailureCategory::Transient
                    && attempt < self.retry.retries =>
                {
                    let delay = self.retry.delay(attempt);
                    log::warn!("{base_url}: {e}; retrying in {delay:?}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// One request, parsed. Protocol errors stay in the body.
    pub fn request(
        &self,
        base_url: &str,
        params: &[(String, String)],
        format_prefix: &str,
    ) -> Result<OaiResponse, HarvestError> {
        let body = self.fetch_raw(base_url, params)?;
        Ok(parse_response(&body, format_prefix, &self.profile)?)
    }

    pub fn identify(&self, base_url: &str) -> Result<ProviderInfo, HarvestFailure> {
        let response = self.request(base_url, &[param("verb", "Identify")], "")?;
        match response.body {
            ResponseBody::Identify(info) => Ok(ProviderInfo {
                base_url: base_url.to_string(),
                repository_name: info.repository_name,
                deleted_policy: info.deleted_record,
                earliest_datestamp: info.earliest_datestamp,
                granularity: info.granularity,
                identified_at: response.response_date,
            }),
            other => Err(unexpected("Identify", &other).into()),
        }
    }

    pub fn get_record(
        &self,
        base_url: &str,
        identifier: &str,
        format_prefix: &str,
    ) -> Result<MetadataRecord, HarvestFailure> {
        let params = [
            param("verb", "GetRecord"),
            param("identifier", identifier),
            param("metadataPrefix", format_prefix),
        ];
        let response = self.request(base_url, &params, format_prefix)?;
        match response.body {
            ResponseBody::GetRecord(r) => Ok(r),
            other => Err(unexpected("GetRecord", &other).into()),
        }
    }

    /// Stream records of a ListRecords chain.
    pub fn list_records(&self, request: ListRequest) -> RecordStream<'_> {
        RecordStream {
            client: self,
            request,
            next_token: None,
            started: false,
            done: false,
            buffer: std::collections::VecDeque::new(),
            seen_tokens: HashSet::new(),
            pages_fetched: 0,
            last_response_date: None,
        }
    }

    /// Collect a whole ListIdentifiers chain.
    pub fn list_identifiers(&self, request: &ListRequest) -> Result<ListedHeaders, HarvestFailure> {
        let mut out = ListedHeaders::default();
        let mut token: Option<String> = None;
        let mut seen = HashSet::new();
        loop {
            let params = request.params("ListIdentifiers", token.as_deref());
            let response = self.request(&request.base_url, &params, &request.format_prefix)?;
            out.pages += 1;
            out.response_date = Some(response.response_date);
            let next = match response.body {
                ResponseBody::ListIdentifiers { headers, token } => {
                    out.headers.extend(headers);
                    token
                }
                ResponseBody::Errors(errs) if only_no_match(&errs) => None,
                other => return Err(unexpected("ListIdentifiers", &other).into()),
            };
            match next_token(next, &mut seen)? {
                Some(t) => token = Some(t),
                None => return Ok(out),
            }
            if out.pages >= MAX_PAGES {
                return Ok(out);
            }
        }
    }

    pub fn harvest(&self, config: &HarvestConfig, mode: HarvestMode) -> HarvestResult {
        let from = match mode {
            HarvestMode::Full => None,
            HarvestMode::Incremental { since } => Some(since),
        };
        let request = ListRequest {
            base_url: config.base_url.clone(),
            format_prefix: config.format_prefix.clone(),
            set: config.set_spec.clone(),
            from,
            until: None,
        };
        let mut stream = self.list_records(request);
        let mut records: Vec<MetadataRecord> = Vec::new();
        let mut failure = None;
        for item in stream.by_ref() {
            match item {
                Ok(r) => records.push(r),
                Err(f) => {
                    failure = Some(f);
                    break;
                }
            }
        }
        let pages_fetched = stream.pages_fetched();
        match failure {
            Some(f) => HarvestResult {
                records,
                pages_fetched,
                outcome: HarvestOutcome::Failure(f.category),
                failure_detail: f.error.to_string(),
                completed_through: None,
                duplicates: Vec::new(),
            },
            None => {
                let (records, duplicates) = keep_last(records);
                for id in &duplicates {
                    log::warn!("{}: record {id} repeated across pages", config.base_url);
                }
                HarvestResult {
                    records,
                    pages_fetched,
                    outcome: HarvestOutcome::Success,
                    failure_detail: String::new(),
                    completed_through: stream.last_response_date(),
                    duplicates,
                }
            }
        }
    }
}

fn param(k: &str, v: &str) -> (String, String) {
    (k.to_string(), v.to_string())
}

fn only_no_match(errors: &[ProtocolError]) -> bool {
    !errors.is_empty()
        && errors
            .iter()
            .all(|e| e.code == ProtocolErrorCode::NoRecordsMatch)
}

fn unexpected(verb: &str, body: &ResponseBody) -> HarvestError {
    if let ResponseBody::Errors(errs) = body {
        if let Some(e) = errs.first() {
            return HarvestError::Response(ResponseError::Protocol(e.clone()));
        }
    }
    let found = match body {
        ResponseBody::Identify(_) => "Identify",
        ResponseBody::ListMetadataFormats(_) => "ListMetadataFormats",
        ResponseBody::ListSets { .. } => "ListSets",
        ResponseBody::GetRecord(_) => "GetRecord",
        ResponseBody::ListIdentifiers { .. } => "ListIdentifiers",
        ResponseBody::ListRecords { .. } => "ListRecords",
        ResponseBody::Errors(_) => "error",
    };
    HarvestError::UnexpectedBody {
        verb: verb.to_string(),
        found: found.to_string(),
    }
}

fn next_token(
    token: Option<ResumptionToken>,
    seen: &mut HashSet<String>,
) -> Result<Option<String>, HarvestError> {
    match token {
        Some(t) if !t.is_terminal() => {
            if !seen.insert(t.token.clone()) {
                return Err(HarvestError::RepeatedToken(t.token));
            }
            Ok(Some(t.token))
        }
        _ => Ok(None),
    }
}

/// Last occurrence wins; the position is that of the last occurrence too.
fn keep_last(records: Vec<MetadataRecord>) -> (Vec<MetadataRecord>, Vec<String>) {
    let mut last: HashMap<&str, usize> = HashMap::new();
    for (i, r) in records.iter().enumerate() {
        last.insert(r.identifier(), i);
    }
    if last.len() == records.len() {
        return (records, Vec::new());
    }
    let keep: HashSet<usize> = last.values().copied().collect();
    let mut duplicates: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !keep.contains(&i) && seen.insert(r.identifier().to_string()) {
            duplicates.push(r.identifier().to_string());
        }
    }
    let out = records
        .into_iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r)
        .collect();
    (out, duplicates)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListRequest {
    pub base_url: String,
    pub format_prefix: String,
    pub set: Option<String>,
    pub from: Option<DateTime<Utc>>,
    pub until: Option<DateTime<Utc>>,
}

impl ListRequest {
    pub fn new(base_url: impl Into<String>, format_prefix: impl Into<String>) -> Self {
        ListRequest {
            base_url: base_url.into(),
            format_prefix: format_prefix.into(),
            set: None,
            from: None,
            until: None,
        }
    }

    pub fn window(mut self, from: Option<DateTime<Utc>>, until: Option<DateTime<Utc>>) -> Self {
        self.from = from;
        self.until = until;
        self
    }

    pub fn params(&self, verb: &str, token: Option<&str>) -> Vec<(String, String)> {
        let mut out = vec![param("verb", verb)];
        if let Some(t) = token {
            out.push(param("resumptionToken", t));
            return out;
        }
        out.push(param("metadataPrefix", &self.format_prefix));
        if let Some(s) = &self.set {
            out.push(param("set", s));
        }
        if let Some(f) = &self.from {
            out.push(param("from", &format_datestamp(f)));
        }
        if let Some(u) = &self.until {
            out.push(param("until", &format_datestamp(u)));
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ListedHeaders {
    pub headers: Vec<RecordHeader>,
    pub pages: u32,
    pub response_date: Option<DateTime<Utc>>,
}

/// Records across all pages of a ListRecords chain, fetched lazily. The
/// stream ends after the first failure.
pub struct RecordStream<'a> {
    client: &'a HarvestClient,
    request: ListRequest,
    next_token: Option<String>,
    started: bool,
    done: bool,
    buffer: std::collections::VecDeque<MetadataRecord>,
    seen_tokens: HashSet<String>,
    pages_fetched: u32,
    last_response_date: Option<DateTime<Utc>>,
}

impl RecordStream<'_> {
    pub fn pages_fetched(&self) -> u32 {
        self.pages_fetched
    }

    /// responseDate of the last page fetched.
    pub fn last_response_date(&self) -> Option<DateTime<Utc>> {
        self.last_response_date
    }

    fn fetch_page(&mut self) -> Result<(), HarvestFailure> {
        let params = self
            .request
            .params("ListRecords", self.next_token.as_deref());
        let response = self.client.request(
            &self.request.base_url,
            &params,
            &self.request.format_prefix,
        )?;
        self.pages_fetched += 1;
        self.last_response_date = Some(response.response_date);
        let token = match response.body {
            ResponseBody::ListRecords { records, token } => {
                self.buffer.extend(records);
                token
            }
            ResponseBody::Errors(errs) if only_no_match(&errs) => None,
            other => return Err(unexpected("ListRecords", &other).into()),
        };
        self.next_token = next_token(token, &mut self.seen_tokens)?;
        if self.next_token.is_none() || self.pages_fetched >= MAX_PAGES {
            self.done = true;
        }
        Ok(())
    }
}

impl Iterator for RecordStream<'_> {
    type Item = Result<MetadataRecord, HarvestFailure>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(r) = self.buffer.pop_front() {
                return Some(Ok(r));
            }
            if self.done && self.started {
                return None;
            }
            self.started = true;
            if let Err(f) = self.fetch_page() {
                self.done = true;
                self.buffer.clear();
                return Some(Err(f));
            }
        }
    }
}
