//! Provider conformance checks.
//!
//! Runs a fixed suite against a provider before registration, and again as a
//! recurring health probe. Every check produces one result; warnings are
//! extra results with `severity = warning`. Record-level checks look at the
//! first two list pages plus one more page picked with a seeded RNG.

use std::collections::BTreeSet;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{
    classify_failure, FailureCategory, HarvestClient, HarvestError, HarvestFailure, ListRequest,
    ProviderInfo,
};
use crate::model::response::parse_record_element;
use crate::model::{
    parse_response, DcName, DeletedPolicy, Granularity, ProtocolErrorCode, QualifiedProfile,
    ResponseBody, ResponseError, ResumptionToken,
};
use crate::xml::{self, XmlError};

pub const REPORT_SCHEMA: &str = "oaiagg.validation/1";

pub const CHECK_IDS: [&str; 8] = [
    "identify",
    "utf8",
    "schema",
    "datestamp",
    "resumption_token",
    "idempotency",
    "xml_encoding",
    "deleted_policy",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check_id: String,
    pub severity: Severity,
    pub passed: bool,
    pub category: FailureCategory,
    pub evidence: String,
}

impl CheckResult {
    fn pass(check_id: &str, category: FailureCategory, evidence: impl Into<String>) -> Self {
        CheckResult {
            check_id: check_id.to_string(),
            severity: Severity::Error,
            passed: true,
            category,
            evidence: evidence.into(),
        }
    }

    fn fail(check_id: &str, category: FailureCategory, evidence: impl Into<String>) -> Self {
        let evidence = evidence.into();
        debug_assert!(!evidence.is_empty());
        CheckResult {
            check_id: check_id.to_string(),
            severity: Severity::Error,
            passed: false,
            category,
            evidence,
        }
    }

    fn warn(check_id: &str, category: FailureCategory, evidence: impl Into<String>) -> Self {
        CheckResult {
            severity: Severity::Warning,
            ..CheckResult::fail(check_id, category, evidence)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema: String,
    pub provider: String,
    pub format_prefix: String,
    pub checks: Vec<CheckResult>,
    pub verdict: Verdict,
    pub generated_at: DateTime<Utc>,
}

impl ValidationReport {
    fn new(provider: &str, format_prefix: &str, checks: Vec<CheckResult>, at: DateTime<Utc>) -> Self {
        let verdict = if checks
            .iter()
            .all(|c| c.passed || c.severity == Severity::Warning)
        {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        ValidationReport {
            schema: REPORT_SCHEMA.to_string(),
            provider: provider.to_string(),
            format_prefix: format_prefix.to_string(),
            checks,
            verdict,
            generated_at: at,
        }
    }

    pub fn errors(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.severity == Severity::Error)
    }

    pub fn failed(&self, check_id: &str) -> bool {
        self.errors().any(|c| c.check_id == check_id)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "validation of {} ({}): {}\n",
            self.provider,
            self.format_prefix,
            match self.verdict {
                Verdict::Pass => "PASS",
                Verdict::Fail => "FAIL",
            }
        );
        for c in &self.checks {
            let status = match (c.passed, c.severity) {
                (true, _) => "ok  ",
                (false, Severity::Error) => "FAIL",
                (false, Severity::Warning) => "warn",
            };
            out.push_str(&format!("  [{status}] {:<17} {}", c.check_id, c.category));
            if !c.evidence.is_empty() {
                out.push_str(&format!("  {}", c.evidence));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct ValidatorOptions {
    pub format_prefix: String,
    pub seed: u64,
}

impl Default for ValidatorOptions {
    fn default() -> Self {
        ValidatorOptions {
            format_prefix: "oai_dc".into(),
            seed: 0x5eed,
        }
    }
}

/// Accumulates one result per check id, first failure wins.
struct Findings {
    results: Vec<CheckResult>,
    warnings: Vec<CheckResult>,
    transient: Option<CheckResult>,
}

impl Findings {
    fn new() -> Self {
        Findings {
            results: Vec::new(),
            warnings: Vec::new(),
            transient: None,
        }
    }

    fn failed(&self, id: &str) -> bool {
        self.results.iter().any(|r| r.check_id == id && !r.passed)
    }

    fn fail(&mut self, id: &str, category: FailureCategory, evidence: String) {
        if category == FailureCategory::Transient {
            if self.transient.is_none() {
                self.transient = Some(CheckResult::fail(
                    "reachability",
                    category,
                    format!("during {id}: {evidence}"),
                ));
            }
            return;
        }
        if !self.failed(id) {
            self.results.retain(|r| r.check_id != id);
            self.results.push(CheckResult::fail(id, category, evidence));
        }
    }

    fn pass(&mut self, id: &str, category: FailureCategory, evidence: &str) {
        if !self.results.iter().any(|r| r.check_id == id) {
            self.results.push(CheckResult::pass(id, category, evidence));
        }
    }

    fn warn(&mut self, id: &str, category: FailureCategory, evidence: String) {
        self.warnings.push(CheckResult::warn(id, category, evidence));
    }

    fn finish(mut self) -> Vec<CheckResult> {
        let default_category = |id: &str| match id {
            "identify" | "resumption_token" | "idempotency" | "deleted_policy" => {
                FailureCategory::ProtocolViolation
            }
            _ => FailureCategory::DataFormat,
        };
        for id in CHECK_IDS {
            self.pass(id, default_category(id), "");
        }
        let mut out: Vec<CheckResult> = CHECK_IDS
            .iter()
            .map(|id| {
                self.results
                    .iter()
                    .find(|r| r.check_id == *id)
                    .cloned()
                    .expect("filled above")
            })
            .collect();
        out.extend(self.warnings);
        out.extend(self.transient);
        out
    }
}

/// The check a parse error belongs to.
fn check_for(error: &ResponseError) -> &'static str {
    match error {
        ResponseError::WellFormedness(XmlError::InvalidUtf8 { .. } | XmlError::IllegalChar { .. }) => {
            "utf8"
        }
        ResponseError::WellFormedness(XmlError::Escape { .. }) => "xml_encoding",
        ResponseError::WellFormedness(XmlError::Syntax { .. }) => "schema",
        ResponseError::Datestamp { .. } => "datestamp",
        ResponseError::Schema { .. } | ResponseError::MissingElement { .. } => "schema",
        ResponseError::Protocol(_) => "schema",
    }
}

fn evidence_for(error: &ResponseError, body: &[u8], location: &str) -> String {
    match error {
        ResponseError::WellFormedness(x) => {
            let at = x.offset().min(body.len());
            let start = at.saturating_sub(24);
            let end = (at + 24).min(body.len());
            format!(
                "{location}: {x}; context {:?}",
                String::from_utf8_lossy(&body[start..end])
            )
        }
        other => format!("{location}: {other}"),
    }
}

fn record_harvest_error(f: &mut Findings, check: &str, err: &HarvestError, body: Option<&[u8]>, location: &str) {
    let category = classify_failure(err);
    match err {
        HarvestError::Response(r @ ResponseError::Protocol(_)) => {
            f.fail(check, category, evidence_for(r, body.unwrap_or(&[]), location));
        }
        HarvestError::Response(r) => {
            f.fail(check_for(r), category, evidence_for(r, body.unwrap_or(&[]), location));
        }
        other => f.fail(check, category, format!("{location}: {other}")),
    }
}

/// Run the whole suite.
pub fn validate_provider(
    client: &HarvestClient,
    base_url: &str,
    options: &ValidatorOptions,
    now: DateTime<Utc>,
) -> ValidationReport {
    let prefix = options.format_prefix.as_str();
    let mut f = Findings::new();

    // (1) Identify
    let info = match identify_check(client, base_url, &mut f) {
        Ok(info) => info,
        Err(unreachable) => {
            return ValidationReport::new(base_url, prefix, vec![unreachable], now);
        }
    };

    // (2)(3)(4)(7) over sampled pages, (5) along the way
    sample_pages(client, base_url, prefix, options.seed, &mut f);

    // (6)
    idempotency_check(client, base_url, prefix, info.as_ref(), now, &mut f);

    // (8)
    deleted_policy_check(client, base_url, prefix, info.as_ref(), options.seed, &mut f);

    ValidationReport::new(base_url, prefix, f.finish(), now)
}

fn identify_check(
    client: &HarvestClient,
    base_url: &str,
    f: &mut Findings,
) -> Result<Option<ProviderInfo>, CheckResult> {
    let params = [("verb".to_string(), "Identify".to_string())];
    let body = match client.fetch_raw(base_url, &params) {
        Ok(b) => b,
        Err(e) => {
            let category = classify_failure(&e);
            if category == FailureCategory::Transient {
                return Err(CheckResult::fail(
                    "reachability",
                    category,
                    format!("Identify: {e}"),
                ));
            }
            f.fail("identify", category, format!("Identify: {e}"));
            return Ok(None);
        }
    };
    let parsed = parse_response(&body, "", client.profile()).map_err(HarvestError::from);
    let info = match parsed {
        Ok(r) => match r.body {
            ResponseBody::Identify(i) => Ok(ProviderInfo {
                base_url: base_url.to_string(),
                repository_name: i.repository_name,
                deleted_policy: i.deleted_record,
                earliest_datestamp: i.earliest_datestamp,
                granularity: i.granularity,
                identified_at: r.response_date,
            }),
            ResponseBody::Errors(errs) => Err(HarvestError::Response(ResponseError::Protocol(errs[0].clone()))),
            _ => Err(HarvestError::UnexpectedBody {
                verb: "Identify".into(),
                found: "other".into(),
            }),
        },
        Err(e) => Err(e),
    };
    match info {
        Ok(info) => {
            if info.granularity == Granularity::Day {
                f.warn(
                    "identify",
                    FailureCategory::DataFormat,
                    "granularity is YYYY-MM-DD; incremental windows will be coarse".into(),
                );
            }
            f.pass("identify", FailureCategory::ProtocolViolation, "");
            Ok(Some(info))
        }
        Err(error) => {
            let evidence = match &error {
                HarvestError::Response(r) => evidence_for(r, &body, "Identify"),
                other => format!("Identify: {other}"),
            };
            f.fail("identify", classify_failure(&error), evidence);
            Ok(None)
        }
    }
}

struct Page {
    number: u32,
    body: Vec<u8>,
    token: Option<ResumptionToken>,
    complete_list_size: Option<u64>,
}

fn fetch_page(
    client: &HarvestClient,
    base_url: &str,
    prefix: &str,
    token: Option<&str>,
    number: u32,
    f: &mut Findings,
    check: &str,
) -> Option<Page> {
    let req = ListRequest::new(base_url, prefix);
    let params = req.params("ListRecords", token);
    let location = format!("ListRecords page {number}");
    let body = match client.fetch_raw(base_url, &params) {
        Ok(b) => b,
        Err(e) => {
            record_harvest_error(f, check, &e, None, &location);
            return None;
        }
    };
    inspect_page(&body, prefix, client.profile(), &location, f);
    let parsed = parse_response(&body, prefix, client.profile()).ok()?;
    match parsed.body {
        ResponseBody::ListRecords { token, .. } => Some(Page {
            number,
            complete_list_size: token.as_ref().and_then(|t| t.complete_list_size),
            token: token.filter(|t| !t.is_terminal()),
            body,
        }),
        ResponseBody::Errors(errs) => {
            if errs.iter().all(|e| e.code == ProtocolErrorCode::NoRecordsMatch) && number == 1 {
                None
            } else {
                let e = &errs[0];
                f.fail(
                    check,
                    FailureCategory::ProtocolViolation,
                    format!("{location}: provider answered {}: {}", e.code, e.message),
                );
                None
            }
        }
        _ => {
            f.fail(
                "schema",
                FailureCategory::ProtocolViolation,
                format!("{location}: response is not a ListRecords body"),
            );
            None
        }
    }
}

/// Record-level checks on one page of raw bytes.
fn inspect_page(
    body: &[u8],
    prefix: &str,
    profile: &QualifiedProfile,
    location: &str,
    f: &mut Findings,
) {
    if let Err(e) = xml::check_text_bytes(body) {
        f.fail("utf8", FailureCategory::DataFormat, format!("{location}: {e}"));
        return;
    }
    let root = match xml::parse_document(body) {
        Ok(r) => r,
        Err(e) => {
            let err = ResponseError::WellFormedness(e);
            f.fail(check_for(&err), FailureCategory::DataFormat, evidence_for(&err, body, location));
            return;
        }
    };
    // per-record so one bad record does not hide the checks on the others
    let container = root.child("ListRecords").or_else(|| root.child("GetRecord"));
    if let Some(container) = container {
        for rec in container.children_named("record") {
            match parse_record_element(rec, body, prefix, profile) {
                Ok(r) => {
                    for (severity, evidence) in encoding_findings(&r.elements) {
                        let evidence = format!("{location}, record {}: {evidence}", r.identifier());
                        match severity {
                            Severity::Error => f.fail("xml_encoding", FailureCategory::DataFormat, evidence),
                            Severity::Warning => f.warn("xml_encoding", FailureCategory::DataFormat, evidence),
                        }
                    }
                    if let Some(about) = rec.child("about") {
                        if about.elements().count() != 1 {
                            f.warn(
                                "schema",
                                FailureCategory::DataFormat,
                                format!("{location}, record {}: <about> must hold exactly one element", r.identifier()),
                            );
                        }
                    }
                }
                Err(e) => {
                    let category = classify_failure(&HarvestError::Response(e.clone()));
                    f.fail(check_for(&e), category, evidence_for(&e, body, location));
                }
            }
        }
    }
    if let Err(e) = parse_response(body, prefix, profile) {
        let category = classify_failure(&HarvestError::Response(e.clone()));
        f.fail(check_for(&e), category, evidence_for(&e, body, location));
    }
}

/// URL/XML encoding problems in identifier values.
fn encoding_findings(elements: &[crate::model::DcElement]) -> Vec<(Severity, String)> {
    let mut out = Vec::new();
    for e in elements.iter().filter(|e| e.name == DcName::Identifier) {
        let v = e.value.trim();
        if e.is_uri() {
            if url::Url::parse(v).is_err() || v.contains(char::is_whitespace) {
                out.push((Severity::Error, format!("identifier claims URI but is not one: {v:?}")));
            }
        } else if looks_like_url(v) && (url::Url::parse(v).is_err() || v.contains(' ')) {
            out.push((Severity::Warning, format!("URL-like identifier is not a valid URL: {v:?}")));
        }
    }
    out
}

fn looks_like_url(v: &str) -> bool {
    let lower = v.to_ascii_lowercase();
    lower.starts_with("http://") || lower.starts_with("https://") || lower.starts_with("ftp://")
}

fn sample_pages(client: &HarvestClient, base_url: &str, prefix: &str, seed: u64, f: &mut Findings) {
    let Some(page1) = fetch_page(client, base_url, prefix, None, 1, f, "schema") else {
        return;
    };
    let page_size = {
        let parsed = parse_response(&page1.body, prefix, client.profile());
        match parsed {
            Ok(r) => match r.body {
                ResponseBody::ListRecords { records, .. } => records.len().max(1) as u64,
                _ => 1,
            },
            Err(_) => 1,
        }
    };
    let total_pages = page1
        .complete_list_size
        .map(|n| n.div_ceil(page_size))
        .unwrap_or(if page1.token.is_some() { 3 } else { 1 }) as u32;

    // (5) token round-trip
    let mut current = page1;
    match current.token.clone() {
        None => f.pass("resumption_token", FailureCategory::ProtocolViolation, "single-page list"),
        Some(t) => match fetch_page(client, base_url, prefix, Some(&t.token), 2, f, "resumption_token") {
            Some(p2) => current = p2,
            None => {
                if !f.failed("resumption_token") && f.transient.is_none() {
                    f.fail(
                        "resumption_token",
                        FailureCategory::ProtocolViolation,
                        "token from page 1 did not yield page 2".into(),
                    );
                }
                garbage_token(client, base_url, seed, f);
                return;
            }
        },
    }
    garbage_token(client, base_url, seed, f);

    // one more page, chosen by the seeded RNG among pages 3..=n
    if total_pages >= 3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = rng.gen_range(3..=total_pages);
        while current.number < target {
            let Some(t) = current.token.clone() else { break };
            let number = current.number + 1;
            let location = format!("ListRecords page {number}");
            let req = ListRequest::new(base_url, prefix);
            let params = req.params("ListRecords", Some(&t.token));
            let body = match client.fetch_raw(base_url, &params) {
                Ok(b) => b,
                Err(e) => {
                    record_harvest_error(f, "resumption_token", &e, None, &location);
                    return;
                }
            };
            if number == target {
                inspect_page(&body, prefix, client.profile(), &location, f);
            }
            let token = match parse_response(&body, prefix, client.profile()) {
                Ok(r) => match r.body {
                    ResponseBody::ListRecords { token, .. } => token.filter(|t| !t.is_terminal()),
                    ResponseBody::Errors(errs) => {
                        f.fail(
                            "resumption_token",
                            FailureCategory::ProtocolViolation,
                            format!("{location}: provider answered {}", errs[0].code),
                        );
                        return;
                    }
                    _ => None,
                },
                Err(_) => None,
            };
            current = Page {
                number,
                body,
                token,
                complete_list_size: None,
            };
        }
    }
}

fn garbage_token(client: &HarvestClient, base_url: &str, seed: u64, f: &mut Findings) {
    let garbage = format!("not-a-token-{seed:x}");
    let params = [
        ("verb".to_string(), "ListRecords".to_string()),
        ("resumptionToken".to_string(), garbage),
    ];
    match client.request(base_url, &params, "") {
        Ok(r) => {
            let codes: Vec<ProtocolErrorCode> = r.errors().iter().map(|e| e.code).collect();
            if codes != [ProtocolErrorCode::BadResumptionToken] {
                f.fail(
                    "resumption_token",
                    FailureCategory::ProtocolViolation,
                    format!("garbage token answered with {codes:?} instead of badResumptionToken"),
                );
            }
        }
        Err(e) => record_harvest_error(f, "resumption_token", &e, None, "garbage token"),
    }
}

/// A listing inside a probe failed. Defects the record-level checks own are
/// charged to them; when token paging is already known to be broken the
/// probe is reported as not evaluated.
fn listing_failure(f: &mut Findings, check: &str, failure: HarvestFailure, context: &str) {
    let HarvestFailure { category, error } = failure;
    match &error {
        HarvestError::Response(r) if !matches!(r, ResponseError::Protocol(_)) => {
            f.fail(check_for(r), category, format!("{context}: {error}"));
        }
        _ if f.failed("resumption_token") => {
            f.warn(check, category, format!("not evaluated: {context}: {error}"));
        }
        _ => f.fail(check, category, format!("{context}: {error}")),
    }
}

fn idempotency_check(
    client: &HarvestClient,
    base_url: &str,
    prefix: &str,
    info: Option<&ProviderInfo>,
    now: DateTime<Utc>,
    f: &mut Findings,
) {
    let from = info.map(|i| i.earliest_datestamp);
    let until = info.map(|i| i.identified_at).unwrap_or(now);
    let request = ListRequest::new(base_url, prefix).window(from, Some(until));
    let mut sets: Vec<BTreeSet<(String, DateTime<Utc>)>> = Vec::new();
    for round in 1..=2 {
        match client.list_identifiers(&request) {
            Ok(listed) => sets.push(
                listed
                    .headers
                    .into_iter()
                    .map(|h| (h.identifier, h.datestamp))
                    .collect(),
            ),
            Err(failure) => {
                listing_failure(f, "idempotency", failure, &format!("window listing {round}"));
                return;
            }
        }
    }
    if sets[0] != sets[1] {
        let only_first: Vec<_> = sets[0].difference(&sets[1]).take(3).collect();
        let only_second: Vec<_> = sets[1].difference(&sets[0]).take(3).collect();
        f.fail(
            "idempotency",
            FailureCategory::ProtocolViolation,
            format!(
                "window {}..{} returned {} then {} headers; only first: {only_first:?}; only second: {only_second:?}",
                from.map(|t| crate::model::format_datestamp(&t)).unwrap_or_default(),
                crate::model::format_datestamp(&until),
                sets[0].len(),
                sets[1].len()
            ),
        );
    } else {
        f.pass(
            "idempotency",
            FailureCategory::ProtocolViolation,
            &format!("{} headers, identical twice", sets[0].len()),
        );
    }
}

fn deleted_policy_check(
    client: &HarvestClient,
    base_url: &str,
    prefix: &str,
    info: Option<&ProviderInfo>,
    seed: u64,
    f: &mut Findings,
) {
    let Some(info) = info else {
        f.pass("deleted_policy", FailureCategory::ProtocolViolation, "not evaluated: Identify unusable");
        return;
    };
    if info.deleted_policy != DeletedPolicy::Persistent {
        f.pass(
            "deleted_policy",
            FailureCategory::ProtocolViolation,
            &format!("policy {}; nothing to verify", info.deleted_policy.as_str()),
        );
        return;
    }
    let listed = match client.list_identifiers(&ListRequest::new(base_url, prefix)) {
        Ok(l) => l,
        Err(failure) => {
            listing_failure(f, "deleted_policy", failure, "full listing");
            return;
        }
    };
    let deleted: Vec<_> = listed.headers.iter().filter(|h| h.deleted).collect();
    if deleted.is_empty() {
        f.pass("deleted_policy", FailureCategory::ProtocolViolation, "no deleted records to sample");
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde1e7ed);
    let sample = deleted[rng.gen_range(0..deleted.len())];
    match client.get_record(base_url, &sample.identifier, prefix) {
        Ok(r) if r.is_deleted() => {}
        Ok(_) => {
            f.fail(
                "deleted_policy",
                FailureCategory::ProtocolViolation,
                format!("{} is listed as deleted but GetRecord returns it live", sample.identifier),
            );
            return;
        }
        Err(HarvestFailure { category, error }) => {
            let category = if category == FailureCategory::Transient {
                category
            } else {
                FailureCategory::ProtocolViolation
            };
            f.fail(
                "deleted_policy",
                category,
                format!("GetRecord of deleted {}: {error}", sample.identifier),
            );
            return;
        }
    }
    let window = ListRequest::new(base_url, prefix).window(Some(sample.datestamp), Some(sample.datestamp));
    match client.list_identifiers(&window) {
        Ok(l) if l.headers.iter().any(|h| h.identifier == sample.identifier && h.deleted) => {
            f.pass("deleted_policy", FailureCategory::ProtocolViolation, &format!("{} stays deleted", sample.identifier));
        }
        Ok(_) => f.fail(
            "deleted_policy",
            FailureCategory::ProtocolViolation,
            format!(
                "deleted {} missing from its own window {}; tombstones are not persistent",
                sample.identifier,
                crate::model::format_datestamp(&sample.datestamp)
            ),
        ),
        Err(failure) => listing_failure(f, "deleted_policy", failure, "window listing"),
    }
}

/// Checks utf8, schema, datestamp and xml_encoding on one standalone
/// `<record>` document. An empty result means the record is clean.
pub fn check_record(record_xml: &[u8], format_prefix: &str) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let fail = |e: &ResponseError| {
        let category = classify_failure(&HarvestError::Response(e.clone()));
        CheckResult::fail(check_for(e), category, evidence_for(e, record_xml, "record"))
    };
    let root = match xml::parse_document(record_xml) {
        Ok(r) => r,
        Err(e) => return vec![fail(&ResponseError::WellFormedness(e))],
    };
    if root.local_name() != "record" {
        return vec![CheckResult::fail(
            "schema",
            FailureCategory::DataFormat,
            format!("record: root element is <{}>", root.name),
        )];
    }
    match parse_record_element(&root, record_xml, format_prefix, &QualifiedProfile::default()) {
        Ok(r) => {
            for (severity, evidence) in encoding_findings(&r.elements) {
                let mut c = CheckResult::fail("xml_encoding", FailureCategory::DataFormat, evidence);
                c.severity = severity;
                out.push(c);
            }
        }
        Err(e) => out.push(fail(&e)),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"<record xmlns="http://www.openarchives.org/OAI/2.0/"><header><identifier>oai:x:1</identifier><datestamp>2005-08-01T00:00:00Z</datestamp></header><metadata><oai_dc:dc xmlns:oai_dc="http://www.openarchives.org/OAI/2.0/oai_dc/" xmlns:dc="http://purl.org/dc/elements/1.1/"><dc:title>T</dc:title><dc:identifier>http://example.org/a?x=1&amp;y=2</dc:identifier></oai_dc:dc></metadata></record>"#;

    #[test]
    fn clean_record_has_no_findings() {
        assert!(check_record(GOOD.as_bytes(), "oai_dc").is_empty());
    }

    #[test]
    fn unescaped_ampersand() {
        let bad = GOOD.replace("&amp;", "&");
        let found = check_record(bad.as_bytes(), "oai_dc");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].check_id, "xml_encoding");
        assert_eq!(found[0].severity, Severity::Error);
        assert_eq!(found[0].category, FailureCategory::DataFormat);
    }

    #[test]
    fn bad_datestamp() {
        let bad = GOOD.replace("2005-08-01T00:00:00Z", "01-08-2005");
        let found = check_record(bad.as_bytes(), "oai_dc");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].check_id, "datestamp");
        assert!(!found[0].evidence.is_empty());
    }

    #[test]
    fn overlong_utf8() {
        let mut bad = GOOD.as_bytes().to_vec();
        let at = GOOD.find(">T<").unwrap() + 1;
        bad.splice(at..at + 1, [0xC0, 0x80]);
        let found = check_record(&bad, "oai_dc");
        assert_eq!(found[0].check_id, "utf8");
        assert!(found[0].evidence.contains(&format!("offset {at}")));
    }

    #[test]
    fn invalid_uri_claim() {
        let qualified = r#"<record xmlns="http://www.openarchives.org/OAI/2.0/"><header><identifier>oai:x:1</identifier><datestamp>2005-08-01T00:00:00Z</datestamp></header><metadata><qdc:qualifieddc xmlns:qdc="urn:oaiagg:qdc:v1" xmlns:dc="http://purl.org/dc/elements/1.1/" xmlns:xsi="http://www.w3.org/2001/XMLSchema-instance" xmlns:dcterms="http://purl.org/dc/terms/"><dc:identifier xsi:type="dcterms:URI">not a url</dc:identifier></qdc:qualifieddc></metadata></record>"#;
        let found = check_record(qualified.as_bytes(), "nsdl_dc");
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].check_id, "xml_encoding");
    }
}
