//! A scriptable in-memory OAI-PMH provider with fault injection.
//!
//! The simulator owns its clock: [`Simulator::advance`] moves it forward and
//! applies the scenario timeline, and every response is dated by it. It also
//! answers ground-truth queries so tests can compare a harvest with what the
//! provider really holds.

pub mod fault;
pub mod scenario;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::client::{HttpResponse, OaiHandler, TransportError, TransportErrorKind};
use crate::model::datestamp::parse_datestamp;
use crate::model::dc::{self, DcContainer, DC_NS, OAI_DC, OAI_DC_NS, QDC_NS, QUALIFIED_DC};
use crate::model::request::{parse_request, request_echo, ListArgs, ListQuery, OaiRequest};
use crate::model::{
    DcElement, DcName, DeletedPolicy, Granularity, IdentifyInfo, MetadataFormat, MetadataRecord,
    ProtocolError, ProtocolErrorCode, RecordHeader, ResponseWriter, ResumptionToken, SetInfo,
};
pub use fault::{Diagnosis, Fault, FaultSpec, RequestView, Trigger};
pub use scenario::{EventKind, Scenario, ScenarioError, TimelineEvent};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("cannot move the simulator clock back from {now} to {to}")]
    TimeRegression { now: DateTime<Utc>, to: DateTime<Utc> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimRecord {
    pub header: RecordHeader,
    pub elements: Vec<DcElement>,
}

impl SimRecord {
    pub fn to_metadata_record(&self, prefix: &str) -> MetadataRecord {
        MetadataRecord {
            header: self.header.clone(),
            format_prefix: prefix.to_string(),
            elements: if self.header.deleted {
                Vec::new()
            } else {
                self.elements.clone()
            },
            raw_xml: Vec::new(),
        }
    }
}

struct State {
    now: DateTime<Utc>,
    records: BTreeMap<String, SimRecord>,
    pending: Vec<TimelineEvent>,
    revisions: HashMap<String, u32>,
    windows: HashMap<String, u32>,
}

pub struct Simulator {
    scenario: Scenario,
    faults: Vec<FaultSpec>,
    state: Mutex<State>,
}

impl Simulator {
    pub fn new(scenario: Scenario) -> Result<Simulator, ScenarioError> {
        let mut pending = scenario.timeline()?;
        pending.reverse();
        let faults = scenario.faults.clone();
        let sim = Simulator {
            state: Mutex::new(State {
                now: scenario.start,
                records: BTreeMap::new(),
                pending,
                revisions: HashMap::new(),
                windows: HashMap::new(),
            }),
            faults,
            scenario,
        };
        {
            let mut st = sim.state.lock().expect("sim state poisoned");
            let start = st.now;
            apply_until(&mut st, start);
        }
        Ok(sim)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn base_url(&self) -> &str {
        &self.scenario.base_url
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.lock().now
    }

    /// Move the clock to `to`, applying every timeline event dated at or
    /// before it. Returns how many events were applied.
    pub fn advance(&self, to: DateTime<Utc>) -> Result<usize, SimError> {
        let mut st = self.lock();
        if to < st.now {
            return Err(SimError::TimeRegression { now: st.now, to });
        }
        st.now = to;
        Ok(apply_until(&mut st, to))
    }

    /// Instant of the next pending timeline event.
    pub fn next_event_at(&self) -> Option<DateTime<Utc>> {
        self.lock().pending.last().map(|e| e.at)
    }

    pub fn reset_faults(&self) {
        for f in &self.faults {
            f.reset();
        }
    }

    /// Current state of every record the provider has ever held, tombstones
    /// included.
    pub fn ground_truth(&self) -> BTreeMap<String, SimRecord> {
        self.lock().records.clone()
    }

    /// Live (non-deleted) records.
    pub fn live_records(&self) -> BTreeMap<String, SimRecord> {
        self.lock()
            .records
            .iter()
            .filter(|(_, r)| !r.header.deleted)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Headers a faithful provider would list for the inclusive window.
    pub fn truth_window(
        &self,
        from: Option<DateTime<Utc>>,
        until: Option<DateTime<Utc>>,
    ) -> Vec<RecordHeader> {
        let st = self.lock();
        let mut out: Vec<RecordHeader> = st
            .records
            .values()
            .filter(|r| self.visible(r))
            .filter(|r| from.is_none_or(|f| r.header.datestamp >= f))
            .filter(|r| until.is_none_or(|u| r.header.datestamp <= u))
            .map(|r| r.header.clone())
            .collect();
        out.sort_by(|a, b| (a.datestamp, &a.identifier).cmp(&(b.datestamp, &b.identifier)));
        out
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("sim state poisoned")
    }

    fn visible(&self, r: &SimRecord) -> bool {
        !(r.header.deleted && self.scenario.deleted_policy == DeletedPolicy::No)
    }

    fn has_fault(&self, pred: impl Fn(&Fault) -> bool) -> bool {
        self.faults.iter().any(|f| pred(&f.fault))
    }

    /// Answer one request.
    pub fn respond(&self, params: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        if self.scenario.delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(self.scenario.delay_ms));
        }
        let now = self.now();
        let request = match parse_request(params) {
            Ok(r) => r,
            Err(e) => return Ok(HttpResponse::ok(self.error_body(now, params, e))),
        };
        let verb = request.verb();

        let plan = match self.plan(&request) {
            Ok(p) => p,
            Err(e) => return Ok(HttpResponse::ok(self.error_body(now, params, e))),
        };
        let view = RequestView {
            verb,
            page: plan.page,
            record_ids: &plan.ids,
        };
        let mut fired: Vec<&Fault> = Vec::new();
        for spec in &self.faults {
            if spec.fire(&view) {
                fired.push(&spec.fault);
            }
        }
        for f in &fired {
            match f {
                Fault::Disconnect => {
                    return Err(TransportError::new(
                        TransportErrorKind::Disconnected,
                        "simulated disconnect",
                    ))
                }
                Fault::Http5xx { status } => {
                    return Ok(HttpResponse {
                        status: *status,
                        body: b"simulated server error".to_vec(),
                    })
                }
                Fault::BrokenToken if plan.resumed => {
                    let e = ProtocolError::new(ProtocolErrorCode::BadArgument, "token not understood");
                    return Ok(HttpResponse::ok(self.error_body(now, &[], e)));
                }
                _ => {}
            }
        }
        let echo: Vec<(&str, &str)> = params.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let writer = ResponseWriter::new(now, &self.scenario.base_url, &echo);
        let body = self.render(writer, &request, plan, &fired);
        Ok(HttpResponse::ok(body))
    }

    fn error_body(&self, now: DateTime<Utc>, params: &[(String, String)], e: ProtocolError) -> Vec<u8> {
        let echo = request_echo(params, Some(&e));
        let echo: Vec<(&str, &str)> = echo.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        ResponseWriter::new(now, &self.scenario.base_url, &echo)
            .errors(&[e])
            .into_bytes()
    }

    fn sets(&self) -> BTreeSet<String> {
        self.lock()
            .records
            .values()
            .flat_map(|r| r.header.set_specs.iter().cloned())
            .collect()
    }

    /// Resolve what the response will contain before faults are considered.
    fn plan(&self, request: &OaiRequest) -> Result<Plan, ProtocolError> {
        match request {
            OaiRequest::Identify | OaiRequest::ListSets { .. } => {
                if let OaiRequest::ListSets { token: Some(_) } = request {
                    return Err(ProtocolError::new(
                        ProtocolErrorCode::BadResumptionToken,
                        "ListSets is never paged",
                    ));
                }
                if matches!(request, OaiRequest::ListSets { .. }) && self.sets().is_empty() {
                    return Err(ProtocolError::new(
                        ProtocolErrorCode::NoSetHierarchy,
                        "no sets",
                    ));
                }
                Ok(Plan::simple())
            }
            OaiRequest::ListMetadataFormats { identifier } => {
                if let Some(id) = identifier {
                    self.lookup(id)?;
                }
                Ok(Plan::simple())
            }
            OaiRequest::GetRecord { identifier, prefix } => {
                check_prefix(prefix)?;
                let r = self.lookup(identifier)?;
                Ok(Plan {
                    ids: vec![r.header.identifier.clone()],
                    records: vec![r],
                    ..Plan::simple()
                })
            }
            OaiRequest::ListIdentifiers(args) | OaiRequest::ListRecords(args) => {
                self.plan_list(request.verb(), args)
            }
        }
    }

    fn lookup(&self, id: &str) -> Result<SimRecord, ProtocolError> {
        let st = self.lock();
        match st.records.get(id) {
            Some(r) if self.visible(r) => Ok(r.clone()),
            _ => Err(ProtocolError::new(
                ProtocolErrorCode::IdDoesNotExist,
                format!("no record {id}"),
            )),
        }
    }

    fn plan_list(&self, verb: &str, args: &ListArgs) -> Result<Plan, ProtocolError> {
        let (token, resumed) = match args {
            ListArgs::Resume(t) => (SimToken::decode(t, verb)?, true),
            ListArgs::Fresh(q) => {
                check_prefix(&q.prefix)?;
                if q.set.is_some() && self.sets().is_empty() {
                    return Err(ProtocolError::new(ProtocolErrorCode::NoSetHierarchy, "no sets"));
                }
                let mut variant = 0;
                if self.has_fault(|f| matches!(f, Fault::NonIdempotentWindow)) {
                    let key = format!("{verb}|{}", SimToken::query_key(q));
                    let mut st = self.lock();
                    let n = st.windows.entry(key).or_insert(0);
                    *n += 1;
                    if *n % 2 == 0 {
                        variant = 1;
                    }
                }
                (
                    SimToken {
                        verb: verb.to_string(),
                        query: q.clone(),
                        offset: 0,
                        variant,
                    },
                    false,
                )
            }
        };
        let forget = token.query.from.is_some()
            && self.has_fault(|f| matches!(f, Fault::ForgottenDeletes));
        let mut all: Vec<SimRecord> = self
            .lock()
            .records
            .values()
            .filter(|r| self.visible(r))
            .filter(|r| !(forget && r.header.deleted))
            .filter(|r| token.query.contains(r.header.datestamp) && token.query.in_set(&r.header.set_specs))
            .cloned()
            .collect();
        all.sort_by(|a, b| {
            (a.header.datestamp, &a.header.identifier).cmp(&(b.header.datestamp, &b.header.identifier))
        });
        if token.variant == 1 {
            all.pop();
        }
        if all.is_empty() {
            if resumed {
                return Err(ProtocolError::new(
                    ProtocolErrorCode::BadResumptionToken,
                    "list changed under the token",
                ));
            }
            return Err(ProtocolError::new(ProtocolErrorCode::NoRecordsMatch, "empty window"));
        }
        let size = self.scenario.page_size;
        if token.offset >= all.len() {
            return Err(ProtocolError::new(
                ProtocolErrorCode::BadResumptionToken,
                "offset past the end of the list",
            ));
        }
        let end = (token.offset + size).min(all.len());
        let page_records: Vec<SimRecord> = all[token.offset..end].to_vec();
        let next = ResumptionToken {
            token: if end < all.len() {
                SimToken {
                    offset: end,
                    ..token.clone()
                }
                .encode()
            } else {
                String::new()
            },
            complete_list_size: Some(all.len() as u64),
            cursor: Some(token.offset as u64),
            expiration: None,
        };
        let paged = all.len() > size;
        Ok(Plan {
            page: (token.offset / size) as u32 + 1,
            ids: page_records.iter().map(|r| r.header.identifier.clone()).collect(),
            records: page_records,
            token: paged.then_some(next),
            prefix: token.query.prefix.clone(),
            resumed,
        })
    }

    fn render(&self, mut w: ResponseWriter, request: &OaiRequest, plan: Plan, fired: &[&Fault]) -> Vec<u8> {
        let splash = self.faults.iter().find_map(|f| match &f.fault {
            Fault::SplashPageUrls { url } => Some(url.clone()),
            _ => None,
        });
        let body = match request {
            OaiRequest::Identify => {
                let earliest = self
                    .lock()
                    .records
                    .values()
                    .map(|r| r.header.datestamp)
                    .min()
                    .unwrap_or(self.scenario.start);
                let info = IdentifyInfo {
                    repository_name: self.scenario.repository_name.clone(),
                    base_url: self.scenario.base_url.clone(),
                    protocol_version: "2.0".into(),
                    admin_emails: vec!["admin@sim.invalid".into()],
                    earliest_datestamp: earliest,
                    deleted_record: self.scenario.deleted_policy,
                    granularity: Granularity::Second,
                };
                let mut s = w.identify(&info);
                if fired.iter().any(|f| matches!(f, Fault::OmitRepositoryName)) {
                    let start = s.find("<repositoryName>").expect("rendered");
                    let end = s.find("</repositoryName>").expect("rendered") + "</repositoryName>".len();
                    s.replace_range(start..end, "");
                }
                s
            }
            OaiRequest::ListMetadataFormats { .. } => w.metadata_formats(&formats()),
            OaiRequest::ListSets { .. } => {
                let sets: Vec<SetInfo> = self
                    .sets()
                    .into_iter()
                    .map(|s| SetInfo {
                        name: format!("Set {s}"),
                        spec: s,
                    })
                    .collect();
                w.sets(&sets, None)
            }
            OaiRequest::GetRecord { prefix, .. } => {
                w.open_verb("GetRecord");
                for r in &plan.records {
                    w.record(&r.header, Some(&payload(r, prefix, splash.as_deref())));
                }
                w.finish()
            }
            OaiRequest::ListIdentifiers(_) => {
                w.open_verb("ListIdentifiers");
                for r in &plan.records {
                    w.header(&r.header);
                }
                if let Some(t) = &plan.token {
                    w.token(t);
                }
                w.finish()
            }
            OaiRequest::ListRecords(_) => {
                w.open_verb("ListRecords");
                for r in &plan.records {
                    w.record(&r.header, Some(&payload(r, &plan.prefix, splash.as_deref())));
                }
                if let Some(t) = &plan.token {
                    w.token(t);
                }
                w.finish()
            }
        };
        let mut bytes = body.into_bytes();
        let target = self
            .faults
            .iter()
            .find_map(|f| f.trigger.record.clone())
            .filter(|id| plan.ids.contains(id))
            .or_else(|| plan.ids.first().cloned());
        if let Some(target) = target {
            for f in fired {
                bytes = corrupt(bytes, f, &target);
            }
        }
        bytes
    }
}

impl crate::clock::Clock for Simulator {
    fn now(&self) -> DateTime<Utc> {
        Simulator::now(self)
    }
}

impl OaiHandler for Simulator {
    fn handle(&self, params: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        self.respond(params)
    }
}

struct Plan {
    page: u32,
    ids: Vec<String>,
    records: Vec<SimRecord>,
    token: Option<ResumptionToken>,
    prefix: String,
    resumed: bool,
}

impl Plan {
    fn simple() -> Plan {
        Plan {
            page: 1,
            ids: Vec::new(),
            records: Vec::new(),
            token: None,
            prefix: String::new(),
            resumed: false,
        }
    }
}

fn formats() -> Vec<MetadataFormat> {
    vec![
        MetadataFormat {
            prefix: OAI_DC.into(),
            schema: "http://www.openarchives.org/OAI/2.0/oai_dc.xsd".into(),
            namespace: OAI_DC_NS.into(),
        },
        MetadataFormat {
            prefix: QUALIFIED_DC.into(),
            schema: "urn:oaiagg:qdc:v1:schema".into(),
            namespace: QDC_NS.into(),
        },
    ]
}

fn check_prefix(prefix: &str) -> Result<(), ProtocolError> {
    if DcContainer::for_prefix(prefix).is_some() {
        Ok(())
    } else {
        Err(ProtocolError::new(
            ProtocolErrorCode::CannotDisseminateFormat,
            format!("format {prefix} is not available"),
        ))
    }
}

fn payload(r: &SimRecord, prefix: &str, splash: Option<&str>) -> String {
    let container = DcContainer::for_prefix(prefix).unwrap_or(DcContainer::Simple);
    let mut s = String::new();
    match splash {
        Some(url) => {
            let elements: Vec<DcElement> = r
                .elements
                .iter()
                .map(|e| {
                    if e.name == DcName::Identifier {
                        DcElement {
                            value: url.to_string(),
                            ..e.clone()
                        }
                    } else {
                        e.clone()
                    }
                })
                .collect();
            dc::write_dc_payload(&mut s, &elements, container);
        }
        None => dc::write_dc_payload(&mut s, &r.elements, container),
    }
    s
}

fn find_from(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    hay.get(from..)?
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

/// Splice deliberately broken bytes into the target record.
fn corrupt(mut bytes: Vec<u8>, fault: &Fault, target: &str) -> Vec<u8> {
    let marker = format!("<identifier>{}</identifier>", crate::xml::escape_text(target));
    let Some(at) = find_from(&bytes, marker.as_bytes(), 0) else {
        return bytes;
    };
    let record_end = find_from(&bytes, b"</record>", at)
        .or_else(|| find_from(&bytes, b"</header>", at))
        .unwrap_or(bytes.len());
    let insert_after = |bytes: &mut Vec<u8>, tag: &[u8], what: &[u8]| {
        if let Some(p) = find_from(bytes, tag, at).filter(|p| *p < record_end) {
            let pos = p + tag.len();
            bytes.splice(pos..pos, what.iter().copied());
            true
        } else {
            false
        }
    };
    match fault {
        Fault::InvalidUtf8 { bytes: bad } => {
            insert_after(&mut bytes, b"<dc:title>", bad);
        }
        Fault::WrongDatestamp { text } => {
            if let (Some(s), Some(e)) = (
                find_from(&bytes, b"<datestamp>", at),
                find_from(&bytes, b"</datestamp>", at),
            ) {
                bytes.splice(s + "<datestamp>".len()..e, text.bytes());
            }
        }
        Fault::SchemaInvalidRecord => {
            let nested = format!("<dc:subject xmlns:dc=\"{DC_NS}\"><dc:subject>nested</dc:subject></dc:subject>");
            if let Some(m) = find_from(&bytes, b"<metadata>", at).filter(|p| *p < record_end) {
                if let Some(gt) = find_from(&bytes, b">", m + "<metadata>".len()) {
                    bytes.splice(gt + 1..gt + 1, nested.bytes());
                }
            }
        }
        Fault::UnescapedAmpersand => {
            if !insert_after(&mut bytes, b"<dc:identifier>", b"http://example.org/?a=1&b=2 ") {
                insert_after(&mut bytes, b"<dc:title>", b"R&D ");
            }
        }
        _ => {}
    }
    bytes
}

fn apply_until(st: &mut State, to: DateTime<Utc>) -> usize {
    let mut applied = 0;
    while st.pending.last().is_some_and(|e| e.at <= to) {
        let e = st.pending.pop().expect("checked");
        applied += 1;
        match e.kind {
            EventKind::Insert => {
                let mut header = RecordHeader::new(e.id.clone(), e.at);
                header.set_specs = e.sets.clone().unwrap_or_default();
                st.records.insert(
                    e.id.clone(),
                    SimRecord {
                        header,
                        elements: e.elements.clone().unwrap_or_default(),
                    },
                );
            }
            EventKind::Update => {
                let rev = {
                    let n = st.revisions.entry(e.id.clone()).or_insert(0);
                    *n += 1;
                    *n
                };
                if let Some(r) = st.records.get_mut(&e.id) {
                    r.header.datestamp = e.at;
                    r.header.deleted = false;
                    if let Some(sets) = &e.sets {
                        r.header.set_specs = sets.clone();
                    }
                    match &e.elements {
                        Some(els) => r.elements = els.clone(),
                        None => {
                            if let Some(t) = r.elements.iter_mut().find(|x| x.name == DcName::Title) {
                                let base = t.value.split(" (revision ").next().unwrap_or("").to_string();
                                t.value = format!("{base} (revision {rev})");
                            } else {
                                r.elements.push(DcElement::new(DcName::Title, format!("Revision {rev}")));
                            }
                        }
                    }
                }
            }
            EventKind::Delete => {
                if let Some(r) = st.records.get_mut(&e.id) {
                    r.header.datestamp = e.at;
                    r.header.deleted = true;
                }
            }
        }
    }
    applied
}

/// The simulator's own opaque token: the query plus a position.
#[derive(Debug, Clone, PartialEq, Eq)]
struct SimToken {
    verb: String,
    query: ListQuery,
    offset: usize,
    variant: u8,
}

impl SimToken {
    fn query_key(q: &ListQuery) -> String {
        let b = |b: &Option<crate::model::request::Bound>| {
            b.as_ref()
                .map(crate::model::request::bound_text)
                .unwrap_or_default()
        };
        format!(
            "{}|{}|{}|{}",
            q.prefix,
            q.set.as_deref().unwrap_or(""),
            b(&q.from),
            b(&q.until)
        )
    }

    fn encode(&self) -> String {
        let raw = format!(
            "{}|{}|{}|{}",
            self.verb,
            SimToken::query_key(&self.query),
            self.offset,
            self.variant
        );
        URL_SAFE_NO_PAD.encode(raw)
    }

    fn decode(token: &str, verb: &str) -> Result<SimToken, ProtocolError> {
        let bad = || ProtocolError::new(ProtocolErrorCode::BadResumptionToken, "unknown token");
        let raw = URL_SAFE_NO_PAD.decode(token).map_err(|_| bad())?;
        let raw = String::from_utf8(raw).map_err(|_| bad())?;
        let parts: Vec<&str> = raw.split('|').collect();
        if parts.len() != 7 || parts[0] != verb {
            return Err(bad());
        }
        let bound = |s: &str| -> Result<Option<crate::model::request::Bound>, ProtocolError> {
            if s.is_empty() {
                return Ok(None);
            }
            if let Some(day) = crate::model::datestamp::parse_day(s) {
                return Ok(Some(crate::model::request::Bound {
                    instant: day.and_hms_opt(0, 0, 0).expect("midnight").and_utc(),
                    granularity: Granularity::Day,
                }));
            }
            parse_datestamp(s)
                .map(|instant| {
                    Some(crate::model::request::Bound {
                        instant,
                        granularity: Granularity::Second,
                    })
                })
                .map_err(|_| bad())
        };
        Ok(SimToken {
            verb: parts[0].to_string(),
            query: ListQuery {
                prefix: parts[1].to_string(),
                set: (!parts[2].is_empty()).then(|| parts[2].to_string()),
                from: bound(parts[3])?,
                until: bound(parts[4])?,
            },
            offset: parts[5].parse().map_err(|_| bad())?,
            variant: parts[6].parse().map_err(|_| bad())?,
        })
    }
}
