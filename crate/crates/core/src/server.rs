//! OAI-PMH data provider over a serving snapshot.
//!
//! Only records whose served datestamp has passed are visible. Resumption
//! tokens carry the whole list state, signed, so the server keeps nothing
//! per harvester; a token names the snapshot it was minted against and
//! stops resolving once another snapshot is published.

use std::sync::Arc;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use chrono::{DateTime, Duration, Utc};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;

use crate::client::{HttpResponse, OaiHandler, TransportError};
use crate::clock::Clock;
use crate::model::request::{bound_text, parse_bound_text, parse_request, request_echo, ListArgs, ListQuery, OaiRequest};
use crate::model::{
    format_datestamp, DeletedPolicy, Granularity, IdentifyInfo, ProtocolError, ProtocolErrorCode, ResponseWriter,
    ResumptionToken, SetInfo,
};
use crate::repository::formats::{metadata_formats, EXPORT_FORMATS};
use crate::repository::{ServedRecord, ServingSnapshot, SharedRepository};

type HmacSha256 = Hmac<Sha256>;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub page_size: usize,
    pub repository_name: String,
    pub base_url: String,
    pub admin_email: String,
    pub token_ttl: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            page_size: 100,
            repository_name: "oaiagg aggregated repository".into(),
            base_url: "http://localhost:8080/oai".into(),
            admin_email: "admin@localhost".into(),
            token_ttl: Duration::hours(24),
        }
    }
}

/// Decoded resumption-token state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ListState {
    pub verb: String,
    pub query: ListQuery,
    /// Visibility cutoff fixed by the first request of the list.
    pub cutoff: DateTime<Utc>,
    pub position: usize,
    pub snapshot_id: String,
    pub expires: DateTime<Utc>,
}

pub struct OaiServer {
    config: ServerConfig,
    key: Vec<u8>,
}

fn err(code: ProtocolErrorCode, message: impl Into<String>) -> ProtocolError {
    ProtocolError::new(code, message)
}

impl OaiServer {
    /// A server with a fresh random signing key.
    pub fn new(config: ServerConfig) -> Self {
        let mut key = vec![0u8; 32];
        rand::thread_rng().fill_bytes(&mut key);
        Self::with_key(config, key)
    }

    pub fn with_key(config: ServerConfig, key: impl Into<Vec<u8>>) -> Self {
        assert!(config.page_size >= 1, "page_size must be at least 1");
        OaiServer { config, key: key.into() }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.key).expect("hmac takes any key length")
    }

    pub fn mint_token(&self, state: &ListState) -> String {
        let q = &state.query;
        let b = |b: &Option<crate::model::request::Bound>| b.as_ref().map(bound_text).unwrap_or_default();
        let raw = [
            state.verb.clone(),
            q.prefix.clone(),
            q.set.clone().unwrap_or_default(),
            b(&q.from),
            b(&q.until),
            state.cutoff.timestamp().to_string(),
            state.position.to_string(),
            state.snapshot_id.clone(),
            state.expires.timestamp().to_string(),
        ]
        .iter()
        .map(|p| URL_SAFE_NO_PAD.encode(p))
        .collect::<Vec<_>>()
        .join(".");
        let mut mac = self.mac();
        mac.update(raw.as_bytes());
        format!("{raw}~{}", URL_SAFE_NO_PAD.encode(mac.finalize().into_bytes()))
    }

    /// Signature and syntax only; expiry and staleness are checked in
    /// [`OaiServer::resolve_token`].
    fn decode_token(&self, token: &str) -> Option<ListState> {
        let (raw, sig) = token.split_once('~')?;
        let sig = URL_SAFE_NO_PAD.decode(sig).ok()?;
        let mut mac = self.mac();
        mac.update(raw.as_bytes());
        mac.verify_slice(&sig).ok()?;
        let parts: Vec<String> = raw
            .split('.')
            .map(|p| URL_SAFE_NO_PAD.decode(p).ok().and_then(|b| String::from_utf8(b).ok()))
            .collect::<Option<_>>()?;
        let [verb, prefix, set, from, until, cutoff, position, snapshot_id, expires] =
            <[String; 9]>::try_from(parts).ok()?;
        let bound = |s: &str| if s.is_empty() { Some(None) } else { parse_bound_text(s).map(Some) };
        Some(ListState {
            verb,
            query: ListQuery {
                prefix,
                set: (!set.is_empty()).then_some(set),
                from: bound(&from)?,
                until: bound(&until)?,
            },
            cutoff: DateTime::from_timestamp(cutoff.parse().ok()?, 0)?,
            position: position.parse().ok()?,
            snapshot_id,
            expires: DateTime::from_timestamp(expires.parse().ok()?, 0)?,
        })
    }

    pub fn resolve_token(
        &self,
        token: &str,
        verb: &str,
        now: DateTime<Utc>,
        snapshot: &ServingSnapshot,
    ) -> Result<ListState, ProtocolError> {
        let bad = |m: &str| err(ProtocolErrorCode::BadResumptionToken, m);
        let state = self.decode_token(token).ok_or_else(|| bad("unknown resumption token"))?;
        if state.verb != verb {
            return Err(bad("token belongs to another verb"));
        }
        if state.expires <= now {
            return Err(bad("resumption token expired"));
        }
        if state.snapshot_id != snapshot.id() {
            return Err(bad("repository changed since the list started; restart the list"));
        }
        Ok(state)
    }

    /// Answer one request against `snapshot` as of `now`.
    pub fn handle_request(&self, params: &[(String, String)], now: DateTime<Utc>, snapshot: &ServingSnapshot) -> Vec<u8> {
        let result = parse_request(params).and_then(|req| self.answer(&req, params, now, snapshot));
        match result {
            Ok(body) => body.into_bytes(),
            Err(e) => {
                let echo = request_echo(params, Some(&e));
                let echo: Vec<(&str, &str)> = echo.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
                ResponseWriter::new(now, &self.config.base_url, &echo)
                    .errors(&[e])
                    .into_bytes()
            }
        }
    }

    fn answer(
        &self,
        req: &OaiRequest,
        params: &[(String, String)],
        now: DateTime<Utc>,
        snapshot: &ServingSnapshot,
    ) -> Result<String, ProtocolError> {
        let echo: Vec<(&str, &str)> = params.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let mut w = ResponseWriter::new(now, &self.config.base_url, &echo);
        let visible = |r: &&ServedRecord| r.served_datestamp <= now;
        match req {
            OaiRequest::Identify => {
                let earliest = snapshot
                    .records()
                    .iter()
                    .find(visible)
                    .map_or(DateTime::<Utc>::UNIX_EPOCH, |r| r.served_datestamp);
                Ok(w.identify(&IdentifyInfo {
                    repository_name: self.config.repository_name.clone(),
                    base_url: self.config.base_url.clone(),
                    protocol_version: "2.0".into(),
                    admin_emails: vec![self.config.admin_email.clone()],
                    earliest_datestamp: earliest,
                    deleted_record: DeletedPolicy::Persistent,
                    granularity: Granularity::Second,
                }))
            }
            OaiRequest::ListMetadataFormats { identifier } => {
                if let Some(id) = identifier {
                    let r = snapshot
                        .get(id)
                        .filter(|r| r.served_datestamp <= now)
                        .ok_or_else(|| err(ProtocolErrorCode::IdDoesNotExist, format!("no record {id}")))?;
                    if r.deleted {
                        return Err(err(ProtocolErrorCode::NoMetadataFormats, format!("{id} is deleted")));
                    }
                }
                Ok(w.metadata_formats(&metadata_formats()))
            }
            OaiRequest::ListSets { token } => {
                if token.is_some() {
                    return Err(err(ProtocolErrorCode::BadResumptionToken, "ListSets is never paged"));
                }
                let sets: Vec<SetInfo> = snapshot
                    .collections()
                    .iter()
                    .map(|c| SetInfo {
                        spec: c.collection_id.clone(),
                        name: c.name.clone(),
                    })
                    .collect();
                Ok(w.sets(&sets, None))
            }
            OaiRequest::GetRecord { identifier, prefix } => {
                check_prefix(prefix)?;
                let r = snapshot
                    .get(identifier)
                    .filter(|r| r.served_datestamp <= now)
                    .ok_or_else(|| err(ProtocolErrorCode::IdDoesNotExist, format!("no record {identifier}")))?;
                w.open_verb("GetRecord");
                w.record(&r.header(), r.payload(prefix));
                Ok(w.finish())
            }
            OaiRequest::ListIdentifiers(args) | OaiRequest::ListRecords(args) => {
                let verb = req.verb();
                let state = match args {
                    ListArgs::Fresh(q) => {
                        check_prefix(&q.prefix)?;
                        ListState {
                            verb: verb.to_string(),
                            query: q.clone(),
                            cutoff: now,
                            position: 0,
                            snapshot_id: snapshot.id().to_string(),
                            expires: now + self.config.token_ttl,
                        }
                    }
                    ListArgs::Resume(t) => self.resolve_token(t, verb, now, snapshot)?,
                };
                let matching: Vec<&ServedRecord> = snapshot
                    .records()
                    .iter()
                    .filter(|r| r.served_datestamp <= state.cutoff)
                    .filter(|r| state.query.contains(r.served_datestamp))
                    .filter(|r| state.query.in_set(&r.header().set_specs))
                    .collect();
                if matching.is_empty() {
                    return Err(err(ProtocolErrorCode::NoRecordsMatch, "no records match"));
                }
                if state.position >= matching.len() {
                    return Err(err(ProtocolErrorCode::BadResumptionToken, "token past the end of the list"));
                }
                let end = (state.position + self.config.page_size).min(matching.len());
                let token = if end < matching.len() || state.position > 0 {
                    let next = if end < matching.len() {
                        self.mint_token(&ListState {
                            position: end,
                            expires: now + self.config.token_ttl,
                            ..state.clone()
                        })
                    } else {
                        String::new()
                    };
                    Some(ResumptionToken {
                        token: next.clone(),
                        complete_list_size: Some(matching.len() as u64),
                        cursor: Some(state.position as u64),
                        expiration: (!next.is_empty()).then_some(now + self.config.token_ttl),
                    })
                } else {
                    None
                };
                w.open_verb(verb);
                for r in &matching[state.position..end] {
                    if matches!(req, OaiRequest::ListRecords(_)) {
                        w.record(&r.header(), r.payload(&state.query.prefix));
                    } else {
                        w.header(&r.header());
                    }
                }
                if let Some(t) = &token {
                    w.token(t);
                }
                Ok(w.finish())
            }
        }
    }
}

fn check_prefix(prefix: &str) -> Result<(), ProtocolError> {
    if EXPORT_FORMATS.contains(&prefix) {
        Ok(())
    } else {
        Err(err(
            ProtocolErrorCode::CannotDisseminateFormat,
            format!("format {prefix} is not served"),
        ))
    }
}

/// A server bound to a live repository and a clock, usable as an in-process
/// handler or behind HTTP.
pub struct RepositoryEndpoint {
    pub server: OaiServer,
    pub repository: Arc<SharedRepository>,
    pub clock: Arc<dyn Clock>,
}

impl RepositoryEndpoint {
    pub fn respond(&self, params: &[(String, String)]) -> Vec<u8> {
        let snapshot = self.repository.current();
        let now = self.clock.now();
        log::debug!("oai request at {}: {:?}", format_datestamp(&now), params);
        self.server.handle_request(params, now, &snapshot)
    }
}

impl OaiHandler for RepositoryEndpoint {
    fn handle(&self, params: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse::ok(self.respond(params)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_db_insert, SafeTransform};
    use crate::model::{parse_datestamp, parse_response, DcElement, DcName, MetadataRecord, RecordHeader, ResponseBody};
    use crate::repository::{Repository, RepositoryConfig};

    fn at(s: &str) -> DateTime<Utc> {
        parse_datestamp(s).unwrap()
    }

    fn p(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn repo(n: usize, native_public: bool) -> Repository {
        let mut r = Repository::in_memory(RepositoryConfig::default());
        r.register_collection("c1", &[DcElement::new(DcName::Title, "Coll")], native_public, at("2006-01-01T00:00:00Z"))
            .unwrap();
        let t = SafeTransform::default();
        let pairs = (0..n)
            .map(|i| {
                let elements = vec![DcElement::new(DcName::Title, format!("T{i}"))];
                let mut raw = String::new();
                crate::model::dc::write_dc_payload(&mut raw, &elements, crate::model::DcContainer::Simple);
                let o = MetadataRecord {
                    header: RecordHeader::new(format!("oai:p:{i}"), at("2005-01-01T00:00:00Z")),
                    format_prefix: "oai_dc".into(),
                    elements,
                    raw_xml: raw.into_bytes(),
                };
                let n = t.apply(&o);
                (o, n)
            })
            .collect();
        r.insert(&build_db_insert(pairs, "c1", "a").unwrap(), at("2006-01-10T12:00:00Z"))
            .unwrap();
        r
    }

    fn server(page: usize) -> OaiServer {
        OaiServer::with_key(
            ServerConfig {
                page_size: page,
                ..ServerConfig::default()
            },
            b"k".to_vec(),
        )
    }

    fn parse(body: &[u8], prefix: &str) -> ResponseBody {
        parse_response(body, prefix, &crate::model::QualifiedProfile::default()).unwrap().body
    }

    #[test]
    fn pages_with_cursor_and_size() {
        let snap = repo(25, false).publish(at("2006-01-10T12:00:00Z"));
        let s = server(10);
        let now = at("2006-02-01T00:00:00Z");
        let mut params = p(&[("verb", "ListRecords"), ("metadataPrefix", "oai_dc"), ("set", "c1")]);
        let mut pages = Vec::new();
        loop {
            match parse(&s.handle_request(&params, now, &snap), "oai_dc") {
                ResponseBody::ListRecords { records, token } => {
                    pages.push((records.len(), token.clone()));
                    match token {
                        Some(t) if !t.token.is_empty() => {
                            params = p(&[("verb", "ListRecords"), ("resumptionToken", &t.token)])
                        }
                        _ => break,
                    }
                }
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(pages.iter().map(|p| p.0).collect::<Vec<_>>(), vec![10, 10, 5]);
        let cursors: Vec<_> = pages.iter().map(|p| p.1.as_ref().unwrap().cursor).collect();
        assert_eq!(cursors, vec![Some(0), Some(10), Some(20)]);
        assert!(pages.iter().all(|p| p.1.as_ref().unwrap().complete_list_size == Some(25)));
    }

    #[test]
    fn postdated_records_are_invisible_until_served() {
        let snap = repo(1, false).publish(at("2006-01-10T12:00:00Z"));
        let s = server(10);
        let body = s.handle_request(
            &p(&[("verb", "ListIdentifiers"), ("metadataPrefix", "oai_dc"), ("set", "c1"), ("until", "2006-01-10T13:00:00Z")]),
            at("2006-01-10T13:00:00Z"),
            &snap,
        );
        match parse(&body, "oai_dc") {
            ResponseBody::Errors(e) => assert_eq!(e[0].code, ProtocolErrorCode::NoRecordsMatch),
            other => panic!("{other:?}"),
        }
        let later = s.handle_request(&p(&[("verb", "ListIdentifiers"), ("metadataPrefix", "oai_dc")]), at("2006-01-10T15:00:00Z"), &snap);
        assert!(matches!(parse(&later, "oai_dc"), ResponseBody::ListIdentifiers { headers, .. } if headers.len() == 2));
    }

    #[test]
    fn tokens_reject_garbage_expiry_and_staleness() {
        let r = repo(5, false);
        let snap = r.publish(at("2006-01-10T12:00:00Z"));
        let s = server(2);
        let now = at("2006-02-01T00:00:00Z");
        let first = s.handle_request(&p(&[("verb", "ListIdentifiers"), ("metadataPrefix", "oai_dc")]), now, &snap);
        let token = match parse(&first, "oai_dc") {
            ResponseBody::ListIdentifiers { token, .. } => token.unwrap().token,
            other => panic!("{other:?}"),
        };
        let state = s.resolve_token(&token, "ListIdentifiers", now, &snap).unwrap();
        assert_eq!(state.position, 2);
        assert_eq!(s.mint_token(&state), token);
        let code = |t: &str, now, snap: &ServingSnapshot| s.resolve_token(t, "ListIdentifiers", now, snap).unwrap_err().code;
        let mut corrupted = token.clone().into_bytes();
        corrupted[3] ^= 1;
        let corrupted = String::from_utf8(corrupted).unwrap();
        assert_eq!(code(&corrupted, now, &snap), ProtocolErrorCode::BadResumptionToken);
        assert_eq!(code("garbage", now, &snap), ProtocolErrorCode::BadResumptionToken);
        assert_eq!(code(&token, now + Duration::days(2), &snap), ProtocolErrorCode::BadResumptionToken);
        let mut r2 = repo(6, false);
        r2.mark_deleted(&r2.mint_identifier("c1", "oai:p:0"), now).unwrap();
        let newer = r2.publish(now);
        assert_eq!(code(&token, now, &newer), ProtocolErrorCode::BadResumptionToken);
        assert!(s.resolve_token(&token, "ListRecords", now, &snap).is_err());
    }

    #[test]
    fn native_part_follows_policy_and_errors_map() {
        let s = server(10);
        let now = at("2006-02-01T00:00:00Z");
        let r = repo(1, false);
        let id = r.mint_identifier("c1", "oai:p:0");
        let private = r.publish(now);
        let body = String::from_utf8(s.handle_request(&p(&[("verb", "GetRecord"), ("identifier", &id), ("metadataPrefix", "nsdl_all")]), now, &private)).unwrap();
        assert!(body.contains("<search") && !body.contains("<native"));
        let public = repo(1, true).publish(now);
        let body = String::from_utf8(s.handle_request(&p(&[("verb", "GetRecord"), ("identifier", &id), ("metadataPrefix", "nsdl_all")]), now, &public)).unwrap();
        assert!(body.contains("<native"));

        let code = |params: &[(&str, &str)]| match parse(&s.handle_request(&p(params), now, &private), "oai_dc") {
            ResponseBody::Errors(e) => Some(e[0].code),
            _ => None,
        };
        assert_eq!(code(&[("verb", "Nope")]), Some(ProtocolErrorCode::BadVerb));
        assert_eq!(code(&[("verb", "GetRecord"), ("identifier", "x")]), Some(ProtocolErrorCode::BadArgument));
        assert_eq!(code(&[("verb", "GetRecord"), ("identifier", "x"), ("metadataPrefix", "oai_dc")]), Some(ProtocolErrorCode::IdDoesNotExist));
        assert_eq!(code(&[("verb", "ListRecords"), ("metadataPrefix", "marc")]), Some(ProtocolErrorCode::CannotDisseminateFormat));
        assert_eq!(code(&[("verb", "ListRecords"), ("metadataPrefix", "oai_dc"), ("set", "zz")]), Some(ProtocolErrorCode::NoRecordsMatch));
        assert_eq!(code(&[("verb", "ListSets")]), None);
        assert_eq!(code(&[("verb", "Identify")]), None);
        match parse(&s.handle_request(&p(&[("verb", "Identify")]), now, &private), "oai_dc") {
            ResponseBody::Identify(i) => {
                assert_eq!(i.deleted_record, DeletedPolicy::Persistent);
                assert_eq!(i.granularity, Granularity::Second);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn past_window_is_byte_stable() {
        let r = repo(7, false);
        let snap = r.publish(at("2006-01-10T12:00:00Z"));
        let s = server(3);
        let q = p(&[("verb", "ListRecords"), ("metadataPrefix", "nsdl_dc"), ("until", "2006-01-10T16:00:00Z")]);
        let a = s.handle_request(&q, at("2006-02-01T00:00:00Z"), &snap);
        let b = s.handle_request(&q, at("2006-02-01T00:00:00Z"), &snap);
        assert_eq!(a, b);
    }
}
