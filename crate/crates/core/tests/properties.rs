mod common;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use chrono::{DateTime, Duration, Utc};
use proptest::prelude::*;
use regex::Regex;

use common::{at, repository};
use oaiagg_core::client::{FailureCategory, HarvestConfig, HarvestMode, HarvestOutcome};
use oaiagg_core::index::{
    build_entities, build_metadata_centric, build_resource_centric, normalize_url, record_views,
};
use oaiagg_core::ingest::{scrub_uri, transform::collapse_whitespace, SafeTransform};
use oaiagg_core::model::{
    format_datestamp, parse_datestamp, parse_response, DcElement, DcName, DeletedPolicy, QualifiedProfile,
    RecordHeader, ResponseBody, ResponseWriter,
};
use oaiagg_core::registry::{read_log, HarvestAttempt, Registry, RegistryPolicy, RegistryState};
use oaiagg_core::server::{OaiServer, ServerConfig};
use oaiagg_core::validator::{ValidationReport, Verdict};

// ---------------------------------------------------------------- datestamps

fn leap(y: u32) -> bool {
    y % 4 == 0 && (y % 100 != 0 || y % 400 == 0)
}

fn days_in(y: u32, m: u32) -> u32 {
    match m {
        4 | 6 | 9 | 11 => 30,
        2 if leap(y) => 29,
        2 => 28,
        _ => 31,
    }
}

fn datestamp_oracle(re: &Regex, s: &str) -> bool {
    let Some(c) = re.captures(s) else {
        return false;
    };
    let n = |i: usize| c[i].parse::<u32>().unwrap();
    let (y, mo, d, h, mi, se) = (n(1), n(2), n(3), n(4), n(5), n(6));
    (1..=12).contains(&mo) && d >= 1 && d <= days_in(y, mo) && h <= 23 && mi <= 59 && se <= 59
}

fn datestamp_candidates() -> impl Strategy<Value = String> {
    prop_oneof![
        4 => "[0-9]{4}-[0-1][0-9]-[0-3][0-9]T[0-2][0-9]:[0-6][0-9]:[0-6][0-9]Z",
        1 => "[0-9]{4}-[0-9]{2}-[0-9]{2}T[0-9]{2}:[0-9]{2}:[0-9]{2}[Z+.,-][0-9Z]{0,3}",
        1 => "[0-9TZ:+.\\- ]{0,24}",
        1 => "\\PC{0,24}",
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    #[test]
    fn datestamp_grammar_matches_regex_oracle(s in datestamp_candidates()) {
        let re = Regex::new(r"^([0-9]{4})-([0-9]{2})-([0-9]{2})T([0-9]{2}):([0-9]{2}):([0-9]{2})Z$").unwrap();
        let parsed = parse_datestamp(&s);
        prop_assert_eq!(parsed.is_ok(), datestamp_oracle(&re, &s), "{:?}", s);
        if let Ok(t) = parsed {
            prop_assert_eq!(format_datestamp(&t), s);
        }
    }
}

// --------------------------------------------------------- record round trip

fn dc_name() -> impl Strategy<Value = DcName> {
    (0..DcName::ALL.len()).prop_map(|i| DcName::ALL[i])
}

fn text_value() -> impl Strategy<Value = String> {
    "\\PC{1,30}".prop_filter("trimmed", |s| s.trim() == s && !s.is_empty())
}

fn datestamp() -> impl Strategy<Value = DateTime<Utc>> {
    (0i64..4_000_000_000).prop_map(|s| DateTime::from_timestamp(s, 0).unwrap())
}

fn header() -> impl Strategy<Value = RecordHeader> {
    (
        "oai:[a-z]{1,6}:[A-Za-z0-9&<>'\"/.]{1,12}",
        datestamp(),
        prop::collection::vec("[a-z]{1,4}(:[a-z]{1,4})?", 0..3),
        any::<bool>(),
    )
        .prop_map(|(identifier, datestamp, set_specs, deleted)| RecordHeader {
            identifier,
            datestamp,
            set_specs,
            deleted,
        })
}

fn list_records_xml(header: &RecordHeader, elements: &[DcElement]) -> String {
    let mut w = ResponseWriter::new(at("2010-01-01T00:00:00Z"), "http://p/oai", &[("verb", "ListRecords")]);
    w.open_verb("ListRecords");
    let mut payload = String::new();
    oaiagg_core::model::dc::write_dc_payload(&mut payload, elements, oaiagg_core::model::DcContainer::Simple);
    w.record(header, Some(&payload));
    w.finish()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn serialize_then_parse_is_identity(
        header in header(),
        elements in prop::collection::vec((dc_name(), text_value()), 0..8),
    ) {
        let elements: Vec<DcElement> = elements.into_iter().map(|(n, v)| DcElement::new(n, v)).collect();
        let xml = list_records_xml(&header, &elements);
        let resp = parse_response(xml.as_bytes(), "oai_dc", &QualifiedProfile::default()).unwrap();
        let ResponseBody::ListRecords { records, token } = resp.body else {
            panic!("not ListRecords");
        };
        prop_assert!(token.is_none());
        prop_assert_eq!(records.len(), 1);
        prop_assert_eq!(&records[0].header, &header);
        let want = if header.deleted { Vec::new() } else { elements };
        prop_assert_eq!(&records[0].elements, &want);
    }

    #[test]
    fn invalid_utf8_is_always_rejected(
        pos in any::<prop::sample::Index>(),
        junk in prop::collection::vec(any::<u8>(), 1..4),
    ) {
        let xml = list_records_xml(
            &RecordHeader::new("oai:p:1", at("2005-01-01T00:00:00Z")),
            &[DcElement::new(DcName::Title, "Plain title"), DcElement::new(DcName::Subject, "Geology")],
        );
        let mut bytes = xml.into_bytes();
        let i = pos.index(bytes.len());
        bytes.splice(i..i, junk);
        if std::str::from_utf8(&bytes).is_err() {
            prop_assert!(parse_response(&bytes, "oai_dc", &QualifiedProfile::default()).is_err());
        }
    }
}

// ------------------------------------------------------------ safe transform

fn padded(atom: impl Strategy<Value = String>) -> impl Strategy<Value = String> {
    ("[ \t\n]{0,2}", atom, "[ \t\n]{0,2}").prop_map(|(a, b, c)| format!("{a}{b}{c}"))
}

fn messy_value() -> impl Strategy<Value = String> {
    padded(prop_oneof![
        prop::sample::select(vec![
            "No abstract submitted", "no  ABSTRACT submitted", "n/a", "None", "unknown",
            "English", "eng", "EN", "fr", "French", "text", "IMAGE", "Interactive Resource",
            "HTTP://Example.ORG/a b", "http://example.org/x", "www.example.org", "ftp://h/f%7e",
            "https://h/q?a=1&b=2", "http://", "urn:isbn:0451450523", "mailto:a@b.c",
        ])
        .prop_map(str::to_string),
        "[A-Za-z ]{0,12}",
        "\\PC{0,16}",
    ])
}

fn messy_elements() -> impl Strategy<Value = Vec<DcElement>> {
    prop::collection::vec(
        (dc_name(), messy_value(), prop::option::of(prop::sample::select(vec!["URI", "RFC3066", "DCMIType"]))),
        0..10,
    )
    .prop_map(|v| {
        v.into_iter()
            .map(|(n, val, scheme)| {
                let mut e = DcElement::new(n, val);
                e.scheme = scheme.map(str::to_string);
                e
            })
            .collect()
    })
}

/// Whether `out` can come from `input` by whitespace collapse, a vocabulary
/// lookup, or URI scrubbing of the collapsed value.
fn derived_from(t: &SafeTransform, out: &DcElement, input: &DcElement) -> bool {
    if out.name != input.name || out.qualifier != input.qualifier {
        return false;
    }
    let collapsed = collapse_whitespace(&input.value);
    out.value == collapsed
        || t.vocabularies().language(&collapsed).as_deref() == Some(out.value.as_str())
        || t.vocabularies().dcmi_type(&collapsed) == Some(out.value.as_str())
        || scrub_uri(&collapsed).fetchable().as_deref() == Some(out.value.as_str())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn safe_transform_is_idempotent_and_invents_nothing(input in messy_elements()) {
        let t = SafeTransform::default();
        let (once, _) = t.apply_elements(&input);
        let (twice, rules) = t.apply_elements(&once);
        prop_assert_eq!(&twice, &once);
        prop_assert!(rules.is_empty(), "second pass fired {:?}", rules);
        for o in &once {
            prop_assert!(input.iter().any(|i| derived_from(&t, o, i)), "invented {:?}", o);
            prop_assert!(!t.is_stop_phrase(&o.value));
            if o.scheme.as_deref() == Some("URI") {
                prop_assert!(normalize_url(&o.value).is_ok(), "false URI claim {:?}", o);
            }
        }
    }
}

// --------------------------------------------------------- URL normalization

fn path_segment() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            "[a-zA-Z0-9_~-]{0,4}",
            prop::sample::select(vec![".", "..", "%2E", "%2e%2E", "%7e", "%2f", "%25", "%41", "%", "%4", ":", "@"])
                .prop_map(str::to_string),
        ],
        0..4,
    )
    .prop_map(|v| v.concat())
}

fn url_candidate() -> impl Strategy<Value = String> {
    let structured = (
        prop::sample::select(vec!["http", "HTTP", "https", "Ftp", "ftp", "gopher"]),
        prop::option::of("[a-z]{1,4}(:[a-z]{0,3})?@"),
        "[A-Za-z0-9.-]{1,10}|%4[1-9A-F][a-z]{0,4}|\\[::[0-9]\\]",
        prop::option::of(":[0-9]{0,5}"),
        prop::collection::vec(path_segment(), 0..5),
        prop::option::of("\\?[A-Za-z0-9=&%.]{0,8}"),
        prop::option::of("#[a-z]{0,4}"),
    )
        .prop_map(|(scheme, user, host, port, segs, query, frag)| {
            let mut u = format!("{scheme}://{}{host}{}", user.unwrap_or_default(), port.unwrap_or_default());
            for s in segs {
                u.push('/');
                u.push_str(&s);
            }
            u.push_str(&query.unwrap_or_default());
            u.push_str(&frag.unwrap_or_default());
            u
        });
    prop_oneof![4 => structured, 1 => "\\PC{0,40}"]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    #[test]
    fn normalize_url_is_idempotent(u in url_candidate()) {
        if let Ok(n) = normalize_url(&u) {
            let again = normalize_url(&n.canonical).expect("canonical form parses");
            prop_assert_eq!(&again.canonical, &n.canonical, "from {:?}", u);
        }
    }
}

// ------------------------------------------------------ entities and search

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "ocean", "forest", "river", "stone"];

/// Spellings of base URL `k` that normalize to the same canonical form.
fn url_variant(k: usize, style: usize) -> String {
    match style % 5 {
        0 => format!("http://host{k}.example.org/r/{k}"),
        1 => format!("HTTP://Host{k}.Example.ORG:80/r/{k}"),
        2 => format!("http://host{k}.example.org/x/../r/./{k}"),
        3 => format!("http://host{k}.example.org/r/{k}#part"),
        _ => format!("http://host{k}.example.org/%72/{k}"),
    }
}

#[derive(Debug, Clone)]
struct Fixture {
    /// Per record: title words and (base URL, spelling) pairs.
    records: Vec<(Vec<usize>, Vec<(usize, usize)>)>,
    /// Content digest per base URL, for the ones that were fetched.
    digests: BTreeMap<usize, u8>,
}

fn fixture(max_records: usize) -> impl Strategy<Value = Fixture> {
    (
        prop::collection::vec(
            (
                prop::collection::vec(0..WORDS.len(), 1..4),
                prop::collection::vec((0usize..15, 0usize..5), 0..3),
            ),
            1..max_records,
        ),
        prop::collection::btree_map(0usize..15, 0u8..4, 0..8),
    )
        .prop_map(|(records, digests)| Fixture { records, digests })
}

/// Connected components of the share-a-base-URL-or-digest relation, by
/// breadth-first search over all pairs.
fn oracle_components(f: &Fixture, use_digests: bool) -> BTreeSet<BTreeSet<usize>> {
    let n = f.records.len();
    let related = |a: usize, b: usize| {
        f.records[a].1.iter().any(|(ka, _)| {
            f.records[b].1.iter().any(|(kb, _)| {
                ka == kb
                    || (use_digests
                        && matches!((f.digests.get(ka), f.digests.get(kb)), (Some(x), Some(y)) if x == y))
            })
        })
    };
    let mut seen = vec![false; n];
    let mut out = BTreeSet::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        let mut comp = BTreeSet::new();
        let mut queue = VecDeque::from([s]);
        seen[s] = true;
        while let Some(a) = queue.pop_front() {
            comp.insert(a);
            for b in 0..n {
                if !seen[b] && related(a, b) {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
        out.insert(comp);
    }
    out
}

fn fixture_repository(f: &Fixture) -> oaiagg_core::repository::Repository {
    let records: Vec<(String, Vec<DcElement>)> = f
        .records
        .iter()
        .enumerate()
        .map(|(i, (words, urls))| {
            let title: Vec<&str> = words.iter().map(|w| WORDS[*w]).collect();
            let mut els = vec![DcElement::new(DcName::Title, title.join(" "))];
            for (k, style) in urls {
                els.push(DcElement::new(DcName::Identifier, url_variant(*k, *style)));
            }
            (format!("oai:fx:{i}"), els)
        })
        .collect();
    repository(&records, at("2006-01-01T00:00:00Z"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn entities_match_brute_force_and_partition(f in fixture(100), use_digests in any::<bool>()) {
        let repo = fixture_repository(&f);
        let snap = repo.publish(at("2006-02-01T00:00:00Z"));
        let views = record_views(&snap);
        let digests: BTreeMap<String, [u8; 16]> = f
            .digests
            .iter()
            .map(|(k, d)| (normalize_url(&url_variant(*k, 0)).unwrap().canonical, [*d; 16]))
            .collect();
        let entities = build_entities(&views, use_digests.then_some(&digests));

        // partition: every record view in exactly one entity
        let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
        for (e, ent) in entities.iter().enumerate() {
            for r in &ent.member_records {
                prop_assert!(owner.insert(r.as_str(), e).is_none(), "{} in two entities", r);
            }
        }
        prop_assert_eq!(owner.len(), views.len());

        let index_of: BTreeMap<String, usize> =
            (0..f.records.len()).map(|i| (repo.mint_identifier("c1", &format!("oai:fx:{i}")), i)).collect();
        let got: BTreeSet<BTreeSet<usize>> = entities
            .iter()
            .map(|e| e.member_records.iter().filter_map(|r| index_of.get(r).copied()).collect::<BTreeSet<_>>())
            .filter(|c| !c.is_empty())
            .collect();
        prop_assert_eq!(got, oracle_components(&f, use_digests));
    }

    #[test]
    fn resource_hits_never_exceed_metadata_hits(
        f in fixture(60),
        query in prop::collection::vec(0..WORDS.len(), 1..3),
    ) {
        let snap = fixture_repository(&f).publish(at("2006-02-01T00:00:00Z"));
        let q: Vec<&str> = query.iter().map(|w| WORDS[*w]).collect();
        let q = q.join(" ");
        let meta = build_metadata_centric(&snap).search(&q);
        let res = build_resource_centric(&snap, None).search(&q);
        prop_assert!(res.len() <= meta.len(), "{}: {} > {}", q, res.len(), meta.len());
        let meta_records: BTreeSet<&String> = meta.iter().flat_map(|h| &h.records).collect();
        for h in &res {
            prop_assert!(h.records.iter().any(|r| meta_records.contains(r)));
        }
    }
}

// ------------------------------------------------------------------ registry

fn passing_report(base_url: &str) -> ValidationReport {
    ValidationReport {
        schema: "oaiagg.validation/1".into(),
        provider: base_url.into(),
        format_prefix: "oai_dc".into(),
        checks: Vec::new(),
        verdict: Verdict::Pass,
        generated_at: at("2006-01-01T00:00:00Z"),
    }
}

fn outcome(code: u8) -> HarvestOutcome {
    match code {
        0 => HarvestOutcome::Failure(FailureCategory::Transient),
        1 => HarvestOutcome::Failure(FailureCategory::ProtocolViolation),
        2 => HarvestOutcome::Failure(FailureCategory::DataFormat),
        _ => HarvestOutcome::Success,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn registry_state_is_a_fold_over_the_log(
        steps in prop::collection::vec((0u8..6, -48i64..96, 1i64..200), 1..25),
        policy in prop::sample::select(vec![DeletedPolicy::Persistent, DeletedPolicy::Transient, DeletedPolicy::No]),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = Registry::open(dir.path(), RegistryPolicy::default()).unwrap();
        let base = "http://p.example.org/oai";
        let id = reg
            .register(
                vec![DcElement::new(DcName::Title, "P")],
                Vec::new(),
                HarvestConfig {
                    collection_id: String::new(),
                    base_url: base.into(),
                    set_spec: None,
                    format_prefix: "oai_dc".into(),
                    schedule_days: 1,
                    enabled: true,
                },
                &passing_report(base),
                policy,
                at("2006-01-01T00:00:00Z"),
            )
            .unwrap();
        let mut now = at("2006-01-02T00:00:00Z");
        let mut states = vec![reg.entry(&id).unwrap().state.clone()];
        for (code, shift_hours, gap_hours) in steps {
            now += Duration::hours(gap_hours);
            let mode = reg.decide_mode(&id, now).unwrap();
            if reg.entry(&id).unwrap().state.watermark.is_none() {
                prop_assert_eq!(mode, HarvestMode::Full);
            }
            let attempt_id = reg.begin_attempt(&id, mode, now).unwrap();
            let out = outcome(code);
            let state = reg
                .record_attempt(HarvestAttempt {
                    attempt_id,
                    collection_id: id.clone(),
                    started_at: now,
                    finished_at: now + Duration::minutes(5),
                    mode,
                    outcome: out,
                    records_seen: 0,
                    new_watermark: (out == HarvestOutcome::Success).then(|| now + Duration::hours(shift_hours)),
                    detail: String::new(),
                })
                .unwrap();
            states.push(state);
        }

        // watermarks never move backwards, and failures never move them
        for (w, pair) in states.windows(2).enumerate() {
            prop_assert!(pair[1].watermark >= pair[0].watermark, "step {}", w);
            if reg.attempts()[w].outcome != HarvestOutcome::Success {
                prop_assert_eq!(pair[1].watermark, pair[0].watermark);
            }
        }

        // every prefix of the log replays to the state recorded at that point
        let events = read_log(&dir.path().join("log.jsonl")).unwrap();
        prop_assert_eq!(events.len(), 1 + 2 * (states.len() - 1));
        for (k, want) in states.iter().enumerate() {
            let replayed = RegistryState::replay(&events[..1 + 2 * k]).unwrap();
            prop_assert_eq!(&replayed.entries[&id].state, want);
        }
        let reopened = Registry::open(dir.path(), RegistryPolicy::default()).unwrap();
        prop_assert_eq!(reopened.state(), reg.state());

        let stats = reg.stats(None, None);
        prop_assert_eq!(stats.breakdown.values().sum::<u64>(), stats.failures);
        prop_assert_eq!(stats.successes + stats.failures, stats.attempts);
    }
}

// -------------------------------------------------------------- OAI serving

fn p(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Pages of one ListIdentifiers request, fetched lazily.
struct Pager<'a> {
    server: &'a OaiServer,
    snap: &'a oaiagg_core::repository::ServingSnapshot,
    now: DateTime<Utc>,
    next: Option<Vec<(String, String)>>,
    got: Vec<(String, DateTime<Utc>)>,
}

impl Pager<'_> {
    fn step(&mut self) -> bool {
        let Some(params) = self.next.take() else {
            return false;
        };
        let body = self.server.handle_request(&params, self.now, self.snap);
        let resp = parse_response(&body, "oai_dc", &QualifiedProfile::default()).unwrap();
        match resp.body {
            ResponseBody::ListIdentifiers { headers, token } => {
                self.got.extend(headers.into_iter().map(|h| (h.identifier, h.datestamp)));
                if let Some(t) = token.filter(|t| !t.token.is_empty()) {
                    self.next = Some(p(&[("verb", "ListIdentifiers"), ("resumptionToken", &t.token)]));
                }
            }
            ResponseBody::Errors(_) => {}
            other => panic!("unexpected {other:?}"),
        }
        true
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn past_windows_are_stable_across_paging(
        batches in prop::collection::vec(1usize..12, 1..6),
        from_h in 0i64..200,
        len_h in 0i64..200,
        page_a in 1usize..8,
        page_b in 1usize..8,
    ) {
        let mut t = at("2006-01-01T00:00:00Z");
        let mut repo = repository(&[], t);
        let mut n = 0;
        for size in batches {
            t += Duration::hours(30);
            let recs: Vec<(String, Vec<DcElement>)> = (0..size)
                .map(|_| {
                    n += 1;
                    (format!("oai:s:{n}"), vec![DcElement::new(DcName::Title, format!("T{n}"))])
                })
                .collect();
            common::insert(&mut repo, &recs, t);
        }
        let snap = repo.publish(t);
        let now = t + Duration::days(2);
        let from = format_datestamp(&(at("2006-01-01T00:00:00Z") + Duration::hours(from_h)));
        let until = format_datestamp(&(at("2006-01-01T00:00:00Z") + Duration::hours(from_h + len_h)));
        let start = p(&[("verb", "ListIdentifiers"), ("metadataPrefix", "oai_dc"), ("from", &from), ("until", &until)]);
        let server = |size| OaiServer::new(ServerConfig { page_size: size, ..ServerConfig::default() });
        let (sa, sb) = (server(page_a), server(page_b));
        let pager = |s| Pager { server: s, snap: &snap, now, next: Some(start.clone()), got: Vec::new() };

        let mut a = pager(&sa);
        while a.step() {}
        // two listings interleaved page by page
        let mut b = pager(&sb);
        let mut c = pager(&sa);
        while b.step() | c.step() {}

        let sorted = |mut v: Vec<(String, DateTime<Utc>)>| { v.sort(); v };
        let (ga, gb, gc) = (sorted(a.got), sorted(b.got), sorted(c.got));
        let lo = parse_datestamp(&from).unwrap();
        let hi = parse_datestamp(&until).unwrap();
        let want = sorted(
            snap.records()
                .iter()
                .filter(|r| r.served_datestamp >= lo && r.served_datestamp <= hi && r.served_datestamp <= now)
                .map(|r| (r.repo_identifier.clone(), r.served_datestamp))
                .collect(),
        );
        prop_assert_eq!(&ga, &want);
        prop_assert_eq!(&gb, &want);
        prop_assert_eq!(&gc, &want);
    }
}
