#![allow(dead_code)]

use std::sync::Arc;

use chrono::{DateTime, Utc};
use oaiagg_core::client::{HarvestClient, HarvestConfig, LocalTransport, RetryPolicy, Transport};
use oaiagg_core::ingest::{build_db_insert, SafeTransform};
use oaiagg_core::model::dc::write_dc_payload;
use oaiagg_core::model::{parse_datestamp, DcContainer, DcElement, DcName, MetadataRecord, RecordHeader};
use oaiagg_core::pipeline::{Aggregator, PipelineSettings, Registration};
use oaiagg_core::repository::{Repository, RepositoryConfig};
use oaiagg_core::sim::{Scenario, Simulator};
use oaiagg_core::validator::{ValidatorOptions, Verdict};

pub fn at(s: &str) -> DateTime<Utc> {
    parse_datestamp(s).unwrap()
}

pub fn original(id: &str, datestamp: DateTime<Utc>, elements: Vec<DcElement>) -> MetadataRecord {
    let mut raw = String::new();
    write_dc_payload(&mut raw, &elements, DcContainer::Simple);
    MetadataRecord {
        header: RecordHeader::new(id, datestamp),
        format_prefix: "oai_dc".into(),
        elements,
        raw_xml: raw.into_bytes(),
    }
}

/// A repository with collection `c1` and one dbInsert of `records`.
pub fn repository(records: &[(String, Vec<DcElement>)], now: DateTime<Utc>) -> Repository {
    let mut r = Repository::in_memory(RepositoryConfig::default());
    r.register_collection("c1", &[DcElement::new(DcName::Title, "Collection")], false, now)
        .unwrap();
    insert(&mut r, records, now);
    r
}

pub fn insert(r: &mut Repository, records: &[(String, Vec<DcElement>)], now: DateTime<Utc>) {
    if records.is_empty() {
        return;
    }
    let t = SafeTransform::default();
    let pairs = records
        .iter()
        .map(|(id, els)| {
            let o = original(id, now, els.clone());
            let n = t.apply(&o);
            (o, n)
        })
        .collect();
    r.insert(&build_db_insert(pairs, "c1", "a").unwrap(), now).unwrap();
}

/// An aggregator harvesting `sim` in process, driven by the simulator clock.
pub fn aggregator(sim: &Arc<Simulator>) -> Aggregator {
    let local = LocalTransport::new();
    local.mount(sim.base_url().to_string(), sim.clone());
    let transport: Arc<dyn Transport> = Arc::new(local);
    Aggregator::in_memory(PipelineSettings::default(), transport.clone(), sim.clone())
        .with_client(HarvestClient::new(transport).with_retry(RetryPolicy::none()))
}

/// Validate and register `sim`; returns the collection id.
pub fn register(agg: &mut Aggregator, sim: &Simulator) -> String {
    let report = agg.validate(sim.base_url(), &ValidatorOptions::default());
    assert_eq!(report.verdict, Verdict::Pass, "{}", report.to_text());
    sim.reset_faults();
    agg.register(
        Registration {
            description: vec![DcElement::new(DcName::Title, "Simulated")],
            contacts: Vec::new(),
            config: HarvestConfig {
                collection_id: String::new(),
                base_url: sim.base_url().to_string(),
                set_spec: None,
                format_prefix: "oai_dc".into(),
                schedule_days: 7,
                enabled: true,
            },
            native_public: false,
        },
        &report,
    )
    .unwrap()
}

pub fn simulator(scenario: Scenario) -> Arc<Simulator> {
    Arc::new(Simulator::new(scenario).unwrap())
}
