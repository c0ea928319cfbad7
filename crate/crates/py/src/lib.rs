//! Python bindings: the pure helpers plus a `Pipeline` that runs the whole
//! aggregator in memory against a simulated provider.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use oaiagg_core::client::{HarvestClient, HarvestConfig, LocalTransport, RetryPolicy, Transport};
use oaiagg_core::index::{build_metadata_centric, build_resource_centric, IndexKind, SearchIndex};
use oaiagg_core::ingest::SafeTransform;
use oaiagg_core::model::{format_datestamp, parse_response, DcElement, DcName, QualifiedProfile, ResponseBody};
use oaiagg_core::pipeline::{Aggregator, PipelineSettings, Registration};
use oaiagg_core::repository::RecordKind;
use oaiagg_core::server::{OaiServer, ServerConfig};
use oaiagg_core::sim::{Scenario, Simulator};
use oaiagg_core::validator::{ValidatorOptions, Verdict};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_error(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Serialize through JSON into plain Python objects.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(runtime_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_error)
}

/// Canonical form of a URL; ValueError when it cannot be parsed.
#[pyfunction]
fn normalize_url(url: &str) -> PyResult<String> {
    oaiagg_core::index::normalize_url(url).map(|n| n.canonical).map_err(value_error)
}

/// The cleaned URI, or None when the value is not a fetchable URI.
#[pyfunction]
fn scrub_uri(value: &str) -> Option<String> {
    oaiagg_core::ingest::scrub_uri(value).fetchable()
}

/// Parse a second-granularity UTC datestamp and return it in canonical
/// form.
#[pyfunction]
fn parse_datestamp(text: &str) -> PyResult<String> {
    oaiagg_core::model::parse_datestamp(text)
        .map(|t| format_datestamp(&t))
        .map_err(value_error)
}

#[pyfunction]
fn md5_hex(data: &[u8]) -> String {
    oaiagg_core::index::md5_hex(data)
}

/// Apply the safe transforms to a list of element dicts
/// (`{"name": "title", "value": ...}`). Returns `(elements, rules_fired)`.
#[pyfunction]
fn safe_transform<'py>(py: Python<'py>, elements: &Bound<'py, PyAny>) -> PyResult<(Bound<'py, PyAny>, Vec<String>)> {
    let input: Vec<DcElement> = from_py(py, elements)?;
    let (out, rules) = SafeTransform::default().apply_elements(&input);
    Ok((to_py(py, &out)?, rules.iter().map(|r| r.as_str().to_string()).collect()))
}

/// Parse a ListRecords or ListIdentifiers response into
/// `{"records": [...], "token": ...}`. Protocol errors come back under
/// `"errors"`.
#[pyfunction]
#[pyo3(signature = (xml, format_prefix = "oai_dc"))]
fn parse_list_response<'py>(py: Python<'py>, xml: &[u8], format_prefix: &str) -> PyResult<Bound<'py, PyAny>> {
    let resp = parse_response(xml, format_prefix, &QualifiedProfile::default()).map_err(value_error)?;
    let doc = match resp.body {
        ResponseBody::ListRecords { records, token } => serde_json::json!({ "records": records, "token": token }),
        ResponseBody::ListIdentifiers { headers, token } => serde_json::json!({ "headers": headers, "token": token }),
        ResponseBody::Errors(errors) => serde_json::json!({
            "errors": errors.iter().map(|e| serde_json::json!({"code": e.code.as_str(), "message": e.message})).collect::<Vec<_>>()
        }),
        _ => return Err(PyValueError::new_err("not a list response")),
    };
    to_py(py, &doc)
}

/// The aggregator wired to an in-process simulated provider. The
/// simulator's clock drives everything.
#[pyclass(unsendable)]
struct Pipeline {
    sim: Arc<Simulator>,
    agg: Aggregator,
    collection_id: Option<String>,
    indexes: Vec<SearchIndex>,
}

#[pymethods]
impl Pipeline {
    /// Build from the text of a scenario file.
    #[new]
    fn new(scenario_toml: &str) -> PyResult<Self> {
        let scenario = Scenario::from_toml(scenario_toml).map_err(value_error)?;
        let sim = Arc::new(Simulator::new(scenario).map_err(value_error)?);
        let local = LocalTransport::new();
        local.mount(sim.base_url().to_string(), sim.clone());
        let transport: Arc<dyn Transport> = Arc::new(local);
        let agg = Aggregator::in_memory(PipelineSettings::default(), transport.clone(), sim.clone())
            .with_client(HarvestClient::new(transport).with_retry(RetryPolicy::none()));
        Ok(Pipeline {
            sim,
            agg,
            collection_id: None,
            indexes: Vec::new(),
        })
    }

    #[getter]
    fn collection_id(&self) -> Option<String> {
        self.collection_id.clone()
    }

    /// Validate the provider and register it. Returns the validation report.
    fn register<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = self.agg.validate(self.sim.base_url(), &ValidatorOptions::default());
        self.sim.reset_faults();
        if report.verdict == Verdict::Pass {
            let id = self
                .agg
                .register(
                    Registration {
                        description: vec![DcElement::new(DcName::Title, self.sim.scenario().repository_name.clone())],
                        contacts: Vec::new(),
                        config: HarvestConfig {
                            collection_id: String::new(),
                            base_url: self.sim.base_url().to_string(),
                            set_spec: None,
                            format_prefix: "oai_dc".into(),
                            schedule_days: 7,
                            enabled: true,
                        },
                        native_public: false,
                    },
                    &report,
                )
                .map_err(runtime_error)?;
            self.collection_id = Some(id);
        }
        to_py(py, &report)
    }

    /// One harvest in the mode the registry picks. Returns the report.
    fn harvest<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let id = self
            .collection_id
            .clone()
            .ok_or_else(|| PyRuntimeError::new_err("register first"))?;
        let report = self.agg.harvest(&id).map_err(runtime_error)?;
        to_py(py, &report)
    }

    /// Move the simulated clock to the next timeline event. False when none
    /// is left.
    fn advance(&self) -> PyResult<bool> {
        match self.sim.next_event_at() {
            Some(at) => {
                self.sim.advance(at).map_err(runtime_error)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// Publish staging and rebuild both indexes. Returns the manifest.
    fn publish<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let snap = self.agg.publish().map_err(runtime_error)?;
        self.indexes = vec![build_metadata_centric(&snap), build_resource_centric(&snap, None)];
        to_py(py, &snap.manifest())
    }

    /// Search the last published snapshot; `mode` is "metadata" or
    /// "resource".
    #[pyo3(signature = (query, mode = "resource"))]
    fn search<'py>(&self, py: Python<'py>, query: &str, mode: &str) -> PyResult<Bound<'py, PyAny>> {
        let kind = match mode {
            "metadata" => IndexKind::MetadataCentric,
            "resource" => IndexKind::ResourceCentric,
            other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let index = self
            .indexes
            .iter()
            .find(|i| i.kind == kind)
            .ok_or_else(|| PyRuntimeError::new_err("publish first"))?;
        to_py(py, &index.search(query))
    }

    /// Source identifiers of live items in the repository.
    fn repository_items(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .agg
            .repository()
            .staging()
            .records()
            .filter(|r| r.kind == RecordKind::Item && !r.deleted)
            .map(|r| r.source_identifier.clone())
            .collect();
        ids.sort();
        ids
    }

    /// Identifiers of live records at the simulated provider.
    fn ground_truth(&self) -> Vec<String> {
        self.sim.live_records().into_keys().collect()
    }

    /// Answer an OAI-PMH request from the published snapshot, as the
    /// aggregator's own data provider would.
    fn oai_request<'py>(&self, py: Python<'py>, params: Vec<(String, String)>) -> Bound<'py, PyBytes> {
        let server = OaiServer::new(ServerConfig::default());
        let body = server.handle_request(&params, self.sim.now(), &self.agg.snapshot());
        PyBytes::new(py, &body)
    }
}

#[pymodule]
fn oaiagg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(normalize_url, m)?)?;
    m.add_function(wrap_pyfunction!(scrub_uri, m)?)?;
    m.add_function(wrap_pyfunction!(parse_datestamp, m)?)?;
    m.add_function(wrap_pyfunction!(md5_hex, m)?)?;
    m.add_function(wrap_pyfunction!(safe_transform, m)?)?;
    m.add_function(wrap_pyfunction!(parse_list_response, m)?)?;
    m.add_class::<Pipeline>()?;
    Ok(())
}
