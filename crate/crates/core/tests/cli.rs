use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use oaiagg_core::cli::{
    run, ErrorOutput, HarvestOutput, IndexOutput, IngestOutput, PipelineOutput, RegisterOutput, SearchOutput,
    ServeOutput, SimulateOutput,
};
use oaiagg_core::client::{
    FailureCategory, HarvestOutcome, HttpResponse, HttpTransport, OaiHandler, Transport, TransportError,
};
use oaiagg_core::http::HttpServer;
use oaiagg_core::index::DedupReport;
use oaiagg_core::registry::{Registry, RegistryPolicy, StatsReport};
use oaiagg_core::sim::{Scenario, Simulator};
use oaiagg_core::validator::{ValidationReport, Verdict};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

struct Run {
    code: i32,
    out: String,
}

fn oaiagg(dir: &Path, args: &[&str]) -> Run {
    let cfg = dir.join("config.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, "retries = 0\nfetch_delay_ms = 0\n").unwrap();
    }
    let mut argv = vec![
        "oaiagg".to_string(),
        "--config".into(),
        cfg.display().to_string(),
        "--data-dir".into(),
        dir.join("data").display().to_string(),
    ];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = run(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
    }
}

/// Parse as `T`, and check that re-serializing gives back the same document.
fn round_trip<T: Serialize + DeserializeOwned>(text: &str) -> T {
    let raw: serde_json::Value = serde_json::from_str(text).unwrap_or_else(|e| panic!("{e}: {text}"));
    let typed: T = serde_json::from_value(raw.clone()).unwrap();
    assert_eq!(serde_json::to_value(&typed).unwrap(), raw);
    typed
}

/// A simulator that starts answering ListRecords with 503 once broken.
struct Breakable {
    sim: Simulator,
    broken: AtomicBool,
}

impl OaiHandler for Breakable {
    fn handle(&self, params: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        let listing = params.iter().any(|(k, v)| k == "verb" && v == "ListRecords");
        if listing && self.broken.load(Ordering::SeqCst) {
            return Ok(HttpResponse {
                status: 503,
                body: b"down for maintenance".to_vec(),
            });
        }
        self.sim.respond(params)
    }
}

fn serve_scenario(name: &str) -> (Arc<Breakable>, HttpServer) {
    let scenario = Scenario::load(&scenarios().join(name)).unwrap();
    let handler = Arc::new(Breakable {
        sim: Simulator::new(scenario).unwrap(),
        broken: AtomicBool::new(false),
    });
    let server = HttpServer::spawn("127.0.0.1:0", handler.clone(), 2).unwrap();
    (handler, server)
}

#[test]
fn validate_clean_provider_passes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, server) = serve_scenario("clean.toml");
    let url = server.url("/oai");
    let r = oaiagg(dir.path(), &["validate", &url, "--report", "json"]);
    assert_eq!(r.code, 0, "{}", r.out);
    let report: ValidationReport = round_trip(&r.out);
    assert_eq!(report.verdict, Verdict::Pass);
    server.shutdown();
}

#[test]
fn failed_harvest_exits_1_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let (handler, server) = serve_scenario("clean.toml");
    let url = server.url("/oai");
    let r = oaiagg(dir.path(), &["--json", "register", &url, "--title", "Clean"]);
    assert_eq!(r.code, 0, "{}", r.out);
    let reg: RegisterOutput = round_trip(&r.out);
    let id = reg.collection_id.unwrap();

    let r = oaiagg(dir.path(), &["--json", "harvest", "--collection", &id]);
    assert_eq!(r.code, 0, "{}", r.out);
    let ok: HarvestOutput = round_trip(&r.out);
    assert_eq!(ok.reports[0].inserted, 42);
    assert_eq!(ok.snapshot.as_ref().unwrap().record_count, 43);

    handler.broken.store(true, Ordering::SeqCst);
    let r = oaiagg(dir.path(), &["--json", "harvest", "--collection", &id]);
    assert_eq!(r.code, 1, "{}", r.out);
    let failed: HarvestOutput = round_trip(&r.out);
    assert_eq!(failed.reports[0].outcome, HarvestOutcome::Failure(FailureCategory::Transient));
    assert!(r.out.contains("\"category\": \"transient\""));
    assert!(failed.snapshot.is_none());

    // the CLI's stats are the registry's stats over the replayed log
    let r = oaiagg(dir.path(), &["stats", "--format", "json"]);
    assert_eq!(r.code, 0);
    let cli_stats: StatsReport = round_trip(&r.out);
    let registry = Registry::open(&dir.path().join("data/registry"), RegistryPolicy::default()).unwrap();
    assert_eq!(cli_stats, registry.stats(None, None));
    assert_eq!(cli_stats.failures, 1);

    let r = oaiagg(dir.path(), &["--json", "harvest", "--collection", "nope"]);
    assert_eq!(r.code, 1);
    let e: ErrorOutput = round_trip(&r.out);
    assert_eq!(e.kind, "operational");
    server.shutdown();
}

#[test]
fn pipeline_on_clean_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("clean.toml");
    let r = oaiagg(
        dir.path(),
        &["--json", "pipeline", "--scenario", scenario.to_str().unwrap(), "--search", "photosynthesis"],
    );
    assert_eq!(r.code, 0, "{}", r.out);
    let doc: PipelineOutput = round_trip(&r.out);
    assert_eq!(doc.converged, Some(true));
    assert_eq!(Some(doc.repository_items), doc.ground_truth_items);
    assert_eq!(doc.repository_items, 41);
    let hits = doc.hits.unwrap();
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].title, "Photosynthesis in Desert Plants");

    let r = oaiagg(dir.path(), &["--json", "search", "tides", "--mode", "metadata"]);
    assert_eq!(r.code, 0);
    let s: SearchOutput = round_trip(&r.out);
    assert_eq!(s.total, 1);
    assert_eq!(s.snapshot_id, doc.snapshot.snapshot_id);

    let r = oaiagg(dir.path(), &["--json", "index", "--naive-identifier"]);
    assert_eq!(r.code, 0);
    let idx: IndexOutput = round_trip(&r.out);
    assert_eq!(idx.indexes.len(), 1);

    let r = oaiagg(dir.path(), &["--json", "dedup-report"]);
    assert_eq!(r.code, 0);
    let d: DedupReport = round_trip(&r.out);
    assert_eq!(d.snapshot_id, doc.snapshot.snapshot_id);

    // a second run on the same data directory is refused
    let r = oaiagg(dir.path(), &["pipeline", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(r.code, 1);
}

#[test]
fn pipeline_reports_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("forgotten_deletes.toml");
    let r = oaiagg(dir.path(), &["--json", "pipeline", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(r.code, 1, "{}", r.out);
    let doc: PipelineOutput = round_trip(&r.out);
    assert_eq!(doc.converged, Some(false));
    assert_eq!(doc.ground_truth_items, Some(18));
    assert_eq!(doc.repository_items, 20);
}

#[test]
fn simulate_dry_run_and_bad_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenarios().join("clean.toml");
    let r = oaiagg(
        dir.path(),
        &["--json", "simulate", path.to_str().unwrap(), "--dry-run", "--advance-to", "2006-03-03"],
    );
    assert_eq!(r.code, 0);
    let s: SimulateOutput = round_trip(&r.out);
    assert_eq!(s.live_records, 41);
    assert_eq!(s.pending_events, 3);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "version = 99\nstart = \"2006-01-01T00:00:00Z\"\n").unwrap();
    let r = oaiagg(dir.path(), &["simulate", bad.to_str().unwrap(), "--dry-run"]);
    assert_eq!(r.code, 2);
}

#[test]
fn ingest_dbinsert_files() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("clean.toml");
    let r = oaiagg(dir.path(), &["pipeline", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.out);
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir.path().join("data/dbinsert"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 6);
    // replaying an old document re-inserts every record it carries
    let r = oaiagg(dir.path(), &["--json", "ingest", files[0].to_str().unwrap()]);
    assert_eq!(r.code, 0, "{}", r.out);
    let doc: IngestOutput = round_trip(&r.out);
    assert_eq!(doc.files[0].inserted, 42);

    let other = tempfile::tempdir().unwrap();
    let r = oaiagg(other.path(), &["ingest", files[0].to_str().unwrap()]);
    assert_eq!(r.code, 1, "unregistered collection");
}

#[test]
fn serve_oai_process_answers_requests() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenarios().join("clean.toml");
    assert_eq!(oaiagg(dir.path(), &["pipeline", "--scenario", scenario.to_str().unwrap()]).code, 0);
    let mut child = Command::new(env!("CARGO_BIN_EXE_oaiagg"))
        .args(["--json", "--data-dir"])
        .arg(dir.path().join("data"))
        .args(["serve-oai", "--port", "0", "--page-size", "7"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let doc: ServeOutput = round_trip(&line);
    assert_eq!(doc.records, 44);
    let t = HttpTransport::new(std::time::Duration::from_secs(5), "test");
    let r = t.get(&doc.url, &[("verb".into(), "Identify".into())]).unwrap();
    let body = String::from_utf8(r.body).unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert_eq!(r.status, 200);
    assert!(body.contains("<deletedRecord>persistent</deletedRecord>"), "{body}");
}
