//! The `oaiagg` command line.
//!
//! Settings come from a TOML file (`--config` or `OAIAGG_CONFIG`), then
//! flags. Every subcommand prints text by default and one JSON document with
//! `--json`; each document carries a `schema` tag naming one of the output
//! types below. Exit status is 0 on success, 1 on an operational failure and
//! 2 on a usage error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::client::{
    HarvestClient, HarvestConfig, HarvestMode, HttpTransport, LocalTransport, RetryPolicy, Transport,
};
use crate::clock::{Clock, SystemClock};
use crate::http::HttpServer;
use crate::index::{DedupReport, FetchPolicy, Fetcher, Hit, HttpFetcher, IndexKind, SearchIndex};
use crate::ingest::{parse_db_insert, SafeTransform};
use crate::model::{parse_datestamp, DcElement, DcName, QualifiedProfile};
use crate::pipeline::{Aggregator, HarvestReport, PipelineError, PipelineSettings, Registration};
use crate::registry::{RegistryPolicy, StatsReport};
use crate::repository::{Manifest, RecordKind, RepositoryConfig, SharedRepository};
use crate::server::{OaiServer, RepositoryEndpoint, ServerConfig};
use crate::sim::{Scenario, Simulator};
use crate::validator::{ValidationReport, ValidatorOptions, Verdict};

pub const CONFIG_ENV: &str = "OAIAGG_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data_dir: PathBuf,
    pub postdate_offset_secs: u64,
    /// Records per page when serving.
    pub page_size: usize,
    /// Schedule given to new registrations.
    pub schedule_days: u32,
    pub resync_failures: u32,
    pub resync_every: u32,
    pub fetch_concurrency: usize,
    pub fetch_delay_ms: u64,
    pub fetch_timeout_secs: u64,
    pub fetch_max_bytes: u64,
    pub request_timeout_secs: u64,
    pub retries: u32,
    pub retry_delay_secs: u64,
    /// Extra stop phrases, one per line.
    pub stop_phrases: Option<PathBuf>,
    /// Replacement qualified-DC profile (JSON).
    pub qdc_profile: Option<PathBuf>,
    pub domain: String,
    pub repository_name: String,
    pub admin_email: String,
    pub token_ttl_secs: u64,
    /// Resumption-token signing key. Without one, tokens die with the
    /// serving process.
    pub token_key: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        let repo = RepositoryConfig::default();
        let server = ServerConfig::default();
        let registry = RegistryPolicy::default();
        let fetch = FetchPolicy::default();
        Config {
            data_dir: PathBuf::from("oaiagg-data"),
            postdate_offset_secs: repo.postdate_offset.num_seconds() as u64,
            page_size: server.page_size,
            schedule_days: 7,
            resync_failures: registry.resync_failures,
            resync_every: registry.resync_every,
            fetch_concurrency: fetch.concurrency,
            fetch_delay_ms: fetch.per_host_delay.as_millis() as u64,
            fetch_timeout_secs: 20,
            fetch_max_bytes: 16 << 20,
            request_timeout_secs: 60,
            retries: 3,
            retry_delay_secs: 30,
            stop_phrases: None,
            qdc_profile: None,
            domain: repo.domain,
            repository_name: server.repository_name,
            admin_email: server.admin_email,
            token_ttl_secs: server.token_ttl.num_seconds() as u64,
            token_key: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<(), CliError> {
        let positive = [
            ("postdate_offset_secs", self.postdate_offset_secs),
            ("page_size", self.page_size as u64),
            ("schedule_days", u64::from(self.schedule_days)),
            ("fetch_concurrency", self.fetch_concurrency as u64),
            ("fetch_timeout_secs", self.fetch_timeout_secs),
            ("fetch_max_bytes", self.fetch_max_bytes),
            ("request_timeout_secs", self.request_timeout_secs),
            ("token_ttl_secs", self.token_ttl_secs),
        ];
        match positive.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(CliError::Usage(format!("config: {name} must be positive"))),
            None => Ok(()),
        }
    }

    fn transform(&self) -> Result<SafeTransform, CliError> {
        match &self.stop_phrases {
            Some(p) => SafeTransform::extended_from(p)
                .map_err(|e| CliError::Usage(format!("cannot read stop phrases {}: {e}", p.display()))),
            None => Ok(SafeTransform::default()),
        }
    }

    fn profile(&self) -> Result<QualifiedProfile, CliError> {
        match &self.qdc_profile {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read profile {}: {e}", p.display())))?;
                QualifiedProfile::from_json(&text)
                    .map_err(|e| CliError::Usage(format!("bad profile {}: {e}", p.display())))
            }
            None => Ok(QualifiedProfile::default()),
        }
    }

    pub fn settings(&self) -> Result<PipelineSettings, CliError> {
        Ok(PipelineSettings {
            repository: RepositoryConfig {
                domain: self.domain.clone(),
                postdate_offset: Duration::seconds(self.postdate_offset_secs as i64),
            },
            registry: RegistryPolicy {
                resync_failures: self.resync_failures,
                resync_every: self.resync_every,
            },
            fetch: self.fetch_policy(),
            profile: self.profile()?,
            transform: Some(Arc::new(self.transform()?)),
        })
    }

    fn fetch_policy(&self) -> FetchPolicy {
        FetchPolicy {
            concurrency: self.fetch_concurrency,
            per_host_delay: StdDuration::from_millis(self.fetch_delay_ms),
        }
    }

    fn fetcher(&self) -> HttpFetcher {
        HttpFetcher::new(StdDuration::from_secs(self.fetch_timeout_secs), self.fetch_max_bytes)
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            retries: self.retries,
            base_delay: StdDuration::from_secs(self.retry_delay_secs),
        }
    }

    fn server_config(&self, base_url: String, page_size: usize) -> ServerConfig {
        ServerConfig {
            page_size,
            repository_name: self.repository_name.clone(),
            base_url,
            admin_email: self.admin_email.clone(),
            token_ttl: Duration::seconds(self.token_ttl_secs as i64),
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Failed(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "oaiagg", version, about = "Harvest, normalize, re-expose and index OAI-PMH metadata")]
pub struct Cli {
    /// Print one JSON document instead of text.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, env = CONFIG_ENV, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchMode {
    Metadata,
    Resource,
    Naive,
}

impl SearchMode {
    fn kind(self) -> IndexKind {
        match self {
            SearchMode::Metadata => IndexKind::MetadataCentric,
            SearchMode::Resource => IndexKind::ResourceCentric,
            SearchMode::Naive => IndexKind::NaiveIdentifier,
        }
    }
}

#[derive(Debug, Args)]
pub struct IndexKinds {
    #[arg(long)]
    pub metadata_centric: bool,
    #[arg(long)]
    pub resource_centric: bool,
    #[arg(long)]
    pub naive_identifier: bool,
}

impl IndexKinds {
    fn selected(&self) -> Vec<IndexKind> {
        let mut kinds = Vec::new();
        if self.metadata_centric {
            kinds.push(IndexKind::MetadataCentric);
        }
        if self.resource_centric {
            kinds.push(IndexKind::ResourceCentric);
        }
        if self.naive_identifier {
            kinds.push(IndexKind::NaiveIdentifier);
        }
        if kinds.is_empty() {
            kinds = vec![IndexKind::MetadataCentric, IndexKind::ResourceCentric];
        }
        kinds
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a provider for protocol conformance.
    Validate {
        base_url: String,
        #[arg(long, default_value = "oai_dc")]
        format: String,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
        #[arg(long, value_enum)]
        report: Option<ReportFormat>,
    },
    /// Validate a provider and add it to the registry.
    Register {
        base_url: String,
        #[arg(long)]
        title: String,
        #[arg(long)]
        description: Option<String>,
        #[arg(long)]
        set: Option<String>,
        #[arg(long, default_value = "oai_dc")]
        format: String,
        #[arg(long)]
        schedule_days: Option<u32>,
        #[arg(long = "contact")]
        contacts: Vec<String>,
        /// Allow the native metadata to be re-exposed.
        #[arg(long)]
        native_public: bool,
    },
    /// Harvest registered collections (default: those that are due).
    Harvest {
        #[arg(long, conflicts_with_all = ["all", "collection"])]
        due: bool,
        #[arg(long, conflicts_with = "collection")]
        all: bool,
        #[arg(long = "collection", value_name = "ID")]
        collection: Vec<String>,
        /// Force a full harvest of the named collections.
        #[arg(long, requires = "collection")]
        full: bool,
        #[arg(long)]
        no_publish: bool,
    },
    /// Harvest attempt statistics by failure category.
    Stats {
        #[arg(long)]
        since: Option<String>,
        #[arg(long)]
        until: Option<String>,
        #[arg(long, value_enum)]
        format: Option<ReportFormat>,
    },
    /// Insert dbInsert documents into the repository.
    Ingest {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long)]
        no_publish: bool,
    },
    /// Serve the published snapshot over OAI-PMH.
    ServeOai {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        page_size: Option<usize>,
        #[arg(long)]
        base_url: Option<String>,
        #[arg(long, default_value_t = 4)]
        threads: usize,
    },
    /// Build search indexes over the published snapshot.
    Index {
        #[command(flatten)]
        kinds: IndexKinds,
        /// Fetch resource URLs and merge identical content.
        #[arg(long)]
        fetch: bool,
    },
    /// Query a saved index.
    Search {
        #[arg(required = true)]
        query: Vec<String>,
        #[arg(long, value_enum, default_value = "resource")]
        mode: SearchMode,
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    /// URL and content duplication in the published snapshot.
    DedupReport {
        #[arg(long)]
        fetch: bool,
    },
    /// Serve a scenario file as a simulated provider.
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 0)]
        port: u16,
        /// Move the simulated clock (applying timeline events) before serving.
        #[arg(long)]
        advance_to: Option<String>,
        /// Load the scenario, print its summary and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Harvest, publish and index in one go.
    Pipeline {
        /// Run against an in-process simulator, stepping through its timeline.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        search: Option<String>,
        #[arg(long)]
        fetch: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorOutput {
    pub schema: String,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterOutput {
    pub schema: String,
    pub collection_id: Option<String>,
    pub validation: ValidationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestOutput {
    pub schema: String,
    pub reports: Vec<HarvestReport>,
    pub snapshot: Option<Manifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedFile {
    pub path: PathBuf,
    pub collection_id: String,
    pub attempt_id: String,
    pub inserted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutput {
    pub schema: String,
    pub files: Vec<IngestedFile>,
    pub snapshot: Option<Manifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeOutput {
    pub schema: String,
    pub url: String,
    pub snapshot_id: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub kind: IndexKind,
    pub documents: usize,
    pub entities: usize,
    pub fetch_failures: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexOutput {
    pub schema: String,
    pub snapshot_id: String,
    pub indexes: Vec<IndexSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutput {
    pub schema: String,
    pub query: String,
    pub kind: IndexKind,
    pub snapshot_id: String,
    pub total: usize,
    pub hits: Vec<Hit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateOutput {
    pub schema: String,
    pub name: String,
    pub url: Option<String>,
    pub now: DateTime<Utc>,
    pub live_records: usize,
    pub pending_events: usize,
    pub faults: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub schema: String,
    pub collection_id: Option<String>,
    pub validation: Option<Verdict>,
    pub harvests: Vec<HarvestReport>,
    pub snapshot: Manifest,
    pub indexes: Vec<IndexSummary>,
    /// Live items in the repository (collection records excluded).
    pub repository_items: usize,
    /// Live records at the simulated provider, when run on a scenario.
    pub ground_truth_items: Option<usize>,
    pub converged: Option<bool>,
    pub hits: Option<Vec<Hit>>,
}

/// What a subcommand produced: a JSON document, its text rendering, and
/// whether it counts as success.
struct Output {
    json: serde_json::Value,
    text: String,
    ok: bool,
}

impl Output {
    fn new<T: Serialize>(value: &T, text: String, ok: bool) -> Self {
        Output {
            json: serde_json::to_value(value).expect("output serializes"),
            text,
            ok,
        }
    }
}

/// Parse `args` (program name first), run, and print to `out`/`err`.
/// Returns the exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    let json = cli.json || wants_json_report(&cli.command);
    let result = execute(cli, json, out);
    match result {
        Ok(o) => {
            let _ = if json {
                writeln!(out, "{}", serde_json::to_string_pretty(&o.json).expect("json renders"))
            } else {
                write!(out, "{}", o.text)
            };
            if o.ok {
                0
            } else {
                1
            }
        }
        Err(e) => {
            if json {
                let doc = ErrorOutput {
                    schema: "oaiagg.error/1".into(),
                    kind: if e.exit_code() == 2 { "usage" } else { "operational" }.into(),
                    message: e.message().to_string(),
                };
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&doc).expect("json renders"));
            }
            let _ = writeln!(err, "error: {}", e.message());
            e.exit_code()
        }
    }
}

fn wants_json_report(cmd: &Command) -> bool {
    matches!(
        cmd,
        Command::Validate {
            report: Some(ReportFormat::Json),
            ..
        } | Command::Stats {
            format: Some(ReportFormat::Json),
            ..
        }
    )
}

struct Context {
    config: Config,
}

impl Context {
    fn open(&self, transport: Arc<dyn Transport>, clock: Arc<dyn Clock>) -> Result<Aggregator, CliError> {
        let agg = Aggregator::open(&self.config.data_dir, self.config.settings()?, transport.clone(), clock)?;
        let profile = agg.client().profile().clone();
        Ok(agg.with_client(
            HarvestClient::new(transport)
                .with_retry(self.config.retry())
                .with_profile(profile),
        ))
    }

    fn open_http(&self) -> Result<Aggregator, CliError> {
        let transport = HttpTransport::new(
            StdDuration::from_secs(self.config.request_timeout_secs),
            concat!("oaiagg/", env!("CARGO_PKG_VERSION")),
        );
        self.open(Arc::new(transport), Arc::new(SystemClock))
    }
}

fn execute(cli: Cli, json: bool, out: &mut dyn Write) -> Result<Output, CliError> {
    let mut config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(d) = cli.data_dir {
        config.data_dir = d;
    }
    config.check()?;
    let ctx = Context { config };
    match cli.command {
        Command::Validate { base_url, format, seed, .. } => validate(&ctx, &base_url, format, seed),
        Command::Register {
            base_url,
            title,
            description,
            set,
            format,
            schedule_days,
            contacts,
            native_public,
        } => {
            let mut desc = vec![DcElement::new(DcName::Title, title)];
            if let Some(d) = description {
                desc.push(DcElement::new(DcName::Description, d));
            }
            let reg = Registration {
                description: desc,
                contacts,
                config: HarvestConfig {
                    collection_id: String::new(),
                    base_url,
                    set_spec: set,
                    format_prefix: format,
                    schedule_days: schedule_days.unwrap_or(ctx.config.schedule_days),
                    enabled: true,
                },
                native_public,
            };
            register(&ctx, reg)
        }
        Command::Harvest {
            all,
            collection,
            full,
            no_publish,
            ..
        } => harvest(&ctx, all, &collection, full, !no_publish),
        Command::Stats { since, until, .. } => stats(&ctx, since.as_deref(), until.as_deref()),
        Command::Ingest { files, no_publish } => ingest(&ctx, &files, !no_publish),
        Command::ServeOai {
            bind,
            port,
            page_size,
            base_url,
            threads,
        } => serve_oai(&ctx, &bind, port, page_size, base_url, threads, json, out),
        Command::Index { kinds, fetch } => index(&ctx, &kinds.selected(), fetch),
        Command::Search { query, mode, limit } => search(&ctx, &query.join(" "), mode.kind(), limit),
        Command::DedupReport { fetch } => dedup_report(&ctx, fetch),
        Command::Simulate {
            scenario,
            bind,
            port,
            advance_to,
            dry_run,
        } => simulate(&scenario, &bind, port, advance_to.as_deref(), dry_run, json, out),
        Command::Pipeline { scenario, search, fetch } => match scenario {
            Some(path) => pipeline_scenario(&ctx, &path, search.as_deref(), fetch),
            None => pipeline_live(&ctx, search.as_deref(), fetch),
        },
    }
}

/// Full datestamp or a bare day (midnight UTC).
fn parse_instant(text: &str) -> Result<DateTime<Utc>, CliError> {
    if let Ok(t) = parse_datestamp(text) {
        return Ok(t);
    }
    NaiveDate::parse_from_str(text, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|d| d.and_utc())
        .ok_or_else(|| CliError::Usage(format!("not a datestamp: {text:?}")))
}

fn validate(ctx: &Context, base_url: &str, format: String, seed: u64) -> Result<Output, CliError> {
    let agg = ctx.open_http()?;
    let report = agg.validate(
        base_url,
        &ValidatorOptions {
            format_prefix: format,
            seed,
        },
    );
    let ok = report.verdict == Verdict::Pass;
    Ok(Output::new(&report, report.to_text(), ok))
}

fn register(ctx: &Context, reg: Registration) -> Result<Output, CliError> {
    let mut agg = ctx.open_http()?;
    let report = agg.validate(
        &reg.config.base_url,
        &ValidatorOptions {
            format_prefix: reg.config.format_prefix.clone(),
            ..ValidatorOptions::default()
        },
    );
    let mut text = report.to_text();
    let collection_id = if report.verdict == Verdict::Pass {
        let id = agg.register(reg, &report)?;
        text.push_str(&format!("registered {id}\n"));
        Some(id)
    } else {
        text.push_str("not registered: validation failed\n");
        None
    };
    let ok = collection_id.is_some();
    let doc = RegisterOutput {
        schema: "oaiagg.register/1".into(),
        collection_id,
        validation: report,
    };
    Ok(Output::new(&doc, text, ok))
}

fn report_line(r: &HarvestReport) -> String {
    let mode = match r.mode {
        HarvestMode::Full => "full".to_string(),
        HarvestMode::Incremental { since } => format!("incremental since {}", since.format("%Y-%m-%dT%H:%M:%SZ")),
    };
    let outcome = match r.outcome {
        crate::client::HarvestOutcome::Success => "success".to_string(),
        crate::client::HarvestOutcome::Failure(c) => format!("FAILURE ({c})"),
    };
    let mut line = format!(
        "{} {} {mode}: {outcome}; {} seen, {} inserted, {} deleted, {} excluded, {} flagged",
        r.collection_id,
        r.attempt_id,
        r.records_seen,
        r.inserted,
        r.deleted,
        r.excluded.len(),
        r.flagged
    );
    if !r.detail.is_empty() {
        line.push_str(&format!(" [{}]", r.detail));
    }
    line.push('\n');
    line
}

fn manifest_line(m: &Manifest) -> String {
    format!("published snapshot {} ({} records)\n", m.snapshot_id, m.record_count)
}

fn harvest(ctx: &Context, all: bool, collections: &[String], full: bool, publish: bool) -> Result<Output, CliError> {
    let mut agg = ctx.open_http()?;
    for id in collections {
        if agg.registry().entry(id).is_none() {
            return Err(CliError::Failed(format!("unknown collection {id}")));
        }
    }
    let reports = if !collections.is_empty() {
        collections
            .iter()
            .map(|id| {
                if full {
                    agg.harvest_with_mode(id, HarvestMode::Full)
                } else {
                    agg.harvest(id)
                }
            })
            .collect::<Result<Vec<_>, _>>()?
    } else if all {
        agg.harvest_all()?
    } else {
        agg.harvest_due()?
    };
    let snapshot = if publish && reports.iter().any(|r| r.is_success()) {
        Some(agg.publish()?.manifest())
    } else {
        None
    };
    let mut text: String = reports.iter().map(report_line).collect();
    if reports.is_empty() {
        text.push_str("nothing to harvest\n");
    }
    if let Some(m) = &snapshot {
        text.push_str(&manifest_line(m));
    }
    let ok = reports.iter().all(HarvestReport::is_success);
    let doc = HarvestOutput {
        schema: "oaiagg.harvest/1".into(),
        reports,
        snapshot,
    };
    Ok(Output::new(&doc, text, ok))
}

fn stats(ctx: &Context, since: Option<&str>, until: Option<&str>) -> Result<Output, CliError> {
    let since = since.map(parse_instant).transpose()?;
    let until = until.map(parse_instant).transpose()?;
    let agg = ctx.open_http()?;
    let report: StatsReport = agg.registry().stats(since, until);
    Ok(Output::new(&report, report.to_text(), true))
}

fn ingest(ctx: &Context, files: &[PathBuf], publish: bool) -> Result<Output, CliError> {
    let agg = ctx.open_http()?;
    let now = agg.clock().now();
    let mut done = Vec::new();
    {
        let mut repo = agg.repository().staging();
        for path in files {
            let bytes = std::fs::read(path).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            let doc = parse_db_insert(&bytes).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            let ids = repo
                .insert(&doc, now)
                .map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
            done.push(IngestedFile {
                path: path.clone(),
                collection_id: doc.collection_id,
                attempt_id: doc.attempt_id,
                inserted: ids.len(),
            });
        }
        repo.save().map_err(|e| CliError::Failed(e.to_string()))?;
    }
    let snapshot = if publish { Some(agg.publish()?.manifest()) } else { None };
    let mut text: String = done
        .iter()
        .map(|f| format!("{}: {} records into {}\n", f.path.display(), f.inserted, f.collection_id))
        .collect();
    if let Some(m) = &snapshot {
        text.push_str(&manifest_line(m));
    }
    let doc = IngestOutput {
        schema: "oaiagg.ingest/1".into(),
        files: done,
        snapshot,
    };
    Ok(Output::new(&doc, text, true))
}

fn print_now(out: &mut dyn Write, json: &serde_json::Value, text: &str, as_json: bool) {
    let _ = if as_json {
        writeln!(out, "{}", serde_json::to_string(json).expect("json renders"))
    } else {
        write!(out, "{text}")
    };
    let _ = out.flush();
}

fn serve_oai(
    ctx: &Context,
    bind: &str,
    port: u16,
    page_size: Option<usize>,
    base_url: Option<String>,
    threads: usize,
    json: bool,
    out: &mut dyn Write,
) -> Result<Output, CliError> {
    let page_size = page_size.unwrap_or(ctx.config.page_size);
    if page_size == 0 {
        return Err(CliError::Usage("page size must be positive".into()));
    }
    let agg = ctx.open_http()?;
    let repository = agg.repository().clone();
    let listener = std::net::TcpListener::bind((bind, port))
        .map_err(|e| CliError::Failed(format!("cannot bind {bind}:{port}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| CliError::Failed(e.to_string()))?;
    drop(listener);
    let base_url = base_url.unwrap_or_else(|| format!("http://{addr}/oai"));
    let config = ctx.config.server_config(base_url.clone(), page_size);
    let server = match &ctx.config.token_key {
        Some(k) => OaiServer::with_key(config, k.as_bytes().to_vec()),
        None => OaiServer::new(config),
    };
    let endpoint = Arc::new(RepositoryEndpoint {
        server,
        repository: repository.clone(),
        clock: Arc::new(SystemClock),
    });
    let http = HttpServer::spawn(&addr.to_string(), endpoint, threads)
        .map_err(|e| CliError::Failed(format!("cannot serve on {addr}: {e}")))?;
    follow_snapshots(repository.clone());
    let snap = repository.current();
    let doc = ServeOutput {
        schema: "oaiagg.serve/1".into(),
        url: http.url("/oai"),
        snapshot_id: snap.id().to_string(),
        records: snap.len(),
    };
    let text = format!("serving {} records of snapshot {} at {}\n", doc.records, doc.snapshot_id, doc.url);
    print_now(out, &serde_json::to_value(&doc).expect("json"), &text, json);
    http.wait();
    Ok(Output::new(&doc, String::new(), true))
}

/// Poll the data directory for snapshots published by other processes.
fn follow_snapshots(repository: Arc<SharedRepository>) {
    std::thread::spawn(move || loop {
        std::thread::sleep(StdDuration::from_secs(2));
        match repository.reload() {
            Ok(true) => log::info!("now serving snapshot {}", repository.current().id()),
            Ok(false) => {}
            Err(e) => log::warn!("snapshot reload: {e}"),
        }
    });
}

fn summarize(index: &SearchIndex, failures: BTreeMap<String, String>) -> IndexSummary {
    IndexSummary {
        kind: index.kind,
        documents: index.docs.len(),
        entities: index.entities.len(),
        fetch_failures: failures,
    }
}

fn build_indexes(agg: &Aggregator, kinds: &[IndexKind], fetcher: Option<&dyn Fetcher>) -> Result<Vec<IndexSummary>, CliError> {
    kinds
        .iter()
        .map(|kind| {
            let (index, failed) = agg.build_index(*kind, fetcher)?;
            let failed = failed.into_iter().map(|(u, e)| (u, e.to_string())).collect();
            Ok(summarize(&index, failed))
        })
        .collect()
}

fn index_lines(indexes: &[IndexSummary]) -> String {
    indexes
        .iter()
        .map(|s| {
            let kind = serde_json::to_value(s.kind).expect("kind");
            let mut line = format!("{} index: {} documents", kind.as_str().unwrap_or("?"), s.documents);
            if s.kind == IndexKind::ResourceCentric {
                line.push_str(&format!(", {} entities", s.entities));
            }
            if !s.fetch_failures.is_empty() {
                line.push_str(&format!(", {} URLs could not be fetched", s.fetch_failures.len()));
            }
            line.push('\n');
            line
        })
        .collect()
}

fn index(ctx: &Context, kinds: &[IndexKind], fetch: bool) -> Result<Output, CliError> {
    let agg = ctx.open_http()?;
    let fetcher = fetch.then(|| ctx.config.fetcher());
    let indexes = build_indexes(&agg, kinds, fetcher.as_ref().map(|f| f as &dyn Fetcher))?;
    let doc = IndexOutput {
        schema: "oaiagg.index/1".into(),
        snapshot_id: agg.snapshot().id().to_string(),
        indexes,
    };
    let text = format!("snapshot {}\n{}", doc.snapshot_id, index_lines(&doc.indexes));
    Ok(Output::new(&doc, text, true))
}

fn hit_lines(hits: &[Hit]) -> String {
    hits.iter()
        .map(|h| format!("{:>5}  {}  {} ({} records)\n", h.score, h.doc_id, h.title, h.records.len()))
        .collect()
}

fn search(ctx: &Context, query: &str, kind: IndexKind, limit: usize) -> Result<Output, CliError> {
    let agg = ctx.open_http()?;
    let index = agg
        .load_index(kind)?
        .ok_or_else(|| CliError::Failed("no saved index of that kind; run `oaiagg index` first".into()))?;
    let mut hits = index.search(query);
    let total = hits.len();
    hits.truncate(limit);
    let text = format!("{total} hits\n{}", hit_lines(&hits));
    let doc = SearchOutput {
        schema: "oaiagg.search/1".into(),
        query: query.to_string(),
        kind,
        snapshot_id: index.snapshot_id.clone(),
        total,
        hits,
    };
    Ok(Output::new(&doc, text, true))
}

fn dedup_report(ctx: &Context, fetch: bool) -> Result<Output, CliError> {
    let agg = ctx.open_http()?;
    let fetcher = fetch.then(|| ctx.config.fetcher());
    let report: DedupReport = agg.dedup_report(fetcher.as_ref().map(|f| f as &dyn Fetcher));
    Ok(Output::new(&report, report.to_text(), true))
}

fn load_scenario(path: &Path) -> Result<Simulator, CliError> {
    let scenario = Scenario::load(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Simulator::new(scenario).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn simulate(
    path: &Path,
    bind: &str,
    port: u16,
    advance_to: Option<&str>,
    dry_run: bool,
    json: bool,
    out: &mut dyn Write,
) -> Result<Output, CliError> {
    let sim = load_scenario(path)?;
    if let Some(t) = advance_to {
        sim.advance(parse_instant(t)?).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut doc = SimulateOutput {
        schema: "oaiagg.simulate/1".into(),
        name: sim.scenario().name.clone(),
        url: None,
        now: sim.now(),
        live_records: sim.live_records().len(),
        pending_events: pending_events(&sim),
        faults: sim.scenario().faults.len(),
    };
    let describe = |d: &SimulateOutput| {
        format!(
            "scenario {:?}: {} live records at {}, {} pending events, {} faults{}\n",
            d.name,
            d.live_records,
            d.now.format("%Y-%m-%dT%H:%M:%SZ"),
            d.pending_events,
            d.faults,
            d.url.as_ref().map(|u| format!(", serving at {u}")).unwrap_or_default()
        )
    };
    if dry_run {
        let text = describe(&doc);
        return Ok(Output::new(&doc, text, true));
    }
    let addr = format!("{bind}:{port}");
    let http = HttpServer::spawn(&addr, Arc::new(sim), 4)
        .map_err(|e| CliError::Failed(format!("cannot serve on {addr}: {e}")))?;
    doc.url = Some(http.url("/oai"));
    print_now(out, &serde_json::to_value(&doc).expect("json"), &describe(&doc), json);
    http.wait();
    Ok(Output::new(&doc, String::new(), true))
}

fn pending_events(sim: &Simulator) -> usize {
    let now = sim.now();
    sim.scenario()
        .timeline()
        .map(|t| t.iter().filter(|e| e.at > now).count())
        .unwrap_or(0)
}

fn live_items(agg: &Aggregator, collection_id: Option<&str>) -> BTreeSet<String> {
    agg.repository()
        .staging()
        .records()
        .filter(|r| r.kind == RecordKind::Item && !r.deleted)
        .filter(|r| collection_id.is_none_or(|c| r.collection_id == c))
        .map(|r| r.source_identifier.clone())
        .collect()
}

fn finish_pipeline(
    agg: &Aggregator,
    ctx: &Context,
    fetch: bool,
    search: Option<&str>,
) -> Result<(Manifest, Vec<IndexSummary>, Option<Vec<Hit>>), CliError> {
    let snapshot = agg.publish()?.manifest();
    let fetcher = fetch.then(|| ctx.config.fetcher());
    let fetcher = fetcher.as_ref().map(|f| f as &dyn Fetcher);
    let mut indexes = Vec::new();
    let mut hits = None;
    for kind in [IndexKind::MetadataCentric, IndexKind::ResourceCentric] {
        let (index, failed) = agg.build_index(kind, fetcher)?;
        if kind == IndexKind::ResourceCentric {
            hits = search.map(|q| index.search(q));
        }
        indexes.push(summarize(&index, failed.into_iter().map(|(u, e)| (u, e.to_string())).collect()));
    }
    Ok((snapshot, indexes, hits))
}

fn pipeline_text(doc: &PipelineOutput) -> String {
    let mut text: String = doc.harvests.iter().map(report_line).collect();
    text.push_str(&manifest_line(&doc.snapshot));
    text.push_str(&index_lines(&doc.indexes));
    text.push_str(&format!("repository items {}\n", doc.repository_items));
    if let Some(g) = doc.ground_truth_items {
        text.push_str(&format!(
            "provider ground truth {g}: {}\n",
            if doc.converged == Some(true) { "converged" } else { "DIVERGED" }
        ));
    }
    if let Some(h) = &doc.hits {
        text.push_str(&format!("{} hits\n{}", h.len(), hit_lines(h)));
    }
    text
}

fn pipeline_scenario(ctx: &Context, path: &Path, search: Option<&str>, fetch: bool) -> Result<Output, CliError> {
    let sim = Arc::new(load_scenario(path)?);
    let local = LocalTransport::new();
    local.mount(sim.base_url().to_string(), sim.clone());
    let transport: Arc<dyn Transport> = Arc::new(local);
    // simulated time makes real back-off pointless
    let agg = ctx.open(transport.clone(), sim.clone())?;
    let profile = agg.client().profile().clone();
    let mut agg = agg.with_client(
        HarvestClient::new(transport)
            .with_retry(RetryPolicy::immediate(ctx.config.retries))
            .with_profile(profile),
    );
    if let Some(e) = agg.registry().entries().find(|e| e.config.base_url == sim.base_url()) {
        return Err(CliError::Failed(format!(
            "{} is already registered as {} in {}; use a fresh --data-dir",
            sim.base_url(),
            e.record.collection_id,
            ctx.config.data_dir.display()
        )));
    }
    let report = agg.validate(sim.base_url(), &ValidatorOptions::default());
    sim.reset_faults();
    if report.verdict != Verdict::Pass {
        return Ok(Output::new(&report, report.to_text(), false));
    }
    let title = if sim.scenario().name.is_empty() {
        sim.scenario().repository_name.clone()
    } else {
        sim.scenario().name.clone()
    };
    let id = agg.register(
        Registration {
            description: vec![DcElement::new(DcName::Title, title)],
            contacts: Vec::new(),
            config: HarvestConfig {
                collection_id: String::new(),
                base_url: sim.base_url().to_string(),
                set_spec: None,
                format_prefix: "oai_dc".into(),
                schedule_days: ctx.config.schedule_days,
                enabled: true,
            },
            native_public: false,
        },
        &report,
    )?;
    let mut harvests = vec![agg.harvest(&id)?];
    while let Some(at) = sim.next_event_at() {
        sim.advance(at).map_err(|e| CliError::Failed(e.to_string()))?;
        // events sharing an instant are applied together
        harvests.push(agg.harvest(&id)?);
    }
    let (snapshot, indexes, hits) = finish_pipeline(&agg, ctx, fetch, search)?;
    let repo = live_items(&agg, Some(&id));
    let truth: BTreeSet<String> = sim.live_records().into_keys().collect();
    let converged = repo == truth;
    let ok = converged && harvests.iter().all(HarvestReport::is_success);
    let doc = PipelineOutput {
        schema: "oaiagg.pipeline/1".into(),
        collection_id: Some(id),
        validation: Some(report.verdict),
        harvests,
        snapshot,
        indexes,
        repository_items: repo.len(),
        ground_truth_items: Some(truth.len()),
        converged: Some(converged),
        hits,
    };
    let text = pipeline_text(&doc);
    Ok(Output::new(&doc, text, ok))
}

fn pipeline_live(ctx: &Context, search: Option<&str>, fetch: bool) -> Result<Output, CliError> {
    let mut agg = ctx.open_http()?;
    let harvests = agg.harvest_due()?;
    let (snapshot, indexes, hits) = finish_pipeline(&agg, ctx, fetch, search)?;
    let ok = harvests.iter().all(HarvestReport::is_success);
    let doc = PipelineOutput {
        schema: "oaiagg.pipeline/1".into(),
        collection_id: None,
        validation: None,
        harvests,
        snapshot,
        indexes,
        repository_items: live_items(&agg, None).len(),
        ground_truth_items: None,
        converged: None,
        hits,
    };
    let text = pipeline_text(&doc);
    Ok(Output::new(&doc, text, ok))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("oaiagg").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run_args(&[]).0, 2);
        assert_eq!(run_args(&["harvest", "--bogus"]).0, 2);
        assert_eq!(run_args(&["harvest", "--all", "--collection", "x"]).0, 2);
        assert_eq!(run_args(&["--help"]).0, 0);
    }

    #[test]
    fn bad_config_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        std::fs::write(&cfg, "page_size = 0\n").unwrap();
        let (code, out, _) = run_args(&["--json", "--config", cfg.to_str().unwrap(), "stats"]);
        assert_eq!(code, 2);
        let e: ErrorOutput = serde_json::from_str(&out).unwrap();
        assert_eq!(e.kind, "usage");
        std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
        assert_eq!(run_args(&["--config", cfg.to_str().unwrap(), "stats"]).0, 2);
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        let from_file = dir.path().join("from-file");
        let from_flag = dir.path().join("from-flag");
        std::fs::write(&cfg, format!("data_dir = {:?}\n", from_file.to_str().unwrap())).unwrap();
        let (code, ..) = run_args(&["--config", cfg.to_str().unwrap(), "--data-dir", from_flag.to_str().unwrap(), "stats"]);
        assert_eq!(code, 0);
        assert!(from_flag.join("registry").exists());
        assert!(!from_file.exists());
    }

    #[test]
    fn day_or_second_instants() {
        assert_eq!(parse_instant("2006-03-01").unwrap(), parse_datestamp("2006-03-01T00:00:00Z").unwrap());
        assert!(parse_instant("2006-03-01T10:00:00Z").is_ok());
        assert!(matches!(parse_instant("March"), Err(CliError::Usage(_))));
    }
}
