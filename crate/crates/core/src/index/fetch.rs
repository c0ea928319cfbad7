//! Fetching resource content for phase-II comparison.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::sync::{Mutex, RwLock};
use std::time::{Duration, Instant};

use md5::{Digest, Md5};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("timed out")]
    Timeout,
    #[error("HTTP status {0}")]
    Status(u16),
    #[error("body larger than {limit} bytes")]
    TooLarge { limit: u64 },
    #[error("{0}")]
    Other(String),
}

pub trait Fetcher: Send + Sync {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedContent {
    pub url: String,
    /// The body as received.
    pub body: Vec<u8>,
    pub digest: [u8; 16],
}

impl FetchedContent {
    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest)
    }
}

pub fn md5_digest(bytes: &[u8]) -> [u8; 16] {
    Md5::digest(bytes).into()
}

pub fn md5_hex(bytes: &[u8]) -> String {
    hex::encode(md5_digest(bytes))
}

pub fn fetch_content(url: &str, fetcher: &dyn Fetcher) -> Result<FetchedContent, FetchError> {
    let body = fetcher.fetch(url)?;
    Ok(FetchedContent {
        url: url.to_string(),
        digest: md5_digest(&body),
        body,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FixtureResponse {
    Body(Vec<u8>),
    Status(u16),
    Timeout,
}

/// Canned responses keyed by URL; anything else is a 404.
#[derive(Debug, Default)]
pub struct FixtureFetcher {
    responses: RwLock<HashMap<String, FixtureResponse>>,
    max_bytes: Option<u64>,
    requests: Mutex<Vec<String>>,
}

impl FixtureFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_max_bytes(mut self, limit: u64) -> Self {
        self.max_bytes = Some(limit);
        self
    }

    pub fn serve(&self, url: impl Into<String>, body: impl Into<Vec<u8>>) -> &Self {
        self.set(url, FixtureResponse::Body(body.into()))
    }

    pub fn set(&self, url: impl Into<String>, response: FixtureResponse) -> &Self {
        self.responses.write().expect("fixture lock").insert(url.into(), response);
        self
    }

    /// URLs requested so far, in order.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().expect("fixture lock").clone()
    }
}

impl Fetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        self.requests.lock().expect("fixture lock").push(url.to_string());
        match self.responses.read().expect("fixture lock").get(url) {
            Some(FixtureResponse::Body(b)) => match self.max_bytes {
                Some(limit) if b.len() as u64 > limit => Err(FetchError::TooLarge { limit }),
                _ => Ok(b.clone()),
            },
            Some(FixtureResponse::Status(s)) => Err(FetchError::Status(*s)),
            Some(FixtureResponse::Timeout) => Err(FetchError::Timeout),
            None => Err(FetchError::Status(404)),
        }
    }
}

pub struct HttpFetcher {
    agent: ureq::Agent,
    max_bytes: u64,
}

impl HttpFetcher {
    pub fn new(timeout: Duration, max_bytes: u64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .user_agent("oaiagg-indexer/0.1")
            .build()
            .into();
        HttpFetcher { agent, max_bytes }
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        let resp = self.agent.get(url).call().map_err(|e| match e {
            ureq::Error::Timeout(_) => FetchError::Timeout,
            other => FetchError::Other(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(FetchError::Status(status));
        }
        let mut body = Vec::new();
        resp.into_body()
            .into_reader()
            .take(self.max_bytes + 1)
            .read_to_end(&mut body)
            .map_err(|e| FetchError::Other(e.to_string()))?;
        if body.len() as u64 > self.max_bytes {
            return Err(FetchError::TooLarge { limit: self.max_bytes });
        }
        Ok(body)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FetchPolicy {
    pub concurrency: usize,
    /// Minimum gap between two requests to the same host.
    pub per_host_delay: Duration,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        FetchPolicy {
            concurrency: 4,
            per_host_delay: Duration::from_millis(250),
        }
    }
}

fn host_of(url: &str) -> &str {
    let rest = url.split_once("://").map_or(url, |(_, r)| r);
    rest.split(['/', '?']).next().unwrap_or(rest)
}

/// Fetch every URL with a bounded worker pool. Results come back keyed by
/// URL.
pub fn fetch_all(
    urls: &[String],
    fetcher: &dyn Fetcher,
    policy: FetchPolicy,
) -> BTreeMap<String, Result<FetchedContent, FetchError>> {
    let queue = Mutex::new(urls.iter());
    let last_hit: Mutex<HashMap<String, Instant>> = Mutex::new(HashMap::new());
    let results = Mutex::new(BTreeMap::new());
    std::thread::scope(|s| {
        for _ in 0..policy.concurrency.max(1) {
            s.spawn(|| loop {
                let Some(url) = queue.lock().expect("queue lock").next() else {
                    break;
                };
                let host = host_of(url).to_string();
                loop {
                    let mut hits = last_hit.lock().expect("host lock");
                    let now = Instant::now();
                    match hits.get(&host) {
                        Some(t) if now.duration_since(*t) < policy.per_host_delay => {
                            let wait = policy.per_host_delay - now.duration_since(*t);
                            drop(hits);
                            std::thread::sleep(wait);
                        }
                        _ => {
                            hits.insert(host.clone(), now);
                            break;
                        }
                    }
                }
                let r = fetch_content(url, fetcher);
                if let Err(e) = &r {
                    log::info!("fetch {url}: {e}");
                }
                results.lock().expect("results lock").insert(url.clone(), r);
            });
        }
    });
    results.into_inner().expect("results lock")
}
