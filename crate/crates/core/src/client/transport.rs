//! How requests reach a provider: real HTTP, or an in-process handler.

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        Self {
            status: 200,
            body: body.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportErrorKind {
    Dns,
    Refused,
    Timeout,
    Disconnected,
    Unsupported,
    Io,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {message}")]
pub struct TransportError {
    pub kind: TransportErrorKind,
    pub message: String,
}

impl TransportError {
    pub fn new(kind: TransportErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

pub trait Transport: Send + Sync {
    fn get(&self, base_url: &str, params: &[(String, String)]) -> Result<HttpResponse, TransportError>;
}

/// Anything that can answer OAI-PMH query arguments directly.
pub trait OaiHandler: Send + Sync {
    fn handle(&self, params: &[(String, String)]) -> Result<HttpResponse, TransportError>;
}

/// Routes base URLs to in-process handlers. Unknown URLs behave like a
/// refused connection.
#[derive(Default, Clone)]
pub struct LocalTransport {
    routes: Arc<RwLock<BTreeMap<String, Arc<dyn OaiHandler>>>>,
}

impl LocalTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mount(&self, base_url: impl Into<String>, handler: Arc<dyn OaiHandler>) {
        self.routes
            .write()
            .expect("routes poisoned")
            .insert(base_url.into(), handler);
    }

    pub fn unmount(&self, base_url: &str) {
        self.routes.write().expect("routes poisoned").remove(base_url);
    }
}

impl Transport for LocalTransport {
    fn get(&self, base_url: &str, params: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        let handler = self
            .routes
            .read()
            .expect("routes poisoned")
            .get(base_url)
            .cloned();
        match handler {
            Some(h) => h.handle(params),
            None => Err(TransportError::new(
                TransportErrorKind::Refused,
                format!("connection refused: {base_url}"),
            )),
        }
    }
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
    max_body: u64,
}

impl HttpTransport {
    pub fn new(timeout: Duration, user_agent: &str) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .user_agent(user_agent)
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            max_body: 256 * 1024 * 1024,
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport::new(Duration::from_secs(60), concat!("oaiagg/", env!("CARGO_PKG_VERSION")))
    }
}

pub(crate) fn map_ureq_error(err: ureq::Error) -> TransportError {
    use TransportErrorKind as K;
    let kind = match &err {
        ureq::Error::HostNotFound => K::Dns,
        ureq::Error::ConnectionFailed => K::Refused,
        ureq::Error::Timeout(_) => K::Timeout,
        ureq::Error::BadUri(_) => K::Unsupported,
        ureq::Error::Io(io) => match io.kind() {
            std::io::ErrorKind::ConnectionRefused => K::Refused,
            std::io::ErrorKind::TimedOut => K::Timeout,
            std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted
            | std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::BrokenPipe => K::Disconnected,
            _ => K::Io,
        },
        _ => K::Io,
    };
    TransportError::new(kind, err.to_string())
}

impl Transport for HttpTransport {
    fn get(&self, base_url: &str, params: &[(String, String)]) -> Result<HttpResponse, TransportError> {
        if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
            return Err(TransportError::new(
                TransportErrorKind::Unsupported,
                format!("unsupported scheme in {base_url}"),
            ));
        }
        let response = self
            .agent
            .get(base_url)
            .query_pairs(params.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .call()
            .map_err(map_ureq_error)?;
        let status = response.status().as_u16();
        let mut body = Vec::new();
        response
            .into_body()
            .into_reader()
            .take(self.max_body)
            .read_to_end(&mut body)
            .map_err(|e| TransportError::new(TransportErrorKind::Disconnected, e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}
