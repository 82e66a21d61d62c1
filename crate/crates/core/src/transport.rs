//! JSON-over-HTTP transport shared by the chat-completion provider and the
//! remote embedder, plus record/replay wrappers for offline fixtures.
//!
//! Fixture files are a JSON list of `{"request_hash", "response_body"}`.
//! The hash is the SHA-256 of the request body serialized canonically
//! (object keys sorted, no insignificant whitespace), so fixtures do not
//! depend on endpoint URLs or credentials.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("no recorded fixture for request {0}")]
    NoFixture(String),
    #[error("fixture file: {0}")]
    Fixture(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// Serializes `value` with object keys sorted at every depth.
pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string serializes"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalar serializes")),
    }
}

pub fn request_hash(body: &Value) -> String {
    hex::encode(Sha256::digest(canonical_json(body).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fixture {
    pub request_hash: String,
    pub response_body: String,
}

pub fn load_fixtures(path: &Path) -> Result<Vec<Fixture>, TransportError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| TransportError::Fixture(e.to_string()))
}

pub fn save_fixtures(path: &Path, fixtures: &[Fixture]) -> Result<(), TransportError> {
    let text = serde_json::to_string_pretty(fixtures).map_err(|e| TransportError::Fixture(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Blocking HTTP transport.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl Transport for UreqTransport {
    fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = self.agent.post(&request.url).header("Content-Type", "application/json");
        for (name, value) in &request.headers {
            builder = builder.header(name.as_str(), value.as_str());
        }
        let payload = serde_json::to_string(&request.body).expect("request body serializes");
        let mut response = builder.send(payload).map_err(|e| TransportError::Connection(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// Serves recorded response bodies keyed by request hash. Unknown requests fail.
pub struct ReplayTransport {
    fixtures: HashMap<String, String>,
}

impl ReplayTransport {
    pub fn new(fixtures: Vec<Fixture>) -> Self {
        Self { fixtures: fixtures.into_iter().map(|f| (f.request_hash, f.response_body)).collect() }
    }

    pub fn from_file(path: &Path) -> Result<Self, TransportError> {
        Ok(Self::new(load_fixtures(path)?))
    }
}

impl Transport for ReplayTransport {
    fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let hash = request_hash(&request.body);
        match self.fixtures.get(&hash) {
            Some(body) => Ok(HttpResponse { status: 200, body: body.clone() }),
            None => Err(TransportError::NoFixture(hash)),
        }
    }
}

/// Forwards to an inner transport and keeps every successful exchange.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    recorded: Mutex<Vec<Fixture>>,
}

impl RecordingTransport {
    pub fn new(inner: Arc<dyn Transport>) -> Self {
        Self { inner, recorded: Mutex::new(Vec::new()) }
    }

    /// Recorded fixtures, deduplicated by hash and sorted for stable files.
    pub fn fixtures(&self) -> Vec<Fixture> {
        let mut all = self.recorded.lock().unwrap().clone();
        all.sort_by(|a, b| a.request_hash.cmp(&b.request_hash));
        all.dedup_by(|a, b| a.request_hash == b.request_hash);
        all
    }

    pub fn save(&self, path: &Path) -> Result<(), TransportError> {
        save_fixtures(path, &self.fixtures())
    }
}

impl Transport for RecordingTransport {
    fn post_json(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let response = self.inner.post_json(request)?;
        if response.status == 200 {
            self.recorded.lock().unwrap().push(Fixture {
                request_hash: request_hash(&request.body),
                response_body: response.body.clone(),
            });
        }
        Ok(response)
    }
}
