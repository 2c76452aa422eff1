//! Blocking JSON client for the model-as-a-service endpoints, with a cap on
//! concurrent in-flight requests.

use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RemoteError {
    /// Connection refused, DNS failure, timeout. Retryable.
    #[error("transport error calling {url}: {message}")]
    Transport { url: String, message: String },
    #[error("{url} answered HTTP {status}")]
    Status { url: String, status: u16 },
    /// The peer answered, but not in the agreed shape.
    #[error("protocol error from {url}: {message}")]
    Protocol { url: String, message: String },
}

impl RemoteError {
    pub fn protocol(url: &str, message: impl Into<String>) -> Self {
        RemoteError::Protocol {
            url: url.to_string(),
            message: message.into(),
        }
    }

    pub fn missing_field(url: &str, field: &str) -> Self {
        RemoteError::protocol(url, format!("response is missing field `{field}`"))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(10),
            max_in_flight: 8,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock();
        while *active >= self.limit {
            self.freed.wait(&mut active);
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock() -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Clone)]
pub struct RemoteClient {
    base: String,
    http: reqwest::blocking::Client,
    in_flight: Arc<InFlight>,
}

impl std::fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteClient")
            .field("base", &self.base)
            .finish()
    }
}

impl RemoteClient {
    pub fn new(config: &RemoteConfig) -> Result<Self, RemoteError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .connect_timeout(config.timeout)
            .build()
            .map_err(|e| RemoteError::Transport {
                url: config.endpoint.clone(),
                message: e.to_string(),
            })?;
        Ok(RemoteClient {
            base: config.endpoint.trim_end_matches('/').to_string(),
            http,
            in_flight: Arc::new(InFlight {
                limit: config.max_in_flight.max(1),
                active: Mutex::new(0),
                freed: Condvar::new(),
            }),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    /// POSTs `body` as JSON to `path` and returns the parsed JSON object.
    /// Only 2xx answers count as success.
    pub fn post_json<B: Serialize>(&self, path: &str, body: &B) -> Result<Value, RemoteError> {
        let url = format!("{}{}", self.base, path);
        let _permit = self.in_flight.acquire();
        let resp = self
            .http
            .post(&url)
            .json(body)
            .send()
            .map_err(|e| RemoteError::Transport {
                url: url.clone(),
                message: e.to_string(),
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RemoteError::Status {
                url,
                status: status.as_u16(),
            });
        }
        let bytes = resp.bytes().map_err(|e| RemoteError::Transport {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let value: Value = serde_json::from_slice(&bytes)
            .map_err(|e| RemoteError::protocol(&url, format!("invalid JSON: {e}")))?;
        if !value.is_object() {
            return Err(RemoteError::protocol(&url, "response is not a JSON object"));
        }
        Ok(value)
    }
}
