//! Reputation lookups for extracted indicators, cached per provider.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{self, Clock};
use crate::model::Indicator;

/// Six months.
pub const DEFAULT_TTL: Duration = Duration::from_secs(183 * 24 * 3600);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Found {
    Found,
    NotFound,
    /// Not checked yet, or the last check failed.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationStatus {
    pub provider: String,
    pub found: Found,
    pub checked_at: DateTime<Utc>,
    pub ttl_secs: u64,
}

impl VerificationStatus {
    pub fn is_known(&self) -> bool {
        self.found != Found::Unknown
    }

    pub fn fresh_at(&self, now: DateTime<Utc>) -> bool {
        self.is_known()
            && now.signed_duration_since(self.checked_at).num_seconds() < self.ttl_secs as i64
    }
}

#[derive(Debug, Error)]
pub enum EnrichmentError {
    #[error("provider {provider}: {message}")]
    Provider { provider: String, message: String },
    #[error("fixture {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("environment variable {0} is not set")]
    MissingKey(String),
}

pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    /// `Ok(true)` when the provider knows the indicator.
    fn lookup(&self, indicator: &Indicator) -> Result<bool, EnrichmentError>;
}

/// `indicator_key -> provider -> found`
pub type FixtureTable = HashMap<String, HashMap<String, bool>>;

pub fn load_fixture(path: &Path) -> Result<FixtureTable, EnrichmentError> {
    let err = |message: String| EnrichmentError::Fixture {
        path: path.display().to_string(),
        message,
    };
    let s = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&s).map_err(|e| err(e.to_string()))
}

/// Answers from a fixture table; absent entries are not found.
#[derive(Debug, Clone)]
pub struct FixtureProvider {
    name: String,
    table: Arc<FixtureTable>,
}

impl FixtureProvider {
    pub fn new(name: impl Into<String>, table: Arc<FixtureTable>) -> Self {
        FixtureProvider {
            name: name.into(),
            table,
        }
    }
}

impl Provider for FixtureProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn lookup(&self, indicator: &Indicator) -> Result<bool, EnrichmentError> {
        Ok(self
            .table
            .get(&indicator.key())
            .and_then(|m| m.get(&self.name))
            .copied()
            .unwrap_or(false))
    }
}

/// Thin HTTP client: `GET {base}/{kind}/{value}` with the key in the
/// `x-apikey` header. 200 means found, 404 not found, anything else is an
/// error.
pub struct LiveProvider {
    name: String,
    base_url: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl fmt::Debug for LiveProvider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiveProvider")
            .field("name", &self.name)
            .field("base_url", &self.base_url)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

impl LiveProvider {
    /// Reads the API key from `key_env`; the key itself is never logged.
    pub fn from_env(
        name: impl Into<String>,
        base_url: impl Into<String>,
        key_env: &str,
        timeout: Duration,
    ) -> Result<Self, EnrichmentError> {
        let api_key = std::env::var(key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| EnrichmentError::MissingKey(key_env.to_string()))?;
        let name = name.into();
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EnrichmentError::Provider {
                provider: name.clone(),
                message: e.to_string(),
            })?;
        Ok(LiveProvider {
            name,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            http,
        })
    }
}

impl Provider for LiveProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn lookup(&self, indicator: &Indicator) -> Result<bool, EnrichmentError> {
        let mut url = url::Url::parse(&self.base_url).map_err(|e| EnrichmentError::Provider {
            provider: self.name.clone(),
            message: format!("bad base url: {e}"),
        })?;
        url.path_segments_mut()
            .map_err(|_| EnrichmentError::Provider {
                provider: self.name.clone(),
                message: "base url cannot take a path".into(),
            })?
            .push(indicator.kind().as_str())
            .push(indicator.value());
        let resp = self
            .http
            .get(url)
            .header("x-apikey", &self.api_key)
            .send()
            .map_err(|e| EnrichmentError::Provider {
                provider: self.name.clone(),
                message: e.without_url().to_string(),
            })?;
        match resp.status().as_u16() {
            200 => Ok(true),
            404 => Ok(false),
            s => Err(EnrichmentError::Provider {
                provider: self.name.clone(),
                message: format!("HTTP {s}"),
            }),
        }
    }
}

/// Spaces calls at least `interval` apart.
struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<DateTime<Utc>>>,
}

impl RateLimiter {
    fn acquire(&self, clock: &dyn Clock) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock();
            let now = clock.now();
            let slot = next.map_or(now, |n| n.max(now));
            *next =
                Some(slot + chrono::Duration::from_std(self.interval).expect("interval in range"));
            (slot - now).to_std().unwrap_or(Duration::ZERO)
        };
        if !wait.is_zero() {
            clock.sleep(wait);
        }
    }
}

type Slot = Arc<Mutex<Option<VerificationStatus>>>;

/// Verifies indicators against a provider set with a TTL cache. Concurrent
/// calls for the same `(indicator, provider)` serialize on that entry, so a
/// fresh result is fetched at most once.
pub struct Verifier {
    providers: Vec<(Arc<dyn Provider>, RateLimiter)>,
    cache: Mutex<HashMap<(String, String), Slot>>,
    ttl: Duration,
    clock: Arc<dyn Clock>,
}

impl Verifier {
    pub fn new(providers: Vec<Arc<dyn Provider>>, ttl: Duration) -> Self {
        Self::with_clock(providers, ttl, clock::system())
    }

    pub fn with_clock(
        providers: Vec<Arc<dyn Provider>>,
        ttl: Duration,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Verifier {
            providers: providers
                .into_iter()
                .map(|p| {
                    (
                        p,
                        RateLimiter {
                            interval: Duration::ZERO,
                            next: Mutex::new(None),
                        },
                    )
                })
                .collect(),
            cache: Mutex::new(HashMap::new()),
            ttl,
            clock,
        }
    }

    /// Minimum spacing between calls to the named provider.
    pub fn set_rate_limit(&mut self, provider: &str, interval: Duration) {
        for (p, rl) in &mut self.providers {
            if p.name() == provider {
                rl.interval = interval;
            }
        }
    }

    pub fn provider_names(&self) -> Vec<String> {
        self.providers
            .iter()
            .map(|(p, _)| p.name().to_string())
            .collect()
    }

    fn slot(&self, key: &str, provider: &str) -> Slot {
        self.cache
            .lock()
            .entry((key.to_string(), provider.to_string()))
            .or_default()
            .clone()
    }

    /// Fresh cached status, if any.
    pub fn cache_lookup(
        &self,
        indicator: &Indicator,
        provider: &str,
    ) -> Option<VerificationStatus> {
        let slot = self
            .cache
            .lock()
            .get(&(indicator.key(), provider.to_string()))
            .cloned()?;
        let guard = slot.lock();
        guard
            .as_ref()
            .filter(|s| s.fresh_at(self.clock.now()))
            .cloned()
    }

    /// One status per provider, in provider order. Provider failures yield
    /// `Unknown` and are retried on the next call.
    pub fn verify(&self, indicator: &Indicator) -> Vec<VerificationStatus> {
        let key = indicator.key();
        self.providers
            .iter()
            .map(|(p, limiter)| {
                let slot = self.slot(&key, p.name());
                let mut entry = slot.lock();
                if let Some(s) = entry.as_ref().filter(|s| s.fresh_at(self.clock.now())) {
                    return s.clone();
                }
                limiter.acquire(self.clock.as_ref());
                let found = match p.lookup(indicator) {
                    Ok(true) => Found::Found,
                    Ok(false) => Found::NotFound,
                    Err(e) => {
                        log::warn!("verification of {key} failed: {e}");
                        Found::Unknown
                    }
                };
                let status = VerificationStatus {
                    provider: p.name().to_string(),
                    found,
                    checked_at: self.clock.now(),
                    ttl_secs: self.ttl.as_secs(),
                };
                *entry = Some(status.clone());
                status
            })
            .collect()
    }
}
