//! Page retrieval with onion routing through SOCKS5, manual redirects,
//! retries, and HTML-to-text extraction.

use std::io::Read;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use scraper::{ElementRef, Html, Node};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::clock::{self, Clock};
use crate::frontier::{is_onion_host, CrawlTask};

pub const DEFAULT_BODY_CAP: usize = 2 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FetchConfig {
    /// `host:port` of the SOCKS5 proxy used for onion hosts.
    pub onion_proxy: Option<String>,
    /// Optional proxy url for everything else.
    pub general_proxy: Option<String>,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub retries: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
    pub body_cap: usize,
    pub max_redirects: u32,
    pub user_agent: String,
}

impl Default for FetchConfig {
    fn default() -> Self {
        FetchConfig {
            onion_proxy: None,
            general_proxy: None,
            timeout: Duration::from_secs(30),
            retries: 3,
            backoff_base: Duration::from_millis(500),
            body_cap: DEFAULT_BODY_CAP,
            max_redirects: 5,
            user_agent: concat!("ctiflow/", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

pub(crate) mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Direct,
    /// SOCKS5 with remote name resolution.
    Socks5(String),
    Proxy(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawResponse {
    pub status: u16,
    pub location: Option<String>,
    pub content_type: Option<String>,
    pub body: Vec<u8>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct TransportError(pub String);

/// One HTTP GET without redirect following.
pub trait Transport: Send + Sync {
    fn get(&self, url: &Url, route: &Route, body_cap: usize)
        -> Result<RawResponse, TransportError>;
}

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("transient failure fetching {url} after {attempts} attempts: {message}")]
    Transient {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("{url} answered HTTP {status}")]
    Permanent { url: String, status: u16 },
    #[error("refusing redirect from {from} to {to}")]
    UnsafeRedirect { from: String, to: String },
    #[error("more than {0} redirects")]
    TooManyRedirects(u32),
    #[error("bad url {0}")]
    BadUrl(String),
}

impl FetchError {
    pub fn is_transient(&self) -> bool {
        matches!(self, FetchError::Transient { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchResult {
    pub task: CrawlTask,
    pub status: u16,
    pub final_url: String,
    pub body: Vec<u8>,
    pub truncated: bool,
    pub content_type: Option<String>,
    pub fetched_at: DateTime<Utc>,
    pub elapsed_ms: u64,
}

/// Blocking reqwest transport with one client per route.
pub struct ReqwestTransport {
    direct: reqwest::blocking::Client,
    onion: Option<reqwest::blocking::Client>,
    proxied: Option<reqwest::blocking::Client>,
}

impl ReqwestTransport {
    pub fn new(config: &FetchConfig) -> Result<Self, FetchError> {
        let builder = || {
            reqwest::blocking::Client::builder()
                .redirect(reqwest::redirect::Policy::none())
                .timeout(config.timeout)
                .connect_timeout(config.timeout)
                .user_agent(config.user_agent.clone())
        };
        let cfg = |e: reqwest::Error| FetchError::Config(e.to_string());
        let direct = builder().no_proxy().build().map_err(cfg)?;
        let onion = match &config.onion_proxy {
            Some(addr) => {
                let proxy = reqwest::Proxy::all(format!("socks5h://{addr}")).map_err(cfg)?;
                Some(builder().proxy(proxy).build().map_err(cfg)?)
            }
            None => None,
        };
        let proxied = match &config.general_proxy {
            Some(p) => Some(
                builder()
                    .proxy(reqwest::Proxy::all(p).map_err(cfg)?)
                    .build()
                    .map_err(cfg)?,
            ),
            None => None,
        };
        Ok(ReqwestTransport {
            direct,
            onion,
            proxied,
        })
    }
}

impl Transport for ReqwestTransport {
    fn get(
        &self,
        url: &Url,
        route: &Route,
        body_cap: usize,
    ) -> Result<RawResponse, TransportError> {
        let client = match route {
            Route::Direct => &self.direct,
            Route::Socks5(_) => self
                .onion
                .as_ref()
                .ok_or_else(|| TransportError("no SOCKS5 client configured".into()))?,
            Route::Proxy(_) => self
                .proxied
                .as_ref()
                .ok_or_else(|| TransportError("no proxy client configured".into()))?,
        };
        let resp = client
            .get(url.clone())
            .send()
            .map_err(|e| TransportError(error_chain(&e)))?;
        let header = |name: reqwest::header::HeaderName| {
            resp.headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        };
        let status = resp.status().as_u16();
        let location = header(reqwest::header::LOCATION);
        let content_type = header(reqwest::header::CONTENT_TYPE);
        let mut body = Vec::new();
        resp.take(body_cap as u64 + 1)
            .read_to_end(&mut body)
            .map_err(|e| TransportError(e.to_string()))?;
        let truncated = body.len() > body_cap;
        body.truncate(body_cap);
        Ok(RawResponse {
            status,
            location,
            content_type,
            body,
            truncated,
        })
    }
}

/// reqwest's top-level message ("error sending request") hides the cause.
fn error_chain(e: &(dyn std::error::Error + 'static)) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        let msg = s.to_string();
        if !out.contains(&msg) {
            out.push_str(": ");
            out.push_str(&msg);
        }
        cur = s.source();
    }
    out
}

/// Test transport: records every call and answers from a script.
#[derive(Clone, Default)]
pub struct RecordingTransport {
    calls: Arc<Mutex<Vec<(String, Route)>>>,
    #[allow(clippy::type_complexity)]
    responder: Option<Arc<dyn Fn(&Url) -> Result<RawResponse, TransportError> + Send + Sync>>,
}

impl RecordingTransport {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&Url) -> Result<RawResponse, TransportError> + Send + Sync + 'static,
    {
        RecordingTransport {
            calls: Arc::default(),
            responder: Some(Arc::new(f)),
        }
    }

    pub fn calls(&self) -> Vec<(String, Route)> {
        self.calls.lock().clone()
    }
}

impl Transport for RecordingTransport {
    fn get(
        &self,
        url: &Url,
        route: &Route,
        body_cap: usize,
    ) -> Result<RawResponse, TransportError> {
        self.calls.lock().push((url.to_string(), route.clone()));
        let mut r = match &self.responder {
            Some(f) => f(url)?,
            None => return Err(TransportError("no responder".into())),
        };
        if r.body.len() > body_cap {
            r.body.truncate(body_cap);
            r.truncated = true;
        }
        Ok(r)
    }
}

pub struct Fetcher {
    config: FetchConfig,
    transport: Arc<dyn Transport>,
    clock: Arc<dyn Clock>,
}

impl Fetcher {
    pub fn new(config: FetchConfig) -> Result<Self, FetchError> {
        let transport = Arc::new(ReqwestTransport::new(&config)?);
        Ok(Fetcher {
            config,
            transport,
            clock: clock::system(),
        })
    }

    pub fn with_transport(
        config: FetchConfig,
        transport: Arc<dyn Transport>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Fetcher {
            config,
            transport,
            clock,
        }
    }

    pub fn config(&self) -> &FetchConfig {
        &self.config
    }

    fn route_for(&self, url: &Url) -> Result<Route, FetchError> {
        let host = url
            .host_str()
            .ok_or_else(|| FetchError::BadUrl(url.to_string()))?;
        if is_onion_host(host) {
            return match &self.config.onion_proxy {
                Some(p) => Ok(Route::Socks5(p.clone())),
                None => Err(FetchError::Config(format!(
                    "{host} is an onion host and no SOCKS5 proxy is configured"
                ))),
            };
        }
        Ok(match &self.config.general_proxy {
            Some(p) => Route::Proxy(p.clone()),
            None => Route::Direct,
        })
    }

    /// One hop with retries. 5xx and transport errors are retried; 4xx is
    /// final.
    fn get_with_retries(&self, url: &Url, route: &Route) -> Result<RawResponse, FetchError> {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.clock
                    .sleep(self.config.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            match self.transport.get(url, route, self.config.body_cap) {
                Ok(r) if (500..600).contains(&r.status) => last = format!("HTTP {}", r.status),
                Ok(r) if (400..500).contains(&r.status) => {
                    return Err(FetchError::Permanent {
                        url: url.to_string(),
                        status: r.status,
                    })
                }
                Ok(r) => return Ok(r),
                Err(e) => last = e.0,
            }
            log::debug!(
                "attempt {} of {attempts} for {url} failed: {last}",
                attempt + 1
            );
        }
        Err(FetchError::Transient {
            url: url.to_string(),
            attempts,
            message: last,
        })
    }

    pub fn fetch(&self, task: &CrawlTask) -> Result<FetchResult, FetchError> {
        let started = Instant::now();
        let mut url = Url::parse(&task.url).map_err(|_| FetchError::BadUrl(task.url.clone()))?;
        let mut hops = 0;
        loop {
            let route = self.route_for(&url)?;
            let resp = self.get_with_retries(&url, &route)?;
            if (300..400).contains(&resp.status) {
                let Some(loc) = resp.location.as_deref() else {
                    return Err(FetchError::Permanent {
                        url: url.to_string(),
                        status: resp.status,
                    });
                };
                if hops == self.config.max_redirects {
                    return Err(FetchError::TooManyRedirects(self.config.max_redirects));
                }
                hops += 1;
                let next = url
                    .join(loc)
                    .map_err(|_| FetchError::BadUrl(loc.to_string()))?;
                let from_onion = url.host_str().is_some_and(is_onion_host);
                let to_onion = next.host_str().is_some_and(is_onion_host);
                if from_onion && !to_onion {
                    return Err(FetchError::UnsafeRedirect {
                        from: url.to_string(),
                        to: next.to_string(),
                    });
                }
                url = next;
                continue;
            }
            return Ok(FetchResult {
                task: task.clone(),
                status: resp.status,
                final_url: url.to_string(),
                body: resp.body,
                truncated: resp.truncated,
                content_type: resp.content_type,
                fetched_at: self.clock.now(),
                elapsed_ms: started.elapsed().as_millis() as u64,
            });
        }
    }

    /// GETs `/robots.txt` for the task's host. Missing or failing files
    /// mean no restrictions.
    pub fn fetch_robots(&self, page_url: &str) -> Option<String> {
        let base = Url::parse(page_url).ok()?;
        let robots = base.join("/robots.txt").ok()?;
        let route = self.route_for(&robots).ok()?;
        match self.transport.get(&robots, &route, 512 * 1024) {
            Ok(r) if r.status == 200 => Some(String::from_utf8_lossy(&r.body).into_owned()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageText {
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unsupported content type `{0}`")]
pub struct Unsupported(pub String);

const SKIPPED: [&str; 6] = ["script", "style", "noscript", "template", "svg", "iframe"];
const BLOCKS: [&str; 31] = [
    "address",
    "article",
    "aside",
    "blockquote",
    "br",
    "dd",
    "div",
    "dl",
    "dt",
    "figcaption",
    "footer",
    "form",
    "h1",
    "h2",
    "h3",
    "h4",
    "h5",
    "h6",
    "header",
    "hr",
    "li",
    "main",
    "nav",
    "ol",
    "p",
    "pre",
    "section",
    "table",
    "td",
    "th",
    "tr",
];

fn walk(el: ElementRef<'_>, out: &mut String) {
    for child in el.children() {
        match child.value() {
            Node::Text(t) => out.push_str(t),
            Node::Element(e) => {
                let name = e.name();
                if SKIPPED.contains(&name) {
                    continue;
                }
                let block = BLOCKS.contains(&name) || name == "title";
                if block {
                    out.push(' ');
                }
                if let Some(child_el) = ElementRef::wrap(child) {
                    walk(child_el, out);
                }
                if block {
                    out.push(' ');
                }
            }
            _ => {}
        }
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Longest prefix of at most `cap` bytes that ends on a UTF-8 boundary.
fn utf8_prefix(body: &[u8], cap: usize) -> &[u8] {
    let end = body.len().min(cap);
    match std::str::from_utf8(&body[..end]) {
        Ok(_) => &body[..end],
        Err(e) if e.error_len().is_none() => &body[..e.valid_up_to()],
        Err(_) => &body[..end],
    }
}

pub fn html_to_text(html: &str) -> String {
    let doc = Html::parse_document(html);
    let mut out = String::new();
    walk(doc.root_element(), &mut out);
    collapse_ws(&out)
}

/// Visible text of an HTML or plain-text body, reading at most `cap` bytes.
pub fn extract_text(
    body: &[u8],
    content_type: Option<&str>,
    cap: usize,
) -> Result<PageText, Unsupported> {
    let mime = content_type
        .map(|c| {
            c.split(';')
                .next()
                .unwrap_or("")
                .trim()
                .to_ascii_lowercase()
        })
        .filter(|m| !m.is_empty());
    let html = match mime.as_deref() {
        Some("text/html") | Some("application/xhtml+xml") => true,
        Some("text/plain") => false,
        None => {
            let head = String::from_utf8_lossy(&body[..body.len().min(512)]).to_ascii_lowercase();
            let head = head.trim_start();
            head.starts_with('<')
        }
        Some(other) => return Err(Unsupported(other.to_string())),
    };
    let truncated = body.len() > cap;
    let raw = String::from_utf8_lossy(utf8_prefix(body, cap));
    let text = if html {
        html_to_text(&raw)
    } else {
        raw.into_owned()
    };
    Ok(PageText { text, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::model::Spider;
    use proptest::prelude::*;

    fn task(url: &str) -> CrawlTask {
        CrawlTask::seed(url.into(), Spider::Ahmia, Utc::now())
    }

    fn ok(body: &str) -> RawResponse {
        RawResponse {
            status: 200,
            location: None,
            content_type: Some("text/html".into()),
            body: body.as_bytes().to_vec(),
            truncated: false,
        }
    }

    fn fetcher(config: FetchConfig, t: &RecordingTransport) -> (Fetcher, ManualClock) {
        let clock = ManualClock::new(Utc::now());
        (
            Fetcher::with_transport(config, Arc::new(t.clone()), Arc::new(clock.clone())),
            clock,
        )
    }

    #[test]
    fn onion_without_proxy_fails_before_io() {
        let t = RecordingTransport::new(|_| Ok(ok("x")));
        let (f, _) = fetcher(FetchConfig::default(), &t);
        let err = f
            .fetch(&task("http://abcdefghijklmnop.onion/"))
            .unwrap_err();
        assert!(matches!(err, FetchError::Config(_)), "{err}");
        assert!(t.calls().is_empty());
    }

    #[test]
    fn onion_goes_through_socks() {
        let t = RecordingTransport::new(|_| Ok(ok("x")));
        let cfg = FetchConfig {
            onion_proxy: Some("127.0.0.1:9050".into()),
            ..FetchConfig::default()
        };
        let (f, _) = fetcher(cfg, &t);
        f.fetch(&task("http://abcdefghijklmnop.onion/")).unwrap();
        f.fetch(&task("http://example.com/")).unwrap();
        let calls = t.calls();
        assert_eq!(calls[0].1, Route::Socks5("127.0.0.1:9050".into()));
        assert_eq!(calls[1].1, Route::Direct);
    }

    #[test]
    fn retries_then_transient() {
        let t = RecordingTransport::new(|_| Err(TransportError("timed out".into())));
        let (f, clock) = fetcher(FetchConfig::default(), &t);
        let err = f.fetch(&task("http://example.com/")).unwrap_err();
        assert!(err.is_transient());
        assert_eq!(t.calls().len(), 4);
        assert_eq!(clock.slept(), Duration::from_millis(500 + 1000 + 2000));
    }

    #[test]
    fn client_errors_are_permanent() {
        let t = RecordingTransport::new(|_| {
            Ok(RawResponse {
                status: 404,
                ..ok("")
            })
        });
        let (f, _) = fetcher(FetchConfig::default(), &t);
        assert!(matches!(
            f.fetch(&task("http://example.com/")),
            Err(FetchError::Permanent { status: 404, .. })
        ));
        assert_eq!(t.calls().len(), 1);
    }

    #[test]
    fn redirects() {
        let t = RecordingTransport::new(|u| {
            Ok(match u.path() {
                "/a" => RawResponse {
                    status: 301,
                    location: Some("/b".into()),
                    ..ok("")
                },
                "/loop" => RawResponse {
                    status: 302,
                    location: Some("/loop".into()),
                    ..ok("")
                },
                "/out" => RawResponse {
                    status: 302,
                    location: Some("http://example.com/".into()),
                    ..ok("")
                },
                _ => ok("done"),
            })
        });
        let cfg = FetchConfig {
            onion_proxy: Some("127.0.0.1:9050".into()),
            ..FetchConfig::default()
        };
        let (f, _) = fetcher(cfg, &t);
        let r = f.fetch(&task("http://example.com/a")).unwrap();
        assert_eq!(r.final_url, "http://example.com/b");
        assert!(matches!(
            f.fetch(&task("http://example.com/loop")),
            Err(FetchError::TooManyRedirects(5))
        ));
        let before = t.calls().len();
        assert!(matches!(
            f.fetch(&task("http://abcdefghijklmnop.onion/out")),
            Err(FetchError::UnsafeRedirect { .. })
        ));
        assert_eq!(t.calls().len(), before + 1);
    }

    #[test]
    fn body_cap_applies() {
        let t = RecordingTransport::new(|_| Ok(ok(&"a".repeat(5000))));
        let cfg = FetchConfig {
            body_cap: 1000,
            ..FetchConfig::default()
        };
        let (f, _) = fetcher(cfg, &t);
        let r = f.fetch(&task("http://example.com/")).unwrap();
        assert_eq!(r.body.len(), 1000);
        assert!(r.truncated);
    }

    #[test]
    fn text_examples() {
        let p = extract_text(
            b"<p>IP 1.2.3.4</p><script>x</script>",
            Some("text/html"),
            DEFAULT_BODY_CAP,
        )
        .unwrap();
        assert_eq!(p.text, "IP 1.2.3.4");
        assert_eq!(
            extract_text(b"&amp;", Some("text/html; charset=utf-8"), 100)
                .unwrap()
                .text,
            "&"
        );
        assert_eq!(
            extract_text(b"a  <b> c", Some("text/plain"), 100)
                .unwrap()
                .text,
            "a  <b> c"
        );
        assert_eq!(
            extract_text(b"<div>one</div><div>two</div><style>p{}</style>", None, 100)
                .unwrap()
                .text,
            "one two"
        );
        assert!(extract_text(b"\x89PNG", Some("image/png"), 100).is_err());
    }

    #[test]
    fn text_cap_flags_truncation() {
        let mut body = b"<p>".to_vec();
        body.extend(std::iter::repeat_n(b'x', 5 * 1024 * 1024));
        let p = extract_text(&body, Some("text/html"), 1024 * 1024).unwrap();
        assert!(p.truncated);
        assert_eq!(p.text.len(), 1024 * 1024 - 3);
        let p = extract_text("héllo".as_bytes(), Some("text/plain"), 2).unwrap();
        assert_eq!(p.text, "h");
    }

    proptest! {
        #[test]
        fn no_tag_brackets_survive(parts in proptest::collection::vec((0usize..6, "[a-z &;.0-9]{0,12}"), 0..20)) {
            let tags = ["p", "div", "span", "b", "script", "a"];
            let mut html = String::new();
            for (i, text) in &parts {
                let t = tags[*i];
                html.push_str(&format!("<{t} class=\"x\">{text}</{t}>"));
            }
            let out = html_to_text(&html);
            prop_assert!(!out.contains('<'));
        }
    }
}
