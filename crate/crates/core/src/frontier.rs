//! Focused-crawl frontier: canonical URLs, dedup, scope and depth limits,
//! keyword pre-filter and per-host politeness.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use regex::{RegexSet, RegexSetBuilder};
use scraper::{Html, Selector};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::model::{SourceKind, Spider};

#[derive(Debug, Error)]
pub enum FrontierError {
    #[error("cannot parse url `{url}`: {message}")]
    BadUrl { url: String, message: String },
    #[error("profile {spider}: {message}")]
    Profile { spider: Spider, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Lowercases scheme and host, drops the default port, resolves dot
/// segments and removes the fragment.
pub fn normalize_url(raw: &str) -> Result<String, FrontierError> {
    let mut u = Url::parse(raw.trim()).map_err(|e| FrontierError::BadUrl {
        url: raw.to_string(),
        message: e.to_string(),
    })?;
    if u.cannot_be_a_base() || u.host_str().is_none() {
        return Err(FrontierError::BadUrl {
            url: raw.to_string(),
            message: "no host".into(),
        });
    }
    u.set_fragment(None);
    Ok(u.to_string())
}

pub fn is_onion_host(host: &str) -> bool {
    let h = host.trim_end_matches('.').to_ascii_lowercase();
    h == "onion" || h.ends_with(".onion")
}

pub fn host_of(url: &str) -> Option<String> {
    Url::parse(url)
        .ok()?
        .host_str()
        .map(str::to_ascii_lowercase)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "hosts")]
pub enum Scope {
    /// Only the listed hosts (and their subdomains).
    HostAllowlist(BTreeSet<String>),
    /// Any host. Clear-web profiles still refuse onion hosts.
    Open,
    OnionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Network {
    ClearWeb,
    DarkWeb,
}

#[derive(Debug, Clone)]
pub struct SpiderProfile {
    pub spider: Spider,
    pub network: Network,
    pub seeds: Vec<String>,
    pub scope: Scope,
    pub max_depth: u32,
    pub min_delay: Duration,
    keywords: Vec<String>,
    prefilter: Option<RegexSet>,
}

impl SpiderProfile {
    /// Seeds are normalized; keywords are case-insensitive regexes.
    pub fn new(
        spider: Spider,
        network: Network,
        seeds: Vec<String>,
        scope: Scope,
        max_depth: u32,
        min_delay: Duration,
        keywords: Vec<String>,
    ) -> Result<Self, FrontierError> {
        let err = |message: String| FrontierError::Profile { spider, message };
        if seeds.is_empty() {
            return Err(err("seed list is empty".into()));
        }
        let seeds = seeds
            .iter()
            .map(|s| normalize_url(s))
            .collect::<Result<Vec<_>, _>>()?;
        if network == Network::ClearWeb && scope == Scope::OnionOnly {
            return Err(err("onion-only scope needs a dark-web profile".into()));
        }
        let prefilter = if keywords.is_empty() {
            None
        } else {
            Some(
                RegexSetBuilder::new(&keywords)
                    .case_insensitive(true)
                    .build()
                    .map_err(|e| err(format!("bad keyword pattern: {e}")))?,
            )
        };
        let p = SpiderProfile {
            spider,
            network,
            seeds,
            scope,
            max_depth,
            min_delay,
            keywords,
            prefilter,
        };
        if let Some(bad) = p.seeds.iter().find(|s| !p.in_scope(s)) {
            return Err(err(format!("seed {bad} is outside the profile scope")));
        }
        Ok(p)
    }

    /// Built-in profile for a named spider. Clear-web spiders stay on their
    /// seed hosts; dark-web spiders are onion-only.
    pub fn preset(spider: Spider, seeds: Vec<String>) -> Result<Self, FrontierError> {
        let (network, scope) = match spider {
            Spider::Ache | Spider::Sitemap => {
                let hosts = seeds
                    .iter()
                    .filter_map(|s| host_of(&normalize_url(s).ok()?))
                    .collect();
                (Network::ClearWeb, Scope::HostAllowlist(hosts))
            }
            Spider::Ahmia | Spider::Wiki1 | Spider::Wiki2 => (Network::DarkWeb, Scope::OnionOnly),
        };
        SpiderProfile::new(
            spider,
            network,
            seeds,
            scope,
            3,
            Duration::from_secs(1),
            DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn keywords(&self) -> &[String] {
        &self.keywords
    }

    pub fn source_kind(&self) -> SourceKind {
        match self.network {
            Network::ClearWeb => SourceKind::ClearWeb {
                spider: self.spider,
            },
            Network::DarkWeb => SourceKind::DarkWeb {
                spider: self.spider,
            },
        }
    }

    pub fn honors_robots(&self) -> bool {
        self.network == Network::ClearWeb
    }

    pub fn in_scope(&self, url: &str) -> bool {
        let Ok(u) = Url::parse(url) else { return false };
        if !matches!(u.scheme(), "http" | "https") {
            return false;
        }
        let Some(host) = u.host_str().map(str::to_ascii_lowercase) else {
            return false;
        };
        let onion = is_onion_host(&host);
        if onion && self.network == Network::ClearWeb {
            return false;
        }
        match &self.scope {
            Scope::Open => true,
            Scope::OnionOnly => onion,
            Scope::HostAllowlist(hosts) => hosts
                .iter()
                .any(|h| host == *h || host.ends_with(&format!(".{h}"))),
        }
    }
}

/// Threat vocabulary used by the preset profiles.
pub const DEFAULT_KEYWORDS: [&str; 12] = [
    r"malware",
    r"ransomware",
    r"\bc2\b",
    r"cve-",
    r"exploit",
    r"botnet",
    r"phishing",
    r"\bioc",
    r"backdoor",
    r"trojan",
    r"vulnerab",
    r"stealer",
];

/// True when any profile keyword matches, or when the profile has none.
pub fn lexical_prefilter(text: &str, profile: &SpiderProfile) -> bool {
    profile
        .prefilter
        .as_ref()
        .is_none_or(|set| set.is_match(text))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrawlTask {
    pub url: String,
    pub spider: Spider,
    pub depth: u32,
    pub discovered_from: Option<String>,
    pub enqueued_at: DateTime<Utc>,
}

impl CrawlTask {
    pub fn seed(url: String, spider: Spider, at: DateTime<Utc>) -> Self {
        CrawlTask {
            url,
            spider,
            depth: 0,
            discovered_from: None,
            enqueued_at: at,
        }
    }

    pub fn child(&self, url: String, at: DateTime<Utc>) -> Self {
        CrawlTask {
            url,
            spider: self.spider,
            depth: self.depth + 1,
            discovered_from: Some(self.url.clone()),
            enqueued_at: at,
        }
    }

    pub fn host(&self) -> String {
        host_of(&self.url).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    Duplicate,
    Scope,
    Depth,
    Robots,
    /// No profile registered for the task's spider.
    UnknownSpider,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    Accepted,
    Rejected(Rejection),
}

/// `Disallow`/`Allow` prefixes from the group matching our agent, falling
/// back to `*`. Longest matching prefix wins; ties go to `Allow`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RobotsRules {
    allow: Vec<String>,
    disallow: Vec<String>,
}

impl RobotsRules {
    pub fn allow_all() -> Self {
        RobotsRules::default()
    }

    pub fn parse(body: &str, user_agent: &str) -> Self {
        let agent = user_agent.to_ascii_lowercase();
        let mut groups: Vec<(Vec<String>, RobotsRules)> = Vec::new();
        let mut in_agents = false;
        for line in body.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            let Some((k, v)) = line.split_once(':') else {
                continue;
            };
            let (k, v) = (k.trim().to_ascii_lowercase(), v.trim());
            match k.as_str() {
                "user-agent" => {
                    if !in_agents {
                        groups.push((Vec::new(), RobotsRules::default()));
                    }
                    in_agents = true;
                    groups.last_mut().unwrap().0.push(v.to_ascii_lowercase());
                }
                "allow" | "disallow" => {
                    in_agents = false;
                    let Some((_, rules)) = groups.last_mut() else {
                        continue;
                    };
                    if v.is_empty() {
                        continue;
                    }
                    if k == "allow" {
                        rules.allow.push(v.to_string());
                    } else {
                        rules.disallow.push(v.to_string());
                    }
                }
                _ => in_agents = false,
            }
        }
        let specific = groups.iter().find(|(agents, _)| {
            agents
                .iter()
                .any(|a| a != "*" && agent.contains(a.as_str()))
        });
        let fallback = groups
            .iter()
            .find(|(agents, _)| agents.iter().any(|a| a == "*"));
        specific
            .or(fallback)
            .map(|(_, r)| r.clone())
            .unwrap_or_default()
    }

    pub fn allows(&self, path: &str) -> bool {
        let best = |v: &[String]| {
            v.iter()
                .filter(|p| path.starts_with(p.as_str()))
                .map(String::len)
                .max()
        };
        match (best(&self.allow), best(&self.disallow)) {
            (_, None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(d)) => a >= d,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    seen: HashSet<String>,
    /// Index 0: seeds, index 1: discovered. Per host FIFO of (seq, task).
    queues: [BTreeMap<String, VecDeque<(u64, CrawlTask)>>; 2],
    last_dispatch: HashMap<String, DateTime<Utc>>,
    robots: HashMap<String, RobotsRules>,
    seq: u64,
    accepted: u64,
    dispatched: u64,
    rejected: BTreeMap<&'static str, u64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FrontierStats {
    pub accepted: u64,
    pub dispatched: u64,
    pub pending: u64,
}

/// Thread-safe frontier. All state sits behind one lock.
#[derive(Debug)]
pub struct Frontier {
    profiles: HashMap<Spider, SpiderProfile>,
    inner: Mutex<Inner>,
}

impl Frontier {
    pub fn new(profiles: impl IntoIterator<Item = SpiderProfile>) -> Self {
        Frontier {
            profiles: profiles.into_iter().map(|p| (p.spider, p)).collect(),
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn profile(&self, spider: Spider) -> Option<&SpiderProfile> {
        self.profiles.get(&spider)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &SpiderProfile> {
        self.profiles.values()
    }

    /// Enqueues every profile seed at depth 0.
    pub fn seed_all(&self, now: DateTime<Utc>) -> usize {
        let mut spiders: Vec<&SpiderProfile> = self.profiles.values().collect();
        spiders.sort_by_key(|p| p.spider);
        let mut n = 0;
        for p in spiders {
            for s in &p.seeds {
                if self.enqueue(CrawlTask::seed(s.clone(), p.spider, now)) == Enqueued::Accepted {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn enqueue(&self, mut task: CrawlTask) -> Enqueued {
        let mut inner = self.inner.lock();
        let outcome = self.check(&inner, &mut task);
        match outcome {
            Enqueued::Rejected(r) => {
                let name = match r {
                    Rejection::Duplicate => "duplicate",
                    Rejection::Scope => "scope",
                    Rejection::Depth => "depth",
                    Rejection::Robots => "robots",
                    Rejection::UnknownSpider => "unknown_spider",
                };
                *inner.rejected.entry(name).or_default() += 1;
            }
            Enqueued::Accepted => {
                inner.seen.insert(task.url.clone());
                inner.seq += 1;
                inner.accepted += 1;
                let seq = inner.seq;
                let class = usize::from(task.discovered_from.is_some());
                inner.queues[class]
                    .entry(task.host())
                    .or_default()
                    .push_back((seq, task));
            }
        }
        outcome
    }

    fn check(&self, inner: &Inner, task: &mut CrawlTask) -> Enqueued {
        let Some(profile) = self.profiles.get(&task.spider) else {
            return Enqueued::Rejected(Rejection::UnknownSpider);
        };
        let Ok(url) = normalize_url(&task.url) else {
            return Enqueued::Rejected(Rejection::Scope);
        };
        task.url = url;
        if task.depth > profile.max_depth {
            return Enqueued::Rejected(Rejection::Depth);
        }
        if !profile.in_scope(&task.url) {
            return Enqueued::Rejected(Rejection::Scope);
        }
        if inner.seen.contains(&task.url) {
            return Enqueued::Rejected(Rejection::Duplicate);
        }
        if profile.honors_robots() {
            if let (Some(rules), Ok(u)) = (inner.robots.get(&task.host()), Url::parse(&task.url)) {
                if !rules.allows(u.path()) {
                    return Enqueued::Rejected(Rejection::Robots);
                }
            }
        }
        Enqueued::Accepted
    }

    /// Oldest task whose host is out of its politeness delay, seeds first.
    /// Marks the host as dispatched at `now`.
    pub fn next_ready(&self, now: DateTime<Utc>) -> Option<CrawlTask> {
        let mut inner = self.inner.lock();
        let mut pick: Option<(usize, String)> = None;
        for class in 0..2 {
            let mut best: Option<(u64, &String)> = None;
            for (host, q) in &inner.queues[class] {
                let Some((seq, task)) = q.front() else {
                    continue;
                };
                if !self.host_ready(&inner, host, task.spider, now) {
                    continue;
                }
                if best.is_none_or(|(s, _)| *seq < s) {
                    best = Some((*seq, host));
                }
            }
            if let Some((_, host)) = best {
                pick = Some((class, host.clone()));
                break;
            }
        }
        let (class, host) = pick?;
        let q = inner.queues[class]
            .get_mut(&host)
            .expect("picked host has a queue");
        let (_, task) = q.pop_front().expect("picked queue is non-empty");
        if q.is_empty() {
            inner.queues[class].remove(&host);
        }
        inner.last_dispatch.insert(host, now);
        inner.dispatched += 1;
        Some(task)
    }

    fn host_ready(&self, inner: &Inner, host: &str, spider: Spider, now: DateTime<Utc>) -> bool {
        let delay = self
            .profiles
            .get(&spider)
            .map_or(Duration::ZERO, |p| p.min_delay);
        inner.last_dispatch.get(host).is_none_or(|&last| {
            now.signed_duration_since(last)
                .to_std()
                .unwrap_or(Duration::ZERO)
                >= delay
        })
    }

    /// Earliest instant at which some pending task becomes dispatchable.
    pub fn next_wakeup(&self) -> Option<DateTime<Utc>> {
        let inner = self.inner.lock();
        inner
            .queues
            .iter()
            .flat_map(|m| m.iter())
            .filter_map(|(host, q)| {
                let (_, task) = q.front()?;
                let delay = self
                    .profiles
                    .get(&task.spider)
                    .map_or(Duration::ZERO, |p| p.min_delay);
                Some(match inner.last_dispatch.get(host) {
                    Some(&last) => last + chrono::Duration::from_std(delay).unwrap_or_default(),
                    None => DateTime::<Utc>::MIN_UTC,
                })
            })
            .min()
    }

    pub fn needs_robots(&self, host: &str) -> bool {
        !self.inner.lock().robots.contains_key(host)
    }

    pub fn set_robots(&self, host: &str, rules: RobotsRules) {
        self.inner
            .lock()
            .robots
            .insert(host.to_ascii_lowercase(), rules);
    }

    pub fn robots_allows(&self, url: &str) -> bool {
        let Ok(u) = Url::parse(url) else { return false };
        let host = u.host_str().unwrap_or("").to_ascii_lowercase();
        self.inner
            .lock()
            .robots
            .get(&host)
            .is_none_or(|r| r.allows(u.path()))
    }

    pub fn stats(&self) -> FrontierStats {
        let inner = self.inner.lock();
        let pending = inner
            .queues
            .iter()
            .flat_map(|m| m.values())
            .map(|q| q.len() as u64)
            .sum();
        FrontierStats {
            accepted: inner.accepted,
            dispatched: inner.dispatched,
            pending,
        }
    }

    pub fn rejections(&self) -> BTreeMap<&'static str, u64> {
        self.inner.lock().rejected.clone()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.lock().queues.iter().all(BTreeMap::is_empty)
    }

    /// Writes the visited set, one canonical url per line, atomically.
    pub fn save_visited(&self, path: &Path) -> Result<(), FrontierError> {
        let io = |e: std::io::Error| FrontierError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut urls: Vec<String> = self.inner.lock().seen.iter().cloned().collect();
        urls.sort();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            for u in &urls {
                writeln!(f, "{u}").map_err(io)?;
            }
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Marks every url in a snapshot as already seen.
    pub fn load_visited(&self, path: &Path) -> Result<usize, FrontierError> {
        let urls = read_url_lines(path)?;
        let mut inner = self.inner.lock();
        let n = urls.len();
        inner.seen.extend(urls);
        Ok(n)
    }
}

fn read_url_lines(path: &Path) -> Result<Vec<String>, FrontierError> {
    let text = std::fs::read_to_string(path).map_err(|e| FrontierError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(normalize_url)
        .collect()
}

/// One url per line; blank lines and `#` comments are skipped.
pub fn load_seeds(path: &Path) -> Result<Vec<String>, FrontierError> {
    read_url_lines(path)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Links {
    pub urls: Vec<String>,
    /// hrefs that could not be resolved against the base.
    pub malformed: usize,
}

/// Resolves anchor hrefs against `base`, keeps http(s) targets, normalizes
/// and dedups them in document order.
pub fn extract_links(html: &str, base: &str) -> Links {
    let mut out = Links::default();
    let Ok(base) = Url::parse(base) else {
        return out;
    };
    let doc = Html::parse_document(html);
    let sel = Selector::parse("a[href]").expect("static selector");
    let mut seen = HashSet::new();
    for a in doc.select(&sel) {
        let href = a.value().attr("href").unwrap_or("").trim();
        if href.is_empty() || href.starts_with('#') {
            continue;
        }
        let Ok(u) = base.join(href) else {
            out.malformed += 1;
            continue;
        };
        if !matches!(u.scheme(), "http" | "https") {
            continue;
        }
        match normalize_url(u.as_str()) {
            Ok(n) if seen.insert(n.clone()) => out.urls.push(n),
            Ok(_) => {}
            Err(_) => out.malformed += 1,
        }
    }
    out
}
