//! Crawl and pipeline metrics: stage timings, relevancy ratios, harvest
//! rate and per-spider / per-source breakdowns.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enrichment::Found;
use crate::model::{SourceChannel, SourceKind, Spider};
use crate::sink::SinkRecord;

pub const RESERVOIR_SIZE: usize = 1024;

fn fnv_hash(s: &str) -> u64 {
    use std::hash::Hasher;
    let mut h = fnv::FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

/// The crawl ratio as defined for the harvest table: pages crawled per
/// relevant page. `None` when no relevant page was found.
pub fn harvest_rate(total_crawled: u64, relevant: u64) -> Option<f64> {
    (relevant > 0).then(|| total_crawled as f64 / relevant as f64)
}

/// Relevant pages per crawled page, the usual reading of "harvest rate".
pub fn precision_harvest_rate(total_crawled: u64, relevant: u64) -> Option<f64> {
    (total_crawled > 0).then(|| relevant as f64 / total_crawled as f64)
}

/// Rounds shares of `counts` to `decimals` places with the largest
/// remainder method, so the rounded values sum to exactly 100.
pub fn rounded_percentages(counts: &[u64], decimals: u32) -> Option<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    let scale = 10u64.pow(decimals);
    let units = 100 * scale;
    let exact: Vec<(u128, u128)> = counts
        .iter()
        .map(|&c| {
            let num = c as u128 * units as u128;
            (num / total as u128, num % total as u128)
        })
        .collect();
    let mut floors: Vec<u128> = exact.iter().map(|e| e.0).collect();
    let short = units as u128 - floors.iter().sum::<u128>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| exact[b].1.cmp(&exact[a].1).then(a.cmp(&b)));
    for &i in order.iter().take(short as usize) {
        floors[i] += 1;
    }
    Some(
        floors
            .into_iter()
            .map(|f| f as f64 / scale as f64)
            .collect(),
    )
}

/// True/false shares to one decimal. `None` when both counts are zero.
pub fn relevancy_ratio(true_count: u64, false_count: u64) -> Option<(f64, f64)> {
    rounded_percentages(&[true_count, false_count], 1).map(|v| (v[0], v[1]))
}

/// Count and two-decimal percentage per key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown<K: Ord> {
    pub counts: BTreeMap<K, u64>,
    pub percent: BTreeMap<K, f64>,
}

impl<K: Ord + Clone> Breakdown<K> {
    pub fn from_counts(counts: BTreeMap<K, u64>) -> Self {
        let values: Vec<u64> = counts.values().copied().collect();
        let percent = rounded_percentages(&values, 2)
            .map(|p| counts.keys().cloned().zip(p).collect())
            .unwrap_or_default();
        Breakdown { counts, percent }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Fetch,
    Classify,
    Extract,
    /// Source publish to sink acknowledgement.
    EndToEnd,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Fetch => "fetch",
            Stage::Classify => "classify",
            Stage::Extract => "extract",
            Stage::EndToEnd => "end_to_end",
        })
    }
}

/// Running mean plus a fixed-size uniform reservoir for p95.
#[derive(Debug, Clone)]
pub struct TimingStats {
    count: u64,
    sum: f64,
    max: f64,
    reservoir: Vec<f64>,
    rng: ChaCha8Rng,
}

impl TimingStats {
    pub fn new(seed: u64) -> Self {
        TimingStats {
            count: 0,
            sum: 0.0,
            max: 0.0,
            reservoir: Vec::with_capacity(RESERVOIR_SIZE),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn record(&mut self, ms: f64) {
        let ms = if ms.is_finite() { ms.max(0.0) } else { 0.0 };
        self.count += 1;
        self.sum += ms;
        self.max = self.max.max(ms);
        if self.reservoir.len() < RESERVOIR_SIZE {
            self.reservoir.push(ms);
        } else {
            let j = self.rng.gen_range(0..self.count);
            if (j as usize) < RESERVOIR_SIZE {
                self.reservoir[j as usize] = ms;
            }
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }

    /// Nearest-rank 95th percentile of the reservoir.
    pub fn p95(&self) -> Option<f64> {
        if self.reservoir.is_empty() {
            return None;
        }
        let mut v = self.reservoir.clone();
        v.sort_by(f64::total_cmp);
        let rank = (0.95 * v.len() as f64).ceil() as usize;
        Some(v[rank.max(1) - 1])
    }

    fn cell(&self) -> Option<TimingCell> {
        Some(TimingCell {
            count: self.count,
            mean_ms: self.mean()?,
            p95_ms: self.p95()?,
            max_ms: self.max,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingCell {
    pub count: u64,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevancyCell {
    pub true_count: u64,
    pub false_count: u64,
    pub true_pct: Option<f64>,
    pub false_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrawlSummary {
    /// Web pages fetched and turned into documents.
    pub total_crawled: u64,
    pub relevant_found: u64,
    /// Pages crawled per relevant page.
    pub harvest_rate: Option<f64>,
    /// Relevant pages per crawled page.
    pub precision_harvest_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IocSummary {
    /// Distinct (document, indicator) sightings.
    pub total: u64,
    /// Distinct indicator keys.
    pub unique: u64,
    /// Distinct keys found by at least one reputation provider.
    pub verified: u64,
    pub by_source: Breakdown<SourceChannel>,
    pub by_kind: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub window_start: DateTime<Utc>,
    pub window_end: DateTime<Utc>,
    /// stage -> source channel -> timing. Cells without samples are absent.
    pub timings: BTreeMap<Stage, BTreeMap<SourceChannel, TimingCell>>,
    /// Share of classified documents judged relevant, per source channel.
    pub relevancy: BTreeMap<SourceChannel, RelevancyCell>,
    pub crawl: CrawlSummary,
    pub spiders_crawled: Breakdown<Spider>,
    pub spiders_relevant: Breakdown<Spider>,
    pub sources_crawled: Breakdown<SourceChannel>,
    pub sources_relevant: Breakdown<SourceChannel>,
    pub iocs: IocSummary,
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug)]
struct State {
    window_start: DateTime<Utc>,
    timings: BTreeMap<(Stage, SourceChannel), TimingStats>,
    classified: BTreeMap<SourceChannel, (u64, u64)>,
    crawled_spider: BTreeMap<Spider, u64>,
    relevant_spider: BTreeMap<Spider, u64>,
    crawled_source: BTreeMap<SourceChannel, u64>,
    relevant_source: BTreeMap<SourceChannel, u64>,
    documents: HashSet<u64>,
    sightings: HashSet<(String, String)>,
    ioc_source: BTreeMap<SourceChannel, u64>,
    ioc_kind: BTreeMap<String, u64>,
    ioc_keys: BTreeSet<String>,
    verified_keys: BTreeSet<String>,
    counters: BTreeMap<String, u64>,
    seed: u64,
}

/// Thread-safe metric registry. `snapshot` is a consistent cut.
#[derive(Debug)]
pub struct Metrics {
    state: Mutex<State>,
}

impl Default for Metrics {
    fn default() -> Self {
        Metrics::new(Utc::now())
    }
}

impl Metrics {
    pub fn new(window_start: DateTime<Utc>) -> Self {
        Metrics {
            state: Mutex::new(State {
                window_start,
                timings: BTreeMap::new(),
                classified: BTreeMap::new(),
                crawled_spider: BTreeMap::new(),
                relevant_spider: BTreeMap::new(),
                crawled_source: BTreeMap::new(),
                relevant_source: BTreeMap::new(),
                documents: HashSet::new(),
                sightings: HashSet::new(),
                ioc_source: BTreeMap::new(),
                ioc_kind: BTreeMap::new(),
                ioc_keys: BTreeSet::new(),
                verified_keys: BTreeSet::new(),
                counters: BTreeMap::new(),
                seed: 0x5eed,
            }),
        }
    }

    pub fn record_stage_timing(&self, stage: Stage, source: SourceKind, elapsed_ms: f64) {
        let mut st = self.state.lock();
        st.seed += 1;
        let seed = st.seed;
        st.timings
            .entry((stage, source.channel()))
            .or_insert_with(|| TimingStats::new(seed))
            .record(elapsed_ms);
    }

    /// One classified document. Web documents also count as crawled pages.
    /// Repeats of a document id are ignored, so redelivery does not skew counts.
    pub fn record_document(&self, document_id: &str, source: SourceKind, relevant: bool) {
        let mut st = self.state.lock();
        if !st.documents.insert(fnv_hash(document_id)) {
            return;
        }
        let ch = source.channel();
        let cell = st.classified.entry(ch).or_default();
        if relevant {
            cell.0 += 1;
        } else {
            cell.1 += 1;
        }
        *st.crawled_source.entry(ch).or_default() += 1;
        if relevant {
            *st.relevant_source.entry(ch).or_default() += 1;
        }
        if let Some(sp) = source.spider() {
            *st.crawled_spider.entry(sp).or_default() += 1;
            if relevant {
                *st.relevant_spider.entry(sp).or_default() += 1;
            }
        }
    }

    /// A fetched page dropped before classification (lexical pre-filter).
    /// It counts as crawled but not as classified.
    pub fn record_page_skipped(&self, source: SourceKind) {
        let mut st = self.state.lock();
        *st.crawled_source.entry(source.channel()).or_default() += 1;
        if let Some(sp) = source.spider() {
            *st.crawled_spider.entry(sp).or_default() += 1;
        }
    }

    /// One indicator seen in one document; repeats of the pair are ignored.
    pub fn record_sighting(
        &self,
        document_id: &str,
        source: SourceKind,
        key: &str,
        verified: bool,
    ) {
        let mut st = self.state.lock();
        if !st
            .sightings
            .insert((document_id.to_string(), key.to_string()))
        {
            return;
        }
        *st.ioc_source.entry(source.channel()).or_default() += 1;
        let kind = key.split(':').next().unwrap_or("").to_string();
        *st.ioc_kind.entry(kind).or_default() += 1;
        st.ioc_keys.insert(key.to_string());
        if verified {
            st.verified_keys.insert(key.to_string());
        }
    }

    pub fn incr(&self, counter: &str, by: u64) {
        *self
            .state
            .lock()
            .counters
            .entry(counter.to_string())
            .or_default() += by;
    }

    pub fn set_counter(&self, counter: &str, value: u64) {
        self.state
            .lock()
            .counters
            .insert(counter.to_string(), value);
    }

    pub fn counter(&self, counter: &str) -> u64 {
        self.state
            .lock()
            .counters
            .get(counter)
            .copied()
            .unwrap_or(0)
    }

    pub fn snapshot(&self) -> MetricSnapshot {
        self.snapshot_at(Utc::now())
    }

    pub fn snapshot_at(&self, now: DateTime<Utc>) -> MetricSnapshot {
        let st = self.state.lock();
        let mut timings: BTreeMap<Stage, BTreeMap<SourceChannel, TimingCell>> = BTreeMap::new();
        for (&(stage, ch), stats) in &st.timings {
            if let Some(cell) = stats.cell() {
                timings.entry(stage).or_default().insert(ch, cell);
            }
        }
        let relevancy = st
            .classified
            .iter()
            .map(|(&ch, &(t, f))| {
                let r = relevancy_ratio(t, f);
                (
                    ch,
                    RelevancyCell {
                        true_count: t,
                        false_count: f,
                        true_pct: r.map(|x| x.0),
                        false_pct: r.map(|x| x.1),
                    },
                )
            })
            .collect();
        let web = |m: &BTreeMap<SourceChannel, u64>| {
            m.iter()
                .filter(|(ch, _)| **ch != SourceChannel::Twitter)
                .map(|(_, v)| v)
                .sum::<u64>()
        };
        let total_crawled = web(&st.crawled_source);
        let relevant_found = web(&st.relevant_source);
        MetricSnapshot {
            window_start: st.window_start,
            window_end: now,
            timings,
            relevancy,
            crawl: CrawlSummary {
                total_crawled,
                relevant_found,
                harvest_rate: harvest_rate(total_crawled, relevant_found),
                precision_harvest_rate: precision_harvest_rate(total_crawled, relevant_found),
            },
            spiders_crawled: Breakdown::from_counts(st.crawled_spider.clone()),
            spiders_relevant: Breakdown::from_counts(st.relevant_spider.clone()),
            sources_crawled: Breakdown::from_counts(st.crawled_source.clone()),
            sources_relevant: Breakdown::from_counts(st.relevant_source.clone()),
            iocs: IocSummary {
                total: st.sightings.len() as u64,
                unique: st.ioc_keys.len() as u64,
                verified: st.verified_keys.len() as u64,
                by_source: Breakdown::from_counts(st.ioc_source.clone()),
                by_kind: st.ioc_kind.clone(),
            },
            counters: st.counters.clone(),
        }
    }

    /// Rebuilds counts from archived sink records. Timings come from the
    /// newest archived metric record, if any.
    pub fn from_archive<'a, I>(records: I) -> (Metrics, Option<MetricSnapshot>)
    where
        I: IntoIterator<Item = &'a SinkRecord>,
    {
        let m = Metrics::new(DateTime::<Utc>::MIN_UTC);
        let mut first: Option<DateTime<Utc>> = None;
        let mut last_metric = None;
        for r in records {
            match r {
                SinkRecord::Document(d) => {
                    m.record_document(d.id(), d.source(), d.is_relevant());
                    first = Some(first.map_or(d.fetched_at(), |f| f.min(d.fetched_at())));
                }
                SinkRecord::Stub(s) => {
                    m.record_document(
                        &s.id,
                        s.source,
                        s.relevance.as_ref().is_some_and(|v| v.relevant),
                    );
                    first = Some(first.map_or(s.fetched_at, |f| f.min(s.fetched_at)));
                }
                SinkRecord::Indicator(s) => {
                    let verified = s
                        .indicator
                        .verification()
                        .iter()
                        .any(|v| v.found == Found::Found);
                    m.record_sighting(&s.document_id, s.source, &s.indicator.key(), verified);
                }
                SinkRecord::Metric(snap) => last_metric = Some(snap.as_ref().clone()),
            }
        }
        if let Some(f) = first {
            m.state.lock().window_start = f;
        }
        (m, last_metric)
    }
}

/// Snapshot rebuilt from an archive: counts recomputed from records, stage
/// timings and counters taken from the last metric record.
pub fn snapshot_from_archive(records: &[SinkRecord]) -> MetricSnapshot {
    let (m, last) = Metrics::from_archive(records);
    let mut snap = m.snapshot();
    if let Some(last) = last {
        snap.timings = last.timings;
        snap.counters = last.counters;
        snap.window_start = snap.window_start.min(last.window_start);
        snap.window_end = last.window_end.max(snap.window_start);
    }
    snap
}

/// Serves `GET /metrics` with the current snapshot as JSON.
pub struct MetricsServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    thread: Option<JoinHandle<()>>,
}

impl MetricsServer {
    pub fn start(addr: &str, metrics: Arc<Metrics>) -> std::io::Result<MetricsServer> {
        let server = Arc::new(tiny_http::Server::http(addr).map_err(std::io::Error::other)?);
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("metrics server is not on an IP socket"))?;
        let srv = server.clone();
        let thread = std::thread::Builder::new()
            .name("metrics-http".into())
            .spawn(move || {
                for req in srv.incoming_requests() {
                    let (code, body) =
                        if req.method() == &tiny_http::Method::Get && req.url() == "/metrics" {
                            (
                                200,
                                serde_json::to_string(&metrics.snapshot()).unwrap_or_default(),
                            )
                        } else {
                            (404, r#"{"error":"not found"}"#.to_string())
                        };
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                        .expect("static header");
                    let _ = req.respond(
                        tiny_http::Response::from_string(body)
                            .with_status_code(code)
                            .with_header(header),
                    );
                }
            })?;
        Ok(MetricsServer {
            server,
            addr: bound,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for MetricsServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
