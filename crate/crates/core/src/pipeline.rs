//! Stage wiring over the bus for the post and web dataflows:
//! source -> relevance -> extraction (rules + entity merge) -> enrichment -> sink.
//!
//! Every stage is a consumer group that commits only after its output is
//! durable downstream, so delivery to the sink is at-least-once.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{
    Bus, BusError, Consumer, TopicRecord, TOPIC_DOC_RELEVANT, TOPIC_IOC_EXTRACTED, TOPIC_TWEET_RAW,
    TOPIC_WEB_RAW,
};
use crate::classifier::{split_sentences, ClassifierError, Scorer};
use crate::clock::{self, Clock};
use crate::config::{Config, ConfigError, PipelineConfig};
use crate::enrichment::{Found, Verifier};
use crate::extractor::{merge_with_ner, Extractor};
use crate::fetcher::{extract_text, FetchError, Fetcher};
use crate::frontier::{extract_links, lexical_prefilter, Frontier, RobotsRules};
use crate::metrics::{MetricSnapshot, Metrics, MetricsServer, Stage};
use crate::model::{Document, EntitySpan, Granularity, RelevanceVerdict, SourceKind};
use crate::ner::{FallbackTagger, NerError, Tagger};
use crate::sink::{IndicatorSighting, Sink, SinkError, SinkRecord};
use crate::stream_source::{
    self, HttpStreamConfig, PostRecord, ReplayOptions, StreamError, StreamReport,
};

pub const TOPIC_DLQ_CLASSIFY: &str = "dlq.classify";
pub const TOPIC_DLQ_EXTRACT: &str = "dlq.extract";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error(transparent)]
    Sink(#[from] SinkError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("{0}")]
    Setup(String),
}

/// A document in flight between stages, tagged with the source record it
/// came from so terminal outcomes can be counted once per source record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub document: Document,
    pub origin_topic: String,
    pub origin_offset: u64,
    /// When the source record was published.
    pub ingested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub stage: String,
    pub reason: String,
    pub topic: String,
    pub offset: u64,
    pub origin_topic: String,
    pub origin_offset: u64,
    pub payload: String,
    pub at: DateTime<Utc>,
}

/// Entity tagging with an optional remote tagger in front of the offline one.
pub struct NerStage {
    pub remote: Option<Arc<dyn Tagger>>,
    /// Used alone when there is no remote tagger, and when the remote fails.
    pub fallback: Option<FallbackTagger>,
}

impl NerStage {
    pub fn offline(tagger: FallbackTagger) -> Self {
        NerStage {
            remote: None,
            fallback: Some(tagger),
        }
    }

    fn tag(&self, text: &str, metrics: &Metrics) -> Result<Vec<EntitySpan>, NerError> {
        if let Some(remote) = &self.remote {
            match remote.tag(text) {
                Ok(t) => {
                    if t.dropped > 0 {
                        metrics.incr("ner_spans_dropped", t.dropped as u64);
                    }
                    return Ok(t.spans);
                }
                Err(e) => match &self.fallback {
                    Some(_) => {
                        log::warn!("remote tagger failed, using offline tagger: {e}");
                        metrics.incr("ner_fallback", 1);
                    }
                    None => return Err(e),
                },
            }
        }
        Ok(self
            .fallback
            .as_ref()
            .map(|f| f.tag(text))
            .unwrap_or_default())
    }
}

/// Everything the stages share.
pub struct Components {
    pub bus: Arc<Bus>,
    pub sink: Arc<Sink>,
    pub metrics: Arc<Metrics>,
    pub scorer: Arc<dyn Scorer>,
    pub extractor: Extractor,
    pub ner: NerStage,
    pub verifier: Option<Arc<Verifier>>,
    pub clock: Arc<dyn Clock>,
    pub settings: PipelineConfig,
    pub metrics_listen: Option<String>,
    /// Period of metric records written to the sink; zero disables them.
    pub snapshot_interval: Duration,
}

impl Components {
    pub fn from_config(cfg: &Config) -> Result<Components, PipelineError> {
        let bus = Bus::open(cfg.bus.clone())?;
        let sink = Arc::new(Sink::open(&cfg.sink)?);
        let remote: Option<Arc<dyn Tagger>> = match cfg.ner.build_remote()? {
            Some(r) => Some(Arc::new(r)),
            None => None,
        };
        let fallback = (remote.is_none() || cfg.ner.fallback)
            .then(|| cfg.ner.build_fallback())
            .transpose()?;
        let verifier = if cfg.enrichment.enabled {
            Some(Arc::new(
                cfg.enrichment
                    .build_verifier(!cfg.enrichment.live.is_empty())?,
            ))
        } else {
            None
        };
        Ok(Components {
            bus,
            sink,
            metrics: Arc::new(Metrics::default()),
            scorer: cfg.classifier.build_scorer()?,
            extractor: cfg.ner.build_extractor()?,
            ner: NerStage { remote, fallback },
            verifier,
            clock: clock::system(),
            settings: cfg.pipeline.clone(),
            metrics_listen: cfg.metrics.listen.clone(),
            snapshot_interval: Duration::from_secs(cfg.metrics.snapshot_interval_secs),
        })
    }
}

/// Source records that reached a terminal outcome, keyed by origin.
#[derive(Default)]
struct Outcomes {
    indexed: HashSet<(String, u64)>,
    dead_lettered: HashSet<(String, u64)>,
    discarded: HashSet<(String, u64)>,
}

struct Shared {
    c: Components,
    outcomes: Mutex<Outcomes>,
}

impl Shared {
    fn group(&self, stage: &str) -> String {
        format!("{}-{stage}", self.c.settings.group)
    }

    fn dead_letter(
        &self,
        stage: &str,
        dlq: &str,
        rec: &TopicRecord,
        origin: (String, u64),
        reason: String,
    ) -> Result<(), PipelineError> {
        log::warn!(
            "{stage}: dead-lettering {}@{}: {reason}",
            rec.topic,
            rec.offset
        );
        let dl = DeadLetter {
            stage: stage.to_string(),
            reason,
            topic: rec.topic.clone(),
            offset: rec.offset,
            origin_topic: origin.0.clone(),
            origin_offset: origin.1,
            payload: String::from_utf8_lossy(&rec.payload).into_owned(),
            at: self.c.clock.now(),
        };
        self.c.bus.publish_json(dlq, &dl)?;
        self.c.metrics.incr("dead_lettered", 1);
        self.outcomes.lock().dead_lettered.insert(origin);
        Ok(())
    }

    fn record_e2e(&self, source: SourceKind, ingested_at: DateTime<Utc>) {
        let ms = (self.c.clock.now() - ingested_at)
            .num_microseconds()
            .unwrap_or(0) as f64
            / 1000.0;
        self.c
            .metrics
            .record_stage_timing(Stage::EndToEnd, source, ms);
    }
}

/// Post relevance: the OR of sentence verdicts. The reported score is the
/// highest sentence score.
pub fn score_post(scorer: &dyn Scorer, text: &str) -> Result<RelevanceVerdict, ClassifierError> {
    let sentences = split_sentences(text);
    if sentences.is_empty() {
        return scorer.score(text, Granularity::Sentence);
    }
    let mut best: Option<RelevanceVerdict> = None;
    let mut any = false;
    for (s, _) in sentences {
        let v = scorer.score(s, Granularity::Sentence)?;
        any |= v.relevant;
        if best.as_ref().is_none_or(|b| v.score > b.score) {
            best = Some(v);
        }
    }
    let mut v = best.expect("at least one sentence");
    v.relevant = any;
    Ok(v)
}

enum Classified {
    Relevant(Envelope),
    Irrelevant(Envelope),
    Failed(String),
}

fn classify_one(sh: &Shared, rec: &TopicRecord) -> Classified {
    let started = Instant::now();
    let (doc, granularity) = if rec.topic == TOPIC_TWEET_RAW {
        match rec.json::<PostRecord>() {
            Ok(p) => (
                Document::new(SourceKind::Twitter, p.id, p.text, rec.produced_at),
                Granularity::Sentence,
            ),
            Err(e) => return Classified::Failed(e.to_string()),
        }
    } else {
        match rec.json::<Document>() {
            Ok(d) => (d, Granularity::Page),
            Err(e) => return Classified::Failed(e.to_string()),
        }
    };
    let verdict = match granularity {
        Granularity::Sentence => score_post(sh.c.scorer.as_ref(), doc.raw_text()),
        Granularity::Page => sh.c.scorer.score(doc.raw_text(), Granularity::Page),
    };
    let verdict = match verdict {
        Ok(v) => v,
        Err(e) => return Classified::Failed(format!("classification failed: {e}")),
    };
    sh.c.metrics.record_stage_timing(
        Stage::Classify,
        doc.source(),
        started.elapsed().as_secs_f64() * 1000.0,
    );
    let relevant = verdict.relevant;
    let env = Envelope {
        document: doc.with_relevance(verdict),
        origin_topic: rec.topic.clone(),
        origin_offset: rec.offset,
        ingested_at: rec.produced_at,
    };
    if relevant {
        Classified::Relevant(env)
    } else {
        Classified::Irrelevant(env)
    }
}

fn classify_batch(sh: &Shared, recs: &[TopicRecord]) -> Result<(), PipelineError> {
    let results = crate::par::map(recs, |r| classify_one(sh, r));
    for (rec, res) in recs.iter().zip(results) {
        match res {
            Classified::Relevant(env) => {
                let d = &env.document;
                sh.c.metrics.record_document(d.id(), d.source(), true);
                sh.c.bus.publish_json(TOPIC_DOC_RELEVANT, &env)?;
            }
            Classified::Irrelevant(env) => {
                let d = &env.document;
                sh.c.metrics.record_document(d.id(), d.source(), false);
                let origin = (env.origin_topic.clone(), env.origin_offset);
                if sh.c.settings.index_stubs {
                    sh.c.sink.index(&SinkRecord::Stub(d.stub()))?;
                    sh.record_e2e(d.source(), env.ingested_at);
                    sh.outcomes.lock().indexed.insert(origin);
                } else {
                    sh.c.metrics.incr("discarded_irrelevant", 1);
                    sh.outcomes.lock().discarded.insert(origin);
                }
            }
            Classified::Failed(reason) => {
                sh.dead_letter(
                    "classify",
                    TOPIC_DLQ_CLASSIFY,
                    rec,
                    (rec.topic.clone(), rec.offset),
                    reason,
                )?;
            }
        }
    }
    Ok(())
}

fn extract_one(sh: &Shared, rec: &TopicRecord) -> Result<Envelope, (String, u64, String)> {
    let env: Envelope = rec
        .json()
        .map_err(|e| (rec.topic.clone(), rec.offset, e.to_string()))?;
    let origin = |reason: String| (env.origin_topic.clone(), env.origin_offset, reason);
    let started = Instant::now();
    let doc = &env.document;
    let now = sh.c.clock.now();
    let rules = sh.c.extractor.extract(doc.raw_text(), now);
    let spans =
        sh.c.ner
            .tag(doc.raw_text(), &sh.c.metrics)
            .map_err(|e| origin(format!("entity tagging failed: {e}")))?;
    let merged = merge_with_ner(&rules, &spans, doc.raw_text(), now);
    let indicators = merged
        .indicators
        .into_iter()
        .map(|i| {
            let i = i.with_source(doc.source());
            match &sh.c.verifier {
                Some(v) => {
                    let statuses = v.verify(&i);
                    i.with_verification(statuses)
                }
                None => i,
            }
        })
        .collect();
    sh.c.metrics.record_stage_timing(
        Stage::Extract,
        doc.source(),
        started.elapsed().as_secs_f64() * 1000.0,
    );
    Ok(Envelope {
        document: env
            .document
            .clone()
            .with_extraction(indicators, merged.tags),
        ..env.clone()
    })
}

fn extract_batch(sh: &Shared, recs: &[TopicRecord]) -> Result<(), PipelineError> {
    let results = crate::par::map(recs, |r| extract_one(sh, r));
    for (rec, res) in recs.iter().zip(results) {
        match res {
            Ok(env) => {
                sh.c.bus.publish_json(TOPIC_IOC_EXTRACTED, &env)?;
            }
            Err((ot, oo, reason)) => {
                sh.dead_letter("extract", TOPIC_DLQ_EXTRACT, rec, (ot, oo), reason)?
            }
        }
    }
    Ok(())
}

fn index_batch(sh: &Shared, recs: &[TopicRecord]) -> Result<(), PipelineError> {
    for rec in recs {
        let env: Envelope = match rec.json() {
            Ok(e) => e,
            Err(e) => {
                sh.dead_letter(
                    "extract",
                    TOPIC_DLQ_EXTRACT,
                    rec,
                    (rec.topic.clone(), rec.offset),
                    e.to_string(),
                )?;
                continue;
            }
        };
        let doc = &env.document;
        sh.c.sink.index(&SinkRecord::Document(doc.clone()))?;
        let seen_at = sh.c.clock.now();
        for ind in doc.indicators() {
            let verified = ind.verification().iter().any(|v| v.found == Found::Found);
            let key = ind.key();
            let sighting = IndicatorSighting::from_document(doc, ind.clone(), seen_at);
            sh.c.sink.index(&SinkRecord::Indicator(sighting))?;
            sh.c.metrics
                .record_sighting(doc.id(), doc.source(), &key, verified);
        }
        sh.record_e2e(doc.source(), env.ingested_at);
        sh.outcomes
            .lock()
            .indexed
            .insert((env.origin_topic, env.origin_offset));
    }
    Ok(())
}

type BatchFn = fn(&Shared, &[TopicRecord]) -> Result<(), PipelineError>;

fn stage_loop(sh: Arc<Shared>, consumer: Consumer, handler: BatchFn, stop: Arc<AtomicBool>) {
    let batch = sh.c.settings.batch_size.max(1);
    let wait = Duration::from_millis(sh.c.settings.poll_wait_ms.max(1));
    let mut failures = 0u32;
    while !stop.load(Ordering::SeqCst) {
        let recs = consumer.poll_wait(batch, wait);
        let Some(last) = recs.last().map(|r| r.offset) else {
            continue;
        };
        match handler(&sh, &recs).and_then(|_| consumer.commit(last).map_err(PipelineError::from)) {
            Ok(()) => failures = 0,
            Err(e) => {
                // Uncommitted: the same batch is polled again.
                failures += 1;
                log::error!(
                    "{}@{}: batch failed ({failures}): {e}",
                    consumer.group(),
                    consumer.topic()
                );
                std::thread::sleep(Duration::from_millis(50u64 << failures.min(6)));
            }
        }
    }
}

/// Stage input topics in dataflow order.
fn stage_inputs(sources: &[&'static str]) -> Vec<(&'static str, &'static str, BatchFn)> {
    let mut v: Vec<(&'static str, &'static str, BatchFn)> = sources
        .iter()
        .map(|t| (*t, "classify", classify_batch as BatchFn))
        .collect();
    v.push((TOPIC_DOC_RELEVANT, "extract", extract_batch));
    v.push((TOPIC_IOC_EXTRACTED, "index", index_batch));
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shutdown {
    /// Every source record reached the sink or a dead-letter topic.
    Drained,
    /// The grace period ran out with records still uncommitted. They are
    /// redelivered on the next start.
    Forced,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub outcome: Shutdown,
    /// Source records published during this run.
    pub published: u64,
    /// Source records already waiting when the run started.
    pub backlog: u64,
    pub indexed: u64,
    pub dead_lettered: u64,
    pub discarded: u64,
    /// Records not yet through every stage.
    pub uncommitted: u64,
    pub source: Option<StreamReport>,
    pub snapshot: MetricSnapshot,
}

impl RunReport {
    /// `published + backlog = indexed + dead_lettered + discarded + uncommitted`
    pub fn conserved(&self) -> bool {
        self.published + self.backlog
            == self.indexed + self.dead_lettered + self.discarded + self.uncommitted
    }
}

enum SourceThread {
    Stream(JoinHandle<Result<StreamReport, StreamError>>),
    Crawl(Vec<JoinHandle<()>>),
}

struct CrawlState {
    frontier: Arc<Frontier>,
    visited: Option<PathBuf>,
}

pub struct RunHandle {
    shared: Arc<Shared>,
    source_topics: Vec<&'static str>,
    start_counts: Vec<(String, u64, u64)>,
    stop_sources: Arc<AtomicBool>,
    stop_stages: Arc<AtomicBool>,
    source: Option<SourceThread>,
    stages: Vec<JoinHandle<()>>,
    server: Option<MetricsServer>,
    snapshots: Option<JoinHandle<()>>,
    crawl: Option<CrawlState>,
}

fn topic_count(bus: &Bus, topic: &str) -> Result<u64, BusError> {
    Ok(bus.head(topic)?.map_or(0, |h| h + 1))
}

fn start(
    c: Components,
    source_topics: Vec<&'static str>,
    spawn_source: impl FnOnce(
        Arc<Shared>,
        Arc<AtomicBool>,
    ) -> Result<(SourceThread, Option<CrawlState>), PipelineError>,
) -> Result<RunHandle, PipelineError> {
    let sh = Arc::new(Shared {
        c,
        outcomes: Mutex::new(Outcomes::default()),
    });
    let stop_sources = Arc::new(AtomicBool::new(false));
    let stop_stages = Arc::new(AtomicBool::new(false));
    let mut stages = Vec::new();
    let mut start_counts = Vec::new();
    for (topic, stage, handler) in stage_inputs(&source_topics) {
        let group = sh.group(stage);
        let consumer = sh.c.bus.subscribe(topic, &group)?;
        if source_topics.contains(&topic) {
            let count = topic_count(&sh.c.bus, topic)?;
            start_counts.push((topic.to_string(), count, consumer.position()));
        }
        let (sh2, stop) = (sh.clone(), stop_stages.clone());
        stages.push(
            std::thread::Builder::new()
                .name(format!("stage-{stage}"))
                .spawn(move || stage_loop(sh2, consumer, handler, stop))
                .map_err(|e| PipelineError::Setup(e.to_string()))?,
        );
    }
    let server = match &sh.c.metrics_listen {
        Some(addr) => Some(
            MetricsServer::start(addr, sh.c.metrics.clone())
                .map_err(|e| PipelineError::Setup(format!("metrics listener {addr}: {e}")))?,
        ),
        None => None,
    };
    let snapshots = if sh.c.snapshot_interval > Duration::ZERO {
        let (sh2, stop) = (sh.clone(), stop_stages.clone());
        Some(
            std::thread::Builder::new()
                .name("metric-snapshots".into())
                .spawn(move || {
                    let mut last = Instant::now();
                    while !stop.load(Ordering::SeqCst) {
                        std::thread::sleep(Duration::from_millis(100));
                        if last.elapsed() >= sh2.c.snapshot_interval {
                            last = Instant::now();
                            let snap = sh2.c.metrics.snapshot();
                            if let Err(e) = sh2.c.sink.index(&SinkRecord::Metric(Box::new(snap))) {
                                log::error!("metric snapshot not written: {e}");
                            }
                        }
                    }
                })
                .map_err(|e| PipelineError::Setup(e.to_string()))?,
        )
    } else {
        None
    };
    let (source, crawl) = spawn_source(sh.clone(), stop_sources.clone())?;
    Ok(RunHandle {
        shared: sh,
        source_topics,
        start_counts,
        stop_sources,
        stop_stages,
        source: Some(source),
        stages,
        server,
        snapshots,
        crawl,
    })
}

/// Where the post pipeline reads from.
pub enum PostSource {
    /// Only records already on `tweet.raw`.
    Topic,
    Replay {
        path: PathBuf,
        options: ReplayOptions,
    },
    Http(HttpStreamConfig),
}

/// Consumes `tweet.raw`: sentence-level scoring, then extraction,
/// enrichment and indexing of relevant posts.
pub fn run_tweet_pipeline(c: Components, source: PostSource) -> Result<RunHandle, PipelineError> {
    if let PostSource::Replay { path, .. } = &source {
        if !path.exists() {
            return Err(StreamError::Io {
                path: path.clone(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "fixture not found"),
            }
            .into());
        }
    }
    start(c, vec![TOPIC_TWEET_RAW], move |sh, stop| {
        let bus = sh.c.bus.clone();
        let clock = sh.c.clock.clone();
        let f: Box<dyn FnOnce() -> Result<StreamReport, StreamError> + Send> = match source {
            PostSource::Topic => Box::new(|| Ok(StreamReport::default())),
            PostSource::Replay { path, options } => Box::new(move || {
                stream_source::replay(&path, &options, &bus, clock.as_ref(), &stop)
            }),
            PostSource::Http(cfg) => Box::new(move || {
                stream_source::connect_http_stream(&cfg, &bus, clock.as_ref(), &stop)
            }),
        };
        let t = std::thread::Builder::new()
            .name("post-source".into())
            .spawn(f)
            .map_err(|e| PipelineError::Setup(e.to_string()))?;
        Ok((SourceThread::Stream(t), None))
    })
}

pub struct CrawlSetup {
    pub frontier: Arc<Frontier>,
    pub fetcher: Arc<Fetcher>,
    pub workers: usize,
    /// Stop dispatching after this many fetches.
    pub max_pages: Option<u64>,
    /// Visited-url file loaded before seeding and saved on shutdown.
    pub visited: Option<PathBuf>,
}

struct Dispatch {
    in_flight: usize,
    dispatched: u64,
}

fn is_html(content_type: Option<&str>, body: &[u8]) -> bool {
    match content_type {
        Some(ct) => ct.to_ascii_lowercase().contains("html"),
        None => String::from_utf8_lossy(&body[..body.len().min(512)])
            .trim_start()
            .starts_with('<'),
    }
}

fn crawl_worker(
    sh: Arc<Shared>,
    setup: Arc<CrawlSetup>,
    dispatch: Arc<Mutex<Dispatch>>,
    stop: Arc<AtomicBool>,
) {
    let clock = sh.c.clock.clone();
    let m = &sh.c.metrics;
    while !stop.load(Ordering::SeqCst) {
        let task = {
            let mut d = dispatch.lock();
            let limit_hit = setup.max_pages.is_some_and(|mx| d.dispatched >= mx);
            let next = if limit_hit {
                None
            } else {
                setup.frontier.next_ready(clock.now())
            };
            match next {
                Some(t) => {
                    d.in_flight += 1;
                    d.dispatched += 1;
                    Some(t)
                }
                None if d.in_flight == 0 && (limit_hit || setup.frontier.is_empty()) => return,
                None => None,
            }
        };
        let Some(task) = task else {
            let nap = setup
                .frontier
                .next_wakeup()
                .and_then(|w| (w - clock.now()).to_std().ok())
                .unwrap_or(Duration::from_millis(20))
                .clamp(Duration::from_millis(1), Duration::from_millis(50));
            std::thread::sleep(nap);
            continue;
        };
        crawl_one(&sh, &setup, &task);
        dispatch.lock().in_flight -= 1;
    }
    let _ = m;
}

fn crawl_one(sh: &Shared, setup: &CrawlSetup, task: &crate::frontier::CrawlTask) {
    let m = &sh.c.metrics;
    let Some(profile) = setup.frontier.profile(task.spider) else {
        return;
    };
    let source = profile.source_kind();
    let host = task.host();
    if profile.honors_robots() && setup.frontier.needs_robots(&host) {
        let rules = setup
            .fetcher
            .fetch_robots(&task.url)
            .map(|body| RobotsRules::parse(&body, &setup.fetcher.config().user_agent))
            .unwrap_or_else(RobotsRules::allow_all);
        setup.frontier.set_robots(&host, rules);
    }
    if profile.honors_robots() && !setup.frontier.robots_allows(&task.url) {
        m.incr("robots_blocked", 1);
        return;
    }
    let started = Instant::now();
    let res = match setup.fetcher.fetch(task) {
        Ok(r) => r,
        Err(e) => {
            let counter = match &e {
                FetchError::Permanent { .. } => "fetch_permanent",
                FetchError::Transient { .. } => "fetch_transient",
                _ => "fetch_rejected",
            };
            log::info!("{}: {e}", task.url);
            m.incr(counter, 1);
            return;
        }
    };
    m.record_stage_timing(
        Stage::Fetch,
        source,
        started.elapsed().as_secs_f64() * 1000.0,
    );
    m.incr("pages_fetched", 1);
    let cap = setup.fetcher.config().body_cap;
    let page = match extract_text(&res.body, res.content_type.as_deref(), cap) {
        Ok(p) => p,
        Err(e) => {
            log::info!("{}: {e}", task.url);
            m.incr("unsupported", 1);
            return;
        }
    };
    if is_html(res.content_type.as_deref(), &res.body) {
        let html = String::from_utf8_lossy(&res.body);
        let links = extract_links(&html, &res.final_url);
        if links.malformed > 0 {
            m.incr("links_malformed", links.malformed as u64);
        }
        let now = sh.c.clock.now();
        for url in links.urls {
            setup.frontier.enqueue(task.child(url, now));
        }
    }
    if !lexical_prefilter(&page.text, profile) {
        m.incr("prefilter_skipped", 1);
        m.record_page_skipped(source);
        return;
    }
    let doc = Document::new(source, task.url.clone(), page.text, res.fetched_at);
    if let Err(e) = sh.c.bus.publish_json(TOPIC_WEB_RAW, &doc) {
        log::error!("{}: not published: {e}", task.url);
        m.incr("publish_failed", 1);
    }
}

/// Crawls from the frontier's seeds and feeds pages through page-level
/// scoring, extraction, enrichment and indexing.
pub fn run_web_pipeline(c: Components, setup: CrawlSetup) -> Result<RunHandle, PipelineError> {
    if setup.workers == 0 {
        return Err(PipelineError::Setup(
            "crawl needs at least one worker".into(),
        ));
    }
    if let Some(v) = &setup.visited {
        if v.exists() {
            let n = setup
                .frontier
                .load_visited(v)
                .map_err(|e| PipelineError::Setup(e.to_string()))?;
            log::info!("loaded {n} visited urls from {}", v.display());
        }
    }
    let seeded = setup.frontier.seed_all(c.clock.now());
    log::info!("seeded {seeded} urls");
    start(c, vec![TOPIC_WEB_RAW], move |sh, stop| {
        let setup = Arc::new(setup);
        let dispatch = Arc::new(Mutex::new(Dispatch {
            in_flight: 0,
            dispatched: 0,
        }));
        let mut workers = Vec::new();
        for i in 0..setup.workers {
            let (sh, setup, dispatch, stop) =
                (sh.clone(), setup.clone(), dispatch.clone(), stop.clone());
            workers.push(
                std::thread::Builder::new()
                    .name(format!("crawl-{i}"))
                    .spawn(move || crawl_worker(sh, setup, dispatch, stop))
                    .map_err(|e| PipelineError::Setup(e.to_string()))?,
            );
        }
        let crawl = CrawlState {
            frontier: setup.frontier.clone(),
            visited: setup.visited.clone(),
        };
        Ok((SourceThread::Crawl(workers), Some(crawl)))
    })
}

static DEFAULT_WAIT_STEP: AtomicUsize = AtomicUsize::new(5);

impl RunHandle {
    pub fn metrics(&self) -> Arc<Metrics> {
        self.shared.c.metrics.clone()
    }

    pub fn sink(&self) -> Arc<Sink> {
        self.shared.c.sink.clone()
    }

    pub fn metrics_addr(&self) -> Option<std::net::SocketAddr> {
        self.server.as_ref().map(MetricsServer::addr)
    }

    /// True once the source has nothing more to publish.
    pub fn source_finished(&self) -> bool {
        match &self.source {
            None => true,
            Some(SourceThread::Stream(t)) => t.is_finished(),
            Some(SourceThread::Crawl(ws)) => ws.iter().all(|w| w.is_finished()),
        }
    }

    /// Records between the source topics and the sink.
    pub fn uncommitted(&self) -> u64 {
        let bus = &self.shared.c.bus;
        stage_inputs(&self.source_topics)
            .into_iter()
            .map(|(topic, stage, _)| bus.lag(topic, &self.shared.group(stage)).unwrap_or(0))
            .sum()
    }

    /// Zero lag on every stage, checked in dataflow order so that upstream
    /// commits (which follow downstream publishes) are seen first.
    fn idle(&self) -> bool {
        let bus = &self.shared.c.bus;
        stage_inputs(&self.source_topics)
            .into_iter()
            .all(|(topic, stage, _)| bus.lag(topic, &self.shared.group(stage)).unwrap_or(1) == 0)
    }

    /// Waits for the source to finish on its own, then shuts down with the
    /// remaining time as grace.
    pub fn run_to_completion(self, timeout: Duration) -> RunReport {
        let deadline = Instant::now() + timeout;
        while !self.source_finished() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(
                DEFAULT_WAIT_STEP.load(Ordering::Relaxed) as u64,
            ));
        }
        self.shutdown(deadline.saturating_duration_since(Instant::now()))
    }

    /// Stops the source, lets in-flight records drain for up to `grace`,
    /// then stops the stages. Offsets stay committed up to the last
    /// completed batch.
    pub fn shutdown(mut self, grace: Duration) -> RunReport {
        let deadline = Instant::now() + grace;
        self.stop_sources.store(true, Ordering::SeqCst);
        let source_report = match self.source.take() {
            Some(SourceThread::Stream(t)) => match t.join() {
                Ok(Ok(r)) => Some(r),
                Ok(Err(e)) => {
                    log::error!("source failed: {e}");
                    None
                }
                Err(_) => None,
            },
            Some(SourceThread::Crawl(ws)) => {
                for w in ws {
                    let _ = w.join();
                }
                None
            }
            None => None,
        };
        while !self.idle() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        self.stop_stages.store(true, Ordering::SeqCst);
        for s in self.stages.drain(..) {
            let _ = s.join();
        }
        if let Some(t) = self.snapshots.take() {
            let _ = t.join();
        }
        if let Some(crawl) = &self.crawl {
            let fs = crawl.frontier.stats();
            let m = &self.shared.c.metrics;
            m.set_counter("frontier_accepted", fs.accepted);
            m.set_counter("frontier_dispatched", fs.dispatched);
            m.set_counter("frontier_pending", fs.pending);
            for (reason, n) in crawl.frontier.rejections() {
                m.set_counter(&format!("frontier_rejected_{reason}"), n);
            }
            if let Some(v) = &crawl.visited {
                if let Err(e) = crawl.frontier.save_visited(v) {
                    log::error!("visited set not saved: {e}");
                }
            }
        }
        let snapshot = self.shared.c.metrics.snapshot();
        if self.shared.c.snapshot_interval > Duration::ZERO {
            if let Err(e) = self
                .shared
                .c
                .sink
                .index(&SinkRecord::Metric(Box::new(snapshot.clone())))
            {
                log::error!("final metric snapshot not written: {e}");
            }
        }
        self.shared.c.sink.close();
        let bus = &self.shared.c.bus;
        let mut published = 0;
        let mut backlog = 0;
        for (topic, count, position) in &self.start_counts {
            published += topic_count(bus, topic).unwrap_or(*count) - count;
            backlog += count - position;
        }
        let uncommitted = self.uncommitted();
        let o = self.shared.outcomes.lock();
        RunReport {
            outcome: if uncommitted == 0 {
                Shutdown::Drained
            } else {
                Shutdown::Forced
            },
            published,
            backlog,
            indexed: o.indexed.len() as u64,
            dead_lettered: o.dead_lettered.len() as u64,
            discarded: o.discarded.len() as u64,
            uncommitted,
            source: source_report,
            snapshot,
        }
    }
}

impl Drop for RunHandle {
    fn drop(&mut self) {
        self.stop_sources.store(true, Ordering::SeqCst);
        self.stop_stages.store(true, Ordering::SeqCst);
    }
}
