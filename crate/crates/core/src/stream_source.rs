//! Post-stream ingestion: paced replay of NDJSON fixtures and a generic
//! newline-delimited HTTP streaming client. Both publish to `tweet.raw`.

use std::collections::{HashSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bus::{Bus, BusError, TOPIC_TWEET_RAW};
use crate::clock::Clock;

pub const SESSION_DEDUP_WINDOW: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostRecord {
    pub id: String,
    pub text: String,
    pub created_at: DateTime<Utc>,
}

impl PostRecord {
    /// Canonical bytes as published on the bus.
    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("post record serializes")
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("stream rejected credentials with status {0}")]
    Auth(u16),
    #[error("invalid stream configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StreamReport {
    pub published: u64,
    pub skipped_malformed: u64,
    pub skipped_duplicate: u64,
    /// Replay: completed passes over the file. HTTP: connections made.
    pub cycles: u64,
    pub reconnects: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayOptions {
    /// Records per second; `None` publishes as fast as the bus accepts.
    pub rate: Option<f64>,
    #[serde(rename = "loop")]
    pub looping: bool,
    /// Stop after this many published records.
    pub limit: Option<u64>,
    pub topic: String,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            rate: None,
            looping: false,
            limit: None,
            topic: TOPIC_TWEET_RAW.to_string(),
        }
    }
}

/// Schedules the i-th emission at `start + i / rate`, so any half-open one
/// second window holds at most `rate` emissions.
struct Pacer {
    start: Option<DateTime<Utc>>,
    interval: Option<f64>,
    emitted: u64,
}

impl Pacer {
    fn new(rate: Option<f64>) -> Pacer {
        Pacer {
            start: None,
            interval: rate.map(|r| 1.0 / r),
            emitted: 0,
        }
    }

    fn wait(&mut self, clock: &dyn Clock) {
        let Some(iv) = self.interval else { return };
        let start = *self.start.get_or_insert_with(|| clock.now());
        let due =
            start + chrono::Duration::nanoseconds((self.emitted as f64 * iv * 1e9).round() as i64);
        let now = clock.now();
        if due > now {
            if let Ok(d) = (due - now).to_std() {
                clock.sleep(d);
            }
        }
        self.emitted += 1;
    }
}

/// Replays an NDJSON fixture of `{id, text, created_at}` onto the bus in
/// file order. Malformed lines are skipped and counted.
pub fn replay(
    path: &Path,
    opts: &ReplayOptions,
    bus: &Bus,
    clock: &dyn Clock,
    stop: &AtomicBool,
) -> Result<StreamReport, StreamError> {
    if let Some(r) = opts.rate {
        if !(r.is_finite() && r > 0.0) {
            return Err(StreamError::Config(format!(
                "rate must be positive, got {r}"
            )));
        }
    }
    let io = |source| StreamError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = Some(File::open(path).map_err(io)?);
    let mut report = StreamReport::default();
    let mut pacer = Pacer::new(opts.rate);
    loop {
        let f = match file.take() {
            Some(f) => f,
            None => File::open(path).map_err(io)?,
        };
        let before = report.published;
        for line in BufReader::new(f).lines() {
            if stop.load(Ordering::SeqCst) || opts.limit.is_some_and(|l| report.published >= l) {
                return Ok(report);
            }
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: PostRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("{}: skipping malformed line: {e}", path.display());
                    report.skipped_malformed += 1;
                    continue;
                }
            };
            pacer.wait(clock);
            bus.publish(&opts.topic, &rec.canonical_json())?;
            report.published += 1;
        }
        report.cycles += 1;
        // A pass with nothing publishable would spin forever when looping.
        if !opts.looping || report.published == before {
            return Ok(report);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HttpStreamConfig {
    pub endpoint: String,
    /// Env var with a bearer token. The token itself never appears in config.
    pub token_env: Option<String>,
    pub topic: String,
    #[serde(with = "crate::fetcher::millis")]
    pub backoff_base: Duration,
    #[serde(with = "crate::fetcher::millis")]
    pub backoff_max: Duration,
    #[serde(with = "crate::fetcher::secs")]
    pub connect_timeout: Duration,
    /// Give up after this many reconnects. `None` retries forever.
    pub max_reconnects: Option<u64>,
    pub limit: Option<u64>,
}

impl Default for HttpStreamConfig {
    fn default() -> Self {
        HttpStreamConfig {
            endpoint: String::new(),
            token_env: None,
            topic: TOPIC_TWEET_RAW.to_string(),
            backoff_base: Duration::from_millis(500),
            backoff_max: Duration::from_secs(60),
            connect_timeout: Duration::from_secs(10),
            max_reconnects: None,
            limit: None,
        }
    }
}

/// Ids seen in this session, bounded to the most recent window.
struct SessionDedup {
    set: HashSet<String>,
    order: VecDeque<String>,
    cap: usize,
}

impl SessionDedup {
    fn new(cap: usize) -> Self {
        SessionDedup {
            set: HashSet::new(),
            order: VecDeque::new(),
            cap,
        }
    }

    /// True the first time an id is seen within the window.
    fn insert(&mut self, id: &str) -> bool {
        if self.set.contains(id) {
            return false;
        }
        self.set.insert(id.to_string());
        self.order.push_back(id.to_string());
        if self.order.len() > self.cap {
            if let Some(old) = self.order.pop_front() {
                self.set.remove(&old);
            }
        }
        true
    }
}

fn jittered(base: Duration, max: Duration, attempt: u32) -> Duration {
    let exp = base.saturating_mul(1u32 << attempt.min(20)).min(max);
    exp.mul_f64(rand::thread_rng().gen_range(0.5..=1.0))
}

/// Reads newline-delimited post records from a long-lived HTTP response,
/// reconnecting with jittered exponential backoff. Auth failures (401/403)
/// are permanent.
pub fn connect_http_stream(
    cfg: &HttpStreamConfig,
    bus: &Bus,
    clock: &dyn Clock,
    stop: &AtomicBool,
) -> Result<StreamReport, StreamError> {
    let token = match &cfg.token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| StreamError::MissingEnv(var.clone()))?),
        None => None,
    };
    if cfg.endpoint.is_empty() {
        return Err(StreamError::Config("stream endpoint is empty".into()));
    }
    // No overall timeout: the response is meant to stay open.
    let http = reqwest::blocking::Client::builder()
        .connect_timeout(cfg.connect_timeout)
        .timeout(None)
        .build()
        .map_err(|e| StreamError::Config(e.without_url().to_string()))?;
    let mut report = StreamReport::default();
    let mut seen = SessionDedup::new(SESSION_DEDUP_WINDOW);
    let mut attempt = 0u32;
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(report);
        }
        let mut req = http.get(&cfg.endpoint);
        if let Some(t) = &token {
            req = req.bearer_auth(t);
        }
        let mut progressed = false;
        match req.send() {
            Ok(resp) if matches!(resp.status().as_u16(), 401 | 403) => {
                return Err(StreamError::Auth(resp.status().as_u16()));
            }
            Ok(resp) if resp.status().is_success() => {
                report.cycles += 1;
                for line in BufReader::new(resp).lines() {
                    if stop.load(Ordering::SeqCst)
                        || cfg.limit.is_some_and(|l| report.published >= l)
                    {
                        return Ok(report);
                    }
                    let line = match line {
                        Ok(l) => l,
                        Err(e) => {
                            log::warn!("stream read failed: {e}");
                            break;
                        }
                    };
                    if line.trim().is_empty() {
                        continue;
                    }
                    let rec: PostRecord = match serde_json::from_str(&line) {
                        Ok(r) => r,
                        Err(_) => {
                            report.skipped_malformed += 1;
                            continue;
                        }
                    };
                    if !seen.insert(&rec.id) {
                        report.skipped_duplicate += 1;
                        continue;
                    }
                    bus.publish(&cfg.topic, &rec.canonical_json())?;
                    report.published += 1;
                    progressed = true;
                }
            }
            Ok(resp) => log::warn!("stream endpoint answered {}", resp.status()),
            Err(e) => log::warn!("stream connect failed: {}", e.without_url()),
        }
        if cfg.limit.is_some_and(|l| report.published >= l) {
            return Ok(report);
        }
        if cfg.max_reconnects.is_some_and(|m| report.reconnects >= m) {
            return Ok(report);
        }
        attempt = if progressed { 0 } else { attempt + 1 };
        report.reconnects += 1;
        clock.sleep(jittered(cfg.backoff_base, cfg.backoff_max, attempt));
    }
}

/// Handle on a publisher thread.
pub struct SourceRun {
    stop: Arc<AtomicBool>,
    thread: Option<std::thread::JoinHandle<Result<StreamReport, StreamError>>>,
}

impl SourceRun {
    pub fn spawn<F>(name: &str, f: F) -> std::io::Result<SourceRun>
    where
        F: FnOnce(&AtomicBool) -> Result<StreamReport, StreamError> + Send + 'static,
    {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::Builder::new()
            .name(name.to_string())
            .spawn(move || f(&flag))?;
        Ok(SourceRun {
            stop,
            thread: Some(thread),
        })
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    pub fn join(mut self) -> Result<StreamReport, StreamError> {
        match self.thread.take().map(|t| t.join()) {
            Some(Ok(r)) => r,
            Some(Err(_)) => Err(StreamError::Config("source thread panicked".into())),
            None => Ok(StreamReport::default()),
        }
    }
}

impl Drop for SourceRun {
    fn drop(&mut self) {
        self.stop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bus::BusConfig;
    use crate::clock::ManualClock;
    use chrono::TimeZone;
    use proptest::prelude::*;
    use std::io::Write;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 3, 1, 12, 0, 0).unwrap()
    }

    fn fixture(dir: &Path, n: usize, bad_at: Option<usize>) -> PathBuf {
        let p = dir.join("posts.ndjson");
        let mut f = File::create(&p).unwrap();
        for i in 0..n {
            if Some(i) == bad_at {
                writeln!(f, "{{not json").unwrap();
            } else {
                writeln!(
                    f,
                    r#"{{"id":"p{i}","text":"post {i}","created_at":"2023-03-01T12:00:0{}Z"}}"#,
                    i % 10
                )
                .unwrap();
            }
        }
        p
    }

    fn ids(bus: &Bus) -> Vec<String> {
        bus.read_all(TOPIC_TWEET_RAW)
            .unwrap()
            .iter()
            .map(|r| r.json::<PostRecord>().unwrap().id)
            .collect()
    }

    #[test]
    fn replay_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(BusConfig::at(dir.path().join("bus"))).unwrap();
        let p = fixture(dir.path(), 10, None);
        let clock = ManualClock::new(t0());
        let opts = ReplayOptions {
            rate: Some(100.0),
            ..Default::default()
        };
        let r = replay(&p, &opts, &bus, &clock, &AtomicBool::new(false)).unwrap();
        assert_eq!(r.published, 10);
        assert_eq!(
            ids(&bus),
            (0..10).map(|i| format!("p{i}")).collect::<Vec<_>>()
        );
    }

    #[test]
    fn malformed_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(BusConfig::at(dir.path().join("bus"))).unwrap();
        let p = fixture(dir.path(), 10, Some(4));
        let clock = ManualClock::new(t0());
        let r = replay(
            &p,
            &ReplayOptions::default(),
            &bus,
            &clock,
            &AtomicBool::new(false),
        )
        .unwrap();
        assert_eq!((r.published, r.skipped_malformed), (9, 1));
    }

    #[test]
    fn looping_cycles_with_stable_ids() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(BusConfig::at(dir.path().join("bus"))).unwrap();
        let p = fixture(dir.path(), 10, None);
        let clock = ManualClock::new(t0());
        let opts = ReplayOptions {
            looping: true,
            limit: Some(25),
            ..Default::default()
        };
        let r = replay(&p, &opts, &bus, &clock, &AtomicBool::new(false)).unwrap();
        assert_eq!(r.published, 25);
        let got = ids(&bus);
        let want: Vec<String> = (0..25).map(|i| format!("p{}", i % 10)).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn missing_file_is_startup_error() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(BusConfig::at(dir.path().join("bus"))).unwrap();
        let clock = ManualClock::new(t0());
        let err = replay(
            &dir.path().join("nope.ndjson"),
            &ReplayOptions::default(),
            &bus,
            &clock,
            &AtomicBool::new(false),
        )
        .unwrap_err();
        assert!(matches!(err, StreamError::Io { .. }));
    }

    #[test]
    fn payloads_are_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(BusConfig::at(dir.path().join("bus"))).unwrap();
        let p = dir.path().join("x.ndjson");
        std::fs::write(
            &p,
            "{ \"created_at\": \"2023-03-01T12:00:00+00:00\", \"text\": \"hi\", \"id\": \"a\", \"extra\": 1 }\n",
        )
        .unwrap();
        let clock = ManualClock::new(t0());
        replay(
            &p,
            &ReplayOptions::default(),
            &bus,
            &clock,
            &AtomicBool::new(false),
        )
        .unwrap();
        let rec = &bus.read_all(TOPIC_TWEET_RAW).unwrap()[0];
        assert_eq!(
            std::str::from_utf8(&rec.payload).unwrap(),
            r#"{"id":"a","text":"hi","created_at":"2023-03-01T12:00:00Z"}"#
        );
    }

    #[test]
    fn missing_token_env_names_variable() {
        let dir = tempfile::tempdir().unwrap();
        let bus = Bus::open(BusConfig::at(dir.path().join("bus"))).unwrap();
        let cfg = HttpStreamConfig {
            endpoint: "http://127.0.0.1:9/stream".into(),
            token_env: Some("CTIFLOW_TEST_SURELY_UNSET_TOKEN".into()),
            ..Default::default()
        };
        let err = connect_http_stream(&cfg, &bus, &ManualClock::new(t0()), &AtomicBool::new(false))
            .unwrap_err();
        assert!(err.to_string().contains("CTIFLOW_TEST_SURELY_UNSET_TOKEN"));
    }

    #[test]
    fn session_dedup_is_bounded() {
        let mut d = SessionDedup::new(3);
        for id in ["a", "b", "c"] {
            assert!(d.insert(id));
        }
        assert!(!d.insert("a"));
        assert!(d.insert("d"));
        assert!(d.insert("a"), "a fell out of the window");
    }

    proptest! {
        #[test]
        fn pacing_respects_rate(rate in 1u32..50, n in 1usize..120) {
            let clock = ManualClock::new(t0());
            let mut pacer = Pacer::new(Some(rate as f64));
            let mut times = Vec::new();
            for _ in 0..n {
                pacer.wait(&clock);
                times.push(clock.now());
            }
            for (i, t) in times.iter().enumerate() {
                let end = *t + chrono::Duration::seconds(1);
                let in_window = times[i..].iter().take_while(|x| **x < end).count();
                prop_assert!(in_window <= rate as usize);
            }
        }

        #[test]
        fn canonical_round_trip(id in "\\PC{1,20}", text in "\\PC{0,80}", secs in 0i64..2_000_000_000) {
            let rec = PostRecord { id, text, created_at: Utc.timestamp_opt(secs, 0).unwrap() };
            let bytes = rec.canonical_json();
            let back: PostRecord = serde_json::from_slice(&bytes).unwrap();
            prop_assert_eq!(back.canonical_json(), bytes);
            prop_assert_eq!(back, rec);
        }
    }
}
