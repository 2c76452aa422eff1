//! Indexing terminal: an append-only NDJSON archive that is the durability
//! source of truth, plus a best-effort client for the bulk REST protocol.

use std::collections::{HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::MetricSnapshot;
use crate::model::{Document, DocumentStub, Indicator, SourceKind};

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("cannot serialize record {id}: {source}")]
    Serialize {
        id: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("bulk body needs at least one document")]
    EmptyBulk,
    #[error("sink is closed")]
    Closed,
}

/// One indicator seen in one document. The sink stores indicators in this
/// form so per-source roll-ups and provenance checks work from the archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSighting {
    pub document_id: String,
    pub source: SourceKind,
    pub document_relevant: bool,
    pub seen_at: DateTime<Utc>,
    pub indicator: Indicator,
}

impl IndicatorSighting {
    pub fn from_document(doc: &Document, indicator: Indicator, seen_at: DateTime<Utc>) -> Self {
        IndicatorSighting {
            document_id: doc.id().to_string(),
            source: doc.source(),
            document_relevant: doc.is_relevant(),
            seen_at,
            indicator,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SinkRecord {
    Document(Document),
    Stub(DocumentStub),
    Indicator(IndicatorSighting),
    Metric(Box<MetricSnapshot>),
}

impl SinkRecord {
    /// Dedup key. Metric records are never deduplicated.
    pub fn dedup_key(&self) -> Option<String> {
        match self {
            SinkRecord::Document(d) => Some(format!("doc:{}", d.id())),
            SinkRecord::Stub(s) => Some(format!("doc:{}", s.id)),
            SinkRecord::Indicator(s) => {
                Some(format!("ioc:{}:{}", s.document_id, s.indicator.key()))
            }
            SinkRecord::Metric(_) => None,
        }
    }

    /// Identifier used in errors and as the remote `_id`.
    pub fn record_id(&self) -> String {
        match self {
            SinkRecord::Document(d) => d.id().to_string(),
            SinkRecord::Stub(s) => s.id.clone(),
            SinkRecord::Indicator(s) => {
                let mut h = Sha256::new();
                h.update(s.document_id.as_bytes());
                h.update([0u8]);
                h.update(s.indicator.key().as_bytes());
                hex::encode(h.finalize())
            }
            SinkRecord::Metric(m) => format!("metrics-{}", m.window_end.timestamp_millis()),
        }
    }

    fn timestamp(&self) -> DateTime<Utc> {
        match self {
            SinkRecord::Document(d) => d.fetched_at(),
            SinkRecord::Stub(s) => s.fetched_at,
            SinkRecord::Indicator(s) => s.seen_at,
            SinkRecord::Metric(m) => m.window_end,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexNames {
    pub docs: String,
    pub iocs: String,
    pub metrics: String,
}

impl Default for IndexNames {
    fn default() -> Self {
        IndexNames {
            docs: "tstem-docs".into(),
            iocs: "tstem-iocs".into(),
            metrics: "tstem-metrics".into(),
        }
    }
}

impl IndexNames {
    /// Daily index for a record, e.g. `tstem-docs-2023.03.01`.
    pub fn index_for(&self, record: &SinkRecord) -> String {
        let prefix = match record {
            SinkRecord::Document(_) | SinkRecord::Stub(_) => &self.docs,
            SinkRecord::Indicator(_) => &self.iocs,
            SinkRecord::Metric(_) => &self.metrics,
        };
        format!("{prefix}-{}", record.timestamp().format("%Y.%m.%d"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemoteSinkConfig {
    /// Base URL; batches go to `{url}/_bulk`.
    pub url: String,
    pub batch_size: usize,
    #[serde(with = "crate::fetcher::millis")]
    pub flush_interval: Duration,
    /// Pending plus retrying documents. Oldest are dropped past this bound.
    pub max_queue: usize,
    #[serde(with = "crate::fetcher::secs")]
    pub timeout: Duration,
    /// Env var holding an API key, sent as `Authorization: ApiKey <key>`.
    pub api_key_env: Option<String>,
}

impl Default for RemoteSinkConfig {
    fn default() -> Self {
        RemoteSinkConfig {
            url: String::new(),
            batch_size: 500,
            flush_interval: Duration::from_millis(1000),
            max_queue: 100_000,
            timeout: Duration::from_secs(10),
            api_key_env: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkConfig {
    pub archive: PathBuf,
    /// fsync each record before acknowledging it.
    pub sync: bool,
    pub indices: IndexNames,
    pub remote: Option<RemoteSinkConfig>,
}

impl Default for SinkConfig {
    fn default() -> Self {
        SinkConfig {
            archive: PathBuf::from("data/sink/archive.ndjson"),
            sync: true,
            indices: IndexNames::default(),
            remote: None,
        }
    }
}

impl SinkConfig {
    pub fn at(archive: impl Into<PathBuf>) -> Self {
        SinkConfig {
            archive: archive.into(),
            ..SinkConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    /// False when the record was a duplicate and nothing was written.
    pub new: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SinkStats {
    pub acked: u64,
    pub duplicates: u64,
    pub remote: Option<BulkStats>,
}

struct ArchiveState {
    file: File,
    seen: HashSet<String>,
    acked: u64,
    duplicates: u64,
}

pub struct Sink {
    path: PathBuf,
    sync: bool,
    indices: IndexNames,
    state: Mutex<ArchiveState>,
    remote: Option<BulkClient>,
}

impl std::fmt::Debug for Sink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sink")
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

impl Sink {
    /// Opens or creates the archive. A torn last line left by a crash is
    /// truncated away; the dedup set is rebuilt from the surviving records.
    pub fn open(cfg: &SinkConfig) -> Result<Sink, SinkError> {
        let path = cfg.archive.clone();
        let io = |source| SinkError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&path)
            .map_err(io)?;
        let (records, good_len) = scan_archive(&path, &mut file)?;
        if good_len < file.metadata().map_err(io)?.len() {
            log::warn!(
                "{}: truncating torn tail at byte {good_len}",
                path.display()
            );
            file.set_len(good_len).map_err(io)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io)?;
        let seen = records.iter().filter_map(SinkRecord::dedup_key).collect();
        let remote = cfg.remote.as_ref().map(BulkClient::start).transpose()?;
        Ok(Sink {
            path,
            sync: cfg.sync,
            indices: cfg.indices.clone(),
            state: Mutex::new(ArchiveState {
                file,
                seen,
                acked: records.len() as u64,
                duplicates: 0,
            }),
            remote,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends the record and returns once it is durable locally. Remote
    /// indexing happens later and never blocks or fails the ack.
    pub fn index(&self, record: &SinkRecord) -> Result<Ack, SinkError> {
        let mut line = serde_json::to_string(record).map_err(|source| SinkError::Serialize {
            id: record.record_id(),
            source,
        })?;
        let key = record.dedup_key();
        let mut st = self.state.lock();
        if let Some(k) = &key {
            if st.seen.contains(k) {
                st.duplicates += 1;
                return Ok(Ack { new: false });
            }
        }
        line.push('\n');
        let io = |source| SinkError::Io {
            path: self.path.clone(),
            source,
        };
        st.file.write_all(line.as_bytes()).map_err(io)?;
        if self.sync {
            st.file.sync_data().map_err(io)?;
        }
        if let Some(k) = key {
            st.seen.insert(k);
        }
        st.acked += 1;
        drop(st);
        if let Some(remote) = &self.remote {
            line.pop();
            remote.enqueue(BulkItem {
                index: self.indices.index_for(record),
                id: record.record_id(),
                source: line,
            });
        }
        Ok(Ack { new: true })
    }

    pub fn contains(&self, record: &SinkRecord) -> bool {
        record
            .dedup_key()
            .is_some_and(|k| self.state.lock().seen.contains(&k))
    }

    pub fn stats(&self) -> SinkStats {
        let st = self.state.lock();
        SinkStats {
            acked: st.acked,
            duplicates: st.duplicates,
            remote: self.remote.as_ref().map(BulkClient::stats),
        }
    }

    pub fn records(&self) -> Result<Vec<SinkRecord>, SinkError> {
        read_archive(&self.path)
    }

    /// Flushes the remote queue once and stops the flusher.
    pub fn close(&self) {
        if let Some(r) = &self.remote {
            r.close();
        }
    }
}

fn scan_archive(path: &Path, file: &mut File) -> Result<(Vec<SinkRecord>, u64), SinkError> {
    file.seek(SeekFrom::Start(0))
        .map_err(|source| SinkError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let mut reader = BufReader::new(&*file);
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0;
    let mut pending_err: Option<SinkError> = None;
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|source| SinkError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        // A bad line followed by more data is corruption, not a torn write.
        if let Some(e) = pending_err.take() {
            return Err(e);
        }
        let complete = buf.last() == Some(&b'\n');
        let body = if complete {
            &buf[..buf.len() - 1]
        } else {
            &buf[..]
        };
        if body.iter().all(u8::is_ascii_whitespace) && complete {
            good_len += n as u64;
            continue;
        }
        match serde_json::from_slice::<SinkRecord>(body) {
            Ok(r) if complete => {
                records.push(r);
                good_len += n as u64;
            }
            Ok(_) => break,
            Err(e) => {
                pending_err = Some(SinkError::Corrupt {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                });
                if !complete {
                    break;
                }
            }
        }
    }
    Ok((records, good_len))
}

/// Reads every acknowledged record in ack order. A torn final line is
/// ignored; a malformed line anywhere else is an error.
pub fn read_archive(path: &Path) -> Result<Vec<SinkRecord>, SinkError> {
    let mut file = File::open(path).map_err(|source| SinkError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    scan_archive(path, &mut file).map(|(r, _)| r)
}

/// Writes one action line and one source line in the bulk convention.
fn push_bulk_item(out: &mut Vec<u8>, index: &str, id: &str, source: &str) {
    let action = format!(
        r#"{{"index":{{"_index":{},"_id":{}}}}}"#,
        serde_json::Value::from(index),
        serde_json::Value::from(id)
    );
    out.extend_from_slice(action.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(source.as_bytes());
    out.push(b'\n');
}

/// Bulk request body for `docs` into one index.
pub fn format_bulk_body<T: Serialize>(
    docs: &[(String, T)],
    index: &str,
) -> Result<Vec<u8>, SinkError> {
    if docs.is_empty() {
        return Err(SinkError::EmptyBulk);
    }
    let mut out = Vec::new();
    for (id, doc) in docs {
        let source = serde_json::to_string(doc).map_err(|source| SinkError::Serialize {
            id: id.clone(),
            source,
        })?;
        push_bulk_item(&mut out, index, id, &source);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct BulkItem {
    index: String,
    id: String,
    source: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BulkStats {
    pub requests: u64,
    pub failed_requests: u64,
    pub sent: u64,
    /// Documents waiting, including ones from failed batches.
    pub queued: u64,
    /// Documents in the request currently being sent.
    pub in_flight: u64,
    pub dropped: u64,
}

struct BulkShared {
    queue: Mutex<VecDeque<BulkItem>>,
    wake: Condvar,
    closing: AtomicBool,
    requests: AtomicU64,
    failed: AtomicU64,
    sent: AtomicU64,
    in_flight: AtomicU64,
    dropped: AtomicU64,
}

/// Background batcher for the bulk endpoint. Sends when a batch fills or
/// the flush interval passes; failed batches go back to the queue front.
pub struct BulkClient {
    shared: Arc<BulkShared>,
    max_queue: usize,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl BulkClient {
    pub fn start(cfg: &RemoteSinkConfig) -> Result<BulkClient, SinkError> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| SinkError::Io {
                path: PathBuf::from(var),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "sink API key env var is not set",
                ),
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| SinkError::Io {
                path: PathBuf::from(&cfg.url),
                source: std::io::Error::other(e.without_url()),
            })?;
        let shared = Arc::new(BulkShared {
            queue: Mutex::new(VecDeque::new()),
            wake: Condvar::new(),
            closing: AtomicBool::new(false),
            requests: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            sent: AtomicU64::new(0),
            in_flight: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        });
        let worker = BulkWorker {
            shared: shared.clone(),
            http,
            endpoint: format!("{}/_bulk", cfg.url.trim_end_matches('/')),
            api_key,
            batch_size: cfg.batch_size.max(1),
            max_queue: cfg.max_queue.max(1),
            interval: cfg.flush_interval,
        };
        let thread = std::thread::Builder::new()
            .name("sink-bulk".into())
            .spawn(move || worker.run())
            .map_err(|source| SinkError::Io {
                path: PathBuf::from(&cfg.url),
                source,
            })?;
        Ok(BulkClient {
            shared,
            max_queue: cfg.max_queue.max(1),
            thread: Mutex::new(Some(thread)),
        })
    }

    fn enqueue(&self, item: BulkItem) {
        let mut q = self.shared.queue.lock();
        q.push_back(item);
        while q.len() > self.max_queue {
            q.pop_front();
            self.shared.dropped.fetch_add(1, Ordering::Relaxed);
        }
        drop(q);
        self.shared.wake.notify_one();
    }

    pub fn stats(&self) -> BulkStats {
        BulkStats {
            requests: self.shared.requests.load(Ordering::Relaxed),
            failed_requests: self.shared.failed.load(Ordering::Relaxed),
            sent: self.shared.sent.load(Ordering::Relaxed),
            queued: self.shared.queue.lock().len() as u64,
            in_flight: self.shared.in_flight.load(Ordering::SeqCst),
            dropped: self.shared.dropped.load(Ordering::Relaxed),
        }
    }

    pub fn close(&self) {
        self.shared.closing.store(true, Ordering::SeqCst);
        self.shared.wake.notify_all();
        if let Some(t) = self.thread.lock().take() {
            let _ = t.join();
        }
    }
}

impl Drop for BulkClient {
    fn drop(&mut self) {
        self.close();
    }
}

struct BulkWorker {
    shared: Arc<BulkShared>,
    http: reqwest::blocking::Client,
    endpoint: String,
    api_key: Option<String>,
    batch_size: usize,
    max_queue: usize,
    interval: Duration,
}

impl BulkWorker {
    fn run(self) {
        let mut last_flush = Instant::now();
        loop {
            let closing = self.shared.closing.load(Ordering::SeqCst);
            let batch: Vec<BulkItem> = {
                let mut q = self.shared.queue.lock();
                let due = last_flush.elapsed() >= self.interval;
                if q.len() < self.batch_size && !due && !closing {
                    let left = self.interval.saturating_sub(last_flush.elapsed());
                    self.shared.wake.wait_for(&mut q, left);
                    continue;
                }
                let n = q.len().min(self.batch_size);
                self.shared.in_flight.store(n as u64, Ordering::SeqCst);
                q.drain(..n).collect()
            };
            last_flush = Instant::now();
            if batch.is_empty() {
                if closing {
                    return;
                }
                continue;
            }
            if !self.send(&batch) {
                let mut q = self.shared.queue.lock();
                self.shared.in_flight.store(0, Ordering::SeqCst);
                for item in batch.into_iter().rev() {
                    q.push_front(item);
                }
                while q.len() > self.max_queue {
                    q.pop_front();
                    self.shared.dropped.fetch_add(1, Ordering::Relaxed);
                }
                if closing {
                    return;
                }
            } else if closing && self.shared.queue.lock().is_empty() {
                return;
            }
        }
    }

    fn send(&self, batch: &[BulkItem]) -> bool {
        let mut body = Vec::new();
        for item in batch {
            push_bulk_item(&mut body, &item.index, &item.id, &item.source);
        }
        self.shared.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self
            .http
            .post(&self.endpoint)
            .header("Content-Type", "application/x-ndjson")
            .body(body);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("ApiKey {key}"));
        }
        let ok = match req.send() {
            Ok(resp) if resp.status().is_success() => match resp.json::<serde_json::Value>() {
                Ok(v) => !v.get("errors").and_then(|e| e.as_bool()).unwrap_or(false),
                Err(e) => {
                    log::warn!("bulk response unreadable: {}", e.without_url());
                    false
                }
            },
            Ok(resp) => {
                log::warn!("bulk request rejected with status {}", resp.status());
                false
            }
            Err(e) => {
                log::warn!("bulk request failed: {}", e.without_url());
                false
            }
        };
        if ok {
            self.shared
                .sent
                .fetch_add(batch.len() as u64, Ordering::Relaxed);
            self.shared.in_flight.store(0, Ordering::SeqCst);
        } else {
            self.shared.failed.fetch_add(1, Ordering::Relaxed);
        }
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IndicatorType, Spider};
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2023, 3, 1, 12, 0, 0).unwrap()
    }

    fn sighting(doc: &str, ip: &str) -> SinkRecord {
        SinkRecord::Indicator(IndicatorSighting {
            document_id: doc.into(),
            source: SourceKind::Twitter,
            document_relevant: true,
            seen_at: t0(),
            indicator: Indicator::new(ip, IndicatorType::Ipv4, t0()).unwrap(),
        })
    }

    #[test]
    fn indicator_round_trips_through_archive() {
        let dir = tempfile::tempdir().unwrap();
        let sink = Sink::open(&SinkConfig::at(dir.path().join("a.ndjson"))).unwrap();
        let rec = sighting("d1", "8.8.8.8");
        assert!(sink.index(&rec).unwrap().new);
        let text = std::fs::read_to_string(sink.path()).unwrap();
        assert_eq!(text.lines().count(), 1);
        let back: SinkRecord = serde_json::from_str(text.trim_end()).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn duplicates_ack_without_writing_and_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SinkConfig::at(dir.path().join("a.ndjson"));
        let doc = Document::new(
            SourceKind::ClearWeb {
                spider: Spider::Ache,
            },
            "http://a.test/",
            "x",
            t0(),
        );
        {
            let sink = Sink::open(&cfg).unwrap();
            assert!(sink.index(&SinkRecord::Document(doc.clone())).unwrap().new);
            assert!(!sink.index(&SinkRecord::Stub(doc.stub())).unwrap().new);
            assert_eq!(sink.stats().duplicates, 1);
        }
        let sink = Sink::open(&cfg).unwrap();
        assert!(!sink.index(&SinkRecord::Document(doc)).unwrap().new);
        assert_eq!(sink.records().unwrap().len(), 1);
    }

    #[test]
    fn torn_tail_is_dropped_and_mid_file_garbage_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ndjson");
        let cfg = SinkConfig::at(&path);
        {
            let sink = Sink::open(&cfg).unwrap();
            sink.index(&sighting("d1", "8.8.8.8")).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"type":"indic"#).unwrap();
        drop(f);
        assert_eq!(read_archive(&path).unwrap().len(), 1);
        let sink = Sink::open(&cfg).unwrap();
        sink.index(&sighting("d2", "8.8.8.8")).unwrap();
        assert_eq!(sink.records().unwrap().len(), 2);
        drop(sink);

        let bad = dir.path().join("b.ndjson");
        std::fs::write(&bad, "garbage\n{}\n").unwrap();
        assert!(matches!(
            read_archive(&bad),
            Err(SinkError::Corrupt { line: 1, .. })
        ));
    }

    #[test]
    fn bulk_body_shape() {
        let docs = vec![
            ("a".to_string(), serde_json::json!({"x": 1})),
            ("b".to_string(), serde_json::json!({"x": 2})),
        ];
        let body = String::from_utf8(format_bulk_body(&docs, "idx").unwrap()).unwrap();
        assert_eq!(
            body,
            "{\"index\":{\"_index\":\"idx\",\"_id\":\"a\"}}\n{\"x\":1}\n{\"index\":{\"_index\":\"idx\",\"_id\":\"b\"}}\n{\"x\":2}\n"
        );
        assert!(matches!(
            format_bulk_body::<serde_json::Value>(&[], "idx"),
            Err(SinkError::EmptyBulk)
        ));
    }

    #[test]
    fn bulk_body_keeps_non_ascii() {
        let docs = vec![("ключ-é".to_string(), serde_json::json!({"t": "日本"}))];
        let body = String::from_utf8(format_bulk_body(&docs, "idx").unwrap()).unwrap();
        assert!(body.contains(r#""_id":"ключ-é""#));
        assert!(body.contains("日本"));
    }

    #[test]
    fn index_names_are_daily() {
        let n = IndexNames::default();
        assert_eq!(
            n.index_for(&sighting("d", "8.8.8.8")),
            "tstem-iocs-2023.03.01"
        );
    }

    #[test]
    fn remote_down_still_acks_and_queue_is_bounded() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SinkConfig::at(dir.path().join("a.ndjson"));
        cfg.sync = false;
        cfg.remote = Some(RemoteSinkConfig {
            url: "http://127.0.0.1:9".into(),
            batch_size: 2,
            flush_interval: Duration::from_millis(20),
            max_queue: 5,
            timeout: Duration::from_millis(200),
            api_key_env: None,
        });
        let sink = Sink::open(&cfg).unwrap();
        for i in 0..10 {
            assert!(
                sink.index(&sighting(&format!("d{i}"), "8.8.8.8"))
                    .unwrap()
                    .new
            );
        }
        std::thread::sleep(Duration::from_millis(100));
        let stats = sink.stats().remote.unwrap();
        assert!(stats.queued <= 5);
        assert!(stats.failed_requests >= 1);
        assert_eq!(stats.dropped + stats.queued + stats.in_flight, 10);
        assert_eq!(stats.sent, 0);
        sink.close();
        assert_eq!(sink.records().unwrap().len(), 10);
    }

    proptest! {
        #[test]
        fn bulk_lines_parse(ids in proptest::collection::vec("\\PC{0,12}", 1..8)) {
            let docs: Vec<(String, serde_json::Value)> = ids.iter().map(|i| (i.clone(), serde_json::json!({"v": i}))).collect();
            let body = String::from_utf8(format_bulk_body(&docs, "i").unwrap()).unwrap();
            prop_assert!(body.ends_with('\n'));
            let lines: Vec<&str> = body.split('\n').collect();
            prop_assert_eq!(lines.len(), 2 * docs.len() + 1);
            for (k, l) in lines[..lines.len() - 1].iter().enumerate() {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                if k % 2 == 0 {
                    prop_assert_eq!(v["index"]["_id"].as_str().unwrap(), ids[k / 2].as_str());
                }
            }
        }

        #[test]
        fn replay_matches_ack_order(ops in proptest::collection::vec(0u8..6, 1..30)) {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = SinkConfig::at(dir.path().join("a.ndjson"));
            cfg.sync = false;
            let sink = Sink::open(&cfg).unwrap();
            let mut acked = Vec::new();
            for o in ops {
                let rec = sighting(&format!("d{o}"), "1.1.1.1");
                if sink.index(&rec).unwrap().new {
                    acked.push(rec);
                }
            }
            prop_assert_eq!(sink.records().unwrap(), acked);
        }
    }
}
