//! Durable in-process topic log with consumer groups and at-least-once
//! delivery.
//!
//! On disk, under the bus directory:
//!
//! ```text
//! topics/<topic>.log            append-only record log
//! offsets/<topic>/<group>.pos   u64 LE: next offset the group will read
//! ```
//!
//! Log layout, integers little-endian:
//!
//! ```text
//! magic    4 bytes "CTQL"
//! version  u16     currently 1
//! record*  len u32 | crc32 u32 | produced_at i64 millis | payload
//! ```
//!
//! `len` counts the timestamp and payload; the CRC covers the same bytes.
//! A torn or corrupt tail is cut off at open.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::{Condvar, Mutex};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TOPIC_WEB_RAW: &str = "web.raw";
pub const TOPIC_TWEET_RAW: &str = "tweet.raw";
pub const TOPIC_DOC_RELEVANT: &str = "doc.relevant";
pub const TOPIC_IOC_EXTRACTED: &str = "ioc.extracted";

const MAGIC: &[u8; 4] = b"CTQL";
const VERSION: u16 = 1;
const HEADER_LEN: u64 = 6;
const RECORD_OVERHEAD: usize = 4 + 4 + 8;

#[derive(Debug, Error)]
pub enum BusError {
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    Oversized { size: usize, max: usize },
    #[error("invalid {what} name `{name}`")]
    BadName { what: &'static str, name: String },
    #[error("group `{group}` is not registered on topic `{topic}`")]
    UnknownGroup { topic: String, group: String },
    #[error("group `{group}` on `{topic}` already has an active poller")]
    GroupBusy { topic: String, group: String },
    #[error("cannot commit offset {offset} on `{topic}`: head is {head:?}")]
    BeyondHead {
        topic: String,
        offset: u64,
        head: Option<u64>,
    },
    #[error("publish to `{0}` timed out under backpressure")]
    Backpressure(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path} is not a topic log: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("record payload is not valid JSON: {0}")]
    Json(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> BusError + '_ {
    move |e| BusError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Durability {
    /// fsync after every append and every commit.
    Sync,
    /// Leave flushing to the OS. Survives process crashes, not power loss.
    Buffered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusConfig {
    pub dir: PathBuf,
    pub max_record_bytes: usize,
    /// Publishing blocks while the slowest registered group lags this many
    /// records behind the head. `None` disables the bound.
    pub max_lag: Option<u64>,
    pub durability: Durability,
}

impl Default for BusConfig {
    fn default() -> Self {
        BusConfig {
            dir: PathBuf::from("data/bus"),
            max_record_bytes: 1 << 20,
            max_lag: Some(10_000),
            durability: Durability::Sync,
        }
    }
}

impl BusConfig {
    pub fn at(dir: impl Into<PathBuf>) -> Self {
        BusConfig {
            dir: dir.into(),
            ..BusConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopicRecord {
    pub topic: String,
    pub offset: u64,
    pub payload: Arc<[u8]>,
    pub produced_at: DateTime<Utc>,
}

impl TopicRecord {
    pub fn json<T: DeserializeOwned>(&self) -> Result<T, BusError> {
        serde_json::from_slice(&self.payload).map_err(|e| BusError::Json(e.to_string()))
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 128
        && !s.starts_with('.')
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

fn check_name(what: &'static str, name: &str) -> Result<(), BusError> {
    if valid_name(name) {
        Ok(())
    } else {
        Err(BusError::BadName {
            what,
            name: name.to_string(),
        })
    }
}

#[derive(Debug)]
struct Group {
    position: u64,
    active: bool,
    path: PathBuf,
}

#[derive(Debug)]
struct TopicState {
    file: File,
    records: Vec<(DateTime<Utc>, Arc<[u8]>)>,
    groups: HashMap<String, Group>,
}

#[derive(Debug)]
struct Topic {
    name: String,
    log_path: PathBuf,
    offsets_dir: PathBuf,
    state: Mutex<TopicState>,
    /// Signalled on append and on commit.
    changed: Condvar,
}

struct Scan {
    records: Vec<(DateTime<Utc>, Arc<[u8]>)>,
    good_len: u64,
    file_len: u64,
}

fn scan_log(path: &Path, file: &mut File) -> Result<Scan, BusError> {
    let io = io_err(path);
    let mut buf = Vec::new();
    file.seek(SeekFrom::Start(0)).map_err(&io)?;
    file.read_to_end(&mut buf).map_err(&io)?;
    let file_len = buf.len() as u64;
    if buf.len() < HEADER_LEN as usize {
        // Torn header: treat as empty.
        return Ok(Scan {
            records: Vec::new(),
            good_len: 0,
            file_len,
        });
    }
    if &buf[..4] != MAGIC {
        return Err(BusError::Corrupt {
            path: path.to_path_buf(),
            message: "bad magic".into(),
        });
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(BusError::Corrupt {
            path: path.to_path_buf(),
            message: format!("unsupported version {version}"),
        });
    }
    let mut pos = HEADER_LEN as usize;
    let mut records = Vec::new();
    while pos + 8 <= buf.len() {
        let len = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().unwrap());
        let body_start = pos + 8;
        if len < 8 || body_start + len > buf.len() {
            break;
        }
        let body = &buf[body_start..body_start + len];
        if crc32fast::hash(body) != crc {
            break;
        }
        let ms = i64::from_le_bytes(body[..8].try_into().unwrap());
        let ts = Utc.timestamp_millis_opt(ms).single().unwrap_or_default();
        records.push((ts, Arc::from(&body[8..])));
        pos = body_start + len;
    }
    Ok(Scan {
        records,
        good_len: pos as u64,
        file_len,
    })
}

impl Topic {
    fn open(dir: &Path, name: &str) -> Result<Topic, BusError> {
        let topics_dir = dir.join("topics");
        std::fs::create_dir_all(&topics_dir).map_err(io_err(&topics_dir))?;
        let log_path = topics_dir.join(format!("{name}.log"));
        let io = io_err(&log_path);
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&log_path)
            .map_err(&io)?;
        let scan = scan_log(&log_path, &mut file)?;
        if scan.good_len == 0 {
            file.set_len(0).map_err(&io)?;
            file.seek(SeekFrom::Start(0)).map_err(&io)?;
            let mut header = MAGIC.to_vec();
            header.extend_from_slice(&VERSION.to_le_bytes());
            file.write_all(&header).map_err(&io)?;
            file.sync_all().map_err(&io)?;
        } else if scan.good_len < scan.file_len {
            log::warn!(
                "{}: dropping {} bytes of torn tail after {} records",
                log_path.display(),
                scan.file_len - scan.good_len,
                scan.records.len()
            );
            file.set_len(scan.good_len).map_err(&io)?;
            file.sync_all().map_err(&io)?;
        }
        file.seek(SeekFrom::End(0)).map_err(&io)?;

        let offsets_dir = dir.join("offsets").join(name);
        std::fs::create_dir_all(&offsets_dir).map_err(io_err(&offsets_dir))?;
        let head_next = scan.records.len() as u64;
        let mut groups = HashMap::new();
        for entry in std::fs::read_dir(&offsets_dir).map_err(io_err(&offsets_dir))? {
            let path = entry.map_err(io_err(&offsets_dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("pos") {
                continue;
            }
            let Some(group) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .map(str::to_string)
            else {
                continue;
            };
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            let position = bytes
                .get(..8)
                .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
                .unwrap_or(0);
            if position > head_next {
                log::warn!(
                    "{}: position {position} past head, clamping",
                    path.display()
                );
            }
            groups.insert(
                group,
                Group {
                    position: position.min(head_next),
                    active: false,
                    path,
                },
            );
        }
        Ok(Topic {
            name: name.to_string(),
            log_path: log_path.clone(),
            offsets_dir,
            state: Mutex::new(TopicState {
                file,
                records: scan.records,
                groups,
            }),
            changed: Condvar::new(),
        })
    }
}

fn write_position(path: &Path, position: u64, durability: Durability) -> Result<(), BusError> {
    let io = io_err(path);
    let tmp = path.with_extension("pos.tmp");
    {
        let mut f = File::create(&tmp).map_err(&io)?;
        f.write_all(&position.to_le_bytes()).map_err(&io)?;
        if durability == Durability::Sync {
            f.sync_all().map_err(&io)?;
        }
    }
    std::fs::rename(&tmp, path).map_err(&io)
}

/// Adapter boundary for swapping in an external broker.
pub trait Broker: Send + Sync {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BusError>;
    fn register_group(&self, topic: &str, group: &str) -> Result<(), BusError>;
    fn poll(&self, topic: &str, group: &str, max: usize) -> Result<Vec<TopicRecord>, BusError>;
    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BusError>;
}

#[derive(Debug)]
pub struct Bus {
    config: BusConfig,
    topics: Mutex<HashMap<String, Arc<Topic>>>,
}

impl Bus {
    /// Opens (or creates) the bus directory and recovers every topic in it.
    pub fn open(config: BusConfig) -> Result<Arc<Bus>, BusError> {
        std::fs::create_dir_all(&config.dir).map_err(io_err(&config.dir))?;
        let bus = Bus {
            config,
            topics: Mutex::new(HashMap::new()),
        };
        let topics_dir = bus.config.dir.join("topics");
        if topics_dir.is_dir() {
            for entry in std::fs::read_dir(&topics_dir).map_err(io_err(&topics_dir))? {
                let path = entry.map_err(io_err(&topics_dir))?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("log") {
                    if let Some(name) = path.file_stem().and_then(|s| s.to_str()) {
                        if valid_name(name) {
                            bus.topic(name)?;
                        }
                    }
                }
            }
        }
        Ok(Arc::new(bus))
    }

    pub fn config(&self) -> &BusConfig {
        &self.config
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>, BusError> {
        check_name("topic", name)?;
        let mut topics = self.topics.lock();
        if let Some(t) = topics.get(name) {
            return Ok(t.clone());
        }
        let t = Arc::new(Topic::open(&self.config.dir, name)?);
        topics.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut v: Vec<String> = self.topics.lock().keys().cloned().collect();
        v.sort();
        v
    }

    /// Appends a record; blocks while the topic is over its lag bound.
    pub fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BusError> {
        self.publish_inner(topic, payload, None)
    }

    /// Like `publish`, but gives up after `wait` under backpressure.
    pub fn publish_timeout(
        &self,
        topic: &str,
        payload: &[u8],
        wait: Duration,
    ) -> Result<u64, BusError> {
        self.publish_inner(topic, payload, Some(Instant::now() + wait))
    }

    pub fn publish_json<T: Serialize>(&self, topic: &str, value: &T) -> Result<u64, BusError> {
        let bytes = serde_json::to_vec(value).map_err(|e| BusError::Json(e.to_string()))?;
        self.publish(topic, &bytes)
    }

    fn publish_inner(
        &self,
        topic: &str,
        payload: &[u8],
        deadline: Option<Instant>,
    ) -> Result<u64, BusError> {
        if payload.len() > self.config.max_record_bytes {
            return Err(BusError::Oversized {
                size: payload.len(),
                max: self.config.max_record_bytes,
            });
        }
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        if let Some(bound) = self.config.max_lag {
            loop {
                let head_next = st.records.len() as u64;
                let slowest = st.groups.values().map(|g| g.position).min();
                match slowest {
                    Some(p) if head_next - p >= bound => {}
                    _ => break,
                }
                match deadline {
                    Some(d) => {
                        if t.changed.wait_until(&mut st, d).timed_out() {
                            return Err(BusError::Backpressure(topic.to_string()));
                        }
                    }
                    None => t.changed.wait(&mut st),
                }
            }
        }
        let now = Utc::now();
        let mut frame = Vec::with_capacity(RECORD_OVERHEAD + payload.len());
        let mut body = Vec::with_capacity(8 + payload.len());
        body.extend_from_slice(&now.timestamp_millis().to_le_bytes());
        body.extend_from_slice(payload);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
        frame.extend_from_slice(&body);
        let io = io_err(&t.log_path);
        let before = st.file.stream_position().map_err(&io)?;
        if let Err(e) = st.file.write_all(&frame) {
            // Leave no partial frame behind for later appends to follow.
            let _ = st.file.set_len(before);
            let _ = st.file.seek(SeekFrom::Start(before));
            return Err(io(e));
        }
        if self.config.durability == Durability::Sync {
            st.file.sync_data().map_err(&io)?;
        }
        let now = Utc
            .timestamp_millis_opt(now.timestamp_millis())
            .single()
            .unwrap_or(now);
        st.records.push((now, Arc::from(payload)));
        let offset = st.records.len() as u64 - 1;
        drop(st);
        t.changed.notify_all();
        Ok(offset)
    }

    /// Offset of the newest record, `None` for an empty topic.
    pub fn head(&self, topic: &str) -> Result<Option<u64>, BusError> {
        let t = self.topic(topic)?;
        let n = t.state.lock().records.len() as u64;
        Ok(n.checked_sub(1))
    }

    /// Registers `group` on `topic`. New groups start at offset 0.
    pub fn register_group(&self, topic: &str, group: &str) -> Result<(), BusError> {
        check_name("group", group)?;
        let t = self.topic(topic)?;
        let mut st = t.state.lock();
        if !st.groups.contains_key(group) {
            let path = t.offsets_dir.join(format!("{group}.pos"));
            write_position(&path, 0, self.config.durability)?;
            st.groups.insert(
                group.to_string(),
                Group {
                    position: 0,
                    active: false,
                    path,
                },
            );
        }
        Ok(())
    }

    /// Next offset the group will read.
    pub fn position(&self, topic: &str, group: &str) -> Result<u64, BusError> {
        let t = self.topic(topic)?;
        let st = t.state.lock();
        st.groups
            .get(group)
            .map(|g| g.position)
            .ok_or_else(|| unknown(topic, group))
    }

    /// Records from the group's position onward, at most `max`. Does not
    /// move the position.
    pub fn poll(&self, topic: &str, group: &str, max: usize) -> Result<Vec<TopicRecord>, BusError> {
        let t = self.topic(topic)?;
        let st = t.state.lock();
        let g = st.groups.get(group).ok_or_else(|| unknown(topic, group))?;
        if g.active {
            return Err(BusError::GroupBusy {
                topic: topic.into(),
                group: group.into(),
            });
        }
        Ok(read_from(&t.name, &st, g.position, max))
    }

    /// Marks everything up to and including `offset` as processed.
    /// Commits below the current position are ignored.
    pub fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BusError> {
        let t = self.topic(topic)?;
        commit_on(&t, group, offset, self.config.durability)
    }

    /// Exclusive poller handle for `group`; registers the group if needed.
    pub fn subscribe(self: &Arc<Self>, topic: &str, group: &str) -> Result<Consumer, BusError> {
        self.register_group(topic, group)?;
        let t = self.topic(topic)?;
        {
            let mut st = t.state.lock();
            let g = st.groups.get_mut(group).expect("registered above");
            if g.active {
                return Err(BusError::GroupBusy {
                    topic: topic.into(),
                    group: group.into(),
                });
            }
            g.active = true;
        }
        Ok(Consumer {
            topic: t,
            group: group.to_string(),
            durability: self.config.durability,
        })
    }

    /// Records published but not yet committed by `group`.
    pub fn lag(&self, topic: &str, group: &str) -> Result<u64, BusError> {
        let t = self.topic(topic)?;
        let st = t.state.lock();
        let g = st.groups.get(group).ok_or_else(|| unknown(topic, group))?;
        Ok(st.records.len() as u64 - g.position)
    }

    /// Every record of a topic, oldest first.
    pub fn read_all(&self, topic: &str) -> Result<Vec<TopicRecord>, BusError> {
        let t = self.topic(topic)?;
        let st = t.state.lock();
        Ok(read_from(&t.name, &st, 0, usize::MAX))
    }
}

fn unknown(topic: &str, group: &str) -> BusError {
    BusError::UnknownGroup {
        topic: topic.into(),
        group: group.into(),
    }
}

fn read_from(topic: &str, st: &TopicState, from: u64, max: usize) -> Vec<TopicRecord> {
    st.records
        .iter()
        .enumerate()
        .skip(from as usize)
        .take(max)
        .map(|(i, (ts, p))| TopicRecord {
            topic: topic.to_string(),
            offset: i as u64,
            payload: p.clone(),
            produced_at: *ts,
        })
        .collect()
}

fn commit_on(t: &Topic, group: &str, offset: u64, durability: Durability) -> Result<(), BusError> {
    let mut st = t.state.lock();
    let head = (st.records.len() as u64).checked_sub(1);
    if head.is_none_or(|h| offset > h) {
        return Err(BusError::BeyondHead {
            topic: t.name.clone(),
            offset,
            head,
        });
    }
    let g = st
        .groups
        .get_mut(group)
        .ok_or_else(|| unknown(&t.name, group))?;
    if offset < g.position {
        return Ok(());
    }
    write_position(&g.path, offset + 1, durability)?;
    g.position = offset + 1;
    drop(st);
    t.changed.notify_all();
    Ok(())
}

impl Broker for Bus {
    fn publish(&self, topic: &str, payload: &[u8]) -> Result<u64, BusError> {
        Bus::publish(self, topic, payload)
    }

    fn register_group(&self, topic: &str, group: &str) -> Result<(), BusError> {
        Bus::register_group(self, topic, group)
    }

    fn poll(&self, topic: &str, group: &str, max: usize) -> Result<Vec<TopicRecord>, BusError> {
        Bus::poll(self, topic, group, max)
    }

    fn commit(&self, topic: &str, group: &str, offset: u64) -> Result<(), BusError> {
        Bus::commit(self, topic, group, offset)
    }
}

/// The single active poller of a group. Dropping it frees the group.
#[derive(Debug)]
pub struct Consumer {
    topic: Arc<Topic>,
    group: String,
    durability: Durability,
}

impl Consumer {
    pub fn topic(&self) -> &str {
        &self.topic.name
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn position(&self) -> u64 {
        self.topic.state.lock().groups[&self.group].position
    }

    pub fn poll(&self, max: usize) -> Vec<TopicRecord> {
        let st = self.topic.state.lock();
        let pos = st.groups[&self.group].position;
        read_from(&self.topic.name, &st, pos, max)
    }

    /// Waits up to `wait` for at least one record past the position.
    pub fn poll_wait(&self, max: usize, wait: Duration) -> Vec<TopicRecord> {
        let deadline = Instant::now() + wait;
        let mut st = self.topic.state.lock();
        loop {
            let pos = st.groups[&self.group].position;
            if (st.records.len() as u64) > pos || max == 0 {
                return read_from(&self.topic.name, &st, pos, max);
            }
            if self.topic.changed.wait_until(&mut st, deadline).timed_out() {
                let pos = st.groups[&self.group].position;
                return read_from(&self.topic.name, &st, pos, max);
            }
        }
    }

    pub fn commit(&self, offset: u64) -> Result<(), BusError> {
        commit_on(&self.topic, &self.group, offset, self.durability)
    }

    pub fn lag(&self) -> u64 {
        let st = self.topic.state.lock();
        st.records.len() as u64 - st.groups[&self.group].position
    }
}

impl Drop for Consumer {
    fn drop(&mut self) {
        if let Some(g) = self.topic.state.lock().groups.get_mut(&self.group) {
            g.active = false;
        }
    }
}
