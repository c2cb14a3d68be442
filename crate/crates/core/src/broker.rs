//! Embedded publish-subscribe broker.
//!
//! Topics are single-partition append-only logs with dense offsets. Consumer
//! groups track a committed high-water mark plus the set of offsets that are
//! delivered but not yet acknowledged. Batches are published atomically, and
//! a message that is nacked more than `max_retries` times is moved to the
//! `<topic>.dlq` dead-letter topic.
//!
//! When a data directory is configured each topic is persisted in its own
//! subdirectory (`log.bin` plus `groups.json`) and reloaded on open.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hard cap on a single message payload.
pub const MAX_MESSAGE_BYTES: usize = 1_048_576;
pub const DEFAULT_MAX_RETRIES: u32 = 5;
pub const DEFAULT_RETENTION_FLOOR: usize = 10_000;
pub const DLQ_SUFFIX: &str = ".dlq";

pub const HEADER_RECEIPT_ID: &str = "receipt-id";
pub const HEADER_INGRESS_TS: &str = "ingress-ts";
pub const HEADER_DLQ_REASON: &str = "dlq-reason";
pub const HEADER_DLQ_SOURCE_OFFSET: &str = "dlq-source-offset";

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("topic {0:?} already exists")]
    AlreadyExists(String),
    #[error("topic name must be non-empty")]
    InvalidName,
    #[error("message {index} of batch is {size} bytes, limit is {MAX_MESSAGE_BYTES}")]
    MessageTooLarge { index: usize, size: usize },
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("unknown subscription {group:?} on {topic:?}")]
    UnknownSubscription { group: String, topic: String },
    #[error("offset {0} was never delivered to this subscription")]
    NotDelivered(u64),
    #[error("offset {0} is not in flight for this subscription")]
    NotInFlight(u64),
    #[error("corrupt topic log {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = BrokerError> = std::result::Result<T, E>;

/// Envelope flowing through topics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub key: Option<String>,
    pub headers: BTreeMap<String, String>,
    pub payload: Bytes,
    /// Assigned on append; ignored on publish.
    pub offset: u64,
}

impl Message {
    pub fn new(payload: impl Into<Bytes>) -> Self {
        Self {
            topic: String::new(),
            key: None,
            headers: BTreeMap::new(),
            payload: payload.into(),
            offset: 0,
        }
    }

    pub fn with_key(mut self, key: impl Into<String>) -> Self {
        self.key = Some(key.into());
        self
    }

    pub fn with_header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.insert(name.into(), value.into());
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).map(String::as_str)
    }

    pub fn receipt_id(&self) -> Option<&str> {
        self.header(HEADER_RECEIPT_ID)
    }
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub max_retries: u32,
    /// Minimum number of newest messages kept per topic even when every
    /// group has committed past them.
    pub retention_floor: usize,
    pub data_dir: Option<PathBuf>,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            retention_floor: DEFAULT_RETENTION_FLOOR,
            data_dir: None,
        }
    }
}

/// Result of a nack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NackOutcome {
    /// The message will be returned by a later poll.
    Requeued { retries: u32 },
    /// Retries exhausted; the message now lives on the dead-letter topic.
    DeadLettered { dlq_topic: String, retries: u32 },
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
struct GroupState {
    committed: u64,
    #[serde(skip)]
    in_flight: BTreeSet<u64>,
    /// Acknowledged or dead-lettered offsets above `committed`.
    done: BTreeSet<u64>,
    #[serde(skip)]
    retries: HashMap<u64, u32>,
    delivered_high: Option<u64>,
}

impl GroupState {
    fn advance_watermark(&mut self) {
        while self.done.remove(&self.committed) {
            self.retries.remove(&self.committed);
            self.committed += 1;
        }
    }

    fn is_settled(&self, offset: u64) -> bool {
        offset < self.committed || self.done.contains(&offset)
    }
}

struct TopicState {
    /// Offset of `messages[0]`.
    base: u64,
    messages: VecDeque<Message>,
    groups: BTreeMap<String, GroupState>,
    store: Option<TopicFiles>,
}

impl TopicState {
    fn end(&self) -> u64 {
        self.base + self.messages.len() as u64
    }

    fn get(&self, offset: u64) -> Option<&Message> {
        offset
            .checked_sub(self.base)
            .and_then(|i| self.messages.get(i as usize))
    }

    fn group_mut(&mut self, group: &str, topic: &str) -> Result<&mut GroupState> {
        self.groups
            .get_mut(group)
            .ok_or_else(|| BrokerError::UnknownSubscription {
                group: group.to_owned(),
                topic: topic.to_owned(),
            })
    }

    fn compact(&mut self, floor: usize) {
        let Some(min_committed) = self.groups.values().map(|g| g.committed).min() else {
            return;
        };
        while self.messages.len() > floor && self.base < min_committed {
            self.messages.pop_front();
            self.base += 1;
        }
    }
}

struct Topic {
    name: String,
    state: Mutex<TopicState>,
}

/// Handle to an existing topic.
#[derive(Clone)]
pub struct TopicHandle {
    topic: Arc<Topic>,
}

impl TopicHandle {
    pub fn name(&self) -> &str {
        &self.topic.name
    }
}

impl std::fmt::Debug for TopicHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("TopicHandle").field(&self.topic.name).finish()
    }
}

/// A consumer group's view of one topic. Cloning shares the group, so two
/// consumers holding clones never receive the same in-flight offset.
#[derive(Clone)]
pub struct SubscriptionHandle {
    topic: Arc<Topic>,
    group: String,
}

impl SubscriptionHandle {
    pub fn topic(&self) -> &str {
        &self.topic.name
    }

    pub fn group(&self) -> &str {
        &self.group
    }
}

impl std::fmt::Debug for SubscriptionHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SubscriptionHandle")
            .field("topic", &self.topic.name)
            .field("group", &self.group)
            .finish()
    }
}

/// Point-in-time counters for one subscription.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriptionStatus {
    pub committed: u64,
    pub end: u64,
    pub in_flight: usize,
    /// Offsets in `[committed, end)` that are neither acknowledged nor
    /// dead-lettered, including in-flight ones.
    pub outstanding: u64,
}

struct BrokerInner {
    config: BrokerConfig,
    topics: RwLock<HashMap<String, Arc<Topic>>>,
    activity: Mutex<u64>,
    activity_cv: Condvar,
}

#[derive(Clone)]
pub struct Broker {
    inner: Arc<BrokerInner>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("config", &self.inner.config)
            .finish_non_exhaustive()
    }
}

impl Default for Broker {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Broker {
    pub fn in_memory() -> Self {
        Self::build(BrokerConfig::default())
    }

    /// Opens a broker, reloading persisted topics when `data_dir` is set.
    pub fn open(config: BrokerConfig) -> Result<Self> {
        let broker = Self::build(config);
        if let Some(dir) = broker.inner.config.data_dir.clone() {
            fs::create_dir_all(&dir)?;
            let mut topics = broker.inner.topics.write();
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                if !entry.file_type()?.is_dir() {
                    continue;
                }
                let Some(name) = entry.file_name().to_str().and_then(decode_dir_name) else {
                    continue;
                };
                let state = TopicFiles::load(&entry.path(), &name)?;
                topics.insert(
                    name.clone(),
                    Arc::new(Topic {
                        name,
                        state: Mutex::new(state),
                    }),
                );
            }
        }
        Ok(broker)
    }

    fn build(config: BrokerConfig) -> Self {
        Self {
            inner: Arc::new(BrokerInner {
                config,
                topics: RwLock::new(HashMap::new()),
                activity: Mutex::new(0),
                activity_cv: Condvar::new(),
            }),
        }
    }

    pub fn config(&self) -> &BrokerConfig {
        &self.inner.config
    }

    pub fn create_topic(&self, name: &str) -> Result<TopicHandle> {
        if name.is_empty() {
            return Err(BrokerError::InvalidName);
        }
        let mut topics = self.inner.topics.write();
        if topics.contains_key(name) {
            return Err(BrokerError::AlreadyExists(name.to_owned()));
        }
        let store = match &self.inner.config.data_dir {
            Some(dir) => Some(TopicFiles::create(&dir.join(encode_dir_name(name)))?),
            None => None,
        };
        let topic = Arc::new(Topic {
            name: name.to_owned(),
            state: Mutex::new(TopicState {
                base: 0,
                messages: VecDeque::new(),
                groups: BTreeMap::new(),
                store,
            }),
        });
        topics.insert(name.to_owned(), topic.clone());
        Ok(TopicHandle { topic })
    }

    /// Returns the existing topic or creates it.
    pub fn ensure_topic(&self, name: &str) -> Result<TopicHandle> {
        match self.create_topic(name) {
            Err(BrokerError::AlreadyExists(_)) => self.topic(name),
            other => other,
        }
    }

    pub fn topic(&self, name: &str) -> Result<TopicHandle> {
        self.inner
            .topics
            .read()
            .get(name)
            .cloned()
            .map(|topic| TopicHandle { topic })
            .ok_or_else(|| BrokerError::UnknownTopic(name.to_owned()))
    }

    pub fn topic_names(&self) -> Vec<String> {
        let mut names: Vec<_> = self.inner.topics.read().keys().cloned().collect();
        names.sort();
        names
    }

    /// Appends every message of `batch` or none of them.
    pub fn publish_batch(&self, topic: &TopicHandle, batch: Vec<Message>) -> Result<Vec<u64>> {
        if let Some((index, m)) = batch
            .iter()
            .enumerate()
            .find(|(_, m)| m.payload.len() > MAX_MESSAGE_BYTES)
        {
            return Err(BrokerError::MessageTooLarge {
                index,
                size: m.payload.len(),
            });
        }
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let offsets = {
            let mut state = topic.topic.state.lock();
            let start = state.end();
            let batch: Vec<Message> = batch
                .into_iter()
                .enumerate()
                .map(|(i, mut m)| {
                    m.topic = topic.topic.name.clone();
                    m.offset = start + i as u64;
                    m
                })
                .collect();
            if let Some(files) = state.store.as_mut() {
                files.append(&batch)?;
            }
            let offsets = batch.iter().map(|m| m.offset).collect();
            state.messages.extend(batch);
            offsets
        };
        self.signal();
        Ok(offsets)
    }

    pub fn publish(&self, topic: &TopicHandle, message: Message) -> Result<u64> {
        Ok(self.publish_batch(topic, vec![message])?[0])
    }

    /// Joins (or creates) consumer group `group` on `topic`. A new group
    /// starts at the oldest retained offset.
    pub fn subscribe(&self, group: &str, topic: &str) -> Result<SubscriptionHandle> {
        let handle = self.topic(topic)?;
        {
            let mut state = handle.topic.state.lock();
            let base = state.base;
            state
                .groups
                .entry(group.to_owned())
                .or_insert_with(|| GroupState {
                    committed: base,
                    ..Default::default()
                });
            let snapshot = state.groups.clone();
            if let Some(files) = state.store.as_mut() {
                files.save_groups(&snapshot)?;
            }
        }
        Ok(SubscriptionHandle {
            topic: handle.topic,
            group: group.to_owned(),
        })
    }

    pub fn unsubscribe(&self, sub: &SubscriptionHandle) -> Result<()> {
        let mut state = sub.topic.state.lock();
        state
            .groups
            .remove(&sub.group)
            .map(|_| ())
            .ok_or_else(|| BrokerError::UnknownSubscription {
                group: sub.group.clone(),
                topic: sub.topic.name.clone(),
            })
    }

    /// Delivers up to `max_n` messages, lowest unsettled offsets first.
    pub fn poll(&self, sub: &SubscriptionHandle, max_n: usize) -> Result<Vec<Message>> {
        let mut state = sub.topic.state.lock();
        let end = state.end();
        let name = sub.topic.name.clone();
        let group = state.group_mut(&sub.group, &name)?;
        let mut picked = Vec::new();
        let mut offset = group.committed;
        while offset < end && picked.len() < max_n {
            if !group.in_flight.contains(&offset) && !group.done.contains(&offset) {
                picked.push(offset);
            }
            offset += 1;
        }
        for &o in &picked {
            group.in_flight.insert(o);
        }
        if let Some(&last) = picked.last() {
            group.delivered_high = Some(group.delivered_high.map_or(last, |h| h.max(last)));
        }
        Ok(picked
            .into_iter()
            .filter_map(|o| state.get(o).cloned())
            .collect())
    }

    /// Cumulative commit: every offset `<= through` is settled for the group.
    pub fn commit(&self, sub: &SubscriptionHandle, through: u64) -> Result<()> {
        let mut state = sub.topic.state.lock();
        let name = sub.topic.name.clone();
        let group = state.group_mut(&sub.group, &name)?;
        if through < group.committed {
            return Ok(());
        }
        if group.delivered_high.is_none_or(|h| through > h) {
            return Err(BrokerError::NotDelivered(through));
        }
        for o in group.committed..=through {
            group.in_flight.remove(&o);
            group.done.remove(&o);
            group.retries.remove(&o);
        }
        group.committed = through + 1;
        group.advance_watermark();
        self.after_settle(&mut state)
    }

    /// Settles a single in-flight offset without touching lower ones.
    pub fn ack(&self, sub: &SubscriptionHandle, offset: u64) -> Result<()> {
        let mut state = sub.topic.state.lock();
        let name = sub.topic.name.clone();
        let group = state.group_mut(&sub.group, &name)?;
        if group.is_settled(offset) {
            return Ok(());
        }
        if !group.in_flight.remove(&offset) {
            return Err(BrokerError::NotInFlight(offset));
        }
        group.done.insert(offset);
        group.advance_watermark();
        self.after_settle(&mut state)
    }

    /// Returns an in-flight offset for redelivery, or dead-letters it once
    /// its retry count exceeds `max_retries`.
    pub fn nack(&self, sub: &SubscriptionHandle, offset: u64) -> Result<NackOutcome> {
        self.nack_with_reason(sub, offset, "retries exhausted")
    }

    pub fn nack_with_reason(
        &self,
        sub: &SubscriptionHandle,
        offset: u64,
        reason: &str,
    ) -> Result<NackOutcome> {
        let max_retries = self.inner.config.max_retries;
        let (outcome, dead) = {
            let mut state = sub.topic.state.lock();
            let name = sub.topic.name.clone();
            let group = state.group_mut(&sub.group, &name)?;
            if !group.in_flight.remove(&offset) {
                return Err(BrokerError::NotInFlight(offset));
            }
            let retries = {
                let r = group.retries.entry(offset).or_insert(0);
                *r += 1;
                *r
            };
            if retries > max_retries {
                group.done.insert(offset);
                group.advance_watermark();
                let dead = state.get(offset).cloned();
                self.after_settle(&mut state)?;
                (
                    NackOutcome::DeadLettered {
                        dlq_topic: format!("{name}{DLQ_SUFFIX}"),
                        retries,
                    },
                    dead,
                )
            } else {
                (NackOutcome::Requeued { retries }, None)
            }
        };
        if let (NackOutcome::DeadLettered { dlq_topic, .. }, Some(m)) = (&outcome, dead) {
            let dlq = self.ensure_topic(dlq_topic)?;
            let m = m
                .with_header(HEADER_DLQ_REASON, reason)
                .with_header(HEADER_DLQ_SOURCE_OFFSET, offset.to_string());
            self.publish(&dlq, m)?;
        }
        self.signal();
        Ok(outcome)
    }

    pub fn retry_count(&self, sub: &SubscriptionHandle, offset: u64) -> Result<u32> {
        let mut state = sub.topic.state.lock();
        let name = sub.topic.name.clone();
        let group = state.group_mut(&sub.group, &name)?;
        Ok(group.retries.get(&offset).copied().unwrap_or(0))
    }

    pub fn status(&self, sub: &SubscriptionHandle) -> Result<SubscriptionStatus> {
        let mut state = sub.topic.state.lock();
        let end = state.end();
        let name = sub.topic.name.clone();
        let group = state.group_mut(&sub.group, &name)?;
        Ok(SubscriptionStatus {
            committed: group.committed,
            end,
            in_flight: group.in_flight.len(),
            outstanding: end - group.committed - group.done.len() as u64,
        })
    }

    pub fn end_offset(&self, topic: &TopicHandle) -> u64 {
        topic.topic.state.lock().end()
    }

    /// Reads retained messages starting at `from`, without affecting groups.
    pub fn read(&self, topic: &TopicHandle, from: u64, max_n: usize) -> Vec<Message> {
        let state = topic.topic.state.lock();
        let start = from.max(state.base);
        (start..state.end())
            .take(max_n)
            .filter_map(|o| state.get(o).cloned())
            .collect()
    }

    pub fn read_all(&self, topic: &TopicHandle) -> Vec<Message> {
        self.read(topic, 0, usize::MAX)
    }

    /// Blocks until something is published or nacked after generation
    /// `seen`, or until `timeout`. Returns the current generation.
    pub fn wait_for_activity(&self, seen: u64, timeout: Duration) -> u64 {
        let mut generation = self.inner.activity.lock();
        if *generation == seen {
            self.inner
                .activity_cv
                .wait_for(&mut generation, timeout);
        }
        *generation
    }

    pub fn activity_generation(&self) -> u64 {
        *self.inner.activity.lock()
    }

    fn signal(&self) {
        *self.inner.activity.lock() += 1;
        self.inner.activity_cv.notify_all();
    }

    fn after_settle(&self, state: &mut TopicState) -> Result<()> {
        state.compact(self.inner.config.retention_floor);
        let snapshot = state.groups.clone();
        if let Some(files) = state.store.as_mut() {
            files.save_groups(&snapshot)?;
        }
        Ok(())
    }
}

/// Topic names are percent-encoded into directory names.
fn encode_dir_name(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    for b in name.bytes() {
        if b.is_ascii_alphanumeric() || b == b'.' || b == b'-' || b == b'_' {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn decode_dir_name(dir: &str) -> Option<String> {
    let bytes = dir.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = dir.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

#[derive(Serialize, Deserialize)]
struct RecordMeta {
    offset: u64,
    key: Option<String>,
    headers: BTreeMap<String, String>,
}

/// On-disk layout of one topic.
///
/// `log.bin` is a sequence of records, each `u32 meta_len | meta json |
/// u32 payload_len | payload`, little endian. A torn trailing record left by
/// a crash is discarded on load.
struct TopicFiles {
    dir: PathBuf,
    log: File,
}

impl TopicFiles {
    const LOG: &'static str = "log.bin";
    const GROUPS: &'static str = "groups.json";

    fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(Self::LOG))?;
        Ok(Self {
            dir: dir.to_owned(),
            log,
        })
    }

    fn load(dir: &Path, name: &str) -> Result<TopicState> {
        let log_path = dir.join(Self::LOG);
        let mut messages = VecDeque::new();
        let mut valid_len = 0u64;
        if log_path.exists() {
            let mut reader = BufReader::new(File::open(&log_path)?);
            loop {
                match read_record(&mut reader, name) {
                    Ok(Some((m, len))) => {
                        if m.offset != messages.len() as u64 {
                            return Err(BrokerError::Corrupt {
                                path: log_path,
                                reason: format!(
                                    "offset {} out of sequence at position {}",
                                    m.offset,
                                    messages.len()
                                ),
                            });
                        }
                        messages.push_back(m);
                        valid_len += len;
                    }
                    Ok(None) => break,
                    Err(reason) => {
                        return Err(BrokerError::Corrupt {
                            path: log_path,
                            reason,
                        })
                    }
                }
            }
        }
        let groups_path = dir.join(Self::GROUPS);
        let groups: BTreeMap<String, GroupState> = if groups_path.exists() {
            serde_json::from_slice(&fs::read(&groups_path)?).map_err(|e| BrokerError::Corrupt {
                path: groups_path.clone(),
                reason: e.to_string(),
            })?
        } else {
            BTreeMap::new()
        };
        let mut files = Self::create(dir)?;
        if files.log.metadata()?.len() != valid_len {
            files.log.set_len(valid_len)?;
        }
        files.log = OpenOptions::new().append(true).open(&log_path)?;
        Ok(TopicState {
            base: 0,
            messages,
            groups,
            store: Some(files),
        })
    }

    fn append(&mut self, batch: &[Message]) -> io::Result<()> {
        let mut buf = Vec::new();
        for m in batch {
            let meta = serde_json::to_vec(&RecordMeta {
                offset: m.offset,
                key: m.key.clone(),
                headers: m.headers.clone(),
            })?;
            buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            buf.extend_from_slice(&meta);
            buf.extend_from_slice(&(m.payload.len() as u32).to_le_bytes());
            buf.extend_from_slice(&m.payload);
        }
        let before = self.log.metadata()?.len();
        if let Err(e) = self.log.write_all(&buf).and_then(|_| self.log.flush()) {
            // Leave no partial batch behind.
            let _ = self.log.set_len(before);
            return Err(e);
        }
        Ok(())
    }

    fn save_groups(&mut self, groups: &BTreeMap<String, GroupState>) -> io::Result<()> {
        let tmp = self.dir.join("groups.json.tmp");
        fs::write(&tmp, serde_json::to_vec(groups)?)?;
        fs::rename(tmp, self.dir.join(Self::GROUPS))
    }
}

fn read_record(
    reader: &mut impl Read,
    topic: &str,
) -> std::result::Result<Option<(Message, u64)>, String> {
    let Some(meta_len) = read_u32(reader)? else {
        return Ok(None);
    };
    let mut meta = vec![0u8; meta_len as usize];
    if !read_exact_or_eof(reader, &mut meta)? {
        return Ok(None);
    }
    let meta: RecordMeta = serde_json::from_slice(&meta).map_err(|e| e.to_string())?;
    let Some(payload_len) = read_u32(reader)? else {
        return Ok(None);
    };
    let mut payload = vec![0u8; payload_len as usize];
    if !read_exact_or_eof(reader, &mut payload)? {
        return Ok(None);
    }
    let consumed = 8 + meta_len as u64 + payload_len as u64;
    Ok(Some((
        Message {
            topic: topic.to_owned(),
            key: meta.key,
            headers: meta.headers,
            payload: Bytes::from(payload),
            offset: meta.offset,
        },
        consumed,
    )))
}

fn read_u32(reader: &mut impl Read) -> std::result::Result<Option<u32>, String> {
    let mut b = [0u8; 4];
    Ok(read_exact_or_eof(reader, &mut b)?.then(|| u32::from_le_bytes(b)))
}

/// `Ok(false)` on a clean or torn end of file.
fn read_exact_or_eof(reader: &mut impl Read, buf: &mut [u8]) -> std::result::Result<bool, String> {
    match reader.read_exact(buf) {
        Ok(()) => Ok(true),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Ok(false),
        Err(e) => Err(e.to_string()),
    }
}
