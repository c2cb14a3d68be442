//! Document store, object store and the claim-check wrapper.
//!
//! Documents are JSON trees capped at [`MAX_DOCUMENT_BYTES`] of minified
//! UTF-8, with a per-key revision counter. Objects are arbitrary byte blobs
//! addressed by key and fingerprinted with SHA-256. Both live in memory and,
//! when a data directory is configured, are written through to disk and
//! reloaded on open.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::ops::Bound;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine;
use bytes::Bytes;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::{SharedClock, Timestamp};

pub const MAX_DOCUMENT_BYTES: usize = 1_048_576;
pub const DEFAULT_CLAIM_THRESHOLD: usize = 900_000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("document {key:?} serializes to {size} bytes, limit is {MAX_DOCUMENT_BYTES}")]
    DocTooLarge { key: String, size: usize },
    #[error("{0:?} not found")]
    NotFound(String),
    #[error("digest mismatch for {key:?}: expected {expected}, found {found}")]
    DigestMismatch {
        key: String,
        expected: String,
        found: String,
    },
    #[error("claim threshold {0} exceeds the message cap")]
    ThresholdTooLarge(usize),
    #[error("invalid continuation token")]
    BadContinuation,
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("corrupt persisted entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub key: String,
    pub revision: u64,
    pub body: Value,
    /// Time of the first write under this key.
    pub created_at: Timestamp,
}

/// Hex-encoded SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Inclusive-exclusive time range; `None` bounds are open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TimeWindow {
    pub from: Option<Timestamp>,
    pub until: Option<Timestamp>,
}

impl TimeWindow {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn between(from: Timestamp, until: Timestamp) -> Self {
        Self {
            from: Some(from),
            until: Some(until),
        }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        self.from.is_none_or(|f| t >= f) && self.until.is_none_or(|u| t < u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryPage {
    pub documents: Vec<Document>,
    pub continuation: Option<String>,
}

/// Reference to a payload parked in the object store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimTicket {
    pub key: String,
    pub digest: String,
    pub size: u64,
}

/// A payload as carried in a message: either the bytes themselves or a
/// ticket pointing at them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimCheck {
    Inline(#[serde(with = "b64")] Bytes),
    Ticket(ClaimTicket),
}

impl ClaimCheck {
    pub fn is_ticket(&self) -> bool {
        matches!(self, Self::Ticket(_))
    }
}

mod b64 {
    use base64::Engine;
    use bytes::Bytes;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &Bytes, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Bytes, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s)
            .map(Bytes::from)
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
struct StoredObject {
    bytes: Bytes,
    digest: String,
}

struct StoreInner {
    clock: SharedClock,
    docs: RwLock<BTreeMap<String, Document>>,
    objects: RwLock<HashMap<String, StoredObject>>,
    dir: Option<PathBuf>,
}

/// Handle to both stores. Cheap to clone.
#[derive(Clone)]
pub struct Store {
    inner: Arc<StoreInner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("dir", &self.inner.dir)
            .finish_non_exhaustive()
    }
}

impl Store {
    pub fn in_memory(clock: SharedClock) -> Self {
        Self::build(clock, None)
    }

    pub fn open(clock: SharedClock, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_owned();
        fs::create_dir_all(dir.join("docs"))?;
        fs::create_dir_all(dir.join("objects"))?;
        let store = Self::build(clock, Some(dir.clone()));
        {
            let mut docs = store.inner.docs.write();
            for entry in fs::read_dir(dir.join("docs"))? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "tmp") {
                    continue;
                }
                let doc: Document =
                    serde_json::from_slice(&fs::read(&path)?).map_err(|e| StoreError::Corrupt {
                        path: path.clone(),
                        reason: e.to_string(),
                    })?;
                docs.insert(doc.key.clone(), doc);
            }
        }
        {
            let mut objects = store.inner.objects.write();
            for entry in fs::read_dir(dir.join("objects"))? {
                let path = entry?.path();
                let Some(key) = path
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| hex::decode(n).ok())
                    .and_then(|k| String::from_utf8(k).ok())
                else {
                    continue;
                };
                let bytes = Bytes::from(fs::read(&path)?);
                let digest = digest(&bytes);
                objects.insert(key, StoredObject { bytes, digest });
            }
        }
        Ok(store)
    }

    fn build(clock: SharedClock, dir: Option<PathBuf>) -> Self {
        Self {
            inner: Arc::new(StoreInner {
                clock,
                docs: RwLock::new(BTreeMap::new()),
                objects: RwLock::new(HashMap::new()),
                dir,
            }),
        }
    }

    pub fn clock(&self) -> &SharedClock {
        &self.inner.clock
    }

    /// A view whose keys are transparently prefixed with `namespace/`.
    pub fn scoped(&self, namespace: &str) -> ScopedStore {
        ScopedStore {
            store: self.clone(),
            prefix: format!("{namespace}/"),
        }
    }

    pub fn doc_put(&self, key: &str, body: Value) -> Result<u64> {
        let size = serde_json::to_vec(&body).map(|v| v.len()).unwrap_or(usize::MAX);
        if size > MAX_DOCUMENT_BYTES {
            return Err(StoreError::DocTooLarge {
                key: key.to_owned(),
                size,
            });
        }
        let mut docs = self.inner.docs.write();
        let doc = match docs.get(key) {
            Some(prev) => Document {
                key: key.to_owned(),
                revision: prev.revision + 1,
                body,
                created_at: prev.created_at,
            },
            None => Document {
                key: key.to_owned(),
                revision: 1,
                body,
                created_at: self.inner.clock.now(),
            },
        };
        if let Some(dir) = &self.inner.dir {
            let file = dir.join("docs").join(format!("{}.json", hex::encode(key)));
            let encoded = serde_json::to_vec(&doc).map_err(io::Error::other)?;
            write_atomically(&file, &encoded)?;
        }
        let revision = doc.revision;
        docs.insert(key.to_owned(), doc);
        Ok(revision)
    }

    /// Writes only when `key` is absent. Returns `false` if it already existed.
    pub fn doc_put_if_absent(&self, key: &str, body: Value) -> Result<bool> {
        // The write lock is not held across the put; racing writers may
        // both observe absence, which only costs an extra revision.
        if self.inner.docs.read().contains_key(key) {
            return Ok(false);
        }
        self.doc_put(key, body)?;
        Ok(true)
    }

    pub fn doc_get(&self, key: &str) -> Result<Value> {
        self.doc(key).map(|d| d.body)
    }

    pub fn doc(&self, key: &str) -> Result<Document> {
        self.inner
            .docs
            .read()
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.to_owned()))
    }

    pub fn doc_exists(&self, key: &str) -> bool {
        self.inner.docs.read().contains_key(key)
    }

    /// Documents under `key_prefix` created inside `window`, ordered by
    /// `(created_at, key)`, at most `limit` per page.
    pub fn doc_query(
        &self,
        key_prefix: &str,
        window: TimeWindow,
        limit: usize,
        continuation: Option<&str>,
    ) -> Result<QueryPage> {
        let limit = limit.max(1);
        let after = continuation.map(decode_continuation).transpose()?;
        let mut matched: Vec<Document> = {
            let docs = self.inner.docs.read();
            docs.range::<str, _>((Bound::Included(key_prefix), Bound::Unbounded))
                .take_while(|(k, _)| k.starts_with(key_prefix))
                .filter(|(_, d)| window.contains(d.created_at))
                .map(|(_, d)| d.clone())
                .collect()
        };
        matched.sort_by(|a, b| (a.created_at, &a.key).cmp(&(b.created_at, &b.key)));
        let start = match &after {
            Some((t, k)) => matched.partition_point(|d| (d.created_at, &d.key) <= (*t, k)),
            None => 0,
        };
        let rest = &matched[start..];
        let page: Vec<Document> = rest.iter().take(limit).cloned().collect();
        let continuation = (rest.len() > limit)
            .then(|| page.last().map(|d| encode_continuation(d.created_at, &d.key)))
            .flatten();
        Ok(QueryPage {
            documents: page,
            continuation,
        })
    }

    /// Follows continuations to the end.
    pub fn doc_query_all(&self, key_prefix: &str, window: TimeWindow) -> Result<Vec<Document>> {
        let mut out = Vec::new();
        let mut token: Option<String> = None;
        loop {
            let page = self.doc_query(key_prefix, window, 512, token.as_deref())?;
            out.extend(page.documents);
            match page.continuation {
                Some(t) => token = Some(t),
                None => return Ok(out),
            }
        }
    }

    pub fn doc_count(&self) -> usize {
        self.inner.docs.read().len()
    }

    pub fn obj_put(&self, key: &str, bytes: impl Into<Bytes>) -> Result<String> {
        let bytes = bytes.into();
        let digest = digest(&bytes);
        if let Some(dir) = &self.inner.dir {
            write_atomically(&object_path(dir, key), &bytes)?;
        }
        self.inner.objects.write().insert(
            key.to_owned(),
            StoredObject {
                bytes,
                digest: digest.clone(),
            },
        );
        Ok(digest)
    }

    pub fn obj_get(&self, key: &str) -> Result<Bytes> {
        self.inner
            .objects
            .read()
            .get(key)
            .map(|o| o.bytes.clone())
            .ok_or_else(|| StoreError::NotFound(key.to_owned()))
    }

    pub fn obj_digest(&self, key: &str) -> Result<String> {
        self.inner
            .objects
            .read()
            .get(key)
            .map(|o| o.digest.clone())
            .ok_or_else(|| StoreError::NotFound(key.to_owned()))
    }

    pub fn obj_delete(&self, key: &str) -> Result<()> {
        if self.inner.objects.write().remove(key).is_none() {
            return Err(StoreError::NotFound(key.to_owned()));
        }
        if let Some(dir) = &self.inner.dir {
            let path = object_path(dir, key);
            if path.exists() {
                fs::remove_file(path)?;
            }
        }
        Ok(())
    }

    pub fn obj_exists(&self, key: &str) -> bool {
        self.inner.objects.read().contains_key(key)
    }

    pub fn obj_count(&self) -> usize {
        self.inner.objects.read().len()
    }

    /// Keeps payloads up to `threshold` bytes inline and parks larger ones
    /// in the object store under a fresh `claim/` key.
    pub fn claim_check_wrap(&self, payload: impl Into<Bytes>, threshold: usize) -> Result<ClaimCheck> {
        self.claim_check_wrap_under(payload, threshold, "claim")
    }

    pub fn claim_check_wrap_under(
        &self,
        payload: impl Into<Bytes>,
        threshold: usize,
        key_prefix: &str,
    ) -> Result<ClaimCheck> {
        if threshold > crate::broker::MAX_MESSAGE_BYTES {
            return Err(StoreError::ThresholdTooLarge(threshold));
        }
        let payload = payload.into();
        if payload.len() <= threshold {
            return Ok(ClaimCheck::Inline(payload));
        }
        let key = format!("{key_prefix}/{}", uuid::Uuid::new_v4());
        let size = payload.len() as u64;
        let digest = self.obj_put(&key, payload)?;
        Ok(ClaimCheck::Ticket(ClaimTicket { key, digest, size }))
    }

    pub fn claim_check_resolve(&self, check: &ClaimCheck) -> Result<Bytes> {
        match check {
            ClaimCheck::Inline(b) => Ok(b.clone()),
            ClaimCheck::Ticket(ticket) => self.resolve_ticket(ticket),
        }
    }

    pub fn resolve_ticket(&self, ticket: &ClaimTicket) -> Result<Bytes> {
        let bytes = self.obj_get(&ticket.key)?;
        let found = digest(&bytes);
        if found != ticket.digest || bytes.len() as u64 != ticket.size {
            return Err(StoreError::DigestMismatch {
                key: ticket.key.clone(),
                expected: ticket.digest.clone(),
                found,
            });
        }
        Ok(bytes)
    }

    /// Test hook: replaces an object's bytes without updating tickets that
    /// point at it.
    #[doc(hidden)]
    pub fn corrupt_object(&self, key: &str, bytes: impl Into<Bytes>) {
        let bytes = bytes.into();
        let digest = digest(&bytes);
        self.inner
            .objects
            .write()
            .insert(key.to_owned(), StoredObject { bytes, digest });
    }
}

fn object_path(dir: &Path, key: &str) -> PathBuf {
    dir.join("objects").join(hex::encode(key))
}

fn write_atomically(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn encode_continuation(t: Timestamp, key: &str) -> String {
    let raw = format!("{}\n{}", t.timestamp_micros(), key);
    base64::engine::general_purpose::URL_SAFE_NO_PAD.encode(raw)
}

fn decode_continuation(token: &str) -> Result<(Timestamp, String)> {
    let raw = base64::engine::general_purpose::URL_SAFE_NO_PAD
        .decode(token)
        .map_err(|_| StoreError::BadContinuation)?;
    let raw = String::from_utf8(raw).map_err(|_| StoreError::BadContinuation)?;
    let (micros, key) = raw.split_once('\n').ok_or(StoreError::BadContinuation)?;
    let micros: i64 = micros.parse().map_err(|_| StoreError::BadContinuation)?;
    let t = chrono::DateTime::from_timestamp_micros(micros).ok_or(StoreError::BadContinuation)?;
    Ok((t, key.to_owned()))
}

/// Store view confined to one key namespace.
#[derive(Clone, Debug)]
pub struct ScopedStore {
    store: Store,
    prefix: String,
}

impl ScopedStore {
    fn key(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    fn strip(&self, mut doc: Document) -> Document {
        if let Some(k) = doc.key.strip_prefix(&self.prefix) {
            doc.key = k.to_owned();
        }
        doc
    }

    pub fn namespace(&self) -> &str {
        self.prefix.trim_end_matches('/')
    }

    pub fn unscoped(&self) -> &Store {
        &self.store
    }

    pub fn now(&self) -> Timestamp {
        self.store.clock().now()
    }

    pub fn doc_put(&self, key: &str, body: Value) -> Result<u64> {
        self.store.doc_put(&self.key(key), body)
    }

    pub fn doc_put_if_absent(&self, key: &str, body: Value) -> Result<bool> {
        self.store.doc_put_if_absent(&self.key(key), body)
    }

    pub fn doc_get(&self, key: &str) -> Result<Value> {
        self.store.doc_get(&self.key(key))
    }

    pub fn doc(&self, key: &str) -> Result<Document> {
        self.store.doc(&self.key(key)).map(|d| self.strip(d))
    }

    pub fn doc_exists(&self, key: &str) -> bool {
        self.store.doc_exists(&self.key(key))
    }

    pub fn doc_query(
        &self,
        key_prefix: &str,
        window: TimeWindow,
        limit: usize,
        continuation: Option<&str>,
    ) -> Result<QueryPage> {
        let page = self
            .store
            .doc_query(&self.key(key_prefix), window, limit, continuation)?;
        Ok(QueryPage {
            documents: page.documents.into_iter().map(|d| self.strip(d)).collect(),
            continuation: page.continuation,
        })
    }

    pub fn doc_query_all(&self, key_prefix: &str, window: TimeWindow) -> Result<Vec<Document>> {
        Ok(self
            .store
            .doc_query_all(&self.key(key_prefix), window)?
            .into_iter()
            .map(|d| self.strip(d))
            .collect())
    }

    pub fn obj_put(&self, key: &str, bytes: impl Into<Bytes>) -> Result<String> {
        self.store.obj_put(&self.key(key), bytes)
    }

    pub fn obj_get(&self, key: &str) -> Result<Bytes> {
        self.store.obj_get(&self.key(key))
    }

    pub fn obj_exists(&self, key: &str) -> bool {
        self.store.obj_exists(&self.key(key))
    }

    /// Tickets carry the full key, so they resolve through any view.
    pub fn claim_check_wrap(&self, payload: impl Into<Bytes>, threshold: usize) -> Result<ClaimCheck> {
        self.store
            .claim_check_wrap_under(payload, threshold, &self.key("claim"))
    }

    pub fn claim_check_resolve(&self, check: &ClaimCheck) -> Result<Bytes> {
        self.store.claim_check_resolve(check)
    }

    pub fn resolve_ticket(&self, ticket: &ClaimTicket) -> Result<Bytes> {
        self.store.resolve_ticket(ticket)
    }

    /// Stores `bytes` under `key` and returns a ticket for it.
    pub fn put_with_ticket(&self, key: &str, bytes: impl Into<Bytes>) -> Result<ClaimTicket> {
        let bytes = bytes.into();
        let size = bytes.len() as u64;
        let full = self.key(key);
        let digest = self.store.obj_put(&full, bytes)?;
        Ok(ClaimTicket {
            key: full,
            digest,
            size,
        })
    }
}
