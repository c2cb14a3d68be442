//! Notification sinks for Slack-style `{"text": ...}` messages.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("sink unreachable: {0}")]
    Unreachable(String),
}

pub trait Sink: Send + Sync {
    fn post(&self, body: &Value) -> Result<(), SinkError>;
}

/// Appends one JSON object per line.
pub struct FileSink {
    path: PathBuf,
    file: Mutex<File>,
}

impl FileSink {
    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref().to_owned();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            path,
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Sink for FileSink {
    fn post(&self, body: &Value) -> Result<(), SinkError> {
        let mut line = serde_json::to_vec(body).map_err(|e| SinkError::Unreachable(e.to_string()))?;
        line.push(b'\n');
        let mut f = self.file.lock();
        f.write_all(&line)
            .and_then(|_| f.flush())
            .map_err(|e| SinkError::Unreachable(format!("{}: {e}", self.path.display())))
    }
}

/// POSTs the body as JSON to a webhook URL.
pub struct HttpSink {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpSink {
    pub fn new(url: impl Into<String>) -> Result<Self, SinkError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| SinkError::Unreachable(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            client,
        })
    }
}

impl Sink for HttpSink {
    fn post(&self, body: &Value) -> Result<(), SinkError> {
        let payload = serde_json::to_vec(body).map_err(|e| SinkError::Unreachable(e.to_string()))?;
        let resp = self
            .client
            .post(&self.url)
            .header("content-type", "application/json")
            .body(payload)
            .send()
            .map_err(|e| SinkError::Unreachable(e.to_string()))?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(SinkError::Unreachable(format!("{} answered {}", self.url, resp.status())))
        }
    }
}

/// Keeps posts in memory.
#[derive(Default)]
pub struct MemorySink {
    posts: Mutex<Vec<Value>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn posts(&self) -> Vec<Value> {
        self.posts.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.posts.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Sink for MemorySink {
    fn post(&self, body: &Value) -> Result<(), SinkError> {
        self.posts.lock().push(body.clone());
        Ok(())
    }
}

/// Fault injection around another sink.
pub struct FlakySink<S> {
    inner: S,
    failure_rate: f64,
    fail_first: Mutex<usize>,
    rng: Mutex<ChaCha8Rng>,
}

impl<S: Sink> FlakySink<S> {
    /// Each post fails independently with probability `failure_rate`.
    pub fn random(inner: S, failure_rate: f64, seed: u64) -> Self {
        Self {
            inner,
            failure_rate: failure_rate.clamp(0.0, 1.0),
            fail_first: Mutex::new(0),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// The first `n` posts fail, later ones go through.
    pub fn failing_first(inner: S, n: usize) -> Self {
        let mut s = Self::random(inner, 0.0, 0);
        s.fail_first = Mutex::new(n);
        s
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Sink> Sink for FlakySink<S> {
    fn post(&self, body: &Value) -> Result<(), SinkError> {
        {
            let mut left = self.fail_first.lock();
            if *left > 0 {
                *left -= 1;
                return Err(SinkError::Unreachable("injected outage".into()));
            }
        }
        if self.failure_rate > 0.0 && self.rng.lock().random::<f64>() < self.failure_rate {
            return Err(SinkError::Unreachable("injected failure".into()));
        }
        self.inner.post(body)
    }
}

impl<S: Sink + ?Sized> Sink for std::sync::Arc<S> {
    fn post(&self, body: &Value) -> Result<(), SinkError> {
        (**self).post(body)
    }
}
