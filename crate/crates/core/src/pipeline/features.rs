//! Historical enrichment of new incidents into fixed-width feature vectors.
//!
//! Layout (indices into a vector of length `dim`):
//!
//! | index | feature |
//! |---|---|
//! | 0..4 | prior triggered incidents of the service within 1 h, 6 h, 24 h, 7 d |
//! | 4 | seconds since the service's previous incident, capped at 7 d (0 if none) |
//! | 5 | z-score of the value against the service's history for the metric |
//! | 6 | relative threshold margin `(value - threshold) / |threshold|` |
//! | 7..10 | severity one-hot: high, low, other |
//! | 10..14 | kind one-hot: triggered, acknowledged, resolved, other |
//! | 14, 15 | raw value and threshold |
//! | 16.. | hashed one-hot of service id (first half) and metric name (second half) |

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::clock::{format_ts, seconds_between, Timestamp};
use crate::store::{ScopedStore, TimeWindow};

use super::event::{EventKind, IncidentEvent};
use super::PipelineError;

pub const FEATURE_DIM: usize = 2500;
pub const RECENCY_CAP_SECS: f64 = 604_800.0;
pub const COUNT_WINDOWS_SECS: [f64; 4] = [3_600.0, 21_600.0, 86_400.0, 604_800.0];

pub const IDX_RECENCY: usize = 4;
pub const IDX_ZSCORE: usize = 5;
pub const IDX_MARGIN: usize = 6;
pub const IDX_SEVERITY: usize = 7;
pub const IDX_KIND: usize = 10;
pub const IDX_VALUE: usize = 14;
pub const IDX_THRESHOLD: usize = 15;
pub const IDX_HASHED: usize = 16;

/// Smallest dimension that leaves at least one bucket for each hash family.
pub const MIN_FEATURE_DIM: usize = IDX_HASHED + 2;

pub const INCIDENT_PREFIX: &str = "incident/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub incident_id: String,
    pub receipt_id: String,
    pub values: Vec<f64>,
    pub label: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Featurizer {
    dim: usize,
    hash_seed: u64,
}

impl Default for Featurizer {
    fn default() -> Self {
        Self {
            dim: FEATURE_DIM,
            hash_seed: 0,
        }
    }
}

impl Featurizer {
    pub fn new(dim: usize, hash_seed: u64) -> Result<Self, PipelineError> {
        if dim < MIN_FEATURE_DIM {
            return Err(PipelineError::InvalidConfig(format!(
                "feature dimension {dim} is below the minimum {MIN_FEATURE_DIM}"
            )));
        }
        Ok(Self { dim, hash_seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn bucket(&self, family: u64, value: &str) -> usize {
        let hashed = self.dim - IDX_HASHED;
        let first = hashed / 2;
        let h = fnv1a(self.hash_seed ^ family.wrapping_mul(0x9e37_79b9_7f4a_7c15), value.as_bytes());
        if family == 0 {
            IDX_HASHED + (h % first as u64) as usize
        } else {
            IDX_HASHED + first + (h % (hashed - first) as u64) as usize
        }
    }

    /// Pure featurization of `event` given events already known for its
    /// service. Only triggered events created strictly before `event` and
    /// belonging to other incidents count as history.
    pub fn features(&self, event: &IncidentEvent, service_history: &[IncidentEvent]) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let t = event.created_at;

        let mut seen = HashSet::new();
        let prior: Vec<&IncidentEvent> = service_history
            .iter()
            .filter(|h| {
                h.kind == EventKind::Triggered
                    && h.service_id == event.service_id
                    && h.incident_id != event.incident_id
                    && h.created_at < t
            })
            .filter(|h| seen.insert(h.incident_id.as_str()))
            .collect();

        for (i, w) in COUNT_WINDOWS_SECS.iter().enumerate() {
            v[i] = prior
                .iter()
                .filter(|h| seconds_between(h.created_at, t) <= *w)
                .count() as f64;
        }
        v[IDX_RECENCY] = prior
            .iter()
            .map(|h| seconds_between(h.created_at, t))
            .reduce(f64::min)
            .map_or(0.0, |s| s.min(RECENCY_CAP_SECS));

        let same_metric: Vec<f64> = prior
            .iter()
            .filter(|h| h.metric == event.metric)
            .map(|h| h.value)
            .collect();
        v[IDX_ZSCORE] = zscore(event.value, &same_metric);
        v[IDX_MARGIN] = (event.value - event.threshold) / event.threshold.abs().max(1e-9);

        let sev = match event.severity.as_str() {
            "high" => 0,
            "low" => 1,
            _ => 2,
        };
        v[IDX_SEVERITY + sev] = 1.0;
        let kind = match event.kind {
            EventKind::Triggered => 0,
            EventKind::Acknowledged => 1,
            EventKind::Resolved => 2,
            EventKind::Other => 3,
        };
        v[IDX_KIND + kind] = 1.0;
        v[IDX_VALUE] = event.value;
        v[IDX_THRESHOLD] = event.threshold;

        v[self.bucket(0, &event.service_id)] = 1.0;
        v[self.bucket(1, &event.metric)] = 1.0;

        for x in &mut v {
            if !x.is_finite() {
                *x = 0.0;
            }
        }
        v
    }

    /// Loads the service's persisted history and featurizes `event`.
    pub fn enrich(&self, store: &ScopedStore, event: &IncidentEvent) -> Result<FeatureVector, PipelineError> {
        let history = load_events(store, &service_prefix(&event.service_id))?;
        Ok(FeatureVector {
            incident_id: event.incident_id.clone(),
            receipt_id: event.receipt_id.clone(),
            values: self.features(event, &history),
            label: None,
        })
    }
}

/// Population z-score; 0 with fewer than two points or zero spread.
pub fn zscore(x: f64, history: &[f64]) -> f64 {
    if history.len() < 2 {
        return 0.0;
    }
    let n = history.len() as f64;
    let mean = history.iter().sum::<f64>() / n;
    let var = history.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd == 0.0 || !sd.is_finite() {
        0.0
    } else {
        (x - mean) / sd
    }
}

/// 64-bit FNV-1a over `bytes`, with the seed folded into the offset basis.
pub fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn escape(part: &str) -> String {
    part.replace('%', "%25").replace('/', "%2F")
}

pub fn service_prefix(service_id: &str) -> String {
    format!("{INCIDENT_PREFIX}{}/", escape(service_id))
}

/// `incident/<service>/<created-at>/<receipt>`; one document per receipt.
pub fn incident_key(event: &IncidentEvent) -> String {
    format!(
        "{}{}/{}",
        service_prefix(&event.service_id),
        format_ts(event.created_at),
        escape(&event.receipt_id)
    )
}

pub fn load_events(store: &ScopedStore, prefix: &str) -> Result<Vec<IncidentEvent>, PipelineError> {
    store
        .doc_query_all(prefix, TimeWindow::all())?
        .into_iter()
        .map(|d| serde_json::from_value(d.body).map_err(|e| PipelineError::Decode(e.to_string())))
        .collect()
}

/// Ground truth from the event stream: a true alert was acknowledged before
/// it was resolved, a false one was resolved without acknowledgement.
/// Unresolved incidents are unlabeled. Ordering uses ingress time.
pub fn label_incident<'a>(events: impl IntoIterator<Item = &'a IncidentEvent>) -> Option<bool> {
    let mut first_ack: Option<Timestamp> = None;
    let mut first_resolve: Option<Timestamp> = None;
    for e in events {
        let slot = match e.kind {
            EventKind::Acknowledged => &mut first_ack,
            EventKind::Resolved => &mut first_resolve,
            _ => continue,
        };
        if slot.is_none_or(|t| e.ingress_ts < t) {
            *slot = Some(e.ingress_ts);
        }
    }
    let resolved = first_resolve?;
    Some(first_ack.is_some_and(|a| a < resolved))
}
