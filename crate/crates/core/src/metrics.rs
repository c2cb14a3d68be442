//! End-to-end latency marks and their six-number summaries.
//!
//! Every accepted message gets an ingress mark. It later gets an egress mark
//! of kind `Saved` (history persisted, nothing forwarded) or `Reported`
//! (a notification left the system). Quartiles use linear interpolation
//! between order statistics at `h = (n - 1) p` (R's type 7).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{seconds_between, SharedClock, Timestamp};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("egress for unknown receipt {0:?}")]
    UnknownReceipt(String),
    #[error("receipt {0:?} already has a {1} egress")]
    DuplicateEgress(String, EgressKind),
    #[error("egress precedes ingress for {0:?}")]
    EgressBeforeIngress(String),
    #[error("no completed records")]
    EmptySeries,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad metrics file: {0}")]
    Format(#[from] serde_json::Error),
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum EgressKind {
    Reported,
    Saved,
}

impl EgressKind {
    pub const ALL: [EgressKind; 2] = [EgressKind::Reported, EgressKind::Saved];

    pub fn label(self) -> &'static str {
        match self {
            EgressKind::Reported => "Reported",
            EgressKind::Saved => "Saved",
        }
    }
}

impl std::fmt::Display for EgressKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EgressKind::Reported => "reported",
            EgressKind::Saved => "saved",
        })
    }
}

impl std::str::FromStr for EgressKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "reported" => Ok(Self::Reported),
            "saved" => Ok(Self::Saved),
            other => Err(format!("unknown egress kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub receipt_id: String,
    pub ingress: Timestamp,
    pub egress: Timestamp,
    pub kind: EgressKind,
}

impl TimingRecord {
    pub fn duration_secs(&self) -> f64 {
        seconds_between(self.ingress, self.egress)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SixNumberSummary {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub mean: f64,
    pub q3: f64,
    pub max: f64,
}

/// Type-7 quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn six_number_summary(values: &[f64]) -> Result<SixNumberSummary> {
    if values.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Ok(SixNumberSummary {
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        // Summation error can push the mean a hair outside [min, max].
        mean: mean.clamp(v[0], v[v.len() - 1]),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

/// Share of `values` that are `<= threshold`.
pub fn fraction_within(values: &[f64], threshold: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let within = values.iter().filter(|&&v| v <= threshold).count();
    Ok(within as f64 / values.len() as f64)
}

#[derive(Default, Serialize, Deserialize)]
struct State {
    ingress: HashMap<String, Timestamp>,
    records: Vec<TimingRecord>,
    #[serde(skip)]
    completed: HashSet<(String, EgressKind)>,
}

/// Collects marks from concurrent handlers.
pub struct LatencyRecorder {
    clock: SharedClock,
    state: Mutex<State>,
}

impl std::fmt::Debug for LatencyRecorder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = self.state.lock();
        f.debug_struct("LatencyRecorder")
            .field("ingress", &s.ingress.len())
            .field("records", &s.records.len())
            .finish()
    }
}

impl LatencyRecorder {
    pub fn new(clock: SharedClock) -> Self {
        Self {
            clock,
            state: Mutex::new(State::default()),
        }
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    /// Keeps the first mark if a redelivered message marks again.
    pub fn mark_ingress(&self, receipt_id: &str, at: Timestamp) {
        self.state
            .lock()
            .ingress
            .entry(receipt_id.to_owned())
            .or_insert(at);
    }

    pub fn mark_egress(&self, receipt_id: &str, at: Timestamp, kind: EgressKind) -> Result<TimingRecord> {
        let mut s = self.state.lock();
        let ingress = *s
            .ingress
            .get(receipt_id)
            .ok_or_else(|| MetricsError::UnknownReceipt(receipt_id.to_owned()))?;
        if at < ingress {
            return Err(MetricsError::EgressBeforeIngress(receipt_id.to_owned()));
        }
        if !s.completed.insert((receipt_id.to_owned(), kind)) {
            return Err(MetricsError::DuplicateEgress(receipt_id.to_owned(), kind));
        }
        let record = TimingRecord {
            receipt_id: receipt_id.to_owned(),
            ingress,
            egress: at,
            kind,
        };
        s.records.push(record.clone());
        Ok(record)
    }

    pub fn mark_egress_now(&self, receipt_id: &str, kind: EgressKind) -> Result<TimingRecord> {
        self.mark_egress(receipt_id, self.clock.now(), kind)
    }

    pub fn records(&self) -> Vec<TimingRecord> {
        self.state.lock().records.clone()
    }

    pub fn count(&self, kind: EgressKind) -> usize {
        self.state
            .lock()
            .records
            .iter()
            .filter(|r| r.kind == kind)
            .count()
    }

    pub fn ingress_receipts(&self) -> Vec<String> {
        self.state.lock().ingress.keys().cloned().collect()
    }

    pub fn ingress_count(&self) -> usize {
        self.state.lock().ingress.len()
    }

    pub fn durations(&self, kind: EgressKind) -> Vec<f64> {
        self.state
            .lock()
            .records
            .iter()
            .filter(|r| r.kind == kind)
            .map(TimingRecord::duration_secs)
            .collect()
    }

    pub fn summarize(&self, kind: EgressKind) -> Result<SixNumberSummary> {
        six_number_summary(&self.durations(kind))
    }

    pub fn fraction_within(&self, kind: EgressKind, threshold_secs: f64) -> Result<f64> {
        fraction_within(&self.durations(kind), threshold_secs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = self.state.lock();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec(&*s)?)?;
        Ok(())
    }

    pub fn load(clock: SharedClock, path: &Path) -> Result<Self> {
        let mut state: State = serde_json::from_slice(&fs::read(path)?)?;
        state.completed = state
            .records
            .iter()
            .map(|r| (r.receipt_id.clone(), r.kind))
            .collect();
        Ok(Self {
            clock,
            state: Mutex::new(state),
        })
    }

    /// Table and histogram for every kind that has records.
    pub fn report(&self, bin_width_secs: f64) -> Result<Report> {
        let series: Vec<(String, Vec<f64>)> = EgressKind::ALL
            .iter()
            .map(|&k| (k.label().to_owned(), self.durations(k)))
            .filter(|(_, d)| !d.is_empty())
            .collect();
        render_report(&series, bin_width_secs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub histogram_csv: String,
}

const COLUMNS: [&str; 7] = ["Type", "Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max."];

/// Fixed-width table, one decimal place.
pub fn render_table(rows: &[(String, SixNumberSummary)]) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(label, s)| {
            let mut row = vec![label.clone()];
            row.extend(
                [s.min, s.q1, s.median, s.mean, s.q3, s.max]
                    .iter()
                    .map(|v| format!("{v:.1}")),
            );
            row
        })
        .collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].len())
                .chain([COLUMNS[c].len()])
                .max()
                .unwrap()
        })
        .collect();
    let mut out = String::new();
    let line = |out: &mut String, row: &[&str]| {
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                let _ = write!(out, "{cell:<w$}", w = widths[0]);
            } else {
                let _ = write!(out, "  {cell:>w$}", w = widths[c]);
            }
        }
        out.push('\n');
    };
    line(&mut out, &COLUMNS);
    for row in &cells {
        line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// `kind,bin_low_seconds,count` rows covering each series from its lowest
/// to its highest occupied bin.
pub fn histogram_csv(series: &[(String, Vec<f64>)], bin_width_secs: f64) -> String {
    let mut out = String::from("kind,bin_low_seconds,count\n");
    for (kind, values) in series {
        if values.is_empty() {
            continue;
        }
        let bin = |v: f64| (v / bin_width_secs).floor() as i64;
        let mut counts: std::collections::BTreeMap<i64, usize> = Default::default();
        for &v in values {
            *counts.entry(bin(v)).or_default() += 1;
        }
        let (&lo, &hi) = (
            counts.keys().next().unwrap(),
            counts.keys().next_back().unwrap(),
        );
        for b in lo..=hi {
            let _ = writeln!(
                out,
                "{},{},{}",
                kind.to_lowercase(),
                b as f64 * bin_width_secs,
                counts.get(&b).copied().unwrap_or(0)
            );
        }
    }
    out
}

pub fn render_report(series: &[(String, Vec<f64>)], bin_width_secs: f64) -> Result<Report> {
    if series.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    let rows = series
        .iter()
        .map(|(label, d)| Ok((label.clone(), six_number_summary(d)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Report {
        table: render_table(&rows),
        histogram_csv: histogram_csv(series, bin_width_secs),
    })
}
