//! Latency reports from saved timing records.

use std::path::Path;
use std::str::FromStr;

use crate::clock::SystemClock;
use crate::metrics::{render_report, EgressKind, LatencyRecorder};
use crate::pipeline::serving::load_evaluation;
use crate::runtime::Environment;
use crate::store::Store;

use super::config::metrics_path;
use super::HarnessError;

/// Histogram bin width in seconds.
pub const HISTOGRAM_BIN_SECS: f64 = 0.5;
/// The latency bound quoted under the table.
pub const WITHIN_SECS: f64 = 15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown format {other:?}, expected table or csv")),
        }
    }
}

/// Renders the report for the records saved under `data_dir`. `kind`
/// restricts it to one egress type.
pub fn report(data_dir: &Path, kind: Option<EgressKind>, format: ReportFormat) -> Result<String, HarnessError> {
    let path = metrics_path(data_dir);
    if !path.exists() {
        return Err(HarnessError::NoData(format!("no timing records at {}", path.display())));
    }
    let recorder = LatencyRecorder::load(SystemClock::shared(), &path)?;
    let mut out = render(&recorder, kind, format)?;
    if format == ReportFormat::Table {
        let store_dir = data_dir.join("store");
        if store_dir.exists() {
            let store = Store::open(SystemClock::shared(), &store_dir)?;
            if let Some(ev) = load_evaluation(&store.scoped(Environment::Production.namespace())) {
                out.push_str(&format!(
                    "model v{}: ROC AUC {:.3} on {} held-out incidents\n",
                    ev.version, ev.auc, ev.holdout_rows
                ));
            }
        }
    }
    Ok(out)
}

/// Report text for an in-memory recorder.
pub fn render(recorder: &LatencyRecorder, kind: Option<EgressKind>, format: ReportFormat) -> Result<String, HarnessError> {
    let kinds: Vec<EgressKind> = match kind {
        Some(k) => vec![k],
        None => EgressKind::ALL.to_vec(),
    };
    let series: Vec<(String, Vec<f64>)> = kinds
        .iter()
        .map(|&k| (k.label().to_owned(), recorder.durations(k)))
        .filter(|(_, d)| !d.is_empty())
        .collect();
    if series.is_empty() {
        return Err(HarnessError::NoData("no completed timing records".into()));
    }
    let report = render_report(&series, HISTOGRAM_BIN_SECS)?;
    Ok(match format {
        ReportFormat::Csv => report.histogram_csv,
        ReportFormat::Table => {
            let mut out = report.table;
            for (label, values) in &series {
                let within = values.iter().filter(|&&v| v <= WITHIN_SECS).count() as f64 / values.len() as f64;
                out.push_str(&format!(
                    "{label}: {:.1}% of {} within {WITHIN_SECS:.0} s\n",
                    within * 100.0,
                    values.len()
                ));
            }
            out
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{SimClock, Timestamp};
    use std::sync::Arc;

    fn at(secs: f64) -> Timestamp {
        SimClock::default_epoch() + chrono::Duration::milliseconds((secs * 1000.0) as i64)
    }

    #[test]
    fn missing_or_empty_records_are_no_data() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path(), None, ReportFormat::Table), Err(HarnessError::NoData(_))));
        let rec = LatencyRecorder::new(Arc::new(SimClock::manual(SimClock::default_epoch())));
        rec.mark_ingress("a", at(0.0));
        rec.save(&metrics_path(dir.path())).unwrap();
        assert!(matches!(report(dir.path(), None, ReportFormat::Csv), Err(HarnessError::NoData(_))));
    }

    #[test]
    fn saved_records_render_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let rec = LatencyRecorder::new(Arc::new(SimClock::manual(SimClock::default_epoch())));
        for (i, d) in [1.0, 2.0, 3.0, 20.0].iter().enumerate() {
            let id = format!("r{i}");
            rec.mark_ingress(&id, at(0.0));
            rec.mark_egress(&id, at(*d), EgressKind::Reported).unwrap();
        }
        rec.mark_ingress("s", at(0.0));
        rec.mark_egress("s", at(0.25), EgressKind::Saved).unwrap();
        rec.save(&metrics_path(dir.path())).unwrap();

        let table = report(dir.path(), None, ReportFormat::Table).unwrap();
        assert!(table.contains("Reported"), "{table}");
        assert!(table.contains("Saved"), "{table}");
        assert!(table.contains("75.0% of 4 within 15 s"), "{table}");

        let only_saved = report(dir.path(), Some(EgressKind::Saved), ReportFormat::Table).unwrap();
        assert!(!only_saved.contains("Reported"));

        let csv = report(dir.path(), Some(EgressKind::Reported), ReportFormat::Csv).unwrap();
        assert!(csv.starts_with("kind,bin_low_seconds,count\n"));
        let total: usize = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, 4);
    }
}
