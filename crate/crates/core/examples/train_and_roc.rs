//! Random forest on synthetic incidents, scored with a held-out ROC curve.
//!
//! ```bash
//! cargo run --release --example train_and_roc
//! ```

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use alertpipe::harness::workload::{generate, WorkloadConfig};
use alertpipe::model::{roc_points, train_forest, Dataset, ForestParams};
use alertpipe::pipeline::{convert_pagerduty, EventKind, Featurizer, IncidentEvent};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let featurizer = Featurizer::new(256, 0)?;
    for signal in [0.8, 0.0] {
        let events = generate(&WorkloadConfig {
            rate_per_minute: 300.0,
            duration_secs: 600.0,
            signal_strength: signal,
            ..Default::default()
        });
        let mut triggers = Vec::new();
        let mut by_service: HashMap<String, Vec<IncidentEvent>> = HashMap::new();
        let mut labels = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            let ev = convert_pagerduty(&e.body(), &format!("r{i}"), e.at)?;
            by_service.entry(ev.service_id.clone()).or_default().push(ev.clone());
            if e.kind == EventKind::Triggered {
                labels.insert(ev.incident_id.clone(), e.label);
                triggers.push(ev);
            }
        }
        let mut ds = Dataset::new(featurizer.dim());
        for t in &triggers {
            ds.push(&featurizer.features(t, &by_service[&t.service_id]), labels[&t.incident_id])?;
        }
        let (train, holdout) = ds.split(0.2, 1);
        let started = Instant::now();
        let forest = train_forest(&train, &ForestParams { n_trees: 50, ..Default::default() })?;
        let trained_in = started.elapsed();
        let scores: Vec<f64> = holdout.rows().map(|r| forest.predict_proba(r)).collect::<Result<_, _>>()?;
        let roc = roc_points(&scores, holdout.labels())?;
        println!(
            "signal {signal}: {} incidents, trained in {:.2?}, holdout AUC {:.3}",
            ds.len(),
            trained_in,
            roc.auc
        );
    }
    Ok(())
}
