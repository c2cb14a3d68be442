//! Training-set construction, retraining and the serving-model slot.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::clock::Timestamp;
use crate::model::{roc_points, train_forest, Dataset, Forest, ForestParams};
use crate::store::{ClaimTicket, ScopedStore, StoreError, TimeWindow};

use super::event::{EventKind, IncidentEvent};
use super::features::{label_incident, load_events, FeatureVector, Featurizer, INCIDENT_PREFIX};
use super::PipelineError;

pub const MODEL_KEY: &str = "model/current";
pub const EVALUATION_KEY: &str = "model/evaluation";
pub const DATASET_PREFIX: &str = "datasets";

/// The one shared mutable item of the pipeline: the forest currently
/// serving predictions. Readers get a whole forest, old or new.
#[derive(Default)]
pub struct ModelSlot {
    current: RwLock<Option<Arc<Forest>>>,
    load_attempted: AtomicBool,
    retrain: Mutex<()>,
}

impl ModelSlot {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Option<Arc<Forest>> {
        self.current.read().clone()
    }

    /// 0 until a model has been trained or loaded.
    pub fn version(&self) -> u64 {
        self.current().map_or(0, |f| f.version())
    }

    pub fn replace(&self, forest: Forest) -> Arc<Forest> {
        let forest = Arc::new(forest);
        *self.current.write() = Some(forest.clone());
        forest
    }

    /// Loads the persisted model once, if the slot is still empty.
    pub fn load_if_empty(&self, store: &ScopedStore) -> Result<(), PipelineError> {
        if self.current.read().is_some() || self.load_attempted.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        match store.obj_get(MODEL_KEY) {
            Ok(bytes) => {
                let forest = Forest::from_bytes(&bytes)?;
                let mut slot = self.current.write();
                if slot.is_none() {
                    *slot = Some(Arc::new(forest));
                }
                Ok(())
            }
            Err(StoreError::NotFound(_)) => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub incident_id: String,
    pub receipt_id: String,
    pub probability: f64,
    pub model_version: u64,
    pub decided_at: Timestamp,
    pub untrained: bool,
}

impl Prediction {
    pub fn text(&self) -> String {
        notification_text(&self.incident_id, self.probability, self.model_version)
    }
}

pub fn notification_text(incident_id: &str, p: f64, version: u64) -> String {
    format!("{incident_id}: true-alert probability {p:.2} (model v{version})")
}

pub fn classify(slot: &ModelSlot, features: &FeatureVector, now: Timestamp) -> Result<Prediction, PipelineError> {
    let (probability, model_version, untrained) = match slot.current() {
        Some(forest) => (forest.predict_proba(&features.values)?, forest.version(), false),
        None => (0.5, 0, true),
    };
    Ok(Prediction {
        incident_id: features.incident_id.clone(),
        receipt_id: features.receipt_id.clone(),
        probability,
        model_version,
        decided_at: now,
        untrained,
    })
}

/// Triggered incidents (first event per incident) created inside `window`
/// whose outcome is known, with their features and labels.
pub fn labeled_incidents(
    store: &ScopedStore,
    featurizer: &Featurizer,
    window: TimeWindow,
) -> Result<Vec<FeatureVector>, PipelineError> {
    let events = load_events(store, INCIDENT_PREFIX)?;
    let mut by_incident: BTreeMap<&str, Vec<&IncidentEvent>> = BTreeMap::new();
    let mut by_service: HashMap<&str, Vec<IncidentEvent>> = HashMap::new();
    for e in &events {
        by_incident.entry(e.incident_id.as_str()).or_default().push(e);
        by_service.entry(e.service_id.as_str()).or_default().push(e.clone());
    }
    let mut out = Vec::new();
    for (incident, evs) in &by_incident {
        let Some(trigger) = evs
            .iter()
            .filter(|e| e.kind == EventKind::Triggered)
            .min_by_key(|e| (e.ingress_ts, e.receipt_id.as_str()))
        else {
            continue;
        };
        if !window.contains(trigger.created_at) {
            continue;
        }
        let Some(label) = label_incident(evs.iter().copied()) else {
            continue;
        };
        let history = &by_service[trigger.service_id.as_str()];
        out.push(FeatureVector {
            incident_id: (*incident).to_owned(),
            receipt_id: trigger.receipt_id.clone(),
            values: featurizer.features(trigger, history),
            label: Some(label),
        });
    }
    Ok(out)
}

pub fn build_dataset(
    store: &ScopedStore,
    featurizer: &Featurizer,
    window: TimeWindow,
) -> Result<Dataset, PipelineError> {
    let rows = labeled_incidents(store, featurizer, window)?;
    if rows.is_empty() {
        return Err(PipelineError::EmptyWindow);
    }
    let mut ds = Dataset::with_capacity(featurizer.dim(), rows.len());
    for r in &rows {
        ds.push(&r.values, r.label.unwrap_or(false))?;
    }
    Ok(ds)
}

/// Serializes the window's dataset into the object store and returns the
/// ticket that the retrain function consumes.
pub fn build_training_set(
    store: &ScopedStore,
    featurizer: &Featurizer,
    window: TimeWindow,
) -> Result<ClaimTicket, PipelineError> {
    let ds = build_dataset(store, featurizer, window)?;
    let key = format!("{DATASET_PREFIX}/{}", uuid::Uuid::new_v4());
    let ticket = store.put_with_ticket(&key, ds.to_bytes())?;
    info!(rows = ds.len(), dim = ds.dim(), key = %ticket.key, "training set stored");
    Ok(ticket)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub version: u64,
    pub train_rows: usize,
    pub holdout_rows: usize,
    pub auc: f64,
    pub roc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RetrainOutcome {
    Trained {
        version: u64,
        evaluation: Option<Evaluation>,
    },
    Skipped(String),
}

#[derive(Debug, Clone)]
pub struct RetrainSettings {
    pub forest: ForestParams,
    /// Share of rows held out to compute the ROC; 0 trains on everything.
    pub holdout_fraction: f64,
}

impl Default for RetrainSettings {
    fn default() -> Self {
        Self {
            forest: ForestParams::default(),
            holdout_fraction: 0.2,
        }
    }
}

/// Trains on the ticketed dataset, overwrites the persisted model and swaps
/// the serving slot. A damaged dataset aborts the round and leaves the
/// previous model serving.
pub fn retrain(
    store: &ScopedStore,
    slot: &ModelSlot,
    ticket: &ClaimTicket,
    settings: &RetrainSettings,
    now: Timestamp,
) -> Result<RetrainOutcome, PipelineError> {
    let _one_at_a_time = slot.retrain.lock();
    let bytes = store.resolve_ticket(ticket).map_err(|e| match e {
        StoreError::DigestMismatch { .. } | StoreError::NotFound(_) => PipelineError::DatasetCorrupt(e.to_string()),
        other => other.into(),
    })?;
    let ds = Dataset::from_bytes(&bytes).map_err(|e| PipelineError::DatasetCorrupt(e.to_string()))?;
    if ds.len() < 2 || !ds.has_both_classes() {
        let why = format!("dataset of {} rows with {} positives", ds.len(), ds.positives());
        warn!(%why, "retraining skipped");
        return Ok(RetrainOutcome::Skipped(why));
    }
    let version = slot.version() + 1;
    let mut params = settings.forest.clone();
    params.seed = params.seed.wrapping_add(version);

    let (train, holdout) = if settings.holdout_fraction > 0.0 {
        let (t, h) = ds.split(settings.holdout_fraction, params.seed);
        if t.has_both_classes() && h.has_both_classes() {
            (t, Some(h))
        } else {
            (ds, None)
        }
    } else {
        (ds, None)
    };
    let forest = train_forest(&train, &params)?
        .with_version(version)
        .with_trained_at(now);

    let evaluation = match &holdout {
        Some(h) => {
            let scores = h
                .rows()
                .map(|r| forest.predict_proba(r))
                .collect::<Result<Vec<_>, _>>()?;
            let curve = roc_points(&scores, h.labels())?;
            Some(Evaluation {
                version,
                train_rows: train.len(),
                holdout_rows: h.len(),
                auc: curve.auc,
                roc: curve.points,
            })
        }
        None => None,
    };

    store.obj_put(MODEL_KEY, forest.to_bytes())?;
    if let Some(ev) = &evaluation {
        store.obj_put(EVALUATION_KEY, serde_json::to_vec(ev).map_err(|e| PipelineError::Decode(e.to_string()))?)?;
    }
    slot.replace(forest);
    info!(version, auc = evaluation.as_ref().map(|e| e.auc), "model swapped");
    Ok(RetrainOutcome::Trained { version, evaluation })
}

pub fn load_evaluation(store: &ScopedStore) -> Option<Evaluation> {
    let bytes = store.obj_get(EVALUATION_KEY).ok()?;
    serde_json::from_slice(&bytes).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::store::Store;

    fn store() -> ScopedStore {
        Store::in_memory(Arc::new(SimClock::manual(SimClock::default_epoch()))).scoped("production")
    }

    fn separable(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let labels: Vec<bool> = (0..n).map(|i| i >= n / 2).collect();
        Dataset::from_rows(2, &rows, &labels).unwrap()
    }

    fn small() -> RetrainSettings {
        RetrainSettings {
            forest: ForestParams {
                n_trees: 10,
                ..Default::default()
            },
            holdout_fraction: 0.25,
        }
    }

    #[test]
    fn untrained_fallback() {
        let slot = ModelSlot::new();
        let fv = FeatureVector {
            incident_id: "I-1".into(),
            receipt_id: "r".into(),
            values: vec![1.0],
            label: None,
        };
        let p = classify(&slot, &fv, SimClock::default_epoch()).unwrap();
        assert_eq!((p.probability, p.untrained, p.model_version), (0.5, true, 0));
    }

    #[test]
    fn notification_template() {
        assert_eq!(notification_text("I-42", 0.87, 3), "I-42: true-alert probability 0.87 (model v3)");
    }

    #[test]
    fn retrain_swaps_and_persists() {
        let s = store();
        let slot = ModelSlot::new();
        let now = SimClock::default_epoch();
        let ticket = s.put_with_ticket("datasets/a", separable(40).to_bytes()).unwrap();
        let out = retrain(&s, &slot, &ticket, &small(), now).unwrap();
        let RetrainOutcome::Trained { version, evaluation } = out else { panic!() };
        assert_eq!(version, 1);
        assert!(evaluation.unwrap().auc > 0.7);
        assert_eq!(slot.version(), 1);
        let stored = Forest::from_bytes(&s.obj_get(MODEL_KEY).unwrap()).unwrap();
        assert_eq!(stored.version(), 1);
        retrain(&s, &slot, &ticket, &small(), now).unwrap();
        assert_eq!(Forest::from_bytes(&s.obj_get(MODEL_KEY).unwrap()).unwrap().version(), 2);

        let fresh = ModelSlot::new();
        fresh.load_if_empty(&s).unwrap();
        assert_eq!(fresh.version(), 2);
        let fv = FeatureVector {
            incident_id: "I".into(),
            receipt_id: "r".into(),
            values: vec![39.0, 0.0],
            label: None,
        };
        assert!(classify(&fresh, &fv, now).unwrap().probability > 0.5);
        let bad = FeatureVector {
            values: vec![1.0; 3],
            ..fv
        };
        assert!(matches!(
            classify(&fresh, &bad, now),
            Err(PipelineError::Model(crate::model::ModelError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn one_class_and_corrupt_datasets_keep_old_model() {
        let s = store();
        let slot = ModelSlot::new();
        let now = SimClock::default_epoch();
        let good = s.put_with_ticket("datasets/good", separable(20).to_bytes()).unwrap();
        retrain(&s, &slot, &good, &small(), now).unwrap();

        let one = Dataset::from_rows(1, &[[1.0], [2.0]], &[true, true]).unwrap();
        let t = s.put_with_ticket("datasets/one", one.to_bytes()).unwrap();
        assert!(matches!(retrain(&s, &slot, &t, &small(), now).unwrap(), RetrainOutcome::Skipped(_)));
        assert_eq!(slot.version(), 1);

        let t = s.put_with_ticket("datasets/bad", separable(20).to_bytes()).unwrap();
        s.unscoped().corrupt_object(&t.key, b"garbage".to_vec());
        assert!(matches!(
            retrain(&s, &slot, &t, &small(), now),
            Err(PipelineError::DatasetCorrupt(_))
        ));
        assert_eq!(slot.version(), 1);
    }

    #[test]
    fn empty_window_has_no_training_set() {
        let s = store();
        let f = Featurizer::new(32, 0).unwrap();
        assert!(matches!(
            build_training_set(&s, &f, TimeWindow::all()),
            Err(PipelineError::EmptyWindow)
        ));
    }
}
