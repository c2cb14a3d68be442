//! Seeded synthetic PagerDuty-style incident streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::clock::{format_ts, parse_ts, SimClock, Timestamp};
use crate::pipeline::{EventKind, Webhook};

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    /// Mean triggered incidents per minute.
    pub rate_per_minute: f64,
    /// Span over which incidents are triggered. Follow-up events may land later.
    pub duration_secs: f64,
    pub seed: u64,
    pub services: usize,
    pub metrics: usize,
    /// Probability that an incident is a true alert.
    pub true_fraction: f64,
    /// 0 makes features independent of the label, 1 separates them strongly.
    pub signal_strength: f64,
    pub start: Timestamp,
    /// Mean delay from trigger to acknowledgement of a true alert.
    pub ack_mean_secs: f64,
    /// Mean delay from acknowledgement to resolution of a true alert.
    pub resolve_after_ack_mean_secs: f64,
    /// Mean delay from trigger to resolution of a false alert.
    pub false_resolve_mean_secs: f64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            rate_per_minute: 120.0,
            duration_secs: 600.0,
            seed: 1,
            services: 2000,
            metrics: 8,
            true_fraction: 0.3,
            signal_strength: 0.8,
            start: SimClock::default_epoch(),
            ack_mean_secs: 120.0,
            resolve_after_ack_mean_secs: 600.0,
            false_resolve_mean_secs: 300.0,
        }
    }
}

/// One webhook delivery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadEvent {
    #[serde(with = "ts")]
    pub at: Timestamp,
    pub kind: EventKind,
    pub incident_id: String,
    #[serde(with = "ts")]
    pub created_at: Timestamp,
    pub service_id: String,
    pub urgency: String,
    pub metric: String,
    pub value: f64,
    pub threshold: f64,
    /// Ground truth of the incident this event belongs to.
    pub label: bool,
}

mod ts {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Timestamp, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format_ts(*t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
        let s = String::deserialize(d)?;
        parse_ts(&s).ok_or_else(|| serde::de::Error::custom(format!("bad timestamp {s:?}")))
    }
}

impl WorkloadEvent {
    pub fn webhook(&self) -> Webhook {
        Webhook::new(
            self.kind,
            &self.incident_id,
            self.created_at,
            &self.urgency,
            &self.service_id,
            &self.metric,
            self.value,
            self.threshold,
        )
    }

    pub fn body(&self) -> Vec<u8> {
        self.webhook().to_bytes()
    }
}

/// Threshold of the `j`-th metric in the pool.
pub fn metric_threshold(j: usize) -> f64 {
    50.0 + 10.0 * j as f64
}

pub fn metric_name(j: usize) -> String {
    format!("metric-{j:02}")
}

pub fn service_name(i: usize) -> String {
    format!("svc-{i:04}")
}

/// Generates the full stream, sorted by delivery time. The same config
/// always yields the same events.
pub fn generate(config: &WorkloadConfig) -> Vec<WorkloadEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut events = Vec::new();
    if config.rate_per_minute <= 0.0 || config.duration_secs <= 0.0 {
        return events;
    }
    let gaps = Exp::new(config.rate_per_minute / 60.0).expect("positive rate");
    let noise = Normal::new(0.0f64, 0.15).expect("valid normal");
    let ack = Exp::new(1.0 / config.ack_mean_secs).expect("positive mean");
    let resolve_after_ack = Exp::new(1.0 / config.resolve_after_ack_mean_secs).expect("positive mean");
    let false_resolve = Exp::new(1.0 / config.false_resolve_mean_secs).expect("positive mean");
    let s = config.signal_strength;
    let services = config.services.max(1);
    let metrics = config.metrics.max(1);

    let mut t = 0.0f64;
    let mut n = 0usize;
    loop {
        t += gaps.sample(&mut rng);
        if t >= config.duration_secs {
            break;
        }
        n += 1;
        let label = rng.random_bool(config.true_fraction.clamp(0.0, 1.0));
        let service_id = service_name(rng.random_range(0..services));
        let j = rng.random_range(0..metrics);
        let threshold = metric_threshold(j);
        let margin = 0.05 + noise.sample(&mut rng).abs() + if label { s * 0.6 } else { 0.0 };
        let p_high = if label { 0.5 + 0.4 * s } else { 0.5 - 0.4 * s };
        let urgency = if rng.random_bool(p_high) { "high" } else { "low" };
        let created_at = config.start + secs(t);
        let base = WorkloadEvent {
            at: created_at,
            kind: EventKind::Triggered,
            incident_id: format!("P{:05}{n:07}", config.seed % 100_000),
            created_at,
            service_id,
            urgency: urgency.to_owned(),
            metric: metric_name(j),
            value: threshold * (1.0 + margin),
            threshold,
            label,
        };
        let follow = |kind, delay: f64| WorkloadEvent {
            at: created_at + secs(delay),
            kind,
            ..base.clone()
        };
        if label {
            let a = ack.sample(&mut rng).max(1.0);
            let r = a + resolve_after_ack.sample(&mut rng).max(1.0);
            events.push(follow(EventKind::Acknowledged, a));
            events.push(follow(EventKind::Resolved, r));
        } else {
            let r = false_resolve.sample(&mut rng).max(1.0);
            events.push(follow(EventKind::Resolved, r));
        }
        events.push(base);
    }
    events.sort_by(|a, b| a.at.cmp(&b.at).then_with(|| a.incident_id.cmp(&b.incident_id)));
    events
}

/// Whole microseconds, the precision timestamps are serialized with.
fn secs(s: f64) -> chrono::Duration {
    chrono::Duration::microseconds((s * 1e6).round() as i64)
}

/// Number of triggered incidents in a stream.
pub fn incident_count(events: &[WorkloadEvent]) -> usize {
    events.iter().filter(|e| e.kind == EventKind::Triggered).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{convert_pagerduty, features::label_incident, IncidentEvent};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn stream_is_sorted_and_deterministic() {
        let cfg = WorkloadConfig::default();
        let a = generate(&cfg);
        assert_eq!(a, generate(&cfg));
        assert!(a.windows(2).all(|w| w[0].at <= w[1].at));
        let b = generate(&WorkloadConfig { seed: 2, ..cfg });
        assert_ne!(a, b);
    }

    #[test]
    fn values_exceed_thresholds_from_the_pool() {
        for e in generate(&WorkloadConfig::default()) {
            assert!(e.value > e.threshold);
            let j = e.metric.trim_start_matches("metric-").parse::<usize>().unwrap();
            assert_eq!(e.threshold, metric_threshold(j));
        }
    }

    #[test]
    fn events_serialize_round_trip() {
        let e = &generate(&WorkloadConfig::default())[0];
        let line = serde_json::to_string(e).unwrap();
        assert_eq!(&serde_json::from_str::<WorkloadEvent>(&line).unwrap(), e);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn arrival_count_matches_poisson_mean(seed in 0u64..10_000, rate in 10.0f64..600.0) {
            let cfg = WorkloadConfig { seed, rate_per_minute: rate, duration_secs: 1200.0, ..Default::default() };
            let n = incident_count(&generate(&cfg)) as f64;
            let mean = rate * 20.0;
            // Poisson variance equals its mean.
            prop_assert!((n - mean).abs() <= 4.0 * mean.sqrt(), "n={n} mean={mean}");
        }

        #[test]
        fn labels_agree_with_event_order(seed in 0u64..10_000) {
            let cfg = WorkloadConfig { seed, duration_secs: 300.0, ..Default::default() };
            let mut by_incident: BTreeMap<String, (bool, Vec<IncidentEvent>)> = BTreeMap::new();
            for (i, e) in generate(&cfg).iter().enumerate() {
                let ev = convert_pagerduty(&e.body(), &format!("r{i}"), e.at).unwrap();
                by_incident.entry(e.incident_id.clone()).or_insert((e.label, vec![])).1.push(ev);
            }
            for (label, evs) in by_incident.values() {
                prop_assert_eq!(label_incident(evs), Some(*label));
            }
        }
    }
}
