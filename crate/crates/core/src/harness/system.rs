//! A fully wired pipeline: stores, broker, runtime, layers and recorder.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use tracing::info;

use crate::broker::{Broker, DLQ_SUFFIX, HEADER_RECEIPT_ID};
use crate::clock::{Clock, SharedClock, SimClock};
use crate::http::INGEST_ROUTE;
use crate::metrics::{EgressKind, LatencyRecorder};
use crate::pipeline::{self, EnvironmentWiring, FileSink, HttpSink, MemorySink, Pipeline, Sink};
use crate::runtime::{Environment, IngressResponse, Runtime};
use crate::store::Store;

use super::config::{Config, SinkKind};
use super::workload::WorkloadEvent;
use super::HarnessError;

/// How the production sink is chosen.
pub enum SinkChoice {
    /// Whatever the `[sink]` section says.
    FromConfig,
    Custom(Arc<dyn Sink>),
}

pub struct System {
    config: Config,
    runtime: Runtime,
    pipeline: Pipeline,
    recorder: Arc<LatencyRecorder>,
    staging_sink: Arc<MemorySink>,
    data_dir: Option<PathBuf>,
}

impl System {
    /// Everything in memory.
    pub fn in_memory(config: Config, clock: SharedClock, sink: SinkChoice) -> Result<Self, HarnessError> {
        Self::build(config, clock, sink, false)
    }

    /// Broker logs and store contents under `storage.data_dir`.
    pub fn persistent(config: Config, clock: SharedClock, sink: SinkChoice) -> Result<Self, HarnessError> {
        Self::build(config, clock, sink, true)
    }

    fn build(config: Config, clock: SharedClock, sink: SinkChoice, persistent: bool) -> Result<Self, HarnessError> {
        config.validate()?;
        let data_dir = persistent.then(|| config.storage.data_dir.clone());
        let store = match &data_dir {
            Some(dir) => Store::open(clock.clone(), dir.join("store"))?,
            None => Store::in_memory(clock.clone()),
        };
        let broker = Broker::open(config.broker_config(persistent))?;
        let runtime = Runtime::new(broker, store, clock.clone(), config.runtime_config());
        let sink: Arc<dyn Sink> = match sink {
            SinkChoice::Custom(s) => s,
            SinkChoice::FromConfig => match config.sink.kind {
                SinkKind::File => Arc::new(FileSink::open(config.sink_path())?),
                SinkKind::Http => Arc::new(HttpSink::new(config.sink.target.clone())?),
                SinkKind::Memory => Arc::new(MemorySink::new()),
            },
        };
        let recorder = Arc::new(LatencyRecorder::new(clock));
        let staging_sink = Arc::new(MemorySink::new());
        let pipeline = pipeline::install(
            &runtime,
            &config.pipeline_settings(),
            EnvironmentWiring::new(sink).with_recorder(recorder.clone()),
            Some(EnvironmentWiring::new(staging_sink.clone())),
        )?;
        Ok(Self {
            config,
            runtime,
            pipeline,
            recorder,
            staging_sink,
            data_dir,
        })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn runtime(&self) -> &Runtime {
        &self.runtime
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn recorder(&self) -> &Arc<LatencyRecorder> {
        &self.recorder
    }

    pub fn staging_sink(&self) -> &Arc<MemorySink> {
        &self.staging_sink
    }

    /// POSTs `body` to the ingest route as if it arrived now.
    pub fn ingest(&self, body: Vec<u8>) -> IngressResponse {
        let at = self.runtime.clock().now();
        self.ingest_at(body, at)
    }

    pub fn ingest_at(&self, body: Vec<u8>, at: crate::clock::Timestamp) -> IngressResponse {
        self.runtime
            .http_ingress_at(INGEST_ROUTE, body.into(), &BTreeMap::new(), at)
    }

    pub fn ingest_event(&self, event: &WorkloadEvent) -> IngressResponse {
        self.ingest_at(event.body(), event.at)
    }

    /// Receipt ids of every request accepted on the ingest route: those
    /// layer 0 has marked plus those still waiting on the ingress topic.
    pub fn accepted(&self) -> Vec<String> {
        let broker = self.runtime.broker();
        let mut ids: BTreeSet<String> = self.recorder.ingress_receipts().into_iter().collect();
        if let Some(t) = self.runtime.ingress_topic(INGEST_ROUTE) {
            ids.extend(
                broker
                    .read_all(&t)
                    .iter()
                    .filter_map(|m| m.header(HEADER_RECEIPT_ID).map(str::to_owned)),
            );
        }
        ids.into_iter().collect()
    }

    /// Receipt ids found on production dead-letter topics.
    pub fn dead_lettered(&self) -> Vec<String> {
        let broker = self.runtime.broker();
        let prefix = format!("{}/", Environment::Production.namespace());
        broker
            .topic_names()
            .into_iter()
            .filter(|t| t.starts_with(&prefix) && t.ends_with(DLQ_SUFFIX))
            .filter_map(|t| broker.topic(&t).ok())
            .flat_map(|t| broker.read_all(&t))
            .filter_map(|m| m.header(HEADER_RECEIPT_ID).map(str::to_owned))
            .collect()
    }

    /// Compares accepted receipts with every production exit.
    pub fn conservation(&self) -> Conservation {
        let accepted = self.accepted();
        let mut exits: BTreeMap<String, usize> = BTreeMap::new();
        let mut reported = 0;
        let mut saved = 0;
        for r in self.recorder.records() {
            match r.kind {
                EgressKind::Reported => reported += 1,
                EgressKind::Saved => saved += 1,
            }
            *exits.entry(r.receipt_id).or_default() += 1;
        }
        let dlq = self.dead_lettered();
        for id in &dlq {
            *exits.entry(id.clone()).or_default() += 1;
        }
        let accepted_set: BTreeSet<&String> = accepted.iter().collect();
        let missing = accepted
            .iter()
            .filter(|id| !exits.contains_key(*id))
            .cloned()
            .collect();
        let duplicated = exits
            .iter()
            .filter(|(id, n)| **n > 1 || !accepted_set.contains(id))
            .map(|(id, _)| id.clone())
            .collect();
        Conservation {
            accepted: accepted.len(),
            reported,
            saved,
            dead_lettered: dlq.len(),
            missing,
            unexpected: duplicated,
        }
    }

    pub fn metrics_path(&self) -> Option<PathBuf> {
        self.data_dir.as_deref().map(super::config::metrics_path)
    }

    pub fn save_metrics(&self, path: &Path) -> Result<(), HarnessError> {
        Ok(self.recorder.save(path)?)
    }

    /// Stops intake, drains and, for persistent systems, saves the timing
    /// records. Returns whether the drain finished in time.
    pub fn shutdown(&self, drain_timeout: Duration) -> Result<bool, HarnessError> {
        let drained = self.runtime.shutdown(drain_timeout);
        if let Some(path) = self.metrics_path() {
            self.save_metrics(&path)?;
            info!(path = %path.display(), records = self.recorder.records().len(), "timings saved");
        }
        Ok(drained)
    }
}

/// Outcome of the accepted = reported + saved + dead-lettered check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conservation {
    pub accepted: usize,
    pub reported: usize,
    pub saved: usize,
    pub dead_lettered: usize,
    /// Accepted receipts with no exit.
    pub missing: Vec<String>,
    /// Receipts that exited more than once or were never accepted.
    pub unexpected: Vec<String>,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.missing.is_empty()
            && self.unexpected.is_empty()
            && self.accepted == self.reported + self.saved + self.dead_lettered
    }
}

impl std::fmt::Display for Conservation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "accepted {} = reported {} + saved {} + dead-lettered {} ({}; {} missing, {} unexpected)",
            self.accepted,
            self.reported,
            self.saved,
            self.dead_lettered,
            if self.holds() { "holds" } else { "violated" },
            self.missing.len(),
            self.unexpected.len()
        )
    }
}

/// How a simulation advances time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Drive {
    /// Background workers on a flowing clock. The clock jumps to each
    /// arrival once the pipeline is idle, so latencies are real processing
    /// time.
    Background,
    /// Frozen clock; the pipeline is drained synchronously every `every`
    /// arrivals. Latencies are not meaningful.
    Stepped { every: usize },
}

#[derive(Debug)]
pub struct SimulationOutcome {
    pub conservation: Conservation,
    pub rejected: usize,
    pub wall_time: Duration,
    pub drained: bool,
}

/// Clock suited to `drive`, starting at the default epoch.
pub fn simulation_clock(drive: Drive) -> Arc<SimClock> {
    let start = SimClock::default_epoch();
    Arc::new(match drive {
        Drive::Background => SimClock::flowing(start),
        Drive::Stepped { .. } => SimClock::manual(start),
    })
}

/// Replays `events` through `system`, whose runtime must run on `clock`.
pub fn simulate(
    system: &System,
    clock: &SimClock,
    events: &[WorkloadEvent],
    drive: Drive,
    idle_timeout: Duration,
) -> SimulationOutcome {
    let started = Instant::now();
    let runtime = system.runtime();
    let mut rejected = 0;
    let mut drained = true;
    match drive {
        Drive::Background => {
            runtime.start();
            for e in events {
                drained &= runtime.wait_idle(idle_timeout);
                clock.advance_to(e.at);
                if system.ingest_at(e.body(), clock.now()).status != 202 {
                    rejected += 1;
                }
            }
            drained &= runtime.wait_idle(idle_timeout);
        }
        Drive::Stepped { every } => {
            for (i, e) in events.iter().enumerate() {
                clock.advance_to(e.at);
                runtime.tick_timers();
                if system.ingest_at(e.body(), e.at).status != 202 {
                    rejected += 1;
                }
                if (i + 1) % every.max(1) == 0 {
                    runtime.run_until_idle();
                }
            }
            runtime.run_until_idle();
        }
    }
    SimulationOutcome {
        conservation: system.conservation(),
        rejected,
        wall_time: started.elapsed(),
        drained,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::workload::{generate, WorkloadConfig};

    fn small_config() -> Config {
        let mut c = Config::default();
        c.pipeline.feature_dim = 64;
        c
    }

    #[test]
    fn stepped_simulation_conserves_messages() {
        let drive = Drive::Stepped { every: 25 };
        let clock = simulation_clock(drive);
        let sink = Arc::new(MemorySink::new());
        let mut config = small_config();
        config.storage.retention_floor = 10;
        let system = System::in_memory(config, clock.clone(), SinkChoice::Custom(sink.clone())).unwrap();
        let events = generate(&WorkloadConfig {
            duration_secs: 120.0,
            ..Default::default()
        });
        let out = simulate(&system, &clock, &events, drive, Duration::from_secs(10));
        assert!(out.conservation.holds(), "{}", out.conservation);
        assert_eq!(out.conservation.accepted, events.len());
        let triggered = crate::harness::workload::incident_count(&events);
        assert_eq!(out.conservation.reported, triggered);
        assert_eq!(sink.len(), triggered);
    }

    #[test]
    fn background_simulation_measures_latency() {
        let drive = Drive::Background;
        let clock = simulation_clock(drive);
        let system = System::in_memory(small_config(), clock.clone(), SinkChoice::Custom(Arc::new(MemorySink::new()))).unwrap();
        let events = generate(&WorkloadConfig {
            duration_secs: 30.0,
            ..Default::default()
        });
        let out = simulate(&system, &clock, &events, drive, Duration::from_secs(10));
        assert!(out.drained);
        assert!(system.shutdown(Duration::from_secs(5)).unwrap());
        assert!(out.conservation.holds(), "{}", out.conservation);
        let d = system.recorder().durations(EgressKind::Reported);
        assert!(!d.is_empty());
        assert!(d.iter().all(|&x| (0.0..5.0).contains(&x)), "{d:?}");
    }
}
