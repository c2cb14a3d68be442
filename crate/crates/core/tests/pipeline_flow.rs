use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use alertpipe::broker::{HEADER_DLQ_REASON, MAX_MESSAGE_BYTES};
use alertpipe::clock::SimClock;
use alertpipe::harness::system::{simulate, simulation_clock, Drive, SinkChoice, System};
use alertpipe::harness::workload::{generate, incident_count, WorkloadConfig};
use alertpipe::harness::Config;
use alertpipe::metrics::EgressKind;
use alertpipe::pipeline::{EventKind, FlakySink, MemorySink, Webhook, L1_INPUT};
use alertpipe::runtime::Environment;
use serde_json::Value;

fn config() -> Config {
    let mut c = Config::default();
    c.pipeline.feature_dim = 64;
    c.model.trees = 10;
    c
}

fn stepped(sink: SinkChoice) -> (System, Arc<SimClock>, Drive) {
    let drive = Drive::Stepped { every: 20 };
    let clock = simulation_clock(drive);
    (System::in_memory(config(), clock.clone(), sink).unwrap(), clock, drive)
}

fn incident_of(post: &Value) -> String {
    post["text"].as_str().unwrap().split(':').next().unwrap().to_owned()
}

#[test]
fn each_incident_is_notified_once_across_a_sink_outage() {
    let sink = Arc::new(FlakySink::failing_first(MemorySink::new(), 3));
    let (system, clock, drive) = stepped(SinkChoice::Custom(sink.clone()));
    let events = generate(&WorkloadConfig {
        duration_secs: 60.0,
        ..Default::default()
    });
    let out = simulate(&system, &clock, &events, drive, Duration::from_secs(10));
    assert!(out.conservation.holds(), "{}", out.conservation);

    let mut seen = BTreeMap::new();
    for p in sink.inner().posts() {
        *seen.entry(incident_of(&p)).or_insert(0) += 1;
    }
    assert_eq!(seen.len(), incident_count(&events));
    assert!(seen.values().all(|&n| n == 1), "{seen:?}");
}

#[test]
fn unconvertible_webhooks_are_dead_lettered_with_a_reason() {
    let (system, _clock, _) = stepped(SinkChoice::Custom(Arc::new(MemorySink::new())));
    let good = Webhook::new(
        EventKind::Triggered,
        "PA",
        SimClock::default_epoch(),
        "high",
        "svc-1",
        "cpu",
        99.0,
        90.0,
    );
    assert_eq!(system.ingest(good.to_bytes()).status, 202);
    assert_eq!(system.ingest(br#"{"event":"incident.trigger","incident":{}}"#.to_vec()).status, 202);
    assert_eq!(system.ingest(b"[1,2,3]".to_vec()).status, 202);
    assert_eq!(system.ingest(b"not json".to_vec()).status, 400);
    system.runtime().run_until_idle();

    let c = system.conservation();
    assert!(c.holds(), "{c}");
    assert_eq!((c.accepted, c.reported, c.dead_lettered), (3, 1, 2));

    let broker = system.runtime().broker();
    let dlq = broker.topic(&Environment::Production.topic(&format!("{L1_INPUT}.dlq"))).unwrap();
    for m in broker.read_all(&dlq) {
        assert!(m.header(HEADER_DLQ_REASON).is_some());
    }
}

#[test]
fn follow_up_events_are_saved_not_reported() {
    let sink = Arc::new(MemorySink::new());
    let (system, _clock, _) = stepped(SinkChoice::Custom(sink.clone()));
    let t0 = SimClock::default_epoch();
    for kind in [EventKind::Triggered, EventKind::Acknowledged, EventKind::Resolved, EventKind::Triggered] {
        let w = Webhook::new(kind, "PB", t0, "low", "svc-2", "mem", 70.0, 60.0);
        assert_eq!(system.ingest(w.to_bytes()).status, 202);
        system.runtime().run_until_idle();
    }
    let rec = system.recorder();
    assert_eq!(rec.count(EgressKind::Reported), 1);
    assert_eq!(rec.count(EgressKind::Saved), 3);
    assert_eq!(sink.len(), 1);
}

#[test]
fn staging_gets_every_hundredth_request() {
    let (system, _clock, _) = stepped(SinkChoice::Custom(Arc::new(MemorySink::new())));
    let t0 = SimClock::default_epoch();
    for i in 0..300 {
        let w = Webhook::new(EventKind::Triggered, &format!("PS{i}"), t0, "low", "svc-3", "disk", 1.5, 1.0);
        system.ingest(w.to_bytes());
    }
    system.runtime().run_until_idle();
    assert_eq!(system.recorder().count(EgressKind::Reported), 300);
    assert_eq!(system.staging_sink().len(), 3);
}

#[test]
fn near_cap_webhooks_stay_under_the_message_cap() {
    let (system, _clock, _) = stepped(SinkChoice::Custom(Arc::new(MemorySink::new())));
    let w = Webhook::new(EventKind::Triggered, "PBIG", SimClock::default_epoch(), "high", "svc-4", "cpu", 2.0, 1.0);
    let mut body: Value = serde_json::from_slice(&w.to_bytes()).unwrap();
    let base = serde_json::to_vec(&body).unwrap().len();
    body["padding"] = Value::String("z".repeat(MAX_MESSAGE_BYTES - base - 20));
    let bytes = serde_json::to_vec(&body).unwrap();
    assert!(bytes.len() <= MAX_MESSAGE_BYTES && bytes.len() > MAX_MESSAGE_BYTES - 64);
    assert_eq!(system.ingest(bytes).status, 202);
    system.runtime().run_until_idle();
    assert!(system.conservation().holds());
    let broker = system.runtime().broker();
    for name in broker.topic_names() {
        for m in broker.read_all(&broker.topic(&name).unwrap()) {
            assert!(m.payload.len() <= MAX_MESSAGE_BYTES, "{name}");
        }
    }
    assert_eq!(system.recorder().count(EgressKind::Reported), 1);
}
