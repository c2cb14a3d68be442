//! A layered alert-monitoring pipeline that runs on one machine.
//!
//! Odd layers are stateless functions and even layers are topics. An
//! embedded broker carries the topics, a small runtime dispatches topic,
//! timer and HTTP triggers, and document and object stores hold incidents,
//! datasets and models. The bundled use case ingests PagerDuty-style
//! webhooks, persists and enriches incidents, classifies them with a random
//! forest, posts notifications, and retrains on a timer.
//!
//! ## Examples
//!
//! ```text
//! examples/
//! ├── broker_basics.rs     topics, consumer groups, commits, dead letters
//! ├── claim_check.rs       oversized payloads travel as object-store tickets
//! ├── delivery_modes.rs    ack vs fire-and-forget against a flaky sink
//! ├── timer_schedule.rs    timers on a simulated clock, reschedule and pause
//! ├── staging_sampler.rs   layer 0 copies every N-th request to staging
//! ├── http_ingest.rs       the ingest endpoint and its status codes
//! ├── train_and_roc.rs     forest training and held-out ROC on synthetic data
//! ├── latency_report.rs    ten simulated minutes summarized as a latency table
//! └── end_to_end.rs        the whole pipeline with timer-driven retraining
//! ```
//!
//! ```bash
//! cargo run --example broker_basics
//! cargo run --release --example end_to_end
//! ```
//!
//! ## Modules
//!
//! - [`broker`]: append-only topics with consumer groups and dead-letter topics
//! - [`store`]: document store with a size cap, object store, claim tickets
//! - [`runtime`]: function registry, triggers, dispatch and HTTP ingress
//! - [`http`]: the axum front end for ingress
//! - [`pipeline`]: the concrete layers of the alert use case
//! - [`model`]: random forest and ROC
//! - [`metrics`]: latency marks, six-number summaries, histograms
//! - [`harness`]: configuration, workloads, simulations, reports
//! - [`clock`]: wall and simulated clocks

pub mod broker;
pub mod clock;
pub mod harness;
pub mod http;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod runtime;
pub mod store;
