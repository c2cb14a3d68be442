//! The whole pipeline with retraining: replay a day of incidents, let the
//! timer build a training set, and watch the classifier pick up the model.
//!
//! ```bash
//! cargo run --release --example end_to_end
//! ```

use std::sync::Arc;
use std::time::Duration;

use alertpipe::harness::system::{simulate, simulation_clock, Drive, SinkChoice, System};
use alertpipe::harness::workload::{generate, incident_count, WorkloadConfig};
use alertpipe::harness::Config;
use alertpipe::pipeline::serving::load_evaluation;
use alertpipe::pipeline::MemorySink;
use alertpipe::runtime::Environment;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.pipeline.feature_dim = 256;
    config.pipeline.retrain_period_secs = 3 * 3600;
    config.model.trees = 30;
    let drive = Drive::Stepped { every: 100 };
    let clock = simulation_clock(drive);
    let sink = Arc::new(MemorySink::new());
    let system = System::in_memory(config, clock.clone(), SinkChoice::Custom(sink.clone()))?;

    let events = generate(&WorkloadConfig {
        rate_per_minute: 5.0,
        duration_secs: 12.0 * 3600.0,
        ..Default::default()
    });
    println!("{} incidents, {} webhook deliveries", incident_count(&events), events.len());
    let outcome = simulate(&system, &clock, &events, drive, Duration::from_secs(30));
    println!("{}", outcome.conservation);

    let store = system.runtime().store().scoped(Environment::Production.namespace());
    match load_evaluation(&store) {
        Some(ev) => println!("model v{} holdout AUC {:.3}", ev.version, ev.auc),
        None => println!("no model trained yet"),
    }
    for post in sink.posts().iter().rev().take(3) {
        println!("sink: {}", post["text"]);
    }
    println!("staging received {} notifications", system.staging_sink().len());
    Ok(())
}
