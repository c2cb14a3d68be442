//! Ten simulated minutes at 120 alerts per minute, summarized as a latency table.
//!
//! ```bash
//! cargo run --release --example latency_report
//! ```

use std::sync::Arc;
use std::time::Duration;

use alertpipe::harness::report::render;
use alertpipe::harness::system::{simulate, simulation_clock, Drive, SinkChoice, System};
use alertpipe::harness::workload::{generate, WorkloadConfig};
use alertpipe::harness::{Config, ReportFormat};
use alertpipe::pipeline::MemorySink;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.pipeline.feature_dim = 256;
    let drive = Drive::Background;
    let clock = simulation_clock(drive);
    let system = System::in_memory(config, clock.clone(), SinkChoice::Custom(Arc::new(MemorySink::new())))?;
    let events = generate(&WorkloadConfig::default());
    let outcome = simulate(&system, &clock, &events, drive, Duration::from_secs(30));
    system.shutdown(Duration::from_secs(10))?;

    println!("{}", outcome.conservation);
    print!("{}", render(system.recorder(), None, ReportFormat::Table)?);
    println!("\nhistogram (first rows):");
    for line in render(system.recorder(), None, ReportFormat::Csv)?.lines().take(6) {
        println!("{line}");
    }
    Ok(())
}
