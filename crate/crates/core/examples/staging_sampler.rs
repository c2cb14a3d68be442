//! Layer 0 forwards every request to production and every N-th to staging.
//!
//! ```bash
//! cargo run --example staging_sampler
//! ```

use std::collections::BTreeMap;

use alertpipe::broker::Broker;
use alertpipe::clock::SystemClock;
use alertpipe::http::INGEST_ROUTE;
use alertpipe::pipeline::{install_layer0, PipelineSettings, L1_INPUT};
use alertpipe::runtime::{Environment, Runtime, RuntimeConfig};
use alertpipe::store::Store;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = SystemClock::shared();
    let runtime = Runtime::new(Broker::in_memory(), Store::in_memory(clock.clone()), clock, RuntimeConfig::default());
    let settings = PipelineSettings {
        sample_divisor: 100,
        ..Default::default()
    };
    install_layer0(&runtime, &settings, None)?;

    for i in 0..10_000 {
        let body = format!("{{\"n\":{i}}}");
        let resp = runtime.http_ingress(INGEST_ROUTE, body.into(), &BTreeMap::new());
        assert_eq!(resp.status, 202);
    }
    runtime.run_until_idle();

    for env in [Environment::Production, Environment::Staging] {
        let topic = runtime.broker().topic(&env.topic(L1_INPUT))?;
        println!("{:>40}: {}", topic.name(), runtime.broker().end_offset(&topic));
    }
    Ok(())
}
