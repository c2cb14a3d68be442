//! Ack versus fire-and-forget triggers against a sink that fails 10% of the time.
//!
//! ```bash
//! cargo run --example delivery_modes
//! ```

use std::sync::Arc;

use alertpipe::broker::{Broker, Message};
use alertpipe::clock::SystemClock;
use alertpipe::pipeline::{FlakySink, MemorySink, Sink};
use alertpipe::runtime::{DeliveryMode, Environment, FunctionSpec, Invocation, Runtime, RuntimeConfig, Trigger};
use alertpipe::store::Store;
use serde_json::json;

fn run(mode: DeliveryMode) -> Result<(usize, u64), Box<dyn std::error::Error>> {
    let clock = SystemClock::shared();
    let runtime = Runtime::new(Broker::in_memory(), Store::in_memory(clock.clone()), clock, RuntimeConfig::default());
    let sink = Arc::new(FlakySink::random(MemorySink::new(), 0.10, 7));
    let topic = runtime.create_topic(Environment::Test, "alerts")?;

    let out = sink.clone();
    let f = runtime.register_function(FunctionSpec::new("notify", 7, Environment::Test, move |_, inv| {
        let Invocation::Messages(batch) = inv else { return Ok(()) };
        for m in batch {
            out.post(&json!({ "text": String::from_utf8_lossy(&m.payload) }))?;
        }
        Ok(())
    }))?;
    runtime.attach_trigger(&f, Trigger::topic("alerts", mode))?;

    for i in 0..1000 {
        runtime.broker().publish(&topic, Message::new(format!("alert {i}")))?;
    }
    runtime.run_until_idle();
    Ok((sink.inner().len(), runtime.stats(&f).messages_lost))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for mode in [DeliveryMode::Ack, DeliveryMode::FireAndForget] {
        let (delivered, lost) = run(mode)?;
        println!("{mode:?}: {delivered} of 1000 delivered, {lost} lost");
    }
    Ok(())
}
