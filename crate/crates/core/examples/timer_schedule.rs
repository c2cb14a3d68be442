//! Timer triggers on a simulated clock: reschedule, pause, and no catch-up.
//!
//! ```bash
//! cargo run --example timer_schedule
//! ```

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use alertpipe::broker::Broker;
use alertpipe::clock::{Clock, SimClock};
use alertpipe::runtime::{Environment, FunctionSpec, Runtime, RuntimeConfig, Trigger};
use alertpipe::store::Store;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = Arc::new(SimClock::manual(SimClock::default_epoch()));
    let runtime = Runtime::new(Broker::in_memory(), Store::in_memory(clock.clone()), clock.clone(), RuntimeConfig::default());
    let fired = Arc::new(AtomicUsize::new(0));
    let count = fired.clone();
    let f = runtime.register_function(FunctionSpec::new("retrain", 5, Environment::Test, move |ctx, _| {
        count.fetch_add(1, Ordering::SeqCst);
        println!("  fired at {}", ctx.now());
        Ok(())
    }))?;
    let timer = runtime.attach_trigger(&f, Trigger::timer(Duration::from_secs(3600)))?;

    println!("hourly for three hours:");
    for _ in 0..3 {
        clock.advance(Duration::from_secs(3600));
        runtime.tick_timers();
    }

    println!("reschedule to every 15 minutes, then pause for a day:");
    runtime.update_timer(timer, Duration::from_secs(900))?;
    clock.advance(Duration::from_secs(900));
    runtime.tick_timers();
    runtime.set_timer_enabled(timer, false)?;
    clock.advance(Duration::from_secs(86_400));
    runtime.tick_timers();
    runtime.set_timer_enabled(timer, true)?;
    clock.advance(Duration::from_secs(900));
    runtime.tick_timers();

    println!(
        "{} firings; next due {:?}, now {}",
        fired.load(Ordering::SeqCst),
        runtime.next_timer_due(),
        clock.now()
    );
    Ok(())
}
