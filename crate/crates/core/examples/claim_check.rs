//! Payloads above the threshold travel as tickets to the object store.
//!
//! ```bash
//! cargo run --example claim_check
//! ```

use std::sync::Arc;

use alertpipe::broker::{Broker, MAX_MESSAGE_BYTES};
use alertpipe::clock::SystemClock;
use alertpipe::pipeline::{unwrap_payload, wrap_payload, HEADER_CLAIM_CHECK};
use alertpipe::store::{Store, DEFAULT_CLAIM_THRESHOLD};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = Store::in_memory(Arc::new(SystemClock::new())).scoped("production");
    let broker = Broker::in_memory();
    let topic = broker.create_topic("production/blobs")?;
    let sub = broker.subscribe("reader", "production/blobs")?;

    for size in [1_000, DEFAULT_CLAIM_THRESHOLD, DEFAULT_CLAIM_THRESHOLD + 1, 8 * 1024 * 1024] {
        let payload = vec![b'x'; size];
        let msg = wrap_payload(&store, payload.clone(), DEFAULT_CLAIM_THRESHOLD)?;
        let ticketed = msg.header(HEADER_CLAIM_CHECK).is_some();
        println!(
            "{size:>9} bytes -> {:>6}-byte message ({}), cap {MAX_MESSAGE_BYTES}",
            msg.payload.len(),
            if ticketed { "ticket" } else { "inline" }
        );
        broker.publish(&topic, msg)?;
        let got = broker.poll(&sub, 1)?.remove(0);
        assert_eq!(unwrap_payload(&store, &got)?, payload);
        broker.ack(&sub, got.offset)?;
    }
    println!("{} objects parked in the store", store.unscoped().obj_count());
    Ok(())
}
