//! Topics, consumer groups, cumulative commits and redelivery.
//!
//! ```bash
//! cargo run --example broker_basics
//! ```

use alertpipe::broker::{Broker, Message, NackOutcome};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let broker = Broker::in_memory();
    let topic = broker.create_topic("production/orders")?;

    let offsets = broker.publish_batch(
        &topic,
        (0..5).map(|i| Message::new(format!("order {i}")).with_key("k")).collect(),
    )?;
    println!("appended offsets {offsets:?}");

    let billing = broker.subscribe("billing", "production/orders")?;
    let audit = broker.subscribe("audit", "production/orders")?;

    let batch = broker.poll(&billing, 3)?;
    for m in &batch {
        println!("billing got #{} {:?}", m.offset, String::from_utf8_lossy(&m.payload));
    }
    broker.commit(&billing, batch.last().unwrap().offset)?;

    // A failed message comes back until retries run out.
    let next = broker.poll(&billing, 1)?.remove(0);
    loop {
        match broker.nack(&billing, next.offset)? {
            NackOutcome::Requeued { retries } => {
                println!("offset {} requeued (retry {retries})", next.offset);
                broker.poll(&billing, 1)?;
            }
            NackOutcome::DeadLettered { dlq_topic, retries } => {
                println!("offset {} moved to {dlq_topic} after {retries} failed deliveries", next.offset);
                break;
            }
        }
    }

    println!("billing: {:?}", broker.status(&billing)?);
    println!("audit sees all {} messages independently", broker.poll(&audit, 100)?.len());
    Ok(())
}
