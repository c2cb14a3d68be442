//! The HTTP ingest endpoint on an ephemeral port, exercised with real requests.
//!
//! ```bash
//! cargo run --example http_ingest
//! ```

use std::sync::Arc;
use std::time::Duration;

use alertpipe::clock::{SimClock, SystemClock};
use alertpipe::harness::system::{SinkChoice, System};
use alertpipe::harness::Config;
use alertpipe::http::{self, INGEST_ROUTE};
use alertpipe::pipeline::{EventKind, MemorySink, Webhook};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = Config::default();
    config.pipeline.feature_dim = 64;
    let sink = Arc::new(MemorySink::new());
    let system = System::in_memory(config, SystemClock::shared(), SinkChoice::Custom(sink.clone()))?;
    system.runtime().start();

    let tokio = tokio::runtime::Runtime::new()?;
    let listener = tokio.block_on(http::bind("127.0.0.1:0".parse()?))?;
    let base = format!("http://{}", listener.local_addr()?);
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let server = tokio.spawn(http::serve(system.runtime().clone(), listener, async {
        let _ = stopped.await;
    }));

    let client = reqwest::blocking::Client::new();
    let alert = Webhook::new(
        EventKind::Triggered,
        "PX1",
        SimClock::default_epoch(),
        "high",
        "svc-0001",
        "cpu",
        97.0,
        90.0,
    );
    let cases: Vec<(&str, &str, Vec<u8>)> = vec![
        ("valid alert", INGEST_ROUTE, alert.to_bytes()),
        ("not JSON", INGEST_ROUTE, b"{oops".to_vec()),
        ("unknown route", "/api/v1/ingest/nagios", b"{}".to_vec()),
        ("oversized", INGEST_ROUTE, vec![b' '; 2 * 1024 * 1024]),
    ];
    for (what, route, body) in cases {
        let resp = client.post(format!("{base}{route}")).body(body).send()?;
        println!("{what:>14}: {} {}", resp.status().as_u16(), resp.text()?);
    }

    system.runtime().wait_idle(Duration::from_secs(10));
    println!("sink received {:?}", sink.posts());
    let _ = stop.send(());
    tokio.block_on(server)??;
    system.shutdown(Duration::from_secs(5))?;
    Ok(())
}
