use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use alertpipe::clock::{seconds_between, SystemClock};
use alertpipe::harness::system::{simulate, simulation_clock, Drive, SinkChoice, System};
use alertpipe::harness::{self, Config, ConfigError, HarnessError, ReportFormat, WindowSpec, WorkloadConfig};
use alertpipe::http;
use alertpipe::metrics::EgressKind;
use alertpipe::pipeline::RetrainOutcome;
use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;
use tracing::{info, warn};

#[derive(Parser)]
#[command(name = "alertpipe", version, about = "Layered alert-monitoring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the ingest endpoint and run the pipeline until interrupted.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Replay the configured synthetic workload on a simulated clock.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "background")]
        drive: DriveArg,
    },
    /// Produce a synthetic incident stream.
    Generate {
        /// Mean incidents per minute (0 to 600).
        #[arg(long)]
        rate: f64,
        /// Seconds of triggers to generate.
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// POST each webhook to this URL on schedule.
        #[arg(long, conflicts_with = "out")]
        target: Option<String>,
        /// Write events as NDJSON to this file. Standard output otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time compression when posting; 0 posts as fast as possible.
        #[arg(long, default_value_t = 1.0)]
        speedup: f64,
        #[arg(long, default_value_t = 0.8)]
        signal: f64,
    },
    /// Retrain the production model from persisted incidents.
    Train {
        /// `all` or a trailing window such as `6h` or `7d`.
        #[arg(long, default_value = "all")]
        window: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        data_dir: Option<PathBuf>,
    },
    /// Summarize recorded latencies.
    Report {
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(long, value_enum, default_value = "table")]
        format: FormatArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        data_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DriveArg {
    Background,
    Stepped,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Reported,
    Saved,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("address {0} is already in use")]
    PortInUse(String),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Harness(HarnessError::Config(_)) => 1,
            _ => 2,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config } => run(&Config::load(&config)?),
        Command::Simulate { config, drive } => simulate_cmd(&Config::load(&config)?, drive),
        Command::Generate {
            rate,
            duration,
            seed,
            target,
            out,
            speedup,
            signal,
        } => generate(rate, duration, seed, signal, target, out, speedup),
        Command::Train {
            window,
            config,
            data_dir,
        } => train(&window, config, data_dir),
        Command::Report {
            kind,
            format,
            config,
            data_dir,
        } => report(kind, format, config, data_dir),
    }
}

fn run(config: &Config) -> Result<(), CliError> {
    let addr = config.bind_addr()?;
    let system = System::persistent(config.clone(), SystemClock::shared(), SinkChoice::FromConfig)?;
    let tokio = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    let listener = tokio.block_on(http::bind(addr)).map_err(|e| match e.kind() {
        io::ErrorKind::AddrInUse => CliError::PortInUse(addr.to_string()),
        _ => CliError::Io(e),
    })?;
    system.runtime().start();
    info!(%addr, route = http::INGEST_ROUTE, "listening");
    let served = tokio.block_on(http::serve(system.runtime().clone(), listener, async {
        let _ = tokio::signal::ctrl_c().await;
        info!("interrupt received, draining");
    }));
    let drained = system.shutdown(Duration::from_secs(30))?;
    if !drained {
        warn!("drain timed out with work outstanding");
    }
    eprintln!("{}", system.conservation());
    served.map_err(CliError::Io)
}

fn simulate_cmd(config: &Config, drive: DriveArg) -> Result<(), CliError> {
    let drive = match drive {
        DriveArg::Background => Drive::Background,
        DriveArg::Stepped => Drive::Stepped { every: 50 },
    };
    let clock = simulation_clock(drive);
    let system = System::persistent(config.clone(), clock.clone(), SinkChoice::FromConfig)?;
    let events = harness::generate(&config.workload_config());
    info!(events = events.len(), "replaying workload");
    let outcome = simulate(&system, &clock, &events, drive, Duration::from_secs(60));
    system.shutdown(Duration::from_secs(30))?;
    println!("{}", outcome.conservation);
    println!("wall time {:.1} s", outcome.wall_time.as_secs_f64());
    if !outcome.conservation.holds() {
        return Err(CliError::Runtime("message conservation violated".into()));
    }
    match harness::report::render(system.recorder(), None, ReportFormat::Table) {
        Ok(text) => print!("{text}"),
        Err(HarnessError::NoData(why)) => println!("no latency report: {why}"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn generate(
    rate: f64,
    duration: f64,
    seed: u64,
    signal: f64,
    target: Option<String>,
    out: Option<PathBuf>,
    speedup: f64,
) -> Result<(), CliError> {
    if !(0.0..=600.0).contains(&rate) {
        return Err(CliError::Usage(format!("--rate {rate} is outside 0..=600")));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(CliError::Usage(format!("--duration {duration} must be non-negative")));
    }
    if !(0.0..=1.0).contains(&signal) {
        return Err(CliError::Usage(format!("--signal {signal} is outside 0..=1")));
    }
    if speedup < 0.0 {
        return Err(CliError::Usage("--speedup must be non-negative".into()));
    }
    let events = harness::generate(&WorkloadConfig {
        rate_per_minute: rate,
        duration_secs: duration,
        seed,
        signal_strength: signal,
        ..WorkloadConfig::default()
    });
    if let Some(url) = target {
        return post_all(&events, &url, speedup);
    }
    let mut w: Box<dyn Write> = match &out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    for e in &events {
        serde_json::to_writer(&mut w, e).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    if let Some(path) = out {
        eprintln!("wrote {} events to {}", events.len(), path.display());
    }
    Ok(())
}

fn post_all(events: &[harness::WorkloadEvent], url: &str, speedup: f64) -> Result<(), CliError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let Some(first) = events.first() else {
        return Ok(());
    };
    let started = Instant::now();
    let (mut accepted, mut rejected) = (0usize, 0usize);
    for e in events {
        if speedup > 0.0 {
            let due = Duration::from_secs_f64(seconds_between(first.at, e.at) / speedup);
            if let Some(wait) = due.checked_sub(started.elapsed()) {
                std::thread::sleep(wait);
            }
        }
        let resp = client
            .post(url)
            .header("content-type", "application/json")
            .body(e.body())
            .send()
            .map_err(|err| CliError::Runtime(format!("{url}: {err}")))?;
        if resp.status().as_u16() == 202 {
            accepted += 1;
        } else {
            rejected += 1;
            warn!(status = %resp.status(), incident = %e.incident_id, "rejected");
        }
    }
    eprintln!("posted {} events: {accepted} accepted, {rejected} rejected", events.len());
    Ok(())
}

fn data_dir(config: Option<PathBuf>, data_dir: Option<PathBuf>) -> Result<(Config, PathBuf), CliError> {
    let config = match config {
        Some(path) => Config::load(&path)?,
        None => Config::default(),
    };
    let dir = data_dir.unwrap_or_else(|| config.storage.data_dir.clone());
    Ok((config, dir))
}

fn train(window: &str, config: Option<PathBuf>, dir: Option<PathBuf>) -> Result<(), CliError> {
    let window: WindowSpec = window.parse().map_err(CliError::Usage)?;
    let (config, dir) = data_dir(config, dir)?;
    require_dir(&dir)?;
    match harness::train_data_dir(&dir, SystemClock::shared(), &config.pipeline_settings(), window)? {
        RetrainOutcome::Trained { version, evaluation } => {
            println!("trained model v{version}");
            if let Some(ev) = evaluation {
                println!(
                    "ROC AUC {:.3} ({} training rows, {} held out)",
                    ev.auc, ev.train_rows, ev.holdout_rows
                );
            }
            Ok(())
        }
        RetrainOutcome::Skipped(why) => Err(CliError::Runtime(format!("training skipped: {why}"))),
    }
}

fn report(kind: Option<KindArg>, format: FormatArg, config: Option<PathBuf>, dir: Option<PathBuf>) -> Result<(), CliError> {
    let (_, dir) = data_dir(config, dir)?;
    let kind = kind.map(|k| match k {
        KindArg::Reported => EgressKind::Reported,
        KindArg::Saved => EgressKind::Saved,
    });
    let format = match format {
        FormatArg::Table => ReportFormat::Table,
        FormatArg::Csv => ReportFormat::Csv,
    };
    print!("{}", harness::report(&dir, kind, format)?);
    Ok(())
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(HarnessError::NoData(format!("data directory {} does not exist", dir.display())).into())
    }
}
