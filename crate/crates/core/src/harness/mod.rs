//! Configuration, synthetic workloads, simulations and reporting around a
//! fully wired pipeline.

pub mod config;
pub mod report;
pub mod system;
pub mod train;
pub mod workload;

use thiserror::Error;

pub use config::{Config, ConfigError, SinkKind};
pub use report::{report, ReportFormat};
pub use system::{simulate, simulation_clock, Conservation, Drive, SimulationOutcome, SinkChoice, System};
pub use train::{train, train_data_dir, WindowSpec};
pub use workload::{generate, WorkloadConfig, WorkloadEvent};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("no data: {0}")]
    NoData(String),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Runtime(#[from] crate::runtime::RuntimeError),
    #[error(transparent)]
    Broker(#[from] crate::broker::BrokerError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Sink(#[from] crate::pipeline::SinkError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
