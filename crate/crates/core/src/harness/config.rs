//! TOML configuration with `<SECTION>_<KEY>` environment overrides.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{BrokerConfig, DEFAULT_RETENTION_FLOOR, MAX_MESSAGE_BYTES};
use crate::model::ForestParams;
use crate::pipeline::{Featurizer, PipelineSettings, RetrainSettings};
use crate::runtime::{DeliveryMode, RuntimeConfig};

use super::workload::WorkloadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid value for {field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    fn invalid(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.to_owned(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Number of input sources (L).
    pub sources: usize,
    /// Number of models (N); one is exercised.
    pub models: usize,
    /// Number of topics of interest (X).
    pub topics_of_interest: usize,
    pub sample_divisor: u64,
    pub claim_threshold: usize,
    pub delivery_mode: DeliveryMode,
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub batch_size: usize,
    pub retrain_period_secs: u64,
    /// 0 trains on all history.
    pub training_window_secs: u64,
    pub feature_dim: usize,
    pub hash_seed: u64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            sources: 1,
            models: 1,
            topics_of_interest: 1,
            sample_divisor: 100,
            claim_threshold: crate::store::DEFAULT_CLAIM_THRESHOLD,
            delivery_mode: DeliveryMode::Ack,
            max_retries: crate::broker::DEFAULT_MAX_RETRIES,
            max_concurrency: crate::runtime::DEFAULT_MAX_CONCURRENCY,
            batch_size: 1,
            retrain_period_secs: 6 * 3600,
            training_window_secs: 0,
            feature_dim: crate::pipeline::FEATURE_DIM,
            hash_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub trees: usize,
    pub max_depth: usize,
    pub min_split: usize,
    /// 0 means `floor(sqrt(d))`.
    pub features_per_split: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let p = ForestParams::default();
        Self {
            trees: p.n_trees,
            max_depth: p.max_depth,
            min_split: p.min_split,
            features_per_split: 0,
            seed: 42,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinkKind {
    File,
    Http,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkSection {
    pub kind: SinkKind,
    /// File path (relative paths live under the data directory) or URL.
    pub target: String,
}

impl Default for SinkSection {
    fn default() -> Self {
        Self {
            kind: SinkKind::File,
            target: "sink.ndjson".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageSection {
    pub data_dir: PathBuf,
    pub retention_floor: usize,
}

impl Default for StorageSection {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            retention_floor: DEFAULT_RETENTION_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub rate_per_minute: f64,
    pub duration_secs: f64,
    pub seed: u64,
    pub services: usize,
    pub metrics: usize,
    pub true_fraction: f64,
    pub signal_strength: f64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        let w = WorkloadConfig::default();
        Self {
            rate_per_minute: w.rate_per_minute,
            duration_secs: w.duration_secs,
            seed: w.seed,
            services: w.services,
            metrics: w.metrics,
            true_fraction: w.true_fraction,
            signal_strength: w.signal_strength,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub server: ServerSection,
    pub pipeline: PipelineSection,
    pub model: ModelSection,
    pub sink: SinkSection,
    pub storage: StorageSection,
    pub workload: WorkloadSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_with_env(&text, &path.display().to_string(), |k| std::env::var(k).ok())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::parse_with_env(text, "<config>", |_| None)
    }

    /// Parses `text`, then applies overrides named `<SECTION>_<KEY>` (upper
    /// case) looked up through `env`. Override values are read as TOML
    /// scalars, falling back to plain strings.
    pub fn parse_with_env(
        text: &str,
        origin: &str,
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, ConfigError> {
        toml::from_str::<Config>(text).map_err(|e| parse_error(origin, text, &e))?;
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_error(origin, text, &e))?;
        let defaults = toml::Table::try_from(Config::default()).expect("defaults serialize");
        for (section, keys) in &defaults {
            let Some(keys) = keys.as_table() else { continue };
            for key in keys.keys() {
                let var = format!("{section}_{key}").to_uppercase();
                let Some(raw) = env(&var) else { continue };
                let value = parse_scalar(&raw);
                table
                    .entry(section.clone())
                    .or_insert_with(|| toml::Value::Table(Default::default()))
                    .as_table_mut()
                    .ok_or_else(|| ConfigError::invalid(section, "expected a table"))?
                    .insert(key.clone(), value);
            }
        }
        let config: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            ConfigError::invalid(&field_of(&e), e.message().to_owned())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.pipeline;
        for (field, v) in [
            ("pipeline.sources", p.sources),
            ("pipeline.models", p.models),
            ("pipeline.topics_of_interest", p.topics_of_interest),
            ("pipeline.max_concurrency", p.max_concurrency),
            ("pipeline.batch_size", p.batch_size),
            ("model.trees", self.model.trees),
            ("model.max_depth", self.model.max_depth),
            ("workload.services", self.workload.services),
            ("workload.metrics", self.workload.metrics),
        ] {
            if v < 1 {
                return Err(ConfigError::invalid(field, "must be at least 1"));
            }
        }
        if p.sample_divisor < 1 {
            return Err(ConfigError::invalid("pipeline.sample_divisor", "must be at least 1"));
        }
        if p.claim_threshold > MAX_MESSAGE_BYTES {
            return Err(ConfigError::invalid(
                "pipeline.claim_threshold",
                format!("must not exceed the message cap of {MAX_MESSAGE_BYTES} bytes"),
            ));
        }
        if p.retrain_period_secs == 0 {
            return Err(ConfigError::invalid("pipeline.retrain_period_secs", "must be positive"));
        }
        Featurizer::new(p.feature_dim, p.hash_seed)
            .map_err(|e| ConfigError::invalid("pipeline.feature_dim", e.to_string()))?;
        if self.model.min_split < 2 {
            return Err(ConfigError::invalid("model.min_split", "must be at least 2"));
        }
        let w = &self.workload;
        if !(0.0..=600.0).contains(&w.rate_per_minute) {
            return Err(ConfigError::invalid("workload.rate_per_minute", "must be within 0..=600"));
        }
        if !(w.duration_secs >= 0.0 && w.duration_secs.is_finite()) {
            return Err(ConfigError::invalid("workload.duration_secs", "must be non-negative"));
        }
        for (field, v) in [
            ("workload.true_fraction", w.true_fraction),
            ("workload.signal_strength", w.signal_strength),
            ("model.holdout_fraction", self.model.holdout_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::invalid(field, "must be within 0..=1"));
            }
        }
        self.bind_addr()?;
        Ok(())
    }

    pub fn bind_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.server
            .bind
            .parse()
            .map_err(|e: std::net::AddrParseError| ConfigError::invalid("server.bind", e.to_string()))
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.model.trees,
            max_depth: self.model.max_depth,
            min_split: self.model.min_split,
            features_per_split: (self.model.features_per_split > 0).then_some(self.model.features_per_split),
            seed: self.model.seed,
        }
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        let p = &self.pipeline;
        PipelineSettings {
            sample_divisor: p.sample_divisor,
            claim_threshold: p.claim_threshold,
            delivery_mode: p.delivery_mode,
            batch_size: p.batch_size,
            retrain_period: Duration::from_secs(p.retrain_period_secs),
            training_window: (p.training_window_secs > 0).then(|| Duration::from_secs(p.training_window_secs)),
            featurizer: Featurizer::new(p.feature_dim, p.hash_seed).expect("validated"),
            retrain: RetrainSettings {
                forest: self.forest_params(),
                holdout_fraction: self.model.holdout_fraction,
            },
        }
    }

    pub fn runtime_config(&self) -> RuntimeConfig {
        RuntimeConfig {
            max_concurrency: self.pipeline.max_concurrency,
            ..Default::default()
        }
    }

    pub fn broker_config(&self, persistent: bool) -> BrokerConfig {
        BrokerConfig {
            max_retries: self.pipeline.max_retries,
            retention_floor: self.storage.retention_floor,
            data_dir: persistent.then(|| self.storage.data_dir.join("broker")),
        }
    }

    pub fn workload_config(&self) -> WorkloadConfig {
        let w = &self.workload;
        WorkloadConfig {
            rate_per_minute: w.rate_per_minute,
            duration_secs: w.duration_secs,
            seed: w.seed,
            services: w.services,
            metrics: w.metrics,
            true_fraction: w.true_fraction,
            signal_strength: w.signal_strength,
            ..WorkloadConfig::default()
        }
    }

    /// Sink file path, resolved against the data directory when relative.
    pub fn sink_path(&self) -> PathBuf {
        let t = Path::new(&self.sink.target);
        if t.is_absolute() {
            t.to_owned()
        } else {
            self.storage.data_dir.join(t)
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        metrics_path(&self.storage.data_dir)
    }

    /// The documented defaults as TOML.
    pub fn default_toml() -> String {
        toml::to_string_pretty(&Config::default()).expect("defaults serialize")
    }
}

pub fn metrics_path(data_dir: &Path) -> PathBuf {
    data_dir.join("metrics").join("timings.json")
}

fn parse_scalar(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    toml::from_str::<toml::Table>(&probe)
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn parse_error(origin: &str, text: &str, e: &toml::de::Error) -> ConfigError {
    let (line, column) = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            (line, column)
        }
        None => (0, 0),
    };
    ConfigError::Parse {
        path: origin.to_owned(),
        line,
        column,
        message: e.message().trim().to_owned(),
    }
}

/// Best-effort field name from a deserialization message.
fn field_of(e: &toml::de::Error) -> String {
    let msg = e.message();
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = msg.split(marker).nth(1) {
            return rest.split('`').next().unwrap_or("").to_owned();
        }
    }
    "config".to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        let round = Config::parse(&Config::default_toml()).unwrap();
        assert_eq!(round, Config::default());
    }

    #[test]
    fn values_are_read() {
        let c = Config::parse(
            "[pipeline]\nsample_divisor = 10\ndelivery_mode = \"fire-and-forget\"\n[sink]\nkind = \"http\"\ntarget = \"http://localhost:9/x\"\n",
        )
        .unwrap();
        assert_eq!(c.pipeline.sample_divisor, 10);
        assert_eq!(c.pipeline.delivery_mode, DeliveryMode::FireAndForget);
        assert_eq!(c.sink.kind, SinkKind::Http);
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = Config::parse("[pipeline]\nsample_divisor = 10\nbatch_size = = 3\n").unwrap_err();
        let ConfigError::Parse { line, .. } = err else { panic!("{err}") };
        assert_eq!(line, 3);
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let err = Config::parse("[server]\nbind = \"127.0.0.1:1\"\n[pipeline]\nsample_divsor = 10\n").unwrap_err();
        assert!(err.to_string().contains("sample_divsor"), "{err}");
        assert!(matches!(err, ConfigError::Parse { line: 4, .. }), "{err}");
        let err = Config::parse("[pipeline]\nsample_divisor = 0\n").unwrap_err();
        assert!(err.to_string().contains("pipeline.sample_divisor"), "{err}");
        let err = Config::parse("[workload]\nrate_per_minute = 601\n").unwrap_err();
        assert!(err.to_string().contains("workload.rate_per_minute"), "{err}");
        let err = Config::parse("[pipeline]\nclaim_threshold = 2000000\n").unwrap_err();
        assert!(err.to_string().contains("claim_threshold"), "{err}");
    }

    #[test]
    fn environment_overrides_keys() {
        let env = |k: &str| match k {
            "PIPELINE_SAMPLE_DIVISOR" => Some("7".to_string()),
            "SINK_TARGET" => Some("/tmp/out.ndjson".to_string()),
            "PIPELINE_DELIVERY_MODE" => Some("fire-and-forget".to_string()),
            _ => None,
        };
        let c = Config::parse_with_env("[pipeline]\nsample_divisor = 100\n", "t", env).unwrap();
        assert_eq!(c.pipeline.sample_divisor, 7);
        assert_eq!(c.sink.target, "/tmp/out.ndjson");
        assert_eq!(c.pipeline.delivery_mode, DeliveryMode::FireAndForget);
    }
}
