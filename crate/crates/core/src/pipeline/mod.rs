//! The concrete layer functions of the alert-triage use case and their
//! wiring onto a [`Runtime`](crate::runtime::Runtime).
//!
//! ```text
//! POST /api/v1/ingest/pagerduty
//!   -> L0 sampler ----------------------------> staging/L1.input (every N-th)
//!   -> production/L1.input -> L1 convert -> L2.converted -> L3 persist+route
//!        -> L4.new-incidents -> L5 enrich -> L6.features -> L7 classify -> sink
//!   timer -> L5 build training set -> L6.retrain -> L7 retrain -> model/current
//! ```

pub mod event;
pub mod features;
mod install;
pub mod sampler;
pub mod serving;
pub mod sink;

use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;

use crate::broker::{Message, HEADER_INGRESS_TS, HEADER_RECEIPT_ID};
use crate::model::ModelError;
use crate::runtime::{DeliveryMode, RuntimeError};
use crate::store::{ClaimCheck, ClaimTicket, ScopedStore, StoreError, DEFAULT_CLAIM_THRESHOLD};

pub use event::{convert_pagerduty, ConversionError, EventKind, IncidentEvent, Webhook};
pub use features::{FeatureVector, Featurizer, FEATURE_DIM};
pub use install::{install, install_environment, install_layer0, raw_body, EnvironmentPipeline, EnvironmentWiring, Pipeline};
pub use sampler::sample_split;
pub use serving::{classify, retrain, ModelSlot, Prediction, RetrainOutcome, RetrainSettings};
pub use sink::{FileSink, FlakySink, HttpSink, MemorySink, Sink, SinkError};

pub const L1_INPUT: &str = "L1.input";
pub const L2_CONVERTED: &str = "L2.converted";
pub const L4_NEW_INCIDENTS: &str = "L4.new-incidents";
pub const L6_FEATURES: &str = "L6.features";
pub const L6_RETRAIN: &str = "L6.retrain";

/// Raw webhook bytes above this size are always parked in the object store
/// so a persisted event stays under the document cap.
pub const RAW_INLINE_LIMIT: usize = 512 * 1024;

/// Marks a message whose payload is a JSON [`ClaimTicket`].
pub const HEADER_CLAIM_CHECK: &str = "claim-check";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("sampling divisor must be at least 1")]
    InvalidN,
    #[error(transparent)]
    Conversion(#[from] ConversionError),
    #[error("no labeled incidents in the training window")]
    EmptyWindow,
    #[error("training dataset is unusable: {0}")]
    DatasetCorrupt(String),
    #[error("cannot decode payload: {0}")]
    Decode(String),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Sink(#[from] SinkError),
}

#[derive(Debug, Clone)]
pub struct PipelineSettings {
    /// Every `sample_divisor`-th ingress message is copied to staging.
    pub sample_divisor: u64,
    pub claim_threshold: usize,
    pub delivery_mode: DeliveryMode,
    pub batch_size: usize,
    pub retrain_period: Duration,
    /// How far back the training set reaches; `None` uses all history.
    pub training_window: Option<Duration>,
    pub featurizer: Featurizer,
    pub retrain: RetrainSettings,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            sample_divisor: 100,
            claim_threshold: DEFAULT_CLAIM_THRESHOLD,
            delivery_mode: DeliveryMode::Ack,
            batch_size: 1,
            retrain_period: Duration::from_secs(6 * 3600),
            training_window: None,
            featurizer: Featurizer::default(),
            retrain: RetrainSettings::default(),
        }
    }
}

/// Builds a topic message for `payload`, replacing it with a claim ticket
/// when it is larger than `threshold`.
pub fn wrap_payload(
    store: &ScopedStore,
    payload: impl Into<Bytes>,
    threshold: usize,
) -> Result<Message, PipelineError> {
    Ok(match store.claim_check_wrap(payload, threshold)? {
        ClaimCheck::Inline(bytes) => Message::new(bytes),
        ClaimCheck::Ticket(ticket) => {
            let json = serde_json::to_vec(&ticket).map_err(|e| PipelineError::Decode(e.to_string()))?;
            Message::new(json).with_header(HEADER_CLAIM_CHECK, "ticket")
        }
    })
}

/// Inverse of [`wrap_payload`].
pub fn unwrap_payload(store: &ScopedStore, message: &Message) -> Result<Bytes, PipelineError> {
    if message.header(HEADER_CLAIM_CHECK) == Some("ticket") {
        let ticket: ClaimTicket =
            serde_json::from_slice(&message.payload).map_err(|e| PipelineError::Decode(e.to_string()))?;
        Ok(store.resolve_ticket(&ticket)?)
    } else {
        Ok(message.payload.clone())
    }
}

/// Copies the tracing headers of `from` onto `to`.
pub fn carry_headers(from: &Message, mut to: Message) -> Message {
    for h in [HEADER_RECEIPT_ID, HEADER_INGRESS_TS] {
        if let Some(v) = from.header(h) {
            to = to.with_header(h, v);
        }
    }
    to
}
