use std::sync::Arc;

use serde_json::json;
use tracing::{info, warn};

use crate::broker::{Message, HEADER_INGRESS_TS, HEADER_RECEIPT_ID, MAX_MESSAGE_BYTES};
use crate::clock::{chrono_duration, format_ts, parse_ts};
use crate::http::INGEST_ROUTE;
use crate::metrics::{EgressKind, LatencyRecorder, MetricsError};
use crate::runtime::{
    Environment, FunctionContext, FunctionHandle, FunctionSpec, HandlerError, HandlerResult, Invocation,
    Runtime, Trigger, TriggerHandle,
};
use crate::store::{ClaimCheck, ClaimTicket, TimeWindow};

use super::event::{convert_pagerduty, EventKind, IncidentEvent};
use super::features::{incident_key, FeatureVector};
use super::serving::{self, classify, retrain, ModelSlot, RetrainOutcome};
use super::sink::Sink;
use super::{
    carry_headers, sample_split, unwrap_payload, wrap_payload, PipelineError, PipelineSettings, L1_INPUT,
    L2_CONVERTED, L4_NEW_INCIDENTS, L6_FEATURES, L6_RETRAIN, RAW_INLINE_LIMIT,
};

/// Per-environment collaborators of the layer functions.
#[derive(Clone)]
pub struct EnvironmentWiring {
    pub sink: Arc<dyn Sink>,
    pub model: Arc<ModelSlot>,
    /// Egress marks go here; staging usually runs without one.
    pub recorder: Option<Arc<LatencyRecorder>>,
}

impl EnvironmentWiring {
    pub fn new(sink: Arc<dyn Sink>) -> Self {
        Self {
            sink,
            model: Arc::new(ModelSlot::new()),
            recorder: None,
        }
    }

    pub fn with_recorder(mut self, recorder: Arc<LatencyRecorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }
}

pub struct EnvironmentPipeline {
    pub environment: Environment,
    pub functions: Vec<FunctionHandle>,
    pub retrain_timer: TriggerHandle,
    pub wiring: EnvironmentWiring,
}

pub struct Pipeline {
    pub sampler: FunctionHandle,
    pub environments: Vec<EnvironmentPipeline>,
}

impl Pipeline {
    pub fn environment(&self, env: Environment) -> Option<&EnvironmentPipeline> {
        self.environments.iter().find(|p| p.environment == env)
    }
}

/// Layer 0 on the production ingest route plus a full pipeline for
/// production and, when given, staging.
pub fn install(
    runtime: &Runtime,
    settings: &PipelineSettings,
    production: EnvironmentWiring,
    staging: Option<EnvironmentWiring>,
) -> Result<Pipeline, PipelineError> {
    let sampler = install_layer0(runtime, settings, production.recorder.clone())?;
    let mut environments = vec![install_environment(runtime, Environment::Production, settings, production)?];
    if let Some(w) = staging {
        environments.push(install_environment(runtime, Environment::Staging, settings, w)?);
    }
    Ok(Pipeline { sampler, environments })
}

fn ok_unless_duplicate(r: Result<crate::metrics::TimingRecord, MetricsError>) -> HandlerResult {
    match r {
        Ok(_) | Err(MetricsError::DuplicateEgress(..)) => Ok(()),
        Err(e) => Err(HandlerError::new(e)),
    }
}

/// Registers the staging sampler on the HTTP ingest route. It marks ingress
/// and forwards every request to production, copying every N-th to staging.
pub fn install_layer0(
    runtime: &Runtime,
    settings: &PipelineSettings,
    recorder: Option<Arc<LatencyRecorder>>,
) -> Result<FunctionHandle, PipelineError> {
    sample_split(1, settings.sample_divisor)?;
    for env in [Environment::Production, Environment::Staging] {
        runtime.create_topic(env, L1_INPUT)?;
    }
    let n = settings.sample_divisor;
    let f = runtime.register_function(FunctionSpec::new(
        "sampler",
        0,
        Environment::Production,
        move |ctx, inv| {
            let Invocation::Http(req) = inv else {
                return Err(HandlerError::new("sampler expects HTTP requests"));
            };
            if let Some(rec) = &recorder {
                rec.mark_ingress(&req.receipt_id, req.ingress_ts);
            }
            let message = Message::new(req.body.clone())
                .with_header(HEADER_RECEIPT_ID, req.receipt_id.clone())
                .with_header(HEADER_INGRESS_TS, format_ts(req.ingress_ts));
            for env in sample_split(req.sequence, n)? {
                ctx.publish_to(env, L1_INPUT, message.clone())?;
            }
            Ok(())
        },
    ))?;
    runtime.attach_trigger(&f, Trigger::http(INGEST_ROUTE))?;
    Ok(f)
}

struct Shared {
    settings: PipelineSettings,
    wiring: EnvironmentWiring,
}

/// Registers layers 1 through 7 in `env`.
pub fn install_environment(
    runtime: &Runtime,
    env: Environment,
    settings: &PipelineSettings,
    wiring: EnvironmentWiring,
) -> Result<EnvironmentPipeline, PipelineError> {
    for topic in [L1_INPUT, L2_CONVERTED, L4_NEW_INCIDENTS, L6_FEATURES, L6_RETRAIN] {
        runtime.create_topic(env, topic)?;
    }
    let shared = Arc::new(Shared {
        settings: settings.clone(),
        wiring: wiring.clone(),
    });
    let mode = settings.delivery_mode;
    let batch = settings.batch_size;
    let mut functions = Vec::new();

    let mut on_topic = |name: &str, layer: u8, topic: &str, f: fn(&Shared, &FunctionContext<'_>, &Message) -> HandlerResult| {
        let s = shared.clone();
        let handle = runtime.register_function(FunctionSpec::new(name, layer, env, move |ctx, inv| {
            let Invocation::Messages(batch) = inv else {
                return Err(HandlerError::new("expected topic messages"));
            };
            for m in &batch {
                f(&s, ctx, m)?;
            }
            Ok(())
        }))?;
        runtime.attach_trigger(
            &handle,
            Trigger::Topic {
                topic: topic.to_owned(),
                mode,
                batch_size: batch,
            },
        )?;
        functions.push(handle);
        Ok::<_, PipelineError>(())
    };
    on_topic("convert-pagerduty", 1, L1_INPUT, convert_step)?;
    on_topic("persist-route", 3, L2_CONVERTED, route_step)?;
    on_topic("enrich", 5, L4_NEW_INCIDENTS, enrich_step)?;
    on_topic("classify-notify", 7, L6_FEATURES, classify_step)?;
    on_topic("retrain", 7, L6_RETRAIN, retrain_step)?;

    let s = shared.clone();
    let builder = runtime.register_function(FunctionSpec::new("build-training-set", 5, env, move |ctx, _| {
        training_step(&s, ctx)
    }))?;
    let retrain_timer = runtime.attach_trigger(&builder, Trigger::timer(settings.retrain_period))?;
    functions.push(builder);

    Ok(EnvironmentPipeline {
        environment: env,
        functions,
        retrain_timer,
        wiring,
    })
}

fn decode<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, PipelineError> {
    serde_json::from_slice(bytes).map_err(|e| PipelineError::Decode(e.to_string()))
}

fn encode<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, PipelineError> {
    serde_json::to_vec(value).map_err(|e| PipelineError::Decode(e.to_string()))
}

fn convert_step(s: &Shared, ctx: &FunctionContext<'_>, m: &Message) -> HandlerResult {
    let store = ctx.store();
    let receipt = m.receipt_id().unwrap_or_default().to_owned();
    let ingress = m
        .header(HEADER_INGRESS_TS)
        .and_then(parse_ts)
        .unwrap_or_else(|| ctx.now());
    let mut event = match convert_pagerduty(&m.payload, &receipt, ingress) {
        Ok(e) if !receipt.is_empty() => e,
        Ok(_) => {
            ctx.dead_letter(m, "missing receipt id")?;
            return Ok(());
        }
        Err(e) => {
            warn!(receipt = %receipt, error = %e, "conversion failed, dead-lettering");
            ctx.dead_letter(m, &e.to_string())?;
            return Ok(());
        }
    };
    let threshold = s.settings.claim_threshold.min(RAW_INLINE_LIMIT);
    event.raw = store.claim_check_wrap(m.payload.clone(), threshold)?;
    let out = wrap_payload(&store, encode(&event)?, s.settings.claim_threshold.min(MAX_MESSAGE_BYTES))?;
    ctx.publish(L2_CONVERTED, carry_headers(m, out))?;
    Ok(())
}

fn route_step(s: &Shared, ctx: &FunctionContext<'_>, m: &Message) -> HandlerResult {
    let store = ctx.store();
    let event: IncidentEvent = decode(&unwrap_payload(&store, m)?)?;
    store.doc_put_if_absent(&incident_key(&event), serde_json::to_value(&event)?)?;

    let forward = event.kind == EventKind::Triggered && {
        let marker = format!("forwarded/{}", event.incident_id);
        store.doc_put_if_absent(&marker, json!({ "receipt_id": event.receipt_id }))?
            || store.doc_get(&marker)?["receipt_id"] == event.receipt_id.as_str()
    };
    if forward {
        let out = wrap_payload(&store, encode(&event)?, s.settings.claim_threshold)?;
        ctx.publish(L4_NEW_INCIDENTS, carry_headers(m, out))?;
    } else if let Some(rec) = &s.wiring.recorder {
        ok_unless_duplicate(rec.mark_egress(&event.receipt_id, ctx.now(), crate::metrics::EgressKind::Saved))?;
    }
    Ok(())
}

fn enrich_step(s: &Shared, ctx: &FunctionContext<'_>, m: &Message) -> HandlerResult {
    let store = ctx.store();
    let event: IncidentEvent = decode(&unwrap_payload(&store, m)?)?;
    let fv = s.settings.featurizer.enrich(&store, &event)?;
    let out = wrap_payload(&store, encode(&fv)?, s.settings.claim_threshold)?;
    ctx.publish(L6_FEATURES, carry_headers(m, out))?;
    Ok(())
}

fn classify_step(s: &Shared, ctx: &FunctionContext<'_>, m: &Message) -> HandlerResult {
    let store = ctx.store();
    let fv: FeatureVector = decode(&unwrap_payload(&store, m)?)?;
    s.wiring.model.load_if_empty(&store)?;
    let prediction = classify(&s.wiring.model, &fv, ctx.now())?;
    let marker = format!("notified/{}", fv.receipt_id);
    if !store.doc_exists(&marker) {
        s.wiring.sink.post(&json!({ "text": prediction.text() }))?;
        store.doc_put(&marker, json!({ "incident_id": fv.incident_id }))?;
    }
    store.doc_put(&format!("prediction/{}", fv.incident_id), serde_json::to_value(&prediction)?)?;
    if let Some(rec) = &s.wiring.recorder {
        ok_unless_duplicate(rec.mark_egress(&fv.receipt_id, ctx.now(), EgressKind::Reported))?;
    }
    Ok(())
}

fn training_step(s: &Shared, ctx: &FunctionContext<'_>) -> HandlerResult {
    let store = ctx.store();
    let now = ctx.now();
    let window = match s.settings.training_window {
        Some(w) => TimeWindow {
            from: Some(now - chrono_duration(w)),
            until: None,
        },
        None => TimeWindow::all(),
    };
    match serving::build_training_set(&store, &s.settings.featurizer, window) {
        Ok(ticket) => {
            ctx.publish(L6_RETRAIN, Message::new(encode(&ticket)?))?;
            Ok(())
        }
        Err(PipelineError::EmptyWindow) => {
            info!(env = %ctx.environment(), "no labeled incidents, retraining round skipped");
            Ok(())
        }
        Err(e) => Err(HandlerError::new(e)),
    }
}

fn retrain_step(s: &Shared, ctx: &FunctionContext<'_>, m: &Message) -> HandlerResult {
    let ticket: ClaimTicket = decode(&m.payload)?;
    match retrain(&ctx.store(), &s.wiring.model, &ticket, &s.settings.retrain, ctx.now()) {
        Ok(RetrainOutcome::Trained { version, .. }) => {
            info!(env = %ctx.environment(), version, "retrained");
            Ok(())
        }
        Ok(RetrainOutcome::Skipped(_)) => Ok(()),
        Err(PipelineError::DatasetCorrupt(why)) => {
            warn!(%why, "retraining round aborted, previous model keeps serving");
            Ok(())
        }
        Err(e) => Err(HandlerError::new(e)),
    }
}

/// Decodes the raw webhook bytes referenced by an event.
pub fn raw_body(store: &crate::store::ScopedStore, event: &IncidentEvent) -> Result<bytes::Bytes, PipelineError> {
    match &event.raw {
        ClaimCheck::Inline(b) => Ok(b.clone()),
        ClaimCheck::Ticket(t) => Ok(store.resolve_ticket(t)?),
    }
}
