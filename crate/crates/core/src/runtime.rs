//! Stateless function runtime for the compute layers.
//!
//! Functions are registered per [`Environment`] and invoked by triggers:
//!
//! * `Http` routes accept a request body, park it durably on an ingress
//!   topic and answer 202 before any handler runs.
//! * `Topic` triggers own one consumer group and hand delivered batches to
//!   the handler. In [`DeliveryMode::Ack`] offsets are settled only after
//!   the handler succeeds and are nacked otherwise. In
//!   [`DeliveryMode::FireAndForget`] offsets are settled before the handler
//!   runs, so a failing handler loses its batch.
//! * `Timer` triggers fire at most once per period with no catch-up after a
//!   pause, and their period can be changed in place.
//!
//! The runtime can be driven synchronously ([`Runtime::run_until_idle`],
//! [`Runtime::tick_timers`]) or by background workers ([`Runtime::start`]).

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::broker::{
    Broker, BrokerError, Message, NackOutcome, SubscriptionHandle, TopicHandle, DLQ_SUFFIX,
    HEADER_DLQ_REASON, HEADER_INGRESS_TS, HEADER_RECEIPT_ID, MAX_MESSAGE_BYTES,
};
use crate::clock::{chrono_duration, format_ts, parse_ts, SharedClock, Timestamp};
use crate::store::{ScopedStore, Store, StoreError};

pub const DEFAULT_MAX_CONCURRENCY: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Production,
    Staging,
    Test,
    Development,
}

impl Environment {
    pub const ALL: [Environment; 4] = [
        Environment::Production,
        Environment::Staging,
        Environment::Test,
        Environment::Development,
    ];

    pub fn namespace(self) -> &'static str {
        match self {
            Environment::Production => "production",
            Environment::Staging => "staging",
            Environment::Test => "test",
            Environment::Development => "development",
        }
    }

    /// Physical topic name for a topic local to this environment.
    pub fn topic(self, local: &str) -> String {
        format!("{}/{local}", self.namespace())
    }
}

impl fmt::Display for Environment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.namespace())
    }
}

impl std::str::FromStr for Environment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Environment::ALL
            .into_iter()
            .find(|e| e.namespace() == s)
            .ok_or_else(|| format!("unknown environment {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeliveryMode {
    FireAndForget,
    #[default]
    Ack,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ContentType {
    #[default]
    Json,
    Bytes,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    Http {
        route: String,
        content_type: ContentType,
    },
    Topic {
        /// Topic name local to the function's environment.
        topic: String,
        mode: DeliveryMode,
        batch_size: usize,
    },
    Timer {
        period: Duration,
        enabled: bool,
    },
}

impl Trigger {
    pub fn http(route: impl Into<String>) -> Self {
        Trigger::Http {
            route: route.into(),
            content_type: ContentType::Json,
        }
    }

    pub fn topic(topic: impl Into<String>, mode: DeliveryMode) -> Self {
        Trigger::Topic {
            topic: topic.into(),
            mode,
            batch_size: 1,
        }
    }

    pub fn timer(period: Duration) -> Self {
        Trigger::Timer {
            period,
            enabled: true,
        }
    }
}

/// A request accepted by an HTTP route.
#[derive(Debug, Clone)]
pub struct HttpRequest {
    pub receipt_id: String,
    pub body: Bytes,
    pub headers: BTreeMap<String, String>,
    pub ingress_ts: Timestamp,
    /// 1-based arrival sequence number on this route.
    pub sequence: u64,
}

#[derive(Debug, Clone)]
pub enum Invocation {
    Messages(Vec<Message>),
    Http(HttpRequest),
    Timer { fired_at: Timestamp },
}

/// Handler failure. Any error type converts into it with `?`.
pub struct HandlerError {
    message: String,
}

impl HandlerError {
    pub fn new(message: impl fmt::Display) -> Self {
        Self {
            message: message.to_string(),
        }
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

impl<E: std::error::Error> From<E> for HandlerError {
    fn from(e: E) -> Self {
        Self::new(e)
    }
}

impl fmt::Debug for HandlerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HandlerError({:?})", self.message)
    }
}

impl fmt::Display for HandlerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type HandlerResult = Result<(), HandlerError>;

pub type Handler = Arc<dyn Fn(&FunctionContext<'_>, Invocation) -> HandlerResult + Send + Sync>;

pub struct FunctionSpec {
    pub name: String,
    pub layer: u8,
    pub environment: Environment,
    pub handler: Handler,
}

impl FunctionSpec {
    pub fn new<F>(name: impl Into<String>, layer: u8, environment: Environment, handler: F) -> Self
    where
        F: Fn(&FunctionContext<'_>, Invocation) -> HandlerResult + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            layer,
            environment,
            handler: Arc::new(handler),
        }
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("function {name:?} already registered in {env}")]
    DuplicateName { name: String, env: Environment },
    #[error("layer {0} is not a compute layer (expected 0, 1, 3, 5 or 7)")]
    InvalidLayer(u8),
    #[error("unknown function")]
    UnknownFunction,
    #[error("unknown trigger")]
    UnknownTrigger,
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("route {0:?} already has a trigger")]
    RouteConflict(String),
    #[error("trigger is not a timer")]
    NotATimer,
    #[error("timer period must be positive")]
    InvalidPeriod,
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("{function} in {env} may not access topic {topic:?}")]
    CrossEnvironment {
        function: String,
        env: Environment,
        topic: String,
    },
    #[error(transparent)]
    Broker(BrokerError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl From<BrokerError> for RuntimeError {
    fn from(e: BrokerError) -> Self {
        match e {
            BrokerError::UnknownTopic(t) => RuntimeError::UnknownTopic(t),
            other => RuntimeError::Broker(other),
        }
    }
}

pub type Result<T, E = RuntimeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionHandle {
    id: u64,
    name: String,
    environment: Environment,
}

impl FunctionHandle {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn environment(&self) -> Environment {
        self.environment
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TriggerHandle(u64);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FunctionStats {
    pub invocations: u64,
    pub successes: u64,
    pub failures: u64,
    pub messages_lost: u64,
    pub messages_requeued: u64,
    pub messages_dead_lettered: u64,
}

/// What happened to one delivered batch.
#[derive(Debug)]
pub struct DispatchOutcome {
    pub result: HandlerResult,
    /// Offsets settled (before the handler in fire-and-forget mode).
    pub committed: Vec<u64>,
    pub requeued: Vec<u64>,
    pub dead_lettered: Vec<u64>,
}

impl DispatchOutcome {
    pub fn succeeded(&self) -> bool {
        self.result.is_ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngressResponse {
    pub status: u16,
    pub receipt_id: Option<String>,
    pub error: Option<String>,
}

impl IngressResponse {
    fn accepted(receipt_id: String) -> Self {
        Self {
            status: 202,
            receipt_id: Some(receipt_id),
            error: None,
        }
    }

    fn rejected(status: u16, error: impl Into<String>) -> Self {
        Self {
            status,
            receipt_id: None,
            error: Some(error.into()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub max_concurrency: usize,
    /// Longest a background worker sleeps before re-polling an idle topic.
    pub idle_poll: Duration,
    pub timer_resolution: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            max_concurrency: DEFAULT_MAX_CONCURRENCY,
            idle_poll: Duration::from_millis(20),
            timer_resolution: Duration::from_millis(10),
        }
    }
}

struct FunctionEntry {
    name: String,
    layer: u8,
    environment: Environment,
    handler: Handler,
}

struct TimerState {
    period: Duration,
    enabled: bool,
    next_due: Timestamp,
    attached_at: Timestamp,
    last_fired: Option<Timestamp>,
}

enum TriggerKind {
    Topic {
        sub: SubscriptionHandle,
        mode: DeliveryMode,
        batch_size: usize,
        /// Ingress topic behind an HTTP route.
        http: bool,
    },
    Timer(Mutex<TimerState>),
}

struct TriggerEntry {
    id: u64,
    function: Arc<FunctionEntry>,
    kind: TriggerKind,
    route: Option<String>,
    /// Dispatch holds it shared; detach and timer updates take it exclusively.
    gate: RwLock<()>,
    detached: AtomicBool,
    running: AtomicUsize,
}

struct RouteEntry {
    topic: TopicHandle,
    content_type: ContentType,
}

struct Inner {
    broker: Broker,
    store: Store,
    clock: SharedClock,
    config: RuntimeConfig,
    functions: RwLock<HashMap<u64, Arc<FunctionEntry>>>,
    names: Mutex<HashMap<(Environment, String), u64>>,
    triggers: RwLock<BTreeMap<u64, Arc<TriggerEntry>>>,
    routes: RwLock<HashMap<String, RouteEntry>>,
    next_id: AtomicU64,
    running: AtomicUsize,
    stats: Mutex<HashMap<String, FunctionStats>>,
    accepting: AtomicBool,
    started: AtomicBool,
    stop: AtomicBool,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

/// Cheap to clone; all clones share one runtime.
#[derive(Clone)]
pub struct Runtime {
    inner: Arc<Inner>,
}

impl fmt::Debug for Runtime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Runtime")
            .field("functions", &self.inner.functions.read().len())
            .field("triggers", &self.inner.triggers.read().len())
            .finish()
    }
}

/// Capabilities handed to a running handler. Topic access is confined to
/// the function's environment.
pub struct FunctionContext<'a> {
    inner: &'a Inner,
    function: &'a FunctionEntry,
}

impl FunctionContext<'_> {
    pub fn function_name(&self) -> &str {
        &self.function.name
    }

    pub fn layer(&self) -> u8 {
        self.function.layer
    }

    pub fn environment(&self) -> Environment {
        self.function.environment
    }

    pub fn now(&self) -> Timestamp {
        self.inner.clock.now()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.inner.clock
    }

    /// Document and object store confined to this environment's namespace.
    pub fn store(&self) -> ScopedStore {
        self.inner.store.scoped(self.function.environment.namespace())
    }

    fn local_topic(&self, env: Environment, local: &str) -> Result<TopicHandle> {
        if local.is_empty() || local.contains('/') {
            return Err(RuntimeError::CrossEnvironment {
                function: self.function.name.clone(),
                env: self.function.environment,
                topic: local.to_owned(),
            });
        }
        Ok(self.inner.broker.topic(&env.topic(local))?)
    }

    pub fn publish(&self, topic: &str, message: Message) -> Result<u64> {
        self.publish_batch(topic, vec![message]).map(|o| o[0])
    }

    pub fn publish_batch(&self, topic: &str, batch: Vec<Message>) -> Result<Vec<u64>> {
        let handle = self.local_topic(self.function.environment, topic)?;
        Ok(self.inner.broker.publish_batch(&handle, batch)?)
    }

    /// Copies a message into another environment. Only layer-0 functions in
    /// production may do this, and never into production itself.
    pub fn publish_to(&self, env: Environment, topic: &str, message: Message) -> Result<u64> {
        let own = self.function.environment;
        let allowed = env == own
            || (self.function.layer == 0
                && own == Environment::Production
                && env != Environment::Production);
        if !allowed {
            return Err(RuntimeError::CrossEnvironment {
                function: self.function.name.clone(),
                env: own,
                topic: env.topic(topic),
            });
        }
        let handle = self.local_topic(env, topic)?;
        Ok(self.inner.broker.publish(&handle, message)?)
    }

    /// Parks `message` on the dead-letter topic of the topic it came from.
    pub fn dead_letter(&self, message: &Message, reason: &str) -> Result<u64> {
        let source = &message.topic;
        if !source.starts_with(&format!("{}/", self.function.environment.namespace())) {
            return Err(RuntimeError::CrossEnvironment {
                function: self.function.name.clone(),
                env: self.function.environment,
                topic: source.clone(),
            });
        }
        let dlq = self.inner.broker.ensure_topic(&format!("{source}{DLQ_SUFFIX}"))?;
        let m = message.clone().with_header(HEADER_DLQ_REASON, reason);
        Ok(self.inner.broker.publish(&dlq, m)?)
    }
}

impl Runtime {
    pub fn new(broker: Broker, store: Store, clock: SharedClock, config: RuntimeConfig) -> Self {
        Self {
            inner: Arc::new(Inner {
                broker,
                store,
                clock,
                config,
                functions: RwLock::new(HashMap::new()),
                names: Mutex::new(HashMap::new()),
                triggers: RwLock::new(BTreeMap::new()),
                routes: RwLock::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                running: AtomicUsize::new(0),
                stats: Mutex::new(HashMap::new()),
                accepting: AtomicBool::new(true),
                started: AtomicBool::new(false),
                stop: AtomicBool::new(false),
                workers: Mutex::new(Vec::new()),
            }),
        }
    }

    pub fn broker(&self) -> &Broker {
        &self.inner.broker
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn clock(&self) -> &SharedClock {
        &self.inner.clock
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.inner.config
    }

    /// Creates `<env>/<local>` if it does not exist yet.
    pub fn create_topic(&self, env: Environment, local: &str) -> Result<TopicHandle> {
        Ok(self.inner.broker.ensure_topic(&env.topic(local))?)
    }

    pub fn register_function(&self, spec: FunctionSpec) -> Result<FunctionHandle> {
        if spec.layer.is_multiple_of(2) && spec.layer != 0 || spec.layer > 7 {
            return Err(RuntimeError::InvalidLayer(spec.layer));
        }
        let mut names = self.inner.names.lock();
        let key = (spec.environment, spec.name.clone());
        if names.contains_key(&key) {
            return Err(RuntimeError::DuplicateName {
                name: spec.name,
                env: spec.environment,
            });
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        names.insert(key, id);
        let entry = Arc::new(FunctionEntry {
            name: spec.name.clone(),
            layer: spec.layer,
            environment: spec.environment,
            handler: spec.handler,
        });
        self.inner.functions.write().insert(id, entry);
        Ok(FunctionHandle {
            id,
            name: spec.name,
            environment: spec.environment,
        })
    }

    pub fn attach_trigger(&self, function: &FunctionHandle, trigger: Trigger) -> Result<TriggerHandle> {
        let entry = self
            .inner
            .functions
            .read()
            .get(&function.id)
            .cloned()
            .ok_or(RuntimeError::UnknownFunction)?;
        let env = entry.environment;
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let group = format!("{}/{}#{}", env.namespace(), entry.name, id);
        let (kind, route) = match trigger {
            Trigger::Topic {
                topic,
                mode,
                batch_size,
            } => {
                if batch_size == 0 {
                    return Err(RuntimeError::InvalidBatchSize);
                }
                if topic.contains('/') {
                    return Err(RuntimeError::CrossEnvironment {
                        function: entry.name.clone(),
                        env,
                        topic,
                    });
                }
                let sub = self.inner.broker.subscribe(&group, &env.topic(&topic))?;
                (
                    TriggerKind::Topic {
                        sub,
                        mode,
                        batch_size,
                        http: false,
                    },
                    None,
                )
            }
            Trigger::Http {
                route,
                content_type,
            } => {
                let mut routes = self.inner.routes.write();
                if routes.contains_key(&route) {
                    return Err(RuntimeError::RouteConflict(route));
                }
                let topic = self.inner.broker.ensure_topic(&env.topic(&route_topic(&route)))?;
                let sub = self.inner.broker.subscribe(&group, topic.name())?;
                routes.insert(
                    route.clone(),
                    RouteEntry {
                        topic,
                        content_type,
                    },
                );
                (
                    TriggerKind::Topic {
                        sub,
                        mode: DeliveryMode::Ack,
                        batch_size: 1,
                        http: true,
                    },
                    Some(route),
                )
            }
            Trigger::Timer { period, enabled } => {
                if period.is_zero() {
                    return Err(RuntimeError::InvalidPeriod);
                }
                let now = self.inner.clock.now();
                (
                    TriggerKind::Timer(Mutex::new(TimerState {
                        period,
                        enabled,
                        next_due: now + chrono_duration(period),
                        attached_at: now,
                        last_fired: None,
                    })),
                    None,
                )
            }
        };
        let trigger = Arc::new(TriggerEntry {
            id,
            function: entry,
            kind,
            route,
            gate: RwLock::new(()),
            detached: AtomicBool::new(false),
            running: AtomicUsize::new(0),
        });
        self.inner.triggers.write().insert(id, trigger.clone());
        if self.inner.started.load(Ordering::SeqCst) && matches!(trigger.kind, TriggerKind::Topic { .. }) {
            self.spawn_pump(trigger);
        }
        Ok(TriggerHandle(id))
    }

    pub fn detach_trigger(&self, handle: TriggerHandle) -> Result<()> {
        let trigger = self
            .inner
            .triggers
            .write()
            .remove(&handle.0)
            .ok_or(RuntimeError::UnknownTrigger)?;
        let _exclusive = trigger.gate.write();
        trigger.detached.store(true, Ordering::SeqCst);
        if let Some(route) = &trigger.route {
            self.inner.routes.write().remove(route);
        }
        Ok(())
    }

    fn trigger(&self, handle: TriggerHandle) -> Result<Arc<TriggerEntry>> {
        self.inner
            .triggers
            .read()
            .get(&handle.0)
            .cloned()
            .ok_or(RuntimeError::UnknownTrigger)
    }

    /// The consumer group behind a topic or HTTP trigger.
    pub fn subscription(&self, handle: TriggerHandle) -> Result<SubscriptionHandle> {
        match &self.trigger(handle)?.kind {
            TriggerKind::Topic { sub, .. } => Ok(sub.clone()),
            TriggerKind::Timer(_) => Err(RuntimeError::UnknownTopic("<timer>".into())),
        }
    }

    pub fn update_timer(&self, handle: TriggerHandle, period: Duration) -> Result<()> {
        let trigger = self.trigger(handle)?;
        let TriggerKind::Timer(state) = &trigger.kind else {
            return Err(RuntimeError::NotATimer);
        };
        if period.is_zero() {
            return Err(RuntimeError::InvalidPeriod);
        }
        let _exclusive = trigger.gate.write();
        let mut s = state.lock();
        s.period = period;
        s.next_due = s.last_fired.unwrap_or(s.attached_at) + chrono_duration(period);
        Ok(())
    }

    pub fn set_timer_enabled(&self, handle: TriggerHandle, enabled: bool) -> Result<()> {
        let trigger = self.trigger(handle)?;
        let TriggerKind::Timer(state) = &trigger.kind else {
            return Err(RuntimeError::NotATimer);
        };
        let _exclusive = trigger.gate.write();
        let mut s = state.lock();
        if enabled && !s.enabled {
            s.next_due = self.inner.clock.now() + chrono_duration(s.period);
        }
        s.enabled = enabled;
        Ok(())
    }

    pub fn timer_period(&self, handle: TriggerHandle) -> Result<Duration> {
        match &self.trigger(handle)?.kind {
            TriggerKind::Timer(s) => Ok(s.lock().period),
            TriggerKind::Topic { .. } => Err(RuntimeError::NotATimer),
        }
    }

    /// Earliest pending timer deadline among enabled timers.
    pub fn next_timer_due(&self) -> Option<Timestamp> {
        self.inner
            .triggers
            .read()
            .values()
            .filter_map(|t| match &t.kind {
                TriggerKind::Timer(s) => {
                    let s = s.lock();
                    s.enabled.then_some(s.next_due)
                }
                TriggerKind::Topic { .. } => None,
            })
            .min()
    }

    /// Fires every due timer once, synchronously. Returns how many fired.
    pub fn tick_timers(&self) -> usize {
        let now = self.inner.clock.now();
        let due: Vec<Arc<TriggerEntry>> = self
            .inner
            .triggers
            .read()
            .values()
            .filter(|t| match &t.kind {
                TriggerKind::Timer(s) => {
                    let mut s = s.lock();
                    if s.enabled && now >= s.next_due {
                        let period = chrono_duration(s.period);
                        s.next_due = if now - s.next_due < period {
                            s.next_due + period
                        } else {
                            now + period
                        };
                        s.last_fired = Some(now);
                        true
                    } else {
                        false
                    }
                }
                TriggerKind::Topic { .. } => false,
            })
            .cloned()
            .collect();
        for trigger in &due {
            let _shared = trigger.gate.read();
            if trigger.detached.load(Ordering::SeqCst) {
                continue;
            }
            self.inner.running.fetch_add(1, Ordering::SeqCst);
            let result = self.invoke(&trigger.function, Invocation::Timer { fired_at: now });
            self.inner.running.fetch_sub(1, Ordering::SeqCst);
            if let Err(e) = result {
                warn!(function = %trigger.function.name, error = %e, "timer handler failed");
            }
        }
        due.len()
    }

    /// Runs the handler for one delivered batch and settles its offsets
    /// according to the trigger's delivery mode.
    pub fn dispatch(&self, handle: TriggerHandle, batch: Vec<Message>) -> Result<DispatchOutcome> {
        let trigger = self.trigger(handle)?;
        Ok(self.dispatch_entry(&trigger, batch))
    }

    fn dispatch_entry(&self, trigger: &TriggerEntry, batch: Vec<Message>) -> DispatchOutcome {
        let TriggerKind::Topic { sub, mode, http, .. } = &trigger.kind else {
            unreachable!("timers are not dispatched with message batches");
        };
        let _shared = trigger.gate.read();
        let broker = &self.inner.broker;
        let offsets: Vec<u64> = batch.iter().map(|m| m.offset).collect();
        let invocation = if *http {
            match http_request(&batch[0]) {
                Some(req) => Invocation::Http(req),
                None => Invocation::Messages(batch),
            }
        } else {
            Invocation::Messages(batch)
        };

        let mut outcome = DispatchOutcome {
            result: Ok(()),
            committed: Vec::new(),
            requeued: Vec::new(),
            dead_lettered: Vec::new(),
        };
        if *mode == DeliveryMode::FireAndForget {
            for &o in &offsets {
                if broker.ack(sub, o).is_ok() {
                    outcome.committed.push(o);
                }
            }
        }
        outcome.result = self.invoke(&trigger.function, invocation);
        let mut stats = FunctionStats::default();
        match (&outcome.result, mode) {
            (Ok(()), DeliveryMode::Ack) => {
                for &o in &offsets {
                    if broker.ack(sub, o).is_ok() {
                        outcome.committed.push(o);
                    }
                }
            }
            (Ok(()), DeliveryMode::FireAndForget) => {}
            (Err(e), DeliveryMode::Ack) => {
                for &o in &offsets {
                    match broker.nack_with_reason(sub, o, e.message()) {
                        Ok(NackOutcome::Requeued { .. }) => outcome.requeued.push(o),
                        Ok(NackOutcome::DeadLettered { .. }) => outcome.dead_lettered.push(o),
                        Err(err) => warn!(error = %err, "nack failed"),
                    }
                }
                stats.messages_requeued = outcome.requeued.len() as u64;
                stats.messages_dead_lettered = outcome.dead_lettered.len() as u64;
            }
            (Err(_), DeliveryMode::FireAndForget) => {
                stats.messages_lost = offsets.len() as u64;
            }
        }
        if let Err(e) = &outcome.result {
            debug!(function = %trigger.function.name, error = %e, "handler failed");
        }
        self.merge_stats(&trigger.function, stats);
        outcome
    }

    fn invoke(&self, function: &FunctionEntry, invocation: Invocation) -> HandlerResult {
        let ctx = FunctionContext {
            inner: &self.inner,
            function,
        };
        let result = catch_unwind(AssertUnwindSafe(|| (function.handler)(&ctx, invocation)))
            .unwrap_or_else(|panic| {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "handler panicked".into());
                Err(HandlerError::new(msg))
            });
        let mut stats = self.inner.stats.lock();
        let s = stats.entry(stats_key(function)).or_default();
        s.invocations += 1;
        if result.is_ok() {
            s.successes += 1;
        } else {
            s.failures += 1;
        }
        result
    }

    fn merge_stats(&self, function: &FunctionEntry, delta: FunctionStats) {
        let mut stats = self.inner.stats.lock();
        let s = stats.entry(stats_key(function)).or_default();
        s.messages_lost += delta.messages_lost;
        s.messages_requeued += delta.messages_requeued;
        s.messages_dead_lettered += delta.messages_dead_lettered;
    }

    pub fn stats(&self, function: &FunctionHandle) -> FunctionStats {
        self.inner
            .stats
            .lock()
            .get(&format!("{}/{}", function.environment, function.name))
            .copied()
            .unwrap_or_default()
    }

    pub fn all_stats(&self) -> BTreeMap<String, FunctionStats> {
        self.inner
            .stats
            .lock()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }

    /// Accepts a request on `route`. The body is parked on the route's
    /// ingress topic before 202 is returned.
    pub fn http_ingress(
        &self,
        route: &str,
        body: Bytes,
        headers: &BTreeMap<String, String>,
    ) -> IngressResponse {
        self.http_ingress_at(route, body, headers, self.inner.clock.now())
    }

    /// [`Runtime::http_ingress`] with an explicit arrival time, for replaying
    /// scheduled workloads.
    pub fn http_ingress_at(
        &self,
        route: &str,
        body: Bytes,
        headers: &BTreeMap<String, String>,
        arrived: Timestamp,
    ) -> IngressResponse {
        if !self.inner.accepting.load(Ordering::SeqCst) {
            return IngressResponse::rejected(503, "shutting down");
        }
        let routes = self.inner.routes.read();
        let Some(entry) = routes.get(route) else {
            return IngressResponse::rejected(404, format!("no route {route}"));
        };
        if body.len() > MAX_MESSAGE_BYTES {
            return IngressResponse::rejected(
                413,
                format!("body is {} bytes, limit is {MAX_MESSAGE_BYTES}", body.len()),
            );
        }
        if entry.content_type == ContentType::Json
            && serde_json::from_slice::<serde::de::IgnoredAny>(&body).is_err()
        {
            return IngressResponse::rejected(400, "body is not valid JSON");
        }
        let receipt_id = uuid::Uuid::new_v4().to_string();
        let mut message = Message::new(body)
            .with_header(HEADER_RECEIPT_ID, receipt_id.clone())
            .with_header(HEADER_INGRESS_TS, format_ts(arrived));
        for (k, v) in headers {
            let k = k.to_ascii_lowercase();
            if k != HEADER_RECEIPT_ID && k != HEADER_INGRESS_TS {
                message.headers.insert(format!("http-{k}"), v.clone());
            }
        }
        match self.inner.broker.publish(&entry.topic, message) {
            Ok(_) => IngressResponse::accepted(receipt_id),
            Err(e) => IngressResponse::rejected(503, e.to_string()),
        }
    }

    /// Topic that parks requests accepted on `route`.
    pub fn ingress_topic(&self, route: &str) -> Option<TopicHandle> {
        self.inner.routes.read().get(route).map(|e| e.topic.clone())
    }

    pub fn has_route(&self, route: &str) -> bool {
        self.inner.routes.read().contains_key(route)
    }

    fn topic_triggers(&self) -> Vec<Arc<TriggerEntry>> {
        self.inner
            .triggers
            .read()
            .values()
            .filter(|t| matches!(t.kind, TriggerKind::Topic { .. }))
            .cloned()
            .collect()
    }

    /// No handler is running and no topic trigger has unsettled messages.
    pub fn is_idle(&self) -> bool {
        if self.inner.running.load(Ordering::SeqCst) > 0 {
            return false;
        }
        self.topic_triggers().iter().all(|t| match &t.kind {
            TriggerKind::Topic { sub, .. } => self
                .inner
                .broker
                .status(sub)
                .map(|s| s.outstanding == 0)
                .unwrap_or(true),
            TriggerKind::Timer(_) => true,
        }) && self.inner.running.load(Ordering::SeqCst) == 0
    }

    /// Synchronously drains every topic trigger, fanning each polled batch
    /// out to its own thread. Returns the number of invocations.
    pub fn run_until_idle(&self) -> usize {
        let mut total = 0;
        loop {
            let mut work: Vec<(Arc<TriggerEntry>, Vec<Message>)> = Vec::new();
            for trigger in self.topic_triggers() {
                let TriggerKind::Topic { sub, batch_size, .. } = &trigger.kind else {
                    continue;
                };
                let max = self.inner.config.max_concurrency * batch_size;
                let Ok(polled) = self.inner.broker.poll(sub, max) else {
                    continue;
                };
                for chunk in polled.chunks(*batch_size) {
                    work.push((trigger.clone(), chunk.to_vec()));
                }
            }
            if work.is_empty() {
                return total;
            }
            total += work.len();
            thread::scope(|scope| {
                for (trigger, batch) in work {
                    self.inner.running.fetch_add(1, Ordering::SeqCst);
                    scope.spawn(move || {
                        self.dispatch_entry(&trigger, batch);
                        self.inner.running.fetch_sub(1, Ordering::SeqCst);
                    });
                }
            });
        }
    }

    /// Starts one polling worker per topic trigger plus a timer worker.
    pub fn start(&self) {
        if self.inner.started.swap(true, Ordering::SeqCst) {
            return;
        }
        self.inner.stop.store(false, Ordering::SeqCst);
        for trigger in self.topic_triggers() {
            self.spawn_pump(trigger);
        }
        let rt = self.clone();
        let timer = thread::Builder::new()
            .name("timers".into())
            .spawn(move || {
                while !rt.inner.stop.load(Ordering::SeqCst) {
                    rt.tick_timers();
                    thread::sleep(rt.inner.config.timer_resolution);
                }
            })
            .expect("spawn timer worker");
        self.inner.workers.lock().push(timer);
    }

    fn spawn_pump(&self, trigger: Arc<TriggerEntry>) {
        let rt = self.clone();
        let name = format!("pump-{}-{}", trigger.function.name, trigger.id);
        let handle = thread::Builder::new()
            .name(name)
            .spawn(move || rt.pump(trigger))
            .expect("spawn trigger worker");
        self.inner.workers.lock().push(handle);
    }

    fn pump(&self, trigger: Arc<TriggerEntry>) {
        let TriggerKind::Topic { sub, batch_size, .. } = &trigger.kind else {
            return;
        };
        let broker = &self.inner.broker;
        let max = self.inner.config.max_concurrency;
        loop {
            if self.inner.stop.load(Ordering::SeqCst) || trigger.detached.load(Ordering::SeqCst) {
                return;
            }
            let seen = broker.activity_generation();
            let free = max.saturating_sub(trigger.running.load(Ordering::SeqCst));
            let polled = if free > 0 {
                broker.poll(sub, free * batch_size).unwrap_or_default()
            } else {
                Vec::new()
            };
            if polled.is_empty() {
                let wait = if free == 0 {
                    Duration::from_millis(1)
                } else {
                    self.inner.config.idle_poll
                };
                broker.wait_for_activity(seen, wait);
                continue;
            }
            for chunk in polled.chunks(*batch_size) {
                let rt = self.clone();
                let t = trigger.clone();
                let batch = chunk.to_vec();
                self.inner.running.fetch_add(1, Ordering::SeqCst);
                t.running.fetch_add(1, Ordering::SeqCst);
                thread::spawn(move || {
                    rt.dispatch_entry(&t, batch);
                    t.running.fetch_sub(1, Ordering::SeqCst);
                    rt.inner.running.fetch_sub(1, Ordering::SeqCst);
                });
            }
        }
    }

    /// Blocks until [`Runtime::is_idle`] holds or `timeout` passes.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.is_idle() {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(1));
        }
    }

    /// Stops accepting requests, lets in-flight work drain (up to
    /// `drain_timeout`), then stops all workers. Returns whether the drain
    /// completed.
    pub fn shutdown(&self, drain_timeout: Duration) -> bool {
        self.inner.accepting.store(false, Ordering::SeqCst);
        let drained = if self.inner.started.load(Ordering::SeqCst) {
            self.wait_idle(drain_timeout)
        } else {
            self.run_until_idle();
            true
        };
        self.inner.stop.store(true, Ordering::SeqCst);
        let workers: Vec<_> = self.inner.workers.lock().drain(..).collect();
        for w in workers {
            let _ = w.join();
        }
        self.inner.started.store(false, Ordering::SeqCst);
        drained
    }

    pub fn is_accepting(&self) -> bool {
        self.inner.accepting.load(Ordering::SeqCst)
    }
}

fn stats_key(function: &FunctionEntry) -> String {
    format!("{}/{}", function.environment, function.name)
}

/// `/api/v1/ingest/pagerduty` → `http.api.v1.ingest.pagerduty`
fn route_topic(route: &str) -> String {
    let tail: Vec<&str> = route.split('/').filter(|s| !s.is_empty()).collect();
    format!("http.{}", tail.join("."))
}

fn http_request(message: &Message) -> Option<HttpRequest> {
    Some(HttpRequest {
        receipt_id: message.receipt_id()?.to_owned(),
        ingress_ts: parse_ts(message.header(HEADER_INGRESS_TS)?)?,
        body: message.payload.clone(),
        headers: message
            .headers
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("http-").map(|k| (k.to_owned(), v.clone())))
            .collect(),
        sequence: message.offset + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, SimClock};
    use std::sync::Barrier;

    fn runtime() -> (Arc<SimClock>, Runtime) {
        let clock = Arc::new(SimClock::manual(SimClock::default_epoch()));
        let store = Store::in_memory(clock.clone());
        let rt = Runtime::new(Broker::in_memory(), store, clock.clone(), RuntimeConfig::default());
        (clock, rt)
    }

    fn noop(name: &str, layer: u8) -> FunctionSpec {
        FunctionSpec::new(name, layer, Environment::Production, |_, _| Ok(()))
    }

    #[test]
    fn registration_rules() {
        let (_, rt) = runtime();
        rt.register_function(noop("convert", 1)).unwrap();
        assert!(matches!(
            rt.register_function(noop("convert", 1)),
            Err(RuntimeError::DuplicateName { .. })
        ));
        assert!(matches!(
            rt.register_function(noop("topic-like", 2)),
            Err(RuntimeError::InvalidLayer(2))
        ));
        assert!(matches!(
            rt.register_function(noop("too-high", 9)),
            Err(RuntimeError::InvalidLayer(9))
        ));
        for layer in [0, 3, 5, 7] {
            rt.register_function(noop(&format!("f{layer}"), layer)).unwrap();
        }
        // Same name in another environment is a different function.
        rt.register_function(FunctionSpec::new("convert", 1, Environment::Staging, |_, _| Ok(())))
            .unwrap();
    }

    #[test]
    fn attach_errors() {
        let (_, rt) = runtime();
        let f = rt.register_function(noop("f", 1)).unwrap();
        assert!(matches!(
            rt.attach_trigger(&f, Trigger::topic("missing", DeliveryMode::Ack)),
            Err(RuntimeError::UnknownTopic(_))
        ));
        rt.attach_trigger(&f, Trigger::http("/in")).unwrap();
        let g = rt.register_function(noop("g", 1)).unwrap();
        assert!(matches!(
            rt.attach_trigger(&g, Trigger::http("/in")),
            Err(RuntimeError::RouteConflict(_))
        ));
        let ghost = FunctionHandle {
            id: 999,
            name: "ghost".into(),
            environment: Environment::Production,
        };
        assert!(matches!(
            rt.attach_trigger(&ghost, Trigger::timer(Duration::from_secs(1))),
            Err(RuntimeError::UnknownFunction)
        ));
        assert!(matches!(
            rt.attach_trigger(&f, Trigger::timer(Duration::ZERO)),
            Err(RuntimeError::InvalidPeriod)
        ));
    }

    #[test]
    fn one_invocation_per_message_with_batch_one() {
        let (_, rt) = runtime();
        let t = rt.create_topic(Environment::Production, "L2.converted").unwrap();
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        let f = rt
            .register_function(FunctionSpec::new("route", 3, Environment::Production, move |_, inv| {
                let Invocation::Messages(ms) = inv else { panic!() };
                assert_eq!(ms.len(), 1);
                s.lock().push(ms[0].offset);
                Ok(())
            }))
            .unwrap();
        let trig = rt
            .attach_trigger(&f, Trigger::topic("L2.converted", DeliveryMode::Ack))
            .unwrap();
        for i in 0..5 {
            rt.broker().publish(&t, Message::new(format!("{i}"))).unwrap();
        }
        assert_eq!(rt.run_until_idle(), 5);
        let mut got = seen.lock().clone();
        got.sort();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
        let st = rt.broker().status(&rt.subscription(trig).unwrap()).unwrap();
        assert_eq!((st.committed, st.outstanding), (5, 0));
        assert_eq!(rt.stats(&f).invocations, 5);
        assert!(rt.is_idle());
    }

    fn flaky_setup(mode: DeliveryMode, fail_first: usize) -> (Runtime, TriggerHandle, Arc<AtomicUsize>, Arc<Mutex<Vec<String>>>) {
        let (_, rt) = runtime();
        let t = rt.create_topic(Environment::Production, "in").unwrap();
        rt.broker()
            .publish(&t, Message::new("x").with_header(HEADER_RECEIPT_ID, "r-1"))
            .unwrap();
        let calls = Arc::new(AtomicUsize::new(0));
        let effects = Arc::new(Mutex::new(Vec::new()));
        let (c, e) = (calls.clone(), effects.clone());
        let f = rt
            .register_function(FunctionSpec::new("h", 3, Environment::Production, move |_, inv| {
                let Invocation::Messages(ms) = inv else { panic!() };
                if c.fetch_add(1, Ordering::SeqCst) < fail_first {
                    return Err(HandlerError::new("boom"));
                }
                e.lock().push(ms[0].receipt_id().unwrap().to_owned());
                Ok(())
            }))
            .unwrap();
        let trig = rt.attach_trigger(&f, Trigger::topic("in", mode)).unwrap();
        (rt, trig, calls, effects)
    }

    #[test]
    fn fire_and_forget_loses_failed_message() {
        let (rt, trig, calls, effects) = flaky_setup(DeliveryMode::FireAndForget, 1);
        let sub = rt.subscription(trig).unwrap();
        let batch = rt.broker().poll(&sub, 1).unwrap();
        let out = rt.dispatch(trig, batch).unwrap();
        assert!(!out.succeeded());
        assert_eq!(out.committed, vec![0]);
        rt.run_until_idle();
        assert_eq!(calls.load(Ordering::SeqCst), 1, "never redelivered");
        assert!(effects.lock().is_empty());
        assert_eq!(rt.broker().status(&sub).unwrap().outstanding, 0);
    }

    #[test]
    fn ack_mode_redelivers_after_failure() {
        let (rt, trig, calls, effects) = flaky_setup(DeliveryMode::Ack, 1);
        let sub = rt.subscription(trig).unwrap();
        let out = rt.dispatch(trig, rt.broker().poll(&sub, 1).unwrap()).unwrap();
        assert_eq!(out.requeued, vec![0]);
        assert!(out.committed.is_empty());
        rt.run_until_idle();
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(*effects.lock(), vec!["r-1".to_string()]);
    }

    #[test]
    fn ack_mode_dead_letters_poison_message() {
        let (rt, trig, calls, _) = flaky_setup(DeliveryMode::Ack, usize::MAX);
        rt.run_until_idle();
        assert_eq!(calls.load(Ordering::SeqCst), 6);
        let dlq = rt.broker().topic("production/in.dlq").unwrap();
        let dead = rt.broker().read_all(&dlq);
        assert_eq!(dead.len(), 1);
        assert_eq!(dead[0].header(HEADER_DLQ_REASON), Some("boom"));
        assert!(rt.is_idle());
        let _ = trig;
    }

    #[test]
    fn panicking_handler_is_a_failure_not_a_crash() {
        let (_, rt) = runtime();
        let t = rt.create_topic(Environment::Production, "in").unwrap();
        rt.broker().publish(&t, Message::new("x")).unwrap();
        let f = rt
            .register_function(FunctionSpec::new("p", 1, Environment::Production, |_, _| {
                panic!("kaboom")
            }))
            .unwrap();
        let trig = rt.attach_trigger(&f, Trigger::topic("in", DeliveryMode::Ack)).unwrap();
        let sub = rt.subscription(trig).unwrap();
        let out = rt.dispatch(trig, rt.broker().poll(&sub, 1).unwrap()).unwrap();
        assert_eq!(out.result.unwrap_err().message(), "kaboom");
        assert_eq!(rt.stats(&f).failures, 1);
    }

    #[test]
    fn fan_out_runs_pending_messages_concurrently() {
        let (_, rt) = runtime();
        let t = rt.create_topic(Environment::Production, "in").unwrap();
        let k = 12;
        let barrier = Arc::new(Barrier::new(k));
        let b = barrier.clone();
        let f = rt
            .register_function(FunctionSpec::new("f", 5, Environment::Production, move |_, _| {
                // Deadlocks unless all k instances run at once.
                b.wait();
                Ok(())
            }))
            .unwrap();
        rt.attach_trigger(&f, Trigger::topic("in", DeliveryMode::Ack)).unwrap();
        for _ in 0..k {
            rt.broker().publish(&t, Message::new("x")).unwrap();
        }
        assert_eq!(rt.run_until_idle(), k);
        assert_eq!(rt.stats(&f).successes, k as u64);
    }

    #[test]
    fn concurrency_is_capped() {
        let clock = Arc::new(SimClock::manual(SimClock::default_epoch()));
        let rt = Runtime::new(
            Broker::in_memory(),
            Store::in_memory(clock.clone()),
            clock,
            RuntimeConfig {
                max_concurrency: 3,
                ..Default::default()
            },
        );
        let t = rt.create_topic(Environment::Production, "in").unwrap();
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let (l, p) = (live.clone(), peak.clone());
        let f = rt
            .register_function(FunctionSpec::new("f", 5, Environment::Production, move |_, _| {
                let now = l.fetch_add(1, Ordering::SeqCst) + 1;
                p.fetch_max(now, Ordering::SeqCst);
                thread::sleep(Duration::from_millis(5));
                l.fetch_sub(1, Ordering::SeqCst);
                Ok(())
            }))
            .unwrap();
        rt.attach_trigger(&f, Trigger::topic("in", DeliveryMode::Ack)).unwrap();
        for _ in 0..10 {
            rt.broker().publish(&t, Message::new("x")).unwrap();
        }
        assert_eq!(rt.run_until_idle(), 10);
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn timer_fires_once_per_period_without_catch_up() {
        let (clock, rt) = runtime();
        let fired = Arc::new(Mutex::new(Vec::new()));
        let fr = fired.clone();
        let f = rt
            .register_function(FunctionSpec::new("retrain", 5, Environment::Production, move |_, inv| {
                let Invocation::Timer { fired_at } = inv else { panic!() };
                fr.lock().push(fired_at);
                Ok(())
            }))
            .unwrap();
        let trig = rt.attach_trigger(&f, Trigger::timer(Duration::from_secs(60))).unwrap();
        let start = clock.now();
        for _ in 0..180 {
            clock.advance(Duration::from_secs(1));
            rt.tick_timers();
        }
        assert_eq!(fired.lock().len(), 3);
        // A long pause yields one tick, not a burst.
        clock.advance(Duration::from_secs(3600));
        assert_eq!(rt.tick_timers(), 1);
        assert_eq!(rt.tick_timers(), 0);
        assert_eq!(fired.lock().len(), 4);
        let offsets: Vec<f64> = fired.lock()[..3]
            .iter()
            .map(|t| crate::clock::seconds_between(start, *t))
            .collect();
        assert_eq!(offsets, vec![60.0, 120.0, 180.0]);
        let _ = trig;
    }

    #[test]
    fn timer_period_can_change_in_place() {
        let (clock, rt) = runtime();
        let fired = Arc::new(Mutex::new(Vec::new()));
        let fr = fired.clone();
        let f = rt
            .register_function(FunctionSpec::new("t", 5, Environment::Production, move |ctx, _| {
                fr.lock().push(ctx.now());
                Ok(())
            }))
            .unwrap();
        let trig = rt.attach_trigger(&f, Trigger::timer(Duration::from_secs(60))).unwrap();
        for _ in 0..60 {
            clock.advance(Duration::from_secs(1));
            rt.tick_timers();
        }
        rt.update_timer(trig, Duration::from_secs(30)).unwrap();
        assert_eq!(rt.timer_period(trig).unwrap(), Duration::from_secs(30));
        for _ in 0..120 {
            clock.advance(Duration::from_secs(1));
            rt.tick_timers();
        }
        let times = fired.lock().clone();
        assert_eq!(times.len(), 5);
        for w in times[1..].windows(2) {
            assert_eq!(crate::clock::seconds_between(w[0], w[1]), 30.0);
        }
        assert!(matches!(
            rt.update_timer(trig, Duration::ZERO),
            Err(RuntimeError::InvalidPeriod)
        ));
        let t = rt.create_topic(Environment::Production, "x").unwrap();
        let topic_trig = rt.attach_trigger(&f, Trigger::topic(t.name().split('/').nth(1).unwrap(), DeliveryMode::Ack)).unwrap();
        assert!(matches!(
            rt.update_timer(topic_trig, Duration::from_secs(5)),
            Err(RuntimeError::NotATimer)
        ));
    }

    #[test]
    fn disabled_timer_does_not_fire() {
        let (clock, rt) = runtime();
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        let f = rt
            .register_function(FunctionSpec::new("t", 5, Environment::Production, move |_, _| {
                c.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }))
            .unwrap();
        let trig = rt.attach_trigger(&f, Trigger::timer(Duration::from_secs(10))).unwrap();
        rt.set_timer_enabled(trig, false).unwrap();
        clock.advance(Duration::from_secs(100));
        assert_eq!(rt.tick_timers(), 0);
        rt.set_timer_enabled(trig, true).unwrap();
        clock.advance(Duration::from_secs(10));
        assert_eq!(rt.tick_timers(), 1);
        assert_eq!(count.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn http_ingress_statuses() {
        let (_, rt) = runtime();
        let got = Arc::new(Mutex::new(Vec::new()));
        let g = got.clone();
        let f = rt
            .register_function(FunctionSpec::new("l0", 0, Environment::Production, move |_, inv| {
                let Invocation::Http(req) = inv else { panic!() };
                g.lock().push(req);
                Ok(())
            }))
            .unwrap();
        rt.attach_trigger(&f, Trigger::http("/api/v1/ingest/pagerduty")).unwrap();
        let headers = BTreeMap::from([("Content-Type".to_string(), "application/json".to_string())]);
        let ok = rt.http_ingress("/api/v1/ingest/pagerduty", Bytes::from_static(b"{\"a\":1}"), &headers);
        assert_eq!(ok.status, 202);
        let receipt = ok.receipt_id.clone().unwrap();
        assert!(uuid::Uuid::parse_str(&receipt).is_ok());
        // Durable before any handler ran.
        let topic = rt.broker().topic("production/http.api.v1.ingest.pagerduty").unwrap();
        assert_eq!(rt.broker().end_offset(&topic), 1);

        assert_eq!(rt.http_ingress("/nope", Bytes::from_static(b"{}"), &headers).status, 404);
        assert_eq!(
            rt.http_ingress("/api/v1/ingest/pagerduty", Bytes::from_static(b"{oops"), &headers).status,
            400
        );
        let huge = Bytes::from(vec![b' '; 2 * 1024 * 1024]);
        assert_eq!(rt.http_ingress("/api/v1/ingest/pagerduty", huge, &headers).status, 413);

        rt.run_until_idle();
        let reqs = got.lock();
        assert_eq!(reqs.len(), 1);
        assert_eq!(reqs[0].receipt_id, receipt);
        assert_eq!(reqs[0].sequence, 1);
        assert_eq!(reqs[0].headers.get("content-type").map(String::as_str), Some("application/json"));
    }

    #[test]
    fn environments_are_isolated() {
        let (clock, rt) = runtime();
        rt.create_topic(Environment::Production, "L2.converted").unwrap();
        rt.create_topic(Environment::Staging, "L2.converted").unwrap();
        let errors = Arc::new(Mutex::new(Vec::new()));
        let e = errors.clone();
        let f = rt
            .register_function(FunctionSpec::new("sneaky", 1, Environment::Staging, move |ctx, _| {
                e.lock().push(ctx.publish("../production/L2.converted", Message::new("x")).is_err());
                e.lock().push(ctx.publish("production/L2.converted", Message::new("x")).is_err());
                e.lock().push(
                    ctx.publish_to(Environment::Production, "L2.converted", Message::new("x")).is_err(),
                );
                e.lock().push(ctx.publish("L2.converted", Message::new("own")).is_ok());
                Ok(())
            }))
            .unwrap();
        assert!(matches!(
            rt.attach_trigger(&f, Trigger::topic("production/L2.converted", DeliveryMode::Ack)),
            Err(RuntimeError::CrossEnvironment { .. })
        ));
        rt.attach_trigger(&f, Trigger::timer(Duration::from_secs(1))).unwrap();
        clock.advance(Duration::from_secs(1));
        assert_eq!(rt.tick_timers(), 1);
        assert_eq!(*errors.lock(), vec![true, true, true, true]);
        let prod = rt.broker().topic("production/L2.converted").unwrap();
        assert_eq!(rt.broker().end_offset(&prod), 0);
    }

    #[test]
    fn background_workers_process_and_drain() {
        let clock: SharedClock = Arc::new(crate::clock::SystemClock::new());
        let rt = Runtime::new(
            Broker::in_memory(),
            Store::in_memory(clock.clone()),
            clock,
            RuntimeConfig::default(),
        );
        let t = rt.create_topic(Environment::Production, "in").unwrap();
        let count = Arc::new(AtomicUsize::new(0));
        let c = count.clone();
        let f = rt
            .register_function(FunctionSpec::new("f", 3, Environment::Production, move |_, _| {
                thread::sleep(Duration::from_millis(2));
                c.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }))
            .unwrap();
        rt.attach_trigger(&f, Trigger::topic("in", DeliveryMode::Ack)).unwrap();
        rt.start();
        for _ in 0..10 {
            rt.broker().publish(&t, Message::new("x")).unwrap();
        }
        assert!(rt.shutdown(Duration::from_secs(10)));
        assert_eq!(count.load(Ordering::SeqCst), 10);
        assert!(!rt.is_accepting());
    }

    #[test]
    fn detached_trigger_stops_dispatching() {
        let (_, rt) = runtime();
        let t = rt.create_topic(Environment::Production, "in").unwrap();
        let f = rt.register_function(noop("f", 3)).unwrap();
        let trig = rt.attach_trigger(&f, Trigger::topic("in", DeliveryMode::Ack)).unwrap();
        rt.detach_trigger(trig).unwrap();
        rt.broker().publish(&t, Message::new("x")).unwrap();
        assert_eq!(rt.run_until_idle(), 0);
        assert!(matches!(rt.detach_trigger(trig), Err(RuntimeError::UnknownTrigger)));
    }
}
