//! Topic-based publish/subscribe bus with a key-value parameter server.
//!
//! A [`Broker`] owns topics and parameters. Publishers and subscribers talk
//! to it through a [`Node`], either in-process ([`Broker::node`]) or over TCP
//! ([`Node::connect`] against a [`Broker::serve`] endpoint). Both routes
//! behave the same.

mod remote;
pub mod wire;

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::net::ToSocketAddrs;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};
use serde_json::Value;
use thiserror::Error;

use crate::messages::{Message, SchemaError};
use crate::transforms::Timestamp;

pub use remote::ServerHandle;

pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7447";
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Error)]
pub enum BusError {
    #[error("invalid name {0:?}")]
    Naming(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("bus closed")]
    Closed,
    #[error("transport error: {0}")]
    Transport(String),
}

impl From<SchemaError> for BusError {
    fn from(e: SchemaError) -> Self {
        BusError::Schema(e.to_string())
    }
}

/// Validated topic name: `[A-Za-z0-9_/]+`, no leading or trailing `/`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: &str) -> Result<Self, BusError> {
        if is_valid_name(name) {
            Ok(Self(name.to_string()))
        } else {
            Err(BusError::Naming(name.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Shared by topic and frame names.
pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('/')
        && !name.ends_with('/')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '/')
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub topic: TopicName,
    pub seq: u64,
    pub publisher: u64,
    pub publish_stamp: Timestamp,
    pub payload: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliveryMode {
    /// FIFO delivery; the oldest envelope is dropped when `capacity` is exceeded.
    Queued { capacity: usize },
    /// Only the most recent envelope is kept.
    Latest,
}

impl DeliveryMode {
    pub fn queued() -> Self {
        DeliveryMode::Queued {
            capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }
}

impl Default for DeliveryMode {
    fn default() -> Self {
        Self::queued()
    }
}

pub(crate) trait Sink: Send + Sync {
    /// Returns false once the sink is gone and should be pruned.
    fn deliver(&self, env: &Envelope) -> bool;
    fn close(&self, err: BusError);
}

struct SlotState {
    queue: VecDeque<Envelope>,
    closed: Option<BusError>,
    overflowed: u64,
}

pub(crate) struct Slot {
    mode: DeliveryMode,
    state: Mutex<SlotState>,
    ready: Condvar,
    alive: AtomicBool,
}

impl Slot {
    fn new(mode: DeliveryMode) -> Arc<Self> {
        Arc::new(Self {
            mode,
            state: Mutex::new(SlotState {
                queue: VecDeque::new(),
                closed: None,
                overflowed: 0,
            }),
            ready: Condvar::new(),
            alive: AtomicBool::new(true),
        })
    }

    fn push(&self, env: Envelope) {
        let mut st = self.state.lock();
        match self.mode {
            DeliveryMode::Latest => {
                st.queue.clear();
                st.queue.push_back(env);
            }
            DeliveryMode::Queued { capacity } => {
                if st.queue.len() >= capacity.max(1) {
                    st.queue.pop_front();
                    st.overflowed += 1;
                }
                st.queue.push_back(env);
            }
        }
        drop(st);
        self.ready.notify_all();
    }
}

impl Sink for Slot {
    fn deliver(&self, env: &Envelope) -> bool {
        if !self.alive.load(Ordering::Acquire) {
            return false;
        }
        self.push(env.clone());
        true
    }

    fn close(&self, err: BusError) {
        let mut st = self.state.lock();
        if st.closed.is_none() {
            st.closed = Some(err);
        }
        drop(st);
        self.ready.notify_all();
    }
}

/// Receiving end of a subscription. Dropping it unsubscribes.
pub struct Subscription {
    topic: TopicName,
    slot: Arc<Slot>,
}

impl Subscription {
    pub fn topic(&self) -> &TopicName {
        &self.topic
    }

    /// Waits up to `timeout`. `Ok(None)` means nothing arrived in time.
    /// Pending envelopes are still handed out after the bus closes; the
    /// close error is reported once the queue is empty.
    pub fn recv(&self, timeout: Duration) -> Result<Option<Envelope>, BusError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.slot.state.lock();
        loop {
            if let Some(env) = st.queue.pop_front() {
                return Ok(Some(env));
            }
            if let Some(err) = &st.closed {
                return Err(err.clone());
            }
            if self.slot.ready.wait_until(&mut st, deadline).timed_out() {
                return match st.queue.pop_front() {
                    Some(env) => Ok(Some(env)),
                    None => Ok(None),
                };
            }
        }
    }

    pub fn try_recv(&self) -> Result<Option<Envelope>, BusError> {
        let mut st = self.slot.state.lock();
        match st.queue.pop_front() {
            Some(env) => Ok(Some(env)),
            None => match &st.closed {
                Some(err) => Err(err.clone()),
                None => Ok(None),
            },
        }
    }

    /// Takes everything currently queued without waiting.
    pub fn drain(&self) -> Result<Vec<Envelope>, BusError> {
        let mut st = self.slot.state.lock();
        if st.queue.is_empty() {
            if let Some(err) = &st.closed {
                return Err(err.clone());
            }
        }
        Ok(st.queue.drain(..).collect())
    }

    /// Envelopes discarded because the queue was full.
    pub fn overflowed(&self) -> u64 {
        self.slot.state.lock().overflowed
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.slot.alive.store(false, Ordering::Release);
    }
}

#[derive(Default)]
struct TopicState {
    sinks: Vec<Arc<dyn Sink>>,
    latched: Option<Envelope>,
}

pub(crate) struct BrokerInner {
    topics: Mutex<HashMap<TopicName, TopicState>>,
    params: RwLock<HashMap<String, String>>,
    closed: AtomicBool,
    next_publisher: AtomicU64,
}

impl BrokerInner {
    pub(crate) fn allocate_publisher(&self) -> u64 {
        self.next_publisher.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    pub(crate) fn dispatch(&self, env: Envelope) -> Result<(), BusError> {
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        let mut topics = self.topics.lock();
        let state = topics.entry(env.topic.clone()).or_default();
        state.sinks.retain(|s| s.deliver(&env));
        if env.payload.is_latched() {
            state.latched = Some(env);
        }
        Ok(())
    }

    pub(crate) fn attach(&self, topic: &TopicName, sink: Arc<dyn Sink>) -> Result<(), BusError> {
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        let mut topics = self.topics.lock();
        let state = topics.entry(topic.clone()).or_default();
        if let Some(latched) = &state.latched {
            if !sink.deliver(latched) {
                return Ok(());
            }
        }
        state.sinks.push(sink);
        Ok(())
    }

    pub(crate) fn param_set(&self, key: &str, value: &str) -> Result<(), BusError> {
        check_param_key(key)?;
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        self.params.write().insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub(crate) fn param_get(&self, key: &str) -> Result<Option<String>, BusError> {
        check_param_key(key)?;
        if self.is_closed() {
            return Err(BusError::Closed);
        }
        Ok(self.params.read().get(key).cloned())
    }
}

fn check_param_key(key: &str) -> Result<(), BusError> {
    if key.is_empty() {
        Err(BusError::Naming(key.to_string()))
    } else {
        Ok(())
    }
}

/// The message broker. Cloning yields another handle to the same broker.
#[derive(Clone)]
pub struct Broker {
    inner: Arc<BrokerInner>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

impl Broker {
    pub fn new() -> Self {
        Self {
            inner: Arc::new(BrokerInner {
                topics: Mutex::new(HashMap::new()),
                params: RwLock::new(HashMap::new()),
                closed: AtomicBool::new(false),
                next_publisher: AtomicU64::new(1),
            }),
        }
    }

    /// An in-process node with its own publisher identity.
    pub fn node(&self) -> Node {
        Node {
            publisher: self.inner.allocate_publisher(),
            transport: Transport::Local(self.inner.clone()),
            seqs: Mutex::new(HashMap::new()),
        }
    }

    /// Accepts remote nodes on `addr` (use port 0 for an ephemeral port).
    pub fn serve(&self, addr: impl ToSocketAddrs) -> Result<ServerHandle, BusError> {
        remote::serve(self.inner.clone(), addr)
    }

    /// Closes every subscription and rejects further operations.
    pub fn shutdown(&self) {
        self.inner.closed.store(true, Ordering::Release);
        let topics = std::mem::take(&mut *self.inner.topics.lock());
        for state in topics.into_values() {
            for sink in state.sinks {
                sink.close(BusError::Closed);
            }
        }
    }
}

enum Transport {
    Local(Arc<BrokerInner>),
    Remote(Arc<remote::Client>),
}

/// A participant on the bus. Each node is one publisher: sequence numbers
/// count up per topic from 1.
pub struct Node {
    publisher: u64,
    transport: Transport,
    seqs: Mutex<HashMap<TopicName, u64>>,
}

impl Node {
    /// Joins a broker served at `addr`.
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Node, BusError> {
        let client = remote::Client::connect(addr)?;
        Ok(Node {
            publisher: client.publisher(),
            transport: Transport::Remote(client),
            seqs: Mutex::new(HashMap::new()),
        })
    }

    pub fn publisher_id(&self) -> u64 {
        self.publisher
    }

    pub fn is_remote(&self) -> bool {
        matches!(self.transport, Transport::Remote(_))
    }

    /// Publishes and returns the assigned sequence number.
    pub fn publish(&self, topic: &str, payload: Message) -> Result<u64, BusError> {
        let topic = TopicName::new(topic)?;
        // Holding the counter lock through dispatch keeps seq order equal to
        // delivery order when a node is shared between threads.
        let mut seqs = self.seqs.lock();
        let seq = seqs.get(&topic).copied().unwrap_or(0) + 1;
        let env = Envelope {
            topic: topic.clone(),
            seq,
            publisher: self.publisher,
            publish_stamp: Timestamp::now(),
            payload,
        };
        match &self.transport {
            Transport::Local(b) => b.dispatch(env)?,
            Transport::Remote(c) => c.publish(&env)?,
        }
        seqs.insert(topic, seq);
        Ok(seq)
    }

    /// Publishes an untyped body, validating it against the registered schema for `kind`.
    pub fn publish_raw(&self, topic: &str, kind: &str, body: Value) -> Result<u64, BusError> {
        TopicName::new(topic)?;
        let msg = Message::from_parts(kind, body)?;
        self.publish(topic, msg)
    }

    pub fn subscribe(&self, topic: &str, mode: DeliveryMode) -> Result<Subscription, BusError> {
        let topic = TopicName::new(topic)?;
        let slot = Slot::new(mode);
        match &self.transport {
            Transport::Local(b) => b.attach(&topic, slot.clone())?,
            Transport::Remote(c) => c.subscribe(&topic, slot.clone())?,
        }
        Ok(Subscription { topic, slot })
    }

    pub fn param_set(&self, key: &str, value: &str) -> Result<(), BusError> {
        match &self.transport {
            Transport::Local(b) => b.param_set(key, value),
            Transport::Remote(c) => {
                check_param_key(key)?;
                c.param_set(key, value)
            }
        }
    }

    pub fn param_get(&self, key: &str) -> Result<Option<String>, BusError> {
        match &self.transport {
            Transport::Local(b) => b.param_get(key),
            Transport::Remote(c) => {
                check_param_key(key)?;
                c.param_get(key)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::{JointCommand, MetadataBody, SceneMetadata};

    fn cmd(target: f64) -> Message {
        Message::JointCommand(JointCommand {
            joint: "j1".into(),
            target,
            max_speed: None,
        })
    }

    fn meta(name: &str) -> Message {
        Message::SceneMetadata(SceneMetadata {
            scene: name.into(),
            bodies: vec![MetadataBody {
                name: "base".into(),
                mesh: "base.stl".into(),
            }],
        })
    }

    const SHORT: Duration = Duration::from_millis(50);

    #[test]
    fn topic_names() {
        for ok in ["tf", "scene/metadata", "rtd/request", "a_b/C9"] {
            assert!(TopicName::new(ok).is_ok(), "{ok}");
        }
        for bad in ["", "/tf", "tf/", "with space", "dash-ed", "ü"] {
            assert!(matches!(TopicName::new(bad), Err(BusError::Naming(_))), "{bad}");
        }
    }

    #[test]
    fn seq_increments_per_topic() {
        let broker = Broker::new();
        let node = broker.node();
        let a = node.publish("tf", cmd(0.0)).unwrap();
        let b = node.publish("tf", cmd(1.0)).unwrap();
        assert_eq!(b, a + 1);
        assert_eq!(node.publish("other", cmd(0.0)).unwrap(), 1);
    }

    #[test]
    fn publish_without_subscribers_is_not_retained_unless_latched() {
        let broker = Broker::new();
        let node = broker.node();
        node.publish("joint_cmd", cmd(1.0)).unwrap();
        node.publish("scene/metadata", meta("s")).unwrap();
        let plain = node.subscribe("joint_cmd", DeliveryMode::queued()).unwrap();
        assert!(plain.recv(SHORT).unwrap().is_none());
        let latched = node.subscribe("scene/metadata", DeliveryMode::queued()).unwrap();
        let env = latched.recv(SHORT).unwrap().unwrap();
        assert_eq!(env.payload, meta("s"));
    }

    #[test]
    fn independent_publishers_keep_independent_sequences() {
        let broker = Broker::new();
        let (p1, p2) = (broker.node(), broker.node());
        let sub = broker.node().subscribe("tf", DeliveryMode::queued()).unwrap();
        for i in 0..5 {
            p1.publish("tf", cmd(i as f64)).unwrap();
            p2.publish("tf", cmd(i as f64)).unwrap();
            p2.publish("tf", cmd(i as f64)).unwrap();
        }
        let log = sub.drain().unwrap();
        assert_eq!(log.len(), 15);
        let seqs = |p: u64| -> Vec<u64> {
            log.iter().filter(|e| e.publisher == p).map(|e| e.seq).collect()
        };
        assert_eq!(seqs(p1.publisher_id()), (1..=5).collect::<Vec<_>>());
        assert_eq!(seqs(p2.publisher_id()), (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn queued_is_fifo_and_latest_keeps_last() {
        let broker = Broker::new();
        let node = broker.node();
        let q = node.subscribe("joint_cmd", DeliveryMode::queued()).unwrap();
        let l = node.subscribe("joint_cmd", DeliveryMode::Latest).unwrap();
        node.publish("joint_cmd", cmd(1.0)).unwrap();
        node.publish("joint_cmd", cmd(2.0)).unwrap();
        assert_eq!(q.recv(SHORT).unwrap().unwrap().payload, cmd(1.0));
        assert_eq!(q.recv(SHORT).unwrap().unwrap().payload, cmd(2.0));
        assert_eq!(l.recv(SHORT).unwrap().unwrap().payload, cmd(2.0));
        assert!(l.try_recv().unwrap().is_none());
    }

    #[test]
    fn queue_overflow_drops_oldest() {
        let broker = Broker::new();
        let node = broker.node();
        let q = node
            .subscribe("joint_cmd", DeliveryMode::Queued { capacity: 3 })
            .unwrap();
        for i in 0..5 {
            node.publish("joint_cmd", cmd(i as f64)).unwrap();
        }
        let got: Vec<_> = q.drain().unwrap().into_iter().map(|e| e.seq).collect();
        assert_eq!(got, vec![3, 4, 5]);
        assert_eq!(q.overflowed(), 2);
    }

    #[test]
    fn receive_times_out_on_silent_topic() {
        let broker = Broker::new();
        let sub = broker.node().subscribe("quiet", DeliveryMode::queued()).unwrap();
        let start = Instant::now();
        assert!(sub.recv(Duration::from_millis(10)).unwrap().is_none());
        assert!(start.elapsed() >= Duration::from_millis(10));
    }

    #[test]
    fn params_read_back_and_last_write_wins() {
        let broker = Broker::new();
        let node = broker.node();
        node.param_set("scene/metadata", "{\"a\":1}").unwrap();
        assert_eq!(node.param_get("scene/metadata").unwrap().as_deref(), Some("{\"a\":1}"));
        assert_eq!(node.param_get("missing").unwrap(), None);
        node.param_set("k", "A").unwrap();
        node.param_set("k", "B").unwrap();
        assert_eq!(node.param_get("k").unwrap().as_deref(), Some("B"));
        assert!(matches!(node.param_set("", "x"), Err(BusError::Naming(_))));
        assert!(matches!(node.param_get(""), Err(BusError::Naming(_))));
    }

    #[test]
    fn publish_errors() {
        let broker = Broker::new();
        let node = broker.node();
        assert!(matches!(node.publish("/bad", cmd(0.0)), Err(BusError::Naming(_))));
        assert!(matches!(
            node.publish_raw("tf", "Telemetry", Value::Null),
            Err(BusError::Schema(_))
        ));
        assert!(node
            .publish_raw("joint_cmd", "JointCommand", serde_json::json!({"joint": "j1", "target": 1.0}))
            .is_ok());
    }

    #[test]
    fn shutdown_closes_subscriptions() {
        let broker = Broker::new();
        let node = broker.node();
        let sub = node.subscribe("tf", DeliveryMode::queued()).unwrap();
        node.publish("tf", cmd(0.0)).unwrap();
        broker.shutdown();
        assert!(sub.recv(SHORT).unwrap().is_some());
        assert!(matches!(sub.recv(SHORT), Err(BusError::Closed)));
        assert!(matches!(node.publish("tf", cmd(0.0)), Err(BusError::Closed)));
    }

    #[test]
    fn dropped_subscription_is_pruned() {
        let broker = Broker::new();
        let node = broker.node();
        let sub = node.subscribe("tf", DeliveryMode::queued()).unwrap();
        drop(sub);
        node.publish("tf", cmd(0.0)).unwrap();
        let topics = broker.inner.topics.lock();
        assert!(topics[&TopicName::new("tf").unwrap()].sinks.is_empty());
    }
}
