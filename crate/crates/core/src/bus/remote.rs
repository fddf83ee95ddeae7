use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::wire::{self, Frame};
use super::{BrokerInner, BusError, Envelope, Sink, Slot, TopicName};
use crate::messages::MESSAGE_KINDS;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(5);
const WRITER_POLL: Duration = Duration::from_millis(100);

fn transport(e: impl std::fmt::Display) -> BusError {
    BusError::Transport(e.to_string())
}

struct Conn {
    stream: TcpStream,
    alive: AtomicBool,
    tx: mpsc::Sender<Vec<u8>>,
}

impl Conn {
    fn send(&self, frame: &Frame) -> bool {
        match wire::encode(frame) {
            Ok(buf) => self.tx.send(buf).is_ok(),
            Err(e) => {
                log::warn!("dropping unencodable frame: {e}");
                true
            }
        }
    }

    fn kill(&self) {
        self.alive.store(false, Ordering::Release);
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

struct RemoteSink(Arc<Conn>);

impl Sink for RemoteSink {
    fn deliver(&self, env: &Envelope) -> bool {
        self.0.alive.load(Ordering::Acquire) && self.0.send(&Frame::from_envelope(env))
    }

    fn close(&self, _err: BusError) {
        self.0.kill();
    }
}

/// A running TCP endpoint. Dropping it stops accepting and disconnects peers.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<Arc<Conn>>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Number of peers currently connected.
    pub fn peer_count(&self) -> usize {
        let mut conns = self.conns.lock();
        conns.retain(|c| c.alive.load(Ordering::Acquire));
        conns.len()
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::AcqRel) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for c in self.conns.lock().drain(..) {
            c.kill();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub(super) fn serve(
    broker: Arc<BrokerInner>,
    addr: impl ToSocketAddrs,
) -> Result<ServerHandle, BusError> {
    let listener = TcpListener::bind(addr).map_err(transport)?;
    let addr = listener.local_addr().map_err(transport)?;
    let stop = Arc::new(AtomicBool::new(false));
    let conns: Arc<Mutex<Vec<Arc<Conn>>>> = Arc::new(Mutex::new(Vec::new()));
    let accept = {
        let stop = stop.clone();
        let conns = conns.clone();
        thread::Builder::new()
            .name("bus-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::Acquire) {
                        break;
                    }
                    match stream {
                        Ok(stream) => match spawn_connection(broker.clone(), stream) {
                            Ok(conn) => conns.lock().push(conn),
                            Err(e) => log::warn!("failed to set up peer: {e}"),
                        },
                        Err(e) => log::warn!("accept failed: {e}"),
                    }
                }
            })
            .map_err(transport)?
    };
    Ok(ServerHandle {
        addr,
        stop,
        conns,
        accept: Some(accept),
    })
}

fn spawn_connection(broker: Arc<BrokerInner>, stream: TcpStream) -> std::io::Result<Arc<Conn>> {
    stream.set_nodelay(true)?;
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let conn = Arc::new(Conn {
        stream: stream.try_clone()?,
        alive: AtomicBool::new(true),
        tx,
    });
    let publisher = broker.allocate_publisher();
    conn.send(&Frame::control(
        wire::KIND_HELLO,
        "bus",
        0,
        json!({ "publisher": publisher }),
    ));

    let mut out = stream.try_clone()?;
    let writer_conn = conn.clone();
    thread::Builder::new()
        .name("bus-peer-writer".into())
        .spawn(move || {
            loop {
                match rx.recv_timeout(WRITER_POLL) {
                    Ok(buf) => {
                        if out.write_all(&buf).is_err() {
                            break;
                        }
                    }
                    Err(mpsc::RecvTimeoutError::Timeout) => {
                        if !writer_conn.alive.load(Ordering::Acquire) {
                            break;
                        }
                    }
                    Err(mpsc::RecvTimeoutError::Disconnected) => break,
                }
            }
            writer_conn.kill();
        })?;

    let reader_conn = conn.clone();
    thread::Builder::new()
        .name("bus-peer-reader".into())
        .spawn(move || {
            let mut reader = BufReader::new(stream);
            while let Ok(frame) = wire::read_frame(&mut reader) {
                handle_peer_frame(&broker, &reader_conn, publisher, frame);
            }
            reader_conn.kill();
        })?;
    Ok(conn)
}

fn handle_peer_frame(broker: &Arc<BrokerInner>, conn: &Arc<Conn>, publisher: u64, frame: Frame) {
    let id = frame.seq;
    let topic = frame.topic.clone();
    let reply_err = |e: BusError| {
        conn.send(&Frame::control(
            wire::KIND_ERROR,
            &topic,
            id,
            json!({ "message": e.to_string() }),
        ));
    };
    let str_field = |body: &Value, key: &str| body.get(key).and_then(Value::as_str).map(str::to_owned);

    match frame.kind.as_str() {
        k if MESSAGE_KINDS.contains(&k) => {
            let result = frame.into_envelope().and_then(|mut env| {
                env.publisher = publisher;
                broker.dispatch(env)
            });
            if let Err(e) = result {
                reply_err(e);
            }
        }
        wire::KIND_SUBSCRIBE => {
            let result = TopicName::new(&frame.topic)
                .and_then(|t| broker.attach(&t, Arc::new(RemoteSink(conn.clone()))));
            match result {
                Ok(()) => {
                    conn.send(&Frame::control(wire::KIND_ACK, &topic, id, Value::Null));
                }
                Err(e) => reply_err(e),
            }
        }
        wire::KIND_PARAM_SET => {
            let key = str_field(&frame.body, "key").unwrap_or_default();
            let Some(value) = str_field(&frame.body, "value") else {
                reply_err(BusError::Schema("ParamSet needs a string value".into()));
                return;
            };
            match broker.param_set(&key, &value) {
                Ok(()) => {
                    conn.send(&Frame::control(wire::KIND_ACK, &topic, id, Value::Null));
                }
                Err(e) => reply_err(e),
            }
        }
        wire::KIND_PARAM_GET => {
            let key = str_field(&frame.body, "key").unwrap_or_default();
            match broker.param_get(&key) {
                Ok(value) => {
                    conn.send(&Frame::control(
                        wire::KIND_PARAM_VALUE,
                        &topic,
                        id,
                        json!({ "key": key, "value": value }),
                    ));
                }
                Err(e) => reply_err(e),
            }
        }
        other => reply_err(BusError::Schema(format!("unregistered message kind {other:?}"))),
    }
}

#[derive(Default)]
struct ClientTopic {
    slots: Vec<Arc<Slot>>,
    latched: Option<Envelope>,
}

#[derive(Default)]
struct ClientShared {
    topics: Mutex<HashMap<TopicName, ClientTopic>>,
    pending: Mutex<HashMap<u64, mpsc::Sender<Frame>>>,
    dead: Mutex<Option<String>>,
}

impl ClientShared {
    fn check_alive(&self) -> Result<(), BusError> {
        match &*self.dead.lock() {
            Some(reason) => Err(BusError::Transport(reason.clone())),
            None => Ok(()),
        }
    }

    fn fail(&self, reason: String) {
        *self.dead.lock() = Some(reason.clone());
        self.pending.lock().clear();
        for topic in self.topics.lock().values() {
            for slot in &topic.slots {
                slot.close(BusError::Transport(reason.clone()));
            }
        }
    }

    fn on_frame(&self, frame: Frame) {
        if MESSAGE_KINDS.contains(&frame.kind.as_str()) {
            match frame.into_envelope() {
                Ok(env) => {
                    let mut topics = self.topics.lock();
                    let entry = topics.entry(env.topic.clone()).or_default();
                    entry.slots.retain(|s| s.deliver(&env));
                    if env.payload.is_latched() {
                        entry.latched = Some(env);
                    }
                }
                Err(e) => log::warn!("discarding undecodable delivery: {e}"),
            }
            return;
        }
        match self.pending.lock().remove(&frame.seq) {
            Some(tx) => {
                let _ = tx.send(frame);
            }
            None if frame.kind == wire::KIND_ERROR => {
                log::warn!("bus peer reported: {}", frame.body);
            }
            None => {}
        }
    }
}

pub(crate) struct Client {
    publisher: u64,
    writer: Mutex<TcpStream>,
    shared: Arc<ClientShared>,
    next_request: AtomicU64,
}

impl Client {
    pub(crate) fn connect(addr: impl ToSocketAddrs) -> Result<Arc<Client>, BusError> {
        let stream = TcpStream::connect(addr).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        stream
            .set_read_timeout(Some(REQUEST_TIMEOUT))
            .map_err(transport)?;
        let mut reader = BufReader::new(stream.try_clone().map_err(transport)?);
        let hello = wire::read_frame(&mut reader).map_err(transport)?;
        if hello.kind != wire::KIND_HELLO {
            return Err(BusError::Transport(format!(
                "expected Hello, got {}",
                hello.kind
            )));
        }
        let publisher = hello
            .body
            .get("publisher")
            .and_then(Value::as_u64)
            .ok_or_else(|| BusError::Transport("Hello without publisher id".into()))?;
        stream.set_read_timeout(None).map_err(transport)?;

        let shared = Arc::new(ClientShared::default());
        let reader_shared = shared.clone();
        thread::Builder::new()
            .name("bus-client-reader".into())
            .spawn(move || {
                let reason = loop {
                    match wire::read_frame(&mut reader) {
                        Ok(frame) => reader_shared.on_frame(frame),
                        Err(e) => break format!("connection lost: {e}"),
                    }
                };
                reader_shared.fail(reason);
            })
            .map_err(transport)?;

        Ok(Arc::new(Client {
            publisher,
            writer: Mutex::new(stream),
            shared,
            next_request: AtomicU64::new(1),
        }))
    }

    pub(crate) fn publisher(&self) -> u64 {
        self.publisher
    }

    fn write(&self, frame: &Frame) -> Result<(), BusError> {
        self.shared.check_alive()?;
        let buf = wire::encode(frame).map_err(transport)?;
        let mut w = self.writer.lock();
        w.write_all(&buf).map_err(|e| {
            let _ = w.shutdown(Shutdown::Both);
            transport(e)
        })
    }

    fn request(&self, kind: &str, topic: &str, body: Value) -> Result<Frame, BusError> {
        let id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        self.shared.pending.lock().insert(id, tx);
        if let Err(e) = self.write(&Frame::control(kind, topic, id, body)) {
            self.shared.pending.lock().remove(&id);
            return Err(e);
        }
        let reply = match rx.recv_timeout(REQUEST_TIMEOUT) {
            Ok(frame) => frame,
            Err(_) => {
                self.shared.pending.lock().remove(&id);
                self.shared.check_alive()?;
                return Err(BusError::Transport(format!("{kind} request timed out")));
            }
        };
        if reply.kind == wire::KIND_ERROR {
            let msg = reply
                .body
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("remote error")
                .to_string();
            return Err(BusError::Transport(msg));
        }
        Ok(reply)
    }

    pub(crate) fn publish(&self, env: &Envelope) -> Result<(), BusError> {
        self.write(&Frame::from_envelope(env))
    }

    pub(crate) fn subscribe(&self, topic: &TopicName, slot: Arc<Slot>) -> Result<(), BusError> {
        self.shared.check_alive()?;
        let first = {
            let mut topics = self.shared.topics.lock();
            let first = !topics.contains_key(topic);
            let entry = topics.entry(topic.clone()).or_default();
            if let Some(latched) = &entry.latched {
                slot.deliver(latched);
            }
            entry.slots.push(slot);
            first
        };
        if first {
            if let Err(e) = self.request(wire::KIND_SUBSCRIBE, topic.as_str(), Value::Null) {
                self.shared.topics.lock().remove(topic);
                return Err(e);
            }
        }
        Ok(())
    }

    pub(crate) fn param_set(&self, key: &str, value: &str) -> Result<(), BusError> {
        self.request(
            wire::KIND_PARAM_SET,
            "param",
            json!({ "key": key, "value": value }),
        )
        .map(|_| ())
    }

    pub(crate) fn param_get(&self, key: &str) -> Result<Option<String>, BusError> {
        let reply = self.request(wire::KIND_PARAM_GET, "param", json!({ "key": key }))?;
        Ok(reply
            .body
            .get("value")
            .and_then(Value::as_str)
            .map(str::to_owned))
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }
}
