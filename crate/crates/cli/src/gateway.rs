//! WebSocket gateway for the operator console.
//!
//! Every frame is a JSON object with `v: 1` and a `type`. The server sends
//! `scene` once on connect, then `poses` at the broadcast rate, `latency`
//! when a bench finishes and `error` for rejected client messages. Clients
//! send `jog`, `set_target` and `start_bench`.

use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tungstenite::http::StatusCode;
use tungstenite::{Message as WsMessage, WebSocket};
use twinbridge_core::bus::{BusError, DeliveryMode, Node};
use twinbridge_core::latency::{assess_hci, run_rtd_bench, BenchConfig, LatencyStats};
use twinbridge_core::messages::{JointCommand, Message, TOPIC_JOINT_CMD, TOPIC_TF};
use twinbridge_core::mirror::{
    build_from_metadata, run_sync_loop, MirrorError, MirrorScene, MirrorSnapshots, SyncTimerConfig,
};
use twinbridge_core::tftree::TransformBuffer;
use twinbridge_core::timer::StopSignal;

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_PORT: u16 = 8090;
pub const WS_PATH: &str = "/ws";

const POLL: Duration = Duration::from_millis(5);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(2);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("broadcast rate {broadcast} Hz must be positive and at most the mirror rate {mirror} Hz")]
    Rate { broadcast: f64, mirror: f64 },
    #[error(transparent)]
    Mirror(#[from] MirrorError),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub host: String,
    pub port: u16,
    pub broadcast_hz: f64,
    pub sync: SyncTimerConfig,
    /// How long to wait for scene metadata on startup.
    pub metadata_wait: Duration,
    /// A client whose socket will not take a frame within this long is
    /// dropped.
    pub write_timeout: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            broadcast_hz: 30.0,
            sync: SyncTimerConfig::default(),
            metadata_wait: Duration::from_secs(5),
            write_timeout: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayState {
    pub clients: usize,
    pub broadcast_hz: f64,
    pub latency: Option<LatencyStats>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ClientMessage {
    Jog {
        #[serde(default)]
        v: Option<u64>,
        joint: String,
        delta: f64,
    },
    SetTarget {
        #[serde(default)]
        v: Option<u64>,
        joint: String,
        target: f64,
    },
    StartBench {
        #[serde(default)]
        v: Option<u64>,
        frames: Option<u64>,
        rate: Option<f64>,
    },
}

impl ClientMessage {
    fn version(&self) -> Option<u64> {
        match self {
            ClientMessage::Jog { v, .. }
            | ClientMessage::SetTarget { v, .. }
            | ClientMessage::StartBench { v, .. } => *v,
        }
    }
}

/// Versioned slot so each client can tell whether it has sent the latest value.
struct Versioned<T> {
    version: u64,
    value: Option<T>,
}

impl<T> Default for Versioned<T> {
    fn default() -> Self {
        Self {
            version: 0,
            value: None,
        }
    }
}

struct Shared {
    node: Node,
    snapshots: MirrorSnapshots,
    scene_frame: String,
    broadcast_period: Duration,
    write_timeout: Duration,
    /// Last commanded target per joint, so jogs are relative to it.
    targets: parking_lot::Mutex<HashMap<String, f64>>,
    latency: parking_lot::RwLock<Versioned<(LatencyStats, String)>>,
    notices: parking_lot::RwLock<Versioned<String>>,
    bench_running: AtomicBool,
    clients: AtomicUsize,
}

impl Shared {
    fn publish_target(&self, joint: &str, target: f64) -> Result<(), BusError> {
        self.node.publish(
            TOPIC_JOINT_CMD,
            Message::JointCommand(JointCommand {
                joint: joint.to_owned(),
                target,
                max_speed: None,
            }),
        )?;
        self.targets.lock().insert(joint.to_owned(), target);
        Ok(())
    }

    fn notice(&self, message: String) {
        let mut n = self.notices.write();
        n.version += 1;
        n.value = Some(message);
    }
}

pub struct Gateway {
    listener: TcpListener,
    shared: Arc<Shared>,
    scene: MirrorScene,
    tf: twinbridge_core::bus::Subscription,
    sync: SyncTimerConfig,
}

fn frame(kind: &str, mut body: Value) -> String {
    body["v"] = json!(PROTOCOL_VERSION);
    body["type"] = json!(kind);
    body.to_string()
}

fn error_frame(message: impl Into<String>) -> String {
    frame("error", json!({ "message": message.into() }))
}

fn scene_frame(scene: &MirrorScene) -> String {
    let bodies: Vec<Value> = scene
        .model_nodes
        .iter()
        .map(|m| json!({ "name": m.name, "mesh": m.mesh_ref }))
        .collect();
    frame("scene", json!({ "scene": scene.scene, "bodies": bodies }))
}

fn poses_frame(scene: &MirrorScene) -> String {
    let poses: serde_json::Map<String, Value> = scene
        .model_nodes
        .iter()
        .zip(&scene.transform_nodes)
        .zip(&scene.synced)
        .filter(|(_, synced)| **synced)
        .map(|((m, t), _)| (m.name.clone(), json!(t.pose.to_pose7())))
        .collect();
    frame(
        "poses",
        json!({ "stamp_nanos": scene.last_sync.as_nanos(), "poses": poses }),
    )
}

impl Gateway {
    /// Binds the listening socket, then builds the mirror from the scene
    /// metadata on the bus.
    pub fn bind(node: Node, config: &GatewayConfig) -> Result<Self, GatewayError> {
        if !(config.broadcast_hz > 0.0 && config.broadcast_hz <= config.sync.rate_hz) {
            return Err(GatewayError::Rate {
                broadcast: config.broadcast_hz,
                mirror: config.sync.rate_hz,
            });
        }
        let addr = format!("{}:{}", config.host, config.port);
        let listener = TcpListener::bind(&addr).map_err(|source| GatewayError::Bind {
            addr: addr.clone(),
            source,
        })?;
        let scene = build_from_metadata(&node, config.metadata_wait)?;
        let tf = node.subscribe(TOPIC_TF, DeliveryMode::queued())?;
        let shared = Arc::new(Shared {
            snapshots: MirrorSnapshots::new(&scene),
            scene_frame: scene_frame(&scene),
            node,
            broadcast_period: Duration::from_secs_f64(1.0 / config.broadcast_hz),
            write_timeout: config.write_timeout,
            targets: Default::default(),
            latency: Default::default(),
            notices: Default::default(),
            bench_running: AtomicBool::new(false),
            clients: AtomicUsize::new(0),
        });
        Ok(Self {
            listener,
            shared,
            scene,
            tf,
            sync: config.sync,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    pub fn state(&self) -> GatewayState {
        GatewayState {
            clients: self.shared.clients.load(Ordering::Relaxed),
            broadcast_hz: 1.0 / self.shared.broadcast_period.as_secs_f64(),
            latency: self.shared.latency.read().value.as_ref().map(|(s, _)| *s),
        }
    }

    /// Serves clients until `stop` is raised.
    pub fn run(mut self, stop: &StopSignal) -> Result<(), GatewayError> {
        self.listener
            .set_nonblocking(true)
            .map_err(|source| GatewayError::Bind {
                addr: self.local_addr().to_string(),
                source,
            })?;
        info!("gateway listening on ws://{}{WS_PATH}", self.local_addr());
        let shared = &self.shared;
        let listener = &self.listener;
        let (scene, tf, sync) = (&mut self.scene, &self.tf, &self.sync);
        thread::scope(|s| {
            let mirror = s.spawn(move || {
                let mut buffer = TransformBuffer::default();
                let r = run_sync_loop(scene, &mut buffer, tf, sync, stop, Some(&shared.snapshots));
                if r.is_err() {
                    stop.stop();
                }
                r
            });
            while !stop.is_stopped() {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let shared = Arc::clone(shared);
                        s.spawn(move || serve_client(stream, peer, &shared, stop));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
            mirror.join().expect("mirror thread panicked")
        })?;
        Ok(())
    }
}

pub fn run_gateway(node: Node, config: &GatewayConfig, stop: &StopSignal) -> Result<(), GatewayError> {
    Gateway::bind(node, config)?.run(stop)
}

#[allow(clippy::result_large_err)]
fn handshake(stream: TcpStream) -> Option<WebSocket<TcpStream>> {
    stream.set_nonblocking(false).ok()?;
    stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT)).ok()?;
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == WS_PATH {
            Ok(resp)
        } else {
            let mut e = ErrorResponse::new(Some(format!("websocket endpoint is {WS_PATH}")));
            *e.status_mut() = StatusCode::NOT_FOUND;
            Err(e)
        }
    };
    match tungstenite::accept_hdr(stream, check_path) {
        Ok(ws) => Some(ws),
        Err(e) => {
            debug!("handshake failed: {e}");
            None
        }
    }
}

struct ClientGuard<'a>(&'a AtomicUsize);

impl Drop for ClientGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::Relaxed);
    }
}

fn serve_client(stream: TcpStream, peer: SocketAddr, shared: &Arc<Shared>, stop: &StopSignal) {
    let Some(mut ws) = handshake(stream) else { return };
    shared.clients.fetch_add(1, Ordering::Relaxed);
    let _guard = ClientGuard(&shared.clients);
    info!("console client {peer} connected");
    let _ = ws.get_ref().set_read_timeout(Some(POLL));
    let _ = ws.get_ref().set_write_timeout(Some(shared.write_timeout));

    let send = |ws: &mut WebSocket<TcpStream>, text: String| -> bool {
        match ws.send(WsMessage::text(text)) {
            Ok(()) => true,
            Err(e) => {
                warn!("dropping console client {peer}: {e}");
                false
            }
        }
    };
    if !send(&mut ws, shared.scene_frame.clone()) {
        return;
    }

    let mut next_broadcast = Instant::now();
    let mut sent_tick = u64::MAX;
    let mut latency_seen = shared.latency.read().version;
    let mut notice_seen = shared.notices.read().version;
    while !stop.is_stopped() {
        match ws.read() {
            Ok(WsMessage::Text(text)) => {
                if let Err(reply) = handle_message(&text, shared, stop) {
                    if !send(&mut ws, reply) {
                        return;
                    }
                }
            }
            Ok(WsMessage::Binary(_)) => {
                if !send(&mut ws, error_frame("binary frames are not supported")) {
                    return;
                }
            }
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => break,
            Err(e) => {
                debug!("console client {peer}: {e}");
                break;
            }
        }

        let now = Instant::now();
        if now >= next_broadcast {
            while next_broadcast <= now {
                next_broadcast += shared.broadcast_period;
            }
            let snap = shared.snapshots.latest();
            if snap.stats.ticks != sent_tick && snap.synced.iter().any(|s| *s) {
                sent_tick = snap.stats.ticks;
                if !send(&mut ws, poses_frame(&snap)) {
                    return;
                }
            }
        }
        let latency = {
            let l = shared.latency.read();
            (l.version != latency_seen).then(|| (l.version, l.value.as_ref().map(|v| v.1.clone())))
        };
        if let Some((version, text)) = latency {
            latency_seen = version;
            if let Some(text) = text {
                if !send(&mut ws, text) {
                    return;
                }
            }
        }
        let notice = {
            let n = shared.notices.read();
            (n.version != notice_seen).then(|| (n.version, n.value.clone()))
        };
        if let Some((version, text)) = notice {
            notice_seen = version;
            if let Some(text) = text {
                if !send(&mut ws, error_frame(text)) {
                    return;
                }
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    info!("console client {peer} disconnected");
}

/// Applies one client message. `Err` carries the error frame to send back.
fn handle_message(text: &str, shared: &Arc<Shared>, stop: &StopSignal) -> Result<(), String> {
    let msg: ClientMessage =
        serde_json::from_str(text).map_err(|e| error_frame(format!("bad message: {e}")))?;
    if let Some(v) = msg.version() {
        if v != PROTOCOL_VERSION {
            return Err(error_frame(format!("unsupported protocol version {v}")));
        }
    }
    let bus_err = |e: BusError| error_frame(format!("bus: {e}"));
    match msg {
        ClientMessage::Jog { joint, delta, .. } => {
            if !delta.is_finite() {
                return Err(error_frame("delta must be finite"));
            }
            let current = shared.targets.lock().get(&joint).copied().unwrap_or(0.0);
            shared.publish_target(&joint, current + delta).map_err(bus_err)
        }
        ClientMessage::SetTarget { joint, target, .. } => {
            if !target.is_finite() {
                return Err(error_frame("target must be finite"));
            }
            shared.publish_target(&joint, target).map_err(bus_err)
        }
        ClientMessage::StartBench { frames, rate, .. } => {
            let defaults = BenchConfig::default();
            let config = BenchConfig {
                n_frames: frames.unwrap_or(defaults.n_frames),
                rate_hz: rate.unwrap_or(defaults.rate_hz),
                ..defaults
            };
            config.validate().map_err(|e| error_frame(e.to_string()))?;
            if shared.bench_running.swap(true, Ordering::AcqRel) {
                return Err(error_frame("a bench is already running"));
            }
            let shared = Arc::clone(shared);
            let stop = stop.clone();
            thread::spawn(move || {
                match run_rtd_bench(&shared.node, &config, &stop) {
                    Ok(out) => {
                        let hci = assess_hci(&out.stats, &config);
                        let text = frame(
                            "latency",
                            json!({
                                "stats": out.stats,
                                "one_way_ms": hci.one_way_ms,
                                "within_threshold": hci.within_threshold,
                                "threshold_ms": config.hci_threshold_ms,
                                "dropped": out.dropped.len(),
                            }),
                        );
                        let mut l = shared.latency.write();
                        l.version += 1;
                        l.value = Some((out.stats, text));
                    }
                    Err(e) => shared.notice(format!("bench failed: {e}")),
                }
                shared.bench_running.store(false, Ordering::Release);
            });
            Ok(())
        }
    }
}
