//! Navigation-side mirror of the simulated scene: one model node and one
//! world-frame transform node per body, refreshed from the transform tree
//! on a fixed-rate timer.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use log::{info, warn};
use parking_lot::RwLock;
use serde::Serialize;
use thiserror::Error;

use crate::bus::{BusError, DeliveryMode, Node, Subscription};
use crate::messages::{Message, SceneMetadata, PARAM_SCENE_METADATA, TOPIC_SCENE_METADATA};
use crate::scene::WORLD_FRAME;
use crate::tftree::{LookupTime, TransformBuffer};
use crate::timer::{FixedRateTimer, MissPolicy, StopSignal};
use crate::transforms::{RigidTransform, Timestamp};

pub const SCENE_ROOT: &str = "SCENE_ROOT";

/// Sustained overrun longer than this raises the overrun warning.
const OVERRUN_WINDOW: Duration = Duration::from_secs(1);

#[derive(Debug, Error)]
pub enum MirrorError {
    #[error("scene metadata not available: {0}")]
    NotReady(String),
    #[error("invalid scene metadata: {0}")]
    Semantic(String),
    #[error("unknown body {0:?}")]
    UnknownBody(String),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("report: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransformNode {
    pub node_id: String,
    pub pose: RigidTransform,
    pub parent_node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelNode {
    pub name: String,
    pub mesh_ref: String,
    pub transform_node: String,
    pub visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncTimerConfig {
    pub rate_hz: f64,
    pub drift_compensation: bool,
}

impl Default for SyncTimerConfig {
    fn default() -> Self {
        Self {
            rate_hz: 200.0,
            drift_compensation: true,
        }
    }
}

impl SyncTimerConfig {
    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.rate_hz)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SyncStats {
    pub ticks: u64,
    /// Bodies updated by the most recent tick.
    pub last_updated: usize,
    pub total_updates: u64,
    pub total_skipped: u64,
    /// Deadlines dropped because the loop woke too late.
    pub missed_deadlines: u64,
    /// Transforms from the bus rejected by the buffer.
    pub rejected_transforms: u64,
    /// Transform updates taken off the bus.
    pub received_updates: u64,
    pub interval_count: u64,
    pub interval_mean_ms: f64,
    pub interval_std_ms: f64,
    pub interval_min_ms: f64,
    pub interval_max_ms: f64,
    pub overrun_warning: bool,
    #[serde(skip)]
    interval_m2: f64,
}

impl SyncStats {
    fn record_interval(&mut self, ms: f64) {
        self.interval_count += 1;
        let n = self.interval_count as f64;
        let delta = ms - self.interval_mean_ms;
        self.interval_mean_ms += delta / n;
        self.interval_m2 += delta * (ms - self.interval_mean_ms);
        self.interval_std_ms = if self.interval_count > 1 {
            (self.interval_m2 / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        if self.interval_count == 1 {
            self.interval_min_ms = ms;
            self.interval_max_ms = ms;
        } else {
            self.interval_min_ms = self.interval_min_ms.min(ms);
            self.interval_max_ms = self.interval_max_ms.max(ms);
        }
    }

    pub fn achieved_rate_hz(&self) -> f64 {
        if self.interval_mean_ms > 0.0 {
            1000.0 / self.interval_mean_ms
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirrorScene {
    pub scene: String,
    pub transform_nodes: Vec<TransformNode>,
    pub model_nodes: Vec<ModelNode>,
    /// Whether each body has received at least one pose.
    pub synced: Vec<bool>,
    pub last_sync: Timestamp,
    pub stats: SyncStats,
}

impl MirrorScene {
    pub fn from_metadata(meta: &SceneMetadata) -> Result<Self, MirrorError> {
        let mut seen = HashSet::new();
        let mut transform_nodes = Vec::with_capacity(meta.bodies.len());
        let mut model_nodes = Vec::with_capacity(meta.bodies.len());
        for b in &meta.bodies {
            if b.name.is_empty() || !seen.insert(b.name.as_str()) {
                return Err(MirrorError::Semantic(format!(
                    "missing or duplicate body name {:?}",
                    b.name
                )));
            }
            let node_id = format!("{}_transform", b.name);
            transform_nodes.push(TransformNode {
                node_id: node_id.clone(),
                pose: RigidTransform::IDENTITY,
                parent_node: SCENE_ROOT.to_owned(),
            });
            model_nodes.push(ModelNode {
                name: b.name.clone(),
                mesh_ref: b.mesh.clone(),
                transform_node: node_id,
                visible: true,
            });
        }
        Ok(Self {
            scene: meta.scene.clone(),
            synced: vec![false; model_nodes.len()],
            transform_nodes,
            model_nodes,
            last_sync: Timestamp::ZERO,
            stats: SyncStats::default(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.transform_nodes.len() + self.model_nodes.len()
    }

    pub fn is_synced(&self) -> bool {
        self.synced.iter().all(|s| *s)
    }

    pub fn world_pose(&self, body: &str) -> Result<RigidTransform, MirrorError> {
        self.model_nodes
            .iter()
            .position(|m| m.name == body)
            .map(|i| self.transform_nodes[i].pose)
            .ok_or_else(|| MirrorError::UnknownBody(body.to_owned()))
    }

    pub fn poses(&self) -> IndexMap<String, RigidTransform> {
        self.model_nodes
            .iter()
            .zip(&self.transform_nodes)
            .map(|(m, t)| (m.name.clone(), t.pose))
            .collect()
    }

    /// Copies the newest available world pose of every body out of the
    /// buffer. Returns the number of bodies updated.
    pub fn sync_tick(&mut self, buffer: &TransformBuffer) -> usize {
        let mut updated = 0;
        for (i, model) in self.model_nodes.iter().enumerate() {
            let Ok(at) = buffer.latest_common_time(&[WORLD_FRAME, &model.name]) else {
                continue;
            };
            if let Ok(pose) = buffer.lookup(WORLD_FRAME, &model.name, LookupTime::At(at)) {
                self.transform_nodes[i].pose = pose;
                self.synced[i] = true;
                self.last_sync = self.last_sync.max(at);
                updated += 1;
            }
        }
        self.stats.ticks += 1;
        self.stats.last_updated = updated;
        self.stats.total_updates += updated as u64;
        self.stats.total_skipped += (self.model_nodes.len() - updated) as u64;
        updated
    }

    pub fn report(&self) -> MirrorReport {
        MirrorReport {
            scene: self.scene.clone(),
            bodies: self.model_nodes.len(),
            synced: self.is_synced(),
            last_sync_nanos: self.last_sync.as_nanos(),
            achieved_rate_hz: self.stats.achieved_rate_hz(),
            stats: self.stats.clone(),
            poses: self
                .poses()
                .into_iter()
                .map(|(k, v)| (k, v.to_pose7()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MirrorReport {
    pub scene: String,
    pub bodies: usize,
    pub synced: bool,
    pub last_sync_nanos: u64,
    pub achieved_rate_hz: f64,
    pub stats: SyncStats,
    pub poses: IndexMap<String, [f64; 7]>,
}

impl MirrorReport {
    pub fn write_json(&self, path: &Path) -> Result<(), MirrorError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Reads the scene metadata parameter, falling back to the latched topic
/// for up to `wait`.
pub fn build_from_metadata(node: &Node, wait: Duration) -> Result<MirrorScene, MirrorError> {
    if let Some(text) = node.param_get(PARAM_SCENE_METADATA)? {
        let meta: SceneMetadata = serde_json::from_str(&text)
            .map_err(|e| MirrorError::Semantic(format!("metadata parameter: {e}")))?;
        return MirrorScene::from_metadata(&meta);
    }
    let sub = node.subscribe(TOPIC_SCENE_METADATA, DeliveryMode::Latest)?;
    match sub.recv(wait)? {
        Some(env) => match env.payload {
            Message::SceneMetadata(meta) => MirrorScene::from_metadata(&meta),
            other => Err(MirrorError::Semantic(format!(
                "unexpected {} on {TOPIC_SCENE_METADATA}",
                other.kind()
            ))),
        },
        None => Err(MirrorError::NotReady(format!(
            "no parameter {PARAM_SCENE_METADATA} and nothing latched on {TOPIC_SCENE_METADATA}"
        ))),
    }
}

/// Consistent copies of the scene for readers outside the timer thread.
#[derive(Debug, Clone)]
pub struct MirrorSnapshots(Arc<RwLock<Arc<MirrorScene>>>);

impl MirrorSnapshots {
    pub fn new(scene: &MirrorScene) -> Self {
        Self(Arc::new(RwLock::new(Arc::new(scene.clone()))))
    }

    pub fn latest(&self) -> Arc<MirrorScene> {
        self.0.read().clone()
    }

    fn publish(&self, scene: &MirrorScene) {
        let fresh = Arc::new(scene.clone());
        *self.0.write() = fresh;
    }
}

/// Drains `tf` into `buffer` and ticks the scene on a fixed-rate schedule
/// until `stop` is raised. Returns an error only if the bus goes away.
pub fn run_sync_loop(
    scene: &mut MirrorScene,
    buffer: &mut TransformBuffer,
    tf: &Subscription,
    config: &SyncTimerConfig,
    stop: &StopSignal,
    snapshots: Option<&MirrorSnapshots>,
) -> Result<(), MirrorError> {
    run_sync_loop_with(scene, buffer, tf, config, stop, &mut |s: &MirrorScene| {
        if let Some(snap) = snapshots {
            snap.publish(s);
        }
    })
}

/// Like [`run_sync_loop`] but calls `on_tick` on the timer thread after
/// every tick. Keep it short; it eats into the period.
pub fn run_sync_loop_with(
    scene: &mut MirrorScene,
    buffer: &mut TransformBuffer,
    tf: &Subscription,
    config: &SyncTimerConfig,
    stop: &StopSignal,
    on_tick: &mut dyn FnMut(&MirrorScene),
) -> Result<(), MirrorError> {
    let period = config.period();
    let mut timer = FixedRateTimer::new(Instant::now(), period, MissPolicy::Skip)
        .with_drift_compensation(config.drift_compensation);
    let mut previous_wake: Option<Instant> = None;
    let mut overrun_since: Option<Instant> = None;
    info!("mirror sync loop at {} Hz for scene {}", config.rate_hz, scene.scene);

    while let Some(tick) = timer.wait(stop) {
        let woke = Instant::now();
        scene.stats.missed_deadlines += tick.missed;
        if let Some(prev) = previous_wake {
            scene
                .stats
                .record_interval((woke - prev).as_secs_f64() * 1000.0);
        }
        previous_wake = Some(woke);

        for env in tf.drain()? {
            if let Message::TransformUpdate(update) = env.payload {
                scene.stats.received_updates += 1;
                scene.stats.rejected_transforms += buffer.insert_update(&update).len() as u64;
            }
        }
        scene.sync_tick(buffer);
        on_tick(scene);

        let busy = woke.elapsed() + tick.lateness;
        if busy > period {
            let since = *overrun_since.get_or_insert(woke);
            if woke - since > OVERRUN_WINDOW && !scene.stats.overrun_warning {
                warn!("mirror tick has overrun its {period:?} period for over {OVERRUN_WINDOW:?}");
                scene.stats.overrun_warning = true;
            }
        } else {
            overrun_since = None;
        }
    }
    Ok(())
}
