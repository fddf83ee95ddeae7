//! All-in-one scenario: bus, simulator and mirror in one process, driven
//! by a timed joint script, with the mirror checked against the
//! simulator's own poses.

use std::f64::consts::TAU;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use indexmap::IndexMap;
use log::{info, warn};
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::bus::{Broker, BusError, DeliveryMode};
use crate::messages::{JointCommand, TOPIC_TF};
use crate::mirror::{build_from_metadata, run_sync_loop_with, MirrorError, MirrorScene, SyncStats, SyncTimerConfig};
use crate::scene::{publish_metadata, JointKind, SceneDescription};
use crate::sim::{build_model, GroundTruth, KinematicModel, ScriptedCommand, SimConfig, SimError, Simulator};
use crate::tftree::TransformBuffer;
use crate::timer::StopSignal;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("invalid script: {0}")]
    Script(String),
    #[error("script references unknown joint '{0}'")]
    UnknownJoint(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mirror(#[from] MirrorError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimedCommand {
    pub at: Duration,
    pub command: JointCommand,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sinusoid {
    pub joints: Vec<String>,
    pub amplitude: f64,
    pub period: Duration,
    pub update_hz: f64,
    pub max_speed: f64,
}

impl Default for Sinusoid {
    fn default() -> Self {
        Self {
            joints: ["j5", "j7", "j9", "j13", "j15"].map(String::from).to_vec(),
            amplitude: 0.4,
            period: Duration::from_secs(2),
            update_hz: 20.0,
            max_speed: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoScript {
    pub commands: Vec<TimedCommand>,
    pub duration: Duration,
}

impl DemoScript {
    pub fn idle(duration: Duration) -> Self {
        Self {
            commands: Vec::new(),
            duration,
        }
    }

    /// Targets following `amplitude * sin(2 pi t / period + phase)` for
    /// each joint, clamped into its limits and refreshed at `update_hz`.
    /// The last `hold` of the run issues no commands.
    pub fn sinusoidal(
        model: &KinematicModel,
        wave: &Sinusoid,
        duration: Duration,
        hold: Duration,
    ) -> Result<Self, DemoError> {
        let active = duration.saturating_sub(hold).as_secs_f64();
        let dt = 1.0 / wave.update_hz;
        let mut commands = Vec::new();
        let mut k = 0u32;
        while f64::from(k) * dt < active {
            let t = f64::from(k) * dt;
            for (i, name) in wave.joints.iter().enumerate() {
                let j = model
                    .joint_index(name)
                    .map(|i| &model.joints[i])
                    .ok_or_else(|| DemoError::UnknownJoint(name.clone()))?;
                let phase = i as f64 * 0.7;
                let target = (wave.amplitude * (TAU * t / wave.period.as_secs_f64() + phase).sin())
                    .clamp(j.lower, j.upper);
                commands.push(TimedCommand {
                    at: Duration::from_secs_f64(t),
                    command: JointCommand {
                        joint: name.clone(),
                        target,
                        max_speed: Some(wave.max_speed),
                    },
                });
            }
            k += 1;
        }
        Ok(Self { commands, duration })
    }

    pub fn validate(&self, model: &KinematicModel) -> Result<(), DemoError> {
        if self.duration.is_zero() {
            return Err(DemoError::Script("duration must be positive".into()));
        }
        for (i, c) in self.commands.iter().enumerate() {
            if i > 0 && c.at < self.commands[i - 1].at {
                return Err(DemoError::Script(format!("command {i} goes back in time")));
            }
            if c.at > self.duration {
                return Err(DemoError::Script(format!(
                    "command {i} at {:?} is past the end of the run",
                    c.at
                )));
            }
            let Some(j) = model.joint_index(&c.command.joint) else {
                return Err(DemoError::UnknownJoint(c.command.joint.clone()));
            };
            if model.joints[j].kind == JointKind::Fixed {
                return Err(DemoError::Script(format!("joint '{}' is fixed", c.command.joint)));
            }
        }
        Ok(())
    }

    /// Largest per-command speed, or `default_speed` where none is given.
    pub fn max_speed(&self, default_speed: f64) -> f64 {
        self.commands
            .iter()
            .map(|c| c.command.max_speed.unwrap_or(default_speed))
            .fold(default_speed.min(0.0), f64::max)
    }

    fn to_sim_script(&self, step_hz: f64) -> Vec<ScriptedCommand> {
        self.commands
            .iter()
            .map(|c| ScriptedCommand {
                step: (c.at.as_secs_f64() * step_hz).round() as u64,
                command: c.command.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    pub sim: SimConfig,
    pub sync: SyncTimerConfig,
    /// Sync periods to let pass after the simulator's last publish before
    /// comparing settled poses.
    pub quiescence_periods: u32,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            sync: SyncTimerConfig::default(),
            quiescence_periods: 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BodyDiscrepancy {
    pub in_motion_rad: f64,
    pub in_motion_m: f64,
    pub settled_rad: f64,
    pub settled_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MessageCounts {
    pub tf_published: u64,
    pub tf_received: u64,
    pub commands_applied: u64,
    pub command_errors: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoReport {
    pub scene: String,
    pub duration_s: f64,
    pub quiescent: bool,
    pub bodies: IndexMap<String, BodyDiscrepancy>,
    pub max_in_motion_rad: f64,
    pub max_in_motion_m: f64,
    pub max_settled_rad: f64,
    pub max_settled_m: f64,
    /// Largest gap between the simulator's newest stamp and the stamp the
    /// mirror was showing, over all comparisons.
    pub max_stamp_lag_ms: f64,
    /// Mirror ticks during the scripted window only.
    pub window_ticks: u64,
    pub sync: SyncStats,
    pub messages: MessageCounts,
    pub sim_steps: u64,
    pub trajectory_digest: String,
}

impl DemoReport {
    pub fn write_json(&self, path: &Path) -> Result<(), DemoError> {
        let json = serde_json::to_string_pretty(self).expect("report serialize");
        fs::write(path, json + "\n").map_err(|source| DemoError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Default)]
struct Tracker {
    bodies: IndexMap<String, BodyDiscrepancy>,
    max_lag_nanos: u64,
    settled: bool,
}

impl Tracker {
    fn compare(&mut self, scene: &MirrorScene, truth: &GroundTruth) {
        let Some(gt) = truth.latest() else { return };
        if !scene.is_synced() {
            return;
        }
        self.max_lag_nanos = self
            .max_lag_nanos
            .max(gt.stamp.as_nanos().saturating_sub(scene.last_sync.as_nanos()));
        for (name, pose) in &gt.poses {
            let Ok(mirrored) = scene.world_pose(name) else { continue };
            let (ang, dist) = mirrored.distance(pose);
            let entry = self.bodies.entry(name.clone()).or_default();
            if self.settled {
                entry.settled_rad = entry.settled_rad.max(ang);
                entry.settled_m = entry.settled_m.max(dist);
            } else {
                entry.in_motion_rad = entry.in_motion_rad.max(ang);
                entry.in_motion_m = entry.in_motion_m.max(dist);
            }
        }
    }
}

/// Runs the scenario to completion and reports how closely the mirror
/// tracked the simulator.
pub fn run_demo(
    desc: &SceneDescription,
    script: &DemoScript,
    config: &DemoConfig,
) -> Result<DemoReport, DemoError> {
    let model = build_model(desc);
    script.validate(&model)?;
    let step_hz = config.sim.step_hz;
    let sim_config = SimConfig {
        script: script.to_sim_script(step_hz),
        max_steps: Some((script.duration.as_secs_f64() * step_hz).round() as u64),
        ..config.sim.clone()
    };
    let mut sim = Simulator::new(model, sim_config)?;
    let truth = sim.ground_truth();

    let broker = Broker::new();
    let sim_node = broker.node();
    publish_metadata(&sim_node, desc)?;
    let mirror_node = broker.node();
    let mut scene = build_from_metadata(&mirror_node, Duration::from_secs(1))?;
    let tf = mirror_node.subscribe(TOPIC_TF, DeliveryMode::queued())?;

    let tracker = Mutex::new(Tracker::default());
    let latest_ticks = Mutex::new(0u64);
    let stop = StopSignal::new();
    let sync_period = config.sync.period();
    info!(
        "demo: {} bodies, {} scripted commands over {:?}",
        desc.bodies.len(),
        script.commands.len(),
        script.duration
    );

    let (outcome, window_ticks) = thread::scope(|s| {
        let mirror_thread = s.spawn(|| {
            let mut buffer = TransformBuffer::default();
            let mut on_tick = |sc: &MirrorScene| {
                tracker.lock().compare(sc, &truth);
                *latest_ticks.lock() = sc.stats.ticks;
            };
            let r = run_sync_loop_with(&mut scene, &mut buffer, &tf, &config.sync, &stop, &mut on_tick);
            stop.stop();
            r
        });
        let sim_report = sim.run(&sim_node, &stop);
        let window_ticks = *latest_ticks.lock();
        if sim_report.is_ok() {
            thread::sleep(sync_period * config.quiescence_periods);
            tracker.lock().settled = true;
            thread::sleep(sync_period * config.quiescence_periods.max(2));
        }
        stop.stop();
        let mirror = mirror_thread.join().expect("mirror thread panicked");
        let outcome: Result<_, DemoError> = match (sim_report, mirror) {
            (Ok(r), Ok(())) => Ok(r),
            (Err(e), _) => Err(e.into()),
            (_, Err(e)) => Err(e.into()),
        };
        (outcome, window_ticks)
    });
    let sim_report = outcome?;
    let quiescent = sim.state().is_settled(sim.model());
    if !quiescent {
        warn!("joints were still moving when the script ended");
    }

    let tracker = tracker.into_inner();
    let fold = |f: fn(&BodyDiscrepancy) -> f64| tracker.bodies.values().map(f).fold(0.0, f64::max);
    Ok(DemoReport {
        scene: desc.name.clone(),
        duration_s: script.duration.as_secs_f64(),
        quiescent,
        max_in_motion_rad: fold(|b| b.in_motion_rad),
        max_in_motion_m: fold(|b| b.in_motion_m),
        max_settled_rad: fold(|b| b.settled_rad),
        max_settled_m: fold(|b| b.settled_m),
        max_stamp_lag_ms: tracker.max_lag_nanos as f64 / 1e6,
        bodies: tracker.bodies,
        window_ticks,
        messages: MessageCounts {
            tf_published: sim_report.published,
            tf_received: scene.stats.received_updates,
            commands_applied: sim_report.commands_applied,
            command_errors: sim_report.command_errors,
        },
        sync: scene.stats,
        sim_steps: sim_report.steps,
        trajectory_digest: sim_report.trajectory_digest,
    })
}
