use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use log::{debug, info, warn};
use parking_lot::RwLock;
use sha2::{Digest, Sha256};

use super::{world_poses, JointState, KinematicModel, SimError};
use crate::bus::{BusError, DeliveryMode, Node};
use crate::messages::{
    EchoReply, EchoRequest, FrameTransform, JointCommand, Message, SimError as SimErrorMsg,
    TransformUpdate, TOPIC_JOINT_CMD, TOPIC_RTD_REPLY, TOPIC_RTD_REQUEST, TOPIC_SIM_ERRORS,
    TOPIC_TF,
};
use crate::timer::{FixedRateTimer, MissPolicy, StopSignal};
use crate::transforms::{RigidTransform, Timestamp};

/// A joint command applied right before the given step runs (steps count
/// from 0), independent of wall-clock timing.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedCommand {
    pub step: u64,
    pub command: JointCommand,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub step_hz: f64,
    pub publish_hz: f64,
    /// One-way delay added to each leg of the echo path.
    pub inject_delay: Duration,
    pub default_max_speed: f64,
    /// Added to the responder stamp of echo replies to emulate clock skew.
    pub clock_offset_nanos: i64,
    /// Stop after this many physics steps.
    pub max_steps: Option<u64>,
    pub script: Vec<ScriptedCommand>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            step_hz: 1000.0,
            publish_hz: 200.0,
            inject_delay: Duration::ZERO,
            default_max_speed: 1.0,
            clock_offset_nanos: 0,
            max_steps: None,
            script: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_owned()));
        if !(self.step_hz.is_finite() && self.step_hz > 0.0) {
            return bad("step rate must be > 0");
        }
        if !(self.publish_hz.is_finite() && self.publish_hz > 0.0) {
            return bad("publish rate must be > 0");
        }
        if self.publish_hz > self.step_hz {
            return bad("publish rate cannot exceed step rate");
        }
        if !(self.default_max_speed.is_finite() && self.default_max_speed > 0.0) {
            return bad("default max speed must be > 0");
        }
        Ok(())
    }

    fn decimation(&self) -> u64 {
        ((self.step_hz / self.publish_hz).round() as u64).max(1)
    }

    fn step_nanos(&self) -> u64 {
        (1e9 / self.step_hz).round() as u64
    }
}

/// State of the simulator at one publish.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSnapshot {
    pub step: u64,
    pub stamp: Timestamp,
    pub positions: Vec<f64>,
    /// World pose per body, exactly as composed from the published transforms.
    pub poses: IndexMap<String, RigidTransform>,
}

/// Handle to the most recently published simulator state.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth(Arc<RwLock<Option<Arc<PoseSnapshot>>>>);

impl GroundTruth {
    pub fn latest(&self) -> Option<Arc<PoseSnapshot>> {
        self.0.read().clone()
    }

    fn store(&self, snap: PoseSnapshot) {
        *self.0.write() = Some(Arc::new(snap));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub steps: u64,
    pub published: u64,
    pub commands_applied: u64,
    pub command_errors: u64,
    pub echo_replies: u64,
    /// SHA-256 over every published pose, in order; stamps excluded.
    pub trajectory_digest: String,
    pub final_positions: Vec<f64>,
}

pub struct Simulator {
    model: KinematicModel,
    state: JointState,
    config: SimConfig,
    truth: GroundTruth,
}

impl Simulator {
    pub fn new(model: KinematicModel, config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let state = JointState::home(&model, config.default_max_speed);
        Ok(Self {
            model,
            state,
            config,
            truth: GroundTruth::default(),
        })
    }

    pub fn model(&self) -> &KinematicModel {
        &self.model
    }

    pub fn state(&self) -> &JointState {
        &self.state
    }

    pub fn ground_truth(&self) -> GroundTruth {
        self.truth.clone()
    }

    fn apply(&mut self, node: &Node, cmd: &JointCommand, applied: &mut u64, errors: &mut u64) -> Result<(), SimError> {
        match self
            .state
            .command(&self.model, &cmd.joint, cmd.target, cmd.max_speed)
        {
            Ok(()) => *applied += 1,
            Err(e) => {
                *errors += 1;
                warn!("rejected joint command: {e}");
                node.publish(
                    TOPIC_SIM_ERRORS,
                    Message::SimError(SimErrorMsg {
                        message: e.to_string(),
                    }),
                )?;
            }
        }
        Ok(())
    }

    fn publish(
        &self,
        node: &Node,
        step: u64,
        stamp: Timestamp,
        digest: &mut Sha256,
    ) -> Result<(), SimError> {
        let locals = self.model.local_transforms(&self.state)?;
        for local in &locals {
            for v in local.to_pose7() {
                digest.update(v.to_bits().to_le_bytes());
            }
        }
        let transforms = self
            .model
            .bodies
            .iter()
            .zip(&locals)
            .map(|(b, pose)| FrameTransform {
                parent: b.parent_frame.clone(),
                child: b.name.clone(),
                pose: *pose,
            })
            .collect();
        self.truth.store(PoseSnapshot {
            step,
            stamp,
            positions: self.state.positions(),
            poses: world_poses(&self.model, &locals),
        });
        node.publish(
            TOPIC_TF,
            Message::TransformUpdate(TransformUpdate {
                stamp_nanos: stamp.as_nanos(),
                transforms,
            }),
        )?;
        Ok(())
    }

    /// Runs until `stop` is raised or `max_steps` is reached. The echo
    /// responder runs on its own thread for the duration of the call.
    pub fn run(&mut self, node: &Node, stop: &StopSignal) -> Result<SimReport, SimError> {
        let commands = node.subscribe(TOPIC_JOINT_CMD, DeliveryMode::queued())?;
        let requests = node.subscribe(TOPIC_RTD_REQUEST, DeliveryMode::queued())?;
        let echo_stop = StopSignal::new();
        let body_count = self.model.bodies.len();
        let delay = self.config.inject_delay;
        let offset = self.config.clock_offset_nanos;

        thread::scope(|scope| {
            let echo = scope.spawn(|| echo_responder(node, requests, body_count, delay, offset, &echo_stop));
            let result = self.step_loop(node, &commands, stop);
            echo_stop.stop();
            let replies = echo.join().expect("echo responder panicked");
            result.map(|mut report| {
                report.echo_replies = replies;
                report
            })
        })
    }

    fn step_loop(
        &mut self,
        node: &Node,
        commands: &crate::bus::Subscription,
        stop: &StopSignal,
    ) -> Result<SimReport, SimError> {
        let decimation = self.config.decimation();
        let step_nanos = self.config.step_nanos();
        let dt = step_nanos as f64 * 1e-9;
        let mut script = self.config.script.clone();
        script.sort_by_key(|s| s.step);
        let mut script = script.into_iter().peekable();

        let start = Instant::now();
        let start_stamp = Timestamp::from_instant(start);
        let mut timer = FixedRateTimer::new(start, Duration::from_nanos(step_nanos), MissPolicy::CatchUp);
        let mut digest = Sha256::new();
        let (mut steps, mut published, mut applied, mut errors) = (0u64, 0u64, 0u64, 0u64);

        self.publish(node, 0, start_stamp, &mut digest)?;
        published += 1;
        let mut last_published_step = 0;
        info!(
            "sim running: {} bodies, {} joints, step {} Hz, publish {} Hz",
            self.model.bodies.len(),
            self.model.joints.len(),
            self.config.step_hz,
            self.config.publish_hz
        );

        loop {
            if self.config.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            if timer.wait(stop).is_none() {
                break;
            }
            for env in commands.drain()? {
                match env.payload {
                    Message::JointCommand(cmd) => self.apply(node, &cmd, &mut applied, &mut errors)?,
                    other => debug!("ignoring {} on {}", other.kind(), TOPIC_JOINT_CMD),
                }
            }
            while let Some(s) = script.next_if(|s| s.step <= steps) {
                self.apply(node, &s.command, &mut applied, &mut errors)?;
            }
            self.state.step(&self.model, dt);
            steps += 1;
            if steps % decimation == 0 {
                let stamp = Timestamp::from_nanos(start_stamp.as_nanos() + steps * step_nanos);
                self.publish(node, steps, stamp, &mut digest)?;
                published += 1;
                last_published_step = steps;
            }
        }
        if last_published_step != steps {
            let stamp = Timestamp::from_nanos(start_stamp.as_nanos() + steps * step_nanos);
            self.publish(node, steps, stamp, &mut digest)?;
            published += 1;
        }
        info!("sim stopped after {steps} steps, {published} frames");
        Ok(SimReport {
            steps,
            published,
            commands_applied: applied,
            command_errors: errors,
            echo_replies: 0,
            trajectory_digest: format!("{:x}", digest.finalize()),
            final_positions: self.state.positions(),
        })
    }
}

/// Convenience wrapper: builds a simulator and runs it to completion.
pub fn run_loop(
    node: &Node,
    model: KinematicModel,
    config: SimConfig,
    stop: &StopSignal,
) -> Result<SimReport, SimError> {
    Simulator::new(model, config)?.run(node, stop)
}

struct Pending {
    due: Instant,
    order: u64,
    request: EchoRequest,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.order) == (other.due, other.order)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.order).cmp(&(other.due, other.order))
    }
}

/// Answers echo requests. Each reply is published `2 * delay` after the
/// request arrived: the delay models one network hop and applies to both
/// the request and the reply leg.
fn echo_responder(
    node: &Node,
    requests: crate::bus::Subscription,
    body_count: usize,
    delay: Duration,
    clock_offset_nanos: i64,
    stop: &StopSignal,
) -> u64 {
    const POLL: Duration = Duration::from_millis(5);
    let mut heap: BinaryHeap<Reverse<Pending>> = BinaryHeap::new();
    let mut order = 0u64;
    let mut replies = 0u64;
    while !stop.is_stopped() {
        let now = Instant::now();
        while heap.peek().is_some_and(|p| p.0.due <= now) {
            let Reverse(p) = heap.pop().unwrap();
            let responder = Timestamp::now().as_nanos() as i64 + clock_offset_nanos;
            let reply = EchoReply {
                session: p.request.session,
                seq: p.request.seq,
                t0_nanos: p.request.t0_nanos,
                body_count,
                responder_stamp_nanos: responder.max(0) as u64,
                filler: p.request.filler,
            };
            match node.publish(TOPIC_RTD_REPLY, Message::EchoReply(reply)) {
                Ok(_) => replies += 1,
                Err(e @ (BusError::Closed | BusError::Transport(_))) => {
                    warn!("echo responder stopping: {e}");
                    return replies;
                }
                Err(e) => warn!("echo reply failed: {e}"),
            }
        }
        let wait = heap
            .peek()
            .map_or(POLL, |p| p.0.due.saturating_duration_since(Instant::now()).min(POLL));
        match requests.recv(wait) {
            Ok(Some(env)) => {
                let received = Instant::now();
                if let Message::EchoRequest(request) = env.payload {
                    order += 1;
                    heap.push(Reverse(Pending {
                        due: received + delay * 2,
                        order,
                        request,
                    }));
                }
            }
            Ok(None) => {}
            Err(e) => {
                warn!("echo responder stopping: {e}");
                return replies;
            }
        }
    }
    replies
}
