//! Kinematic simulator: forward kinematics over a scene, target-tracking
//! joints, and a fixed-step loop that streams poses over the bus.

mod runner;

pub use runner::{
    run_loop, GroundTruth, PoseSnapshot, ScriptedCommand, SimConfig, SimReport, Simulator,
};

use indexmap::IndexMap;
use thiserror::Error;

use crate::bus::BusError;
use crate::scene::{JointKind, ParentRef, SceneDescription, WORLD_FRAME};
use crate::transforms::{compose, RigidTransform, UnitQuaternion};

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error("joint {joint}: q = {q} outside [{lower}, {upper}]")]
    Limit {
        joint: String,
        q: f64,
        lower: f64,
        upper: f64,
    },
    #[error("unknown joint {0:?}")]
    UnknownJoint(String),
    #[error("joint {0:?} is fixed and cannot be commanded")]
    FixedJoint(String),
    #[error("invalid command for {joint}: {reason}")]
    InvalidCommand { joint: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Bus(#[from] BusError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBody {
    pub name: String,
    /// Index of the parent body in model order; `None` for roots.
    pub parent: Option<usize>,
    /// Frame name the body's transform is published against.
    pub parent_frame: String,
    /// Joint that moves this body, if any.
    pub joint: Option<usize>,
    /// Pose in the parent frame for bodies without a joint.
    pub fixed_pose: RigidTransform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelJoint {
    pub name: String,
    pub kind: JointKind,
    pub origin: RigidTransform,
    pub axis: crate::transforms::Vec3,
    pub lower: f64,
    pub upper: f64,
    /// Index of the child body in model order.
    pub body: usize,
}

impl ModelJoint {
    /// Child pose in the parent body frame at joint value `q`.
    pub fn local_transform(&self, q: f64) -> RigidTransform {
        match self.kind {
            JointKind::Fixed => self.origin,
            JointKind::Revolute => compose(
                &self.origin,
                &RigidTransform::from_rotation(UnitQuaternion::from_axis_angle(self.axis, q)),
            ),
            JointKind::Prismatic => compose(
                &self.origin,
                &RigidTransform::from_translation(self.axis.scale(q)),
            ),
        }
    }

    fn check(&self, q: f64) -> Result<(), SimError> {
        if q.is_finite() && q >= self.lower && q <= self.upper {
            Ok(())
        } else {
            Err(SimError::Limit {
                joint: self.name.clone(),
                q,
                lower: self.lower,
                upper: self.upper,
            })
        }
    }
}

/// Bodies in topological order (every parent before its children); joints
/// in scene order.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicModel {
    pub scene: String,
    pub bodies: Vec<ModelBody>,
    pub joints: Vec<ModelJoint>,
}

impl KinematicModel {
    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn body_index(&self, name: &str) -> Option<usize> {
        self.bodies.iter().position(|b| b.name == name)
    }

    /// Child pose in its parent frame for every body, in model order.
    pub fn local_transforms(&self, state: &JointState) -> Result<Vec<RigidTransform>, SimError> {
        self.bodies
            .iter()
            .map(|b| match b.joint {
                Some(j) => {
                    let joint = &self.joints[j];
                    let q = state.joints[j].q;
                    joint.check(q)?;
                    Ok(joint.local_transform(q))
                }
                None => Ok(b.fixed_pose),
            })
            .collect()
    }
}

/// Orders bodies so parents precede children, keeping scene order where the
/// scene already satisfies that.
pub fn build_model(desc: &SceneDescription) -> KinematicModel {
    let mut order: Vec<usize> = Vec::with_capacity(desc.bodies.len());
    let mut placed = vec![false; desc.bodies.len()];
    let index_of = |name: &str| desc.bodies.iter().position(|b| b.name == name);
    while order.len() < desc.bodies.len() {
        let before = order.len();
        for (i, b) in desc.bodies.iter().enumerate() {
            if placed[i] {
                continue;
            }
            let ready = match &b.parent {
                ParentRef::World => true,
                ParentRef::Body(p) => index_of(p).is_some_and(|pi| placed[pi]),
            };
            if ready {
                placed[i] = true;
                order.push(i);
            }
        }
        assert!(order.len() > before, "scene validation admits only acyclic scenes");
    }

    let position = |scene_idx: usize| order.iter().position(|&o| o == scene_idx).unwrap();
    let joints: Vec<ModelJoint> = desc
        .joints
        .iter()
        .map(|j| {
            let (lower, upper) = j.limits.map_or((0.0, 0.0), |l| (l.lower, l.upper));
            ModelJoint {
                name: j.name.clone(),
                kind: j.kind,
                origin: j.origin,
                axis: j.axis,
                lower,
                upper,
                body: position(index_of(&j.child).unwrap()),
            }
        })
        .collect();
    let bodies = order
        .iter()
        .map(|&i| {
            let b = &desc.bodies[i];
            let (parent, parent_frame) = match &b.parent {
                ParentRef::World => (None, WORLD_FRAME.to_string()),
                ParentRef::Body(p) => (Some(position(index_of(p).unwrap())), p.clone()),
            };
            ModelBody {
                name: b.name.clone(),
                parent,
                parent_frame,
                joint: desc.joints.iter().position(|j| j.child == b.name),
                fixed_pose: b.initial_pose,
            }
        })
        .collect();
    KinematicModel {
        scene: desc.name.clone(),
        bodies,
        joints,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointStateEntry {
    pub q: f64,
    pub velocity: f64,
    pub target: f64,
    pub max_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub joints: Vec<JointStateEntry>,
}

impl JointState {
    /// All joints at zero (clamped into limits), at rest, targeting their
    /// current position.
    pub fn home(model: &KinematicModel, max_speed: f64) -> Self {
        Self {
            joints: model
                .joints
                .iter()
                .map(|j| {
                    let q = 0.0f64.clamp(j.lower, j.upper);
                    JointStateEntry {
                        q,
                        velocity: 0.0,
                        target: q,
                        max_speed,
                    }
                })
                .collect(),
        }
    }

    pub fn positions(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.q).collect()
    }

    /// Sets a new target. The target itself may lie beyond the limits; the
    /// joint then stops at the limit.
    pub fn command(
        &mut self,
        model: &KinematicModel,
        joint: &str,
        target: f64,
        max_speed: Option<f64>,
    ) -> Result<(), SimError> {
        let idx = model
            .joint_index(joint)
            .ok_or_else(|| SimError::UnknownJoint(joint.to_owned()))?;
        if model.joints[idx].kind == JointKind::Fixed {
            return Err(SimError::FixedJoint(joint.to_owned()));
        }
        let invalid = |reason: &str| SimError::InvalidCommand {
            joint: joint.to_owned(),
            reason: reason.to_owned(),
        };
        if !target.is_finite() {
            return Err(invalid("target is not finite"));
        }
        if let Some(s) = max_speed {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid("max_speed must be finite and > 0"));
            }
        }
        let entry = &mut self.joints[idx];
        entry.target = target;
        if let Some(s) = max_speed {
            entry.max_speed = s;
        }
        Ok(())
    }

    /// Moves every joint toward its target by at most `max_speed * dt`,
    /// then clamps to limits.
    pub fn step(&mut self, model: &KinematicModel, dt: f64) {
        debug_assert!(dt > 0.0);
        for (entry, joint) in self.joints.iter_mut().zip(&model.joints) {
            let max_step = entry.max_speed * dt;
            let diff = entry.target - entry.q;
            let next = if diff.abs() <= max_step {
                entry.target
            } else {
                entry.q + diff.signum() * max_step
            };
            let next = next.clamp(joint.lower, joint.upper);
            entry.velocity = (next - entry.q) / dt;
            entry.q = next;
        }
    }

    /// True when every joint sits on its (limit-clamped) target.
    pub fn is_settled(&self, model: &KinematicModel) -> bool {
        self.joints
            .iter()
            .zip(&model.joints)
            .all(|(e, j)| e.q == e.target.clamp(j.lower, j.upper))
    }
}

/// World pose of every body, in model order.
pub fn forward_kinematics(
    model: &KinematicModel,
    state: &JointState,
) -> Result<IndexMap<String, RigidTransform>, SimError> {
    let locals = model.local_transforms(state)?;
    Ok(world_poses(model, &locals))
}

pub(crate) fn world_poses(
    model: &KinematicModel,
    locals: &[RigidTransform],
) -> IndexMap<String, RigidTransform> {
    let mut world: Vec<RigidTransform> = Vec::with_capacity(model.bodies.len());
    for (b, local) in model.bodies.iter().zip(locals) {
        let pose = match b.parent {
            None => *local,
            Some(p) => compose(&world[p], local),
        };
        world.push(pose);
    }
    model
        .bodies
        .iter()
        .zip(world)
        .map(|(b, p)| (b.name.clone(), p))
        .collect()
}
