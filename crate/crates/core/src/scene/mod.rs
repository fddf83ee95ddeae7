//! Scene descriptions: rigid bodies, the joints between them, and the
//! metadata message that mirrors use to build their node graph.
//!
//! Two text formats are accepted. See [`adf`] for the indented key-value
//! format and [`urdf`] for the XML subset.

pub mod adf;
pub mod urdf;

use std::collections::{HashMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::bus::{is_valid_name, BusError, Node};
use crate::messages::{
    Message, MetadataBody, SceneMetadata, PARAM_SCENE_METADATA, TOPIC_SCENE_METADATA,
};
use crate::transforms::{RigidTransform, Vec3};

pub use adf::{parse_adf, write_adf};
pub use urdf::parse_urdf_subset;

/// Bundled 25-body serial-chain arm, authored in both formats.
pub mod fixtures {
    pub const GALEN25_ADF: &str = include_str!("../../fixtures/galen25.adf");
    pub const GALEN25_URDF: &str = include_str!("../../fixtures/galen25.urdf");

    /// Resolves a scene argument to its text: bundled fixture names first,
    /// then the filesystem.
    pub fn bundled(name: &str) -> Option<&'static str> {
        match std::path::Path::new(name).file_name()?.to_str()? {
            "galen25.adf" => Some(GALEN25_ADF),
            "galen25.urdf" => Some(GALEN25_URDF),
            _ => None,
        }
    }
}

/// Name used for the root frame in files.
pub const WORLD: &str = "WORLD";
/// Name of the root frame in the transform tree.
pub const WORLD_FRAME: &str = "world";

const POSE_MATCH_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{item}: {message}")]
    Semantic { item: String, message: String },
    #[error("line {line}: unsupported feature {feature}")]
    Unsupported { line: usize, feature: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Loads a scene file, picking the parser by extension (`.urdf` or `.xml`
/// for the XML subset, anything else as ADF). A path that does not exist but
/// names a bundled fixture resolves to that fixture.
pub fn load_scene(path: &str) -> Result<SceneDescription, SceneError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => match fixtures::bundled(path) {
            Some(t) if e.kind() == std::io::ErrorKind::NotFound => t.to_owned(),
            _ => {
                return Err(SceneError::Io {
                    path: path.to_owned(),
                    message: e.to_string(),
                })
            }
        },
    };
    let lower = path.to_ascii_lowercase();
    if lower.ends_with(".urdf") || lower.ends_with(".xml") {
        parse_urdf_subset(&text)
    } else {
        parse_adf(&text)
    }
}

impl SceneError {
    pub(crate) fn syntax(line: usize, message: impl Into<String>) -> Self {
        SceneError::Syntax {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn semantic(item: impl Into<String>, message: impl Into<String>) -> Self {
        SceneError::Semantic {
            item: item.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ParentRef {
    World,
    Body(String),
}

impl fmt::Display for ParentRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParentRef::World => f.write_str(WORLD),
            ParentRef::Body(b) => f.write_str(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodySpec {
    pub name: String,
    pub mesh_path: String,
    pub parent: ParentRef,
    /// Pose in the parent frame. For a body moved by a joint this is the
    /// joint origin, i.e. the pose at zero joint position.
    pub initial_pose: RigidTransform,
    pub mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

impl JointKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "revolute" => Some(JointKind::Revolute),
            "prismatic" => Some(JointKind::Prismatic),
            "fixed" => Some(JointKind::Fixed),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JointKind::Revolute => "revolute",
            JointKind::Prismatic => "prismatic",
            JointKind::Fixed => "fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    /// Joint frame in the parent body frame.
    pub origin: RigidTransform,
    /// Unit axis in the joint frame.
    pub axis: Vec3,
    /// Radians for revolute, meters for prismatic, `None` for fixed.
    pub limits: Option<JointLimits>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDescription {
    pub name: String,
    pub bodies: Vec<BodySpec>,
    pub joints: Vec<JointSpec>,
}

impl SceneDescription {
    pub fn body(&self, name: &str) -> Option<&BodySpec> {
        self.bodies.iter().find(|b| b.name == name)
    }

    pub fn joint(&self, name: &str) -> Option<&JointSpec> {
        self.joints.iter().find(|j| j.name == name)
    }

    /// The joint that moves `body`, if any.
    pub fn joint_for_child(&self, body: &str) -> Option<&JointSpec> {
        self.joints.iter().find(|j| j.child == body)
    }

    /// Re-checks every invariant of an already built description.
    pub fn validate(&self) -> Result<(), SceneError> {
        let raw_bodies = self
            .bodies
            .iter()
            .map(|b| RawBody {
                name: b.name.clone(),
                mesh: Some(b.mesh_path.clone()),
                parent: Some(b.parent.to_string()),
                pose: Some(b.initial_pose),
                mass: Some(b.mass),
            })
            .collect();
        let raw_joints = self
            .joints
            .iter()
            .map(|j| RawJoint {
                name: j.name.clone(),
                kind: j.kind,
                parent: j.parent.clone(),
                child: j.child.clone(),
                origin: j.origin,
                axis: j.axis,
                limits: j.limits.map(|l| (l.lower, l.upper)),
            })
            .collect();
        assemble(self.name.clone(), raw_bodies, raw_joints).map(|_| ())
    }
}

/// Body as read from a file, before defaults and cross-checks.
#[derive(Debug, Clone, Default)]
pub(crate) struct RawBody {
    pub name: String,
    pub mesh: Option<String>,
    pub parent: Option<String>,
    pub pose: Option<RigidTransform>,
    pub mass: Option<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct RawJoint {
    pub name: String,
    pub kind: JointKind,
    pub parent: String,
    pub child: String,
    pub origin: RigidTransform,
    pub axis: Vec3,
    pub limits: Option<(f64, f64)>,
}

fn is_reserved(name: &str) -> bool {
    name == WORLD || name == WORLD_FRAME
}

/// Applies defaults and enforces every scene invariant.
pub(crate) fn assemble(
    name: String,
    bodies: Vec<RawBody>,
    joints: Vec<RawJoint>,
) -> Result<SceneDescription, SceneError> {
    if name.trim().is_empty() {
        return Err(SceneError::semantic("scene", "scene name is empty"));
    }
    let mut body_names: HashSet<String> = HashSet::new();
    for b in &bodies {
        if !is_valid_name(&b.name) || is_reserved(&b.name) {
            return Err(SceneError::semantic(
                format!("body {:?}", b.name),
                "invalid or reserved body name",
            ));
        }
        if !body_names.insert(b.name.clone()) {
            return Err(SceneError::semantic(
                format!("body {}", b.name),
                "duplicate body name",
            ));
        }
    }

    let mut joint_names = HashSet::new();
    let mut joint_of_child: HashMap<&str, &RawJoint> = HashMap::new();
    let mut joint_specs = Vec::with_capacity(joints.len());
    for j in &joints {
        let item = format!("joint {}", j.name);
        if j.name.is_empty() || !joint_names.insert(j.name.as_str()) {
            return Err(SceneError::semantic(item, "missing or duplicate joint name"));
        }
        for (role, body) in [("parent", &j.parent), ("child", &j.child)] {
            if !body_names.contains(body.as_str()) {
                return Err(SceneError::semantic(
                    item,
                    format!("{role} body {body:?} does not exist"),
                ));
            }
        }
        if j.parent == j.child {
            return Err(SceneError::semantic(item, "parent and child are the same body"));
        }
        if joint_of_child.insert(j.child.as_str(), j).is_some() {
            return Err(SceneError::semantic(
                item,
                format!("body {} is already the child of another joint", j.child),
            ));
        }
        if !j.origin.is_finite() {
            return Err(SceneError::semantic(item, "origin is not finite"));
        }
        let axis = if (j.axis.norm() - 1.0).abs() <= 1e-12 {
            Some(j.axis)
        } else {
            j.axis.normalized()
        }
        .ok_or_else(|| SceneError::semantic(&item, "axis must be a nonzero finite vector"))?;
        let limits = match (j.kind, j.limits) {
            (JointKind::Fixed, None) => None,
            (JointKind::Fixed, Some(_)) => {
                return Err(SceneError::semantic(item, "fixed joints take no limits"))
            }
            (_, None) => return Err(SceneError::semantic(item, "limits are required")),
            (_, Some((lower, upper))) => {
                if !(lower.is_finite() && upper.is_finite()) || lower > upper {
                    return Err(SceneError::semantic(
                        item,
                        format!("invalid limits [{lower}, {upper}]"),
                    ));
                }
                Some(JointLimits { lower, upper })
            }
        };
        joint_specs.push(JointSpec {
            name: j.name.clone(),
            kind: j.kind,
            parent: j.parent.clone(),
            child: j.child.clone(),
            origin: j.origin,
            axis,
            limits,
        });
    }

    let mut body_specs = Vec::with_capacity(bodies.len());
    for b in bodies.iter().cloned() {
        let item = format!("body {}", b.name);
        let mesh_path = b.mesh.unwrap_or_default();
        if mesh_path.trim().is_empty() {
            return Err(SceneError::semantic(item, "mesh path is empty"));
        }
        let mass = b.mass.unwrap_or(0.0);
        if !mass.is_finite() || mass < 0.0 {
            return Err(SceneError::semantic(item, "mass must be finite and >= 0"));
        }
        let (parent, initial_pose) = match joint_of_child.get(b.name.as_str()) {
            Some(joint) => {
                if let Some(p) = &b.parent {
                    if p != &joint.parent {
                        return Err(SceneError::semantic(
                            item,
                            format!(
                                "parent {p:?} disagrees with joint {} (parent {})",
                                joint.name, joint.parent
                            ),
                        ));
                    }
                }
                if let Some(pose) = &b.pose {
                    let (ang, dist) = pose.distance(&joint.origin);
                    if ang > POSE_MATCH_TOLERANCE || dist > POSE_MATCH_TOLERANCE {
                        return Err(SceneError::semantic(
                            item,
                            format!("pose disagrees with origin of joint {}", joint.name),
                        ));
                    }
                }
                (ParentRef::Body(joint.parent.clone()), joint.origin)
            }
            None => {
                let parent = match b.parent.as_deref() {
                    None | Some(WORLD) => ParentRef::World,
                    Some(p) if body_names.contains(p) => ParentRef::Body(p.to_string()),
                    Some(p) => {
                        return Err(SceneError::semantic(
                            item,
                            format!("parent {p:?} does not exist"),
                        ))
                    }
                };
                let pose = b.pose.unwrap_or(RigidTransform::IDENTITY);
                if !pose.is_finite() {
                    return Err(SceneError::semantic(item, "pose is not finite"));
                }
                (parent, pose)
            }
        };
        if parent == ParentRef::Body(b.name.clone()) {
            return Err(SceneError::semantic(item, "body is its own parent"));
        }
        body_specs.push(BodySpec {
            name: b.name,
            mesh_path,
            parent,
            initial_pose,
            mass,
        });
    }

    check_acyclic(&body_specs)?;

    Ok(SceneDescription {
        name,
        bodies: body_specs,
        joints: joint_specs,
    })
}

fn check_acyclic(bodies: &[BodySpec]) -> Result<(), SceneError> {
    let parent_of: HashMap<&str, &ParentRef> =
        bodies.iter().map(|b| (b.name.as_str(), &b.parent)).collect();
    // 0 = unvisited, 1 = on current walk, 2 = reaches WORLD
    let mut state: HashMap<&str, u8> = HashMap::new();
    for b in bodies {
        let mut walk = Vec::new();
        let mut cur = b.name.as_str();
        loop {
            match state.get(cur).copied().unwrap_or(0) {
                2 => break,
                1 => {
                    return Err(SceneError::semantic(
                        format!("body {cur}"),
                        "parent chain forms a cycle",
                    ))
                }
                _ => {}
            }
            state.insert(cur, 1);
            walk.push(cur);
            match parent_of[cur] {
                ParentRef::World => break,
                ParentRef::Body(p) => cur = p.as_str(),
            }
        }
        for n in walk {
            state.insert(n, 2);
        }
    }
    Ok(())
}

pub fn to_metadata(desc: &SceneDescription) -> SceneMetadata {
    SceneMetadata {
        scene: desc.name.clone(),
        bodies: desc
            .bodies
            .iter()
            .map(|b| MetadataBody {
                name: b.name.clone(),
                mesh: b.mesh_path.clone(),
            })
            .collect(),
    }
}

/// Stores the metadata under the `scene/metadata` parameter and publishes it
/// on the latched `scene/metadata` topic.
pub fn publish_metadata(node: &Node, desc: &SceneDescription) -> Result<SceneMetadata, BusError> {
    let meta = to_metadata(desc);
    let text = serde_json::to_string(&meta).expect("metadata serializes");
    node.param_set(PARAM_SCENE_METADATA, &text)?;
    node.publish(TOPIC_SCENE_METADATA, Message::SceneMetadata(meta.clone()))?;
    Ok(meta)
}
