//! Indented key-value scene format (`.adf`).
//!
//! ```text
//! # comments start with '#'
//! scene: two_link
//! bodies:
//!   - name: base
//!     mesh: meshes/base.stl
//!     parent: WORLD            # optional, WORLD by default
//!     xyz: [0, 0, 0]           # optional pose in the parent frame
//!     rpy: [0, 0, 0]           # radians, Rz(yaw)·Ry(pitch)·Rx(roll)
//!                              # or quat: [w, x, y, z] instead of rpy
//!     mass: 1.5                # optional, kg
//!   - name: arm
//!     mesh: meshes/arm.stl
//! joints:
//!   - name: shoulder
//!     type: revolute           # revolute | prismatic | fixed
//!     parent: base
//!     child: arm
//!     xyz: [0, 0, 0.1]         # joint origin in the parent body frame
//!     rpy: [0, 0, 0]
//!     axis: [0, 0, 1]          # optional, defaults to [1, 0, 0]
//!     limits: [-1.57, 1.57]    # required unless fixed
//! ```
//!
//! A body moved by a joint takes its parent and zero-position pose from the
//! joint; if the body entry states them anyway they must agree.

use std::fmt::Write as _;

use super::{assemble, JointKind, ParentRef, RawBody, RawJoint, SceneDescription, SceneError};
use crate::transforms::{RigidTransform, UnitQuaternion, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Section {
    None,
    Bodies,
    Joints,
}

#[derive(Debug)]
enum Value {
    Text(String),
    List(Vec<f64>),
}

struct Item {
    line: usize,
    fields: Vec<(String, Value, usize)>,
}

pub fn parse_adf(text: &str) -> Result<SceneDescription, SceneError> {
    let mut scene_name: Option<String> = None;
    let mut section = Section::None;
    let mut body_items: Vec<Item> = Vec::new();
    let mut joint_items: Vec<Item> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = strip_comment(raw);
        if line.trim().is_empty() {
            continue;
        }
        if line.contains('\t') {
            return Err(SceneError::syntax(line_no, "tabs are not allowed for indentation"));
        }
        let indent = line.len() - line.trim_start().len();
        let content = line.trim();

        if indent == 0 {
            let (key, value) = split_key(content, line_no)?;
            match (key, value.is_empty()) {
                ("scene", false) => {
                    if scene_name.is_some() {
                        return Err(SceneError::syntax(line_no, "duplicate scene key"));
                    }
                    scene_name = Some(unquote(value).to_string());
                    section = Section::None;
                }
                ("bodies", true) => section = Section::Bodies,
                ("joints", true) => section = Section::Joints,
                _ => {
                    return Err(SceneError::syntax(
                        line_no,
                        format!("unexpected top-level entry {content:?}"),
                    ))
                }
            }
            continue;
        }

        let items = match section {
            Section::Bodies => &mut body_items,
            Section::Joints => &mut joint_items,
            Section::None => {
                return Err(SceneError::syntax(line_no, "indented line outside a section"))
            }
        };
        let field_text = if let Some(rest) = content.strip_prefix('-') {
            if !(rest.is_empty() || rest.starts_with(' ')) {
                return Err(SceneError::syntax(line_no, "expected '- ' to start a list item"));
            }
            items.push(Item {
                line: line_no,
                fields: Vec::new(),
            });
            rest.trim()
        } else {
            content
        };
        if field_text.is_empty() {
            continue;
        }
        let Some(item) = items.last_mut() else {
            return Err(SceneError::syntax(line_no, "field before the first '- ' item"));
        };
        let (key, value) = split_key(field_text, line_no)?;
        if item.fields.iter().any(|(k, _, _)| k == key) {
            return Err(SceneError::syntax(line_no, format!("duplicate key {key:?}")));
        }
        item.fields
            .push((key.to_string(), parse_value(value, line_no)?, line_no));
    }

    let name =
        scene_name.ok_or_else(|| SceneError::syntax(1, "missing top-level 'scene:' entry"))?;
    let bodies = body_items
        .into_iter()
        .map(body_from_item)
        .collect::<Result<Vec<_>, _>>()?;
    let joints = joint_items
        .into_iter()
        .map(joint_from_item)
        .collect::<Result<Vec<_>, _>>()?;
    assemble(name, bodies, joints)
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    match line.find(" #") {
        Some(i) => &line[..i],
        None => line,
    }
}

fn split_key(s: &str, line: usize) -> Result<(&str, &str), SceneError> {
    let (k, v) = s
        .split_once(':')
        .ok_or_else(|| SceneError::syntax(line, format!("expected 'key: value', got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(SceneError::syntax(line, format!("invalid key {k:?}")));
    }
    Ok((k, v.trim()))
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .unwrap_or(s)
}

fn parse_value(v: &str, line: usize) -> Result<Value, SceneError> {
    if let Some(inner) = v.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| SceneError::syntax(line, "unterminated list"))?;
        let nums = inner
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<f64>()
                    .map_err(|_| SceneError::syntax(line, format!("not a number: {:?}", p.trim())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(Value::List(nums));
    }
    if v.is_empty() {
        return Err(SceneError::syntax(line, "missing value"));
    }
    Ok(Value::Text(unquote(v).to_string()))
}

fn text(v: &Value, key: &str, line: usize) -> Result<String, SceneError> {
    match v {
        Value::Text(s) => Ok(s.clone()),
        Value::List(_) => Err(SceneError::syntax(line, format!("{key} must be a scalar"))),
    }
}

fn number(v: &Value, key: &str, line: usize) -> Result<f64, SceneError> {
    let s = text(v, key, line)?;
    s.parse()
        .map_err(|_| SceneError::syntax(line, format!("{key} must be a number")))
}

fn triple(v: &Value, key: &str, line: usize) -> Result<[f64; 3], SceneError> {
    match v {
        Value::List(n) if n.len() == 3 => Ok([n[0], n[1], n[2]]),
        _ => Err(SceneError::syntax(line, format!("{key} must be a list of 3 numbers"))),
    }
}

fn pair(v: &Value, key: &str, line: usize) -> Result<(f64, f64), SceneError> {
    match v {
        Value::List(n) if n.len() == 2 => Ok((n[0], n[1])),
        _ => Err(SceneError::syntax(line, format!("{key} must be a list of 2 numbers"))),
    }
}

fn quad(v: &Value, key: &str, line: usize) -> Result<[f64; 4], SceneError> {
    match v {
        Value::List(n) if n.len() == 4 => Ok([n[0], n[1], n[2], n[3]]),
        _ => Err(SceneError::syntax(line, format!("{key} must be a list of 4 numbers"))),
    }
}

fn pose_from(
    xyz: [f64; 3],
    rpy: Option<[f64; 3]>,
    quat: Option<([f64; 4], usize)>,
) -> Result<RigidTransform, SceneError> {
    match (rpy, quat) {
        (Some(_), Some((_, line))) => Err(SceneError::syntax(line, "rpy and quat are exclusive")),
        (_, Some((q, line))) => RigidTransform::from_pose7([xyz[0], xyz[1], xyz[2], q[0], q[1], q[2], q[3]])
            .map_err(|e| SceneError::syntax(line, format!("quat: {e}"))),
        (rpy, None) => Ok(RigidTransform::from_xyz_rpy(xyz, rpy.unwrap_or_default())),
    }
}

fn body_from_item(item: Item) -> Result<RawBody, SceneError> {
    let mut body = RawBody::default();
    let mut xyz = None;
    let mut rpy = None;
    let mut quat = None;
    let mut name = None;
    for (key, value, line) in &item.fields {
        match key.as_str() {
            "name" => name = Some(text(value, key, *line)?),
            "mesh" => body.mesh = Some(text(value, key, *line)?),
            "parent" => body.parent = Some(text(value, key, *line)?),
            "xyz" => xyz = Some(triple(value, key, *line)?),
            "rpy" => rpy = Some(triple(value, key, *line)?),
            "quat" => quat = Some((quad(value, key, *line)?, *line)),
            "mass" => body.mass = Some(number(value, key, *line)?),
            other => {
                return Err(SceneError::syntax(*line, format!("unknown body key {other:?}")))
            }
        }
    }
    body.name = name.ok_or_else(|| SceneError::syntax(item.line, "body without a name"))?;
    if xyz.is_some() || rpy.is_some() || quat.is_some() {
        body.pose = Some(pose_from(xyz.unwrap_or_default(), rpy, quat)?);
    }
    Ok(body)
}

fn joint_from_item(item: Item) -> Result<RawJoint, SceneError> {
    let mut name = None;
    let mut kind = None;
    let mut parent = None;
    let mut child = None;
    let mut xyz = [0.0; 3];
    let mut rpy = None;
    let mut quat = None;
    let mut axis = Vec3::X;
    let mut limits = None;
    for (key, value, line) in &item.fields {
        match key.as_str() {
            "name" => name = Some(text(value, key, *line)?),
            "type" => {
                let t = text(value, key, *line)?;
                kind = Some(JointKind::parse(&t).ok_or_else(|| {
                    SceneError::syntax(*line, format!("unknown joint type {t:?}"))
                })?);
            }
            "parent" => parent = Some(text(value, key, *line)?),
            "child" => child = Some(text(value, key, *line)?),
            "xyz" => xyz = triple(value, key, *line)?,
            "rpy" => rpy = Some(triple(value, key, *line)?),
            "quat" => quat = Some((quad(value, key, *line)?, *line)),
            "axis" => axis = Vec3::from_array(triple(value, key, *line)?),
            "limits" => limits = Some(pair(value, key, *line)?),
            other => {
                return Err(SceneError::syntax(*line, format!("unknown joint key {other:?}")))
            }
        }
    }
    let missing = |what: &str| SceneError::syntax(item.line, format!("joint without {what}"));
    Ok(RawJoint {
        name: name.ok_or_else(|| missing("a name"))?,
        kind: kind.ok_or_else(|| missing("a type"))?,
        parent: parent.ok_or_else(|| missing("a parent"))?,
        child: child.ok_or_else(|| missing("a child"))?,
        origin: pose_from(xyz, rpy, quat)?,
        axis,
        limits,
    })
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
    format!("[{}]", parts.join(", "))
}

fn pose_lines(out: &mut String, pose: &RigidTransform) {
    let (r, p, y) = pose.rotation.to_rpy();
    let _ = writeln!(out, "    xyz: {}", fmt_list(&pose.translation.to_array()));
    // rpy only when it reproduces the stored quaternion bit for bit
    if UnitQuaternion::from_rpy(r, p, y) == pose.rotation {
        let _ = writeln!(out, "    rpy: {}", fmt_list(&[r, p, y]));
    } else {
        let _ = writeln!(out, "    quat: {}", fmt_list(&pose.rotation.to_array()));
    }
}

/// Canonical writer. Body poses derived from joints are not repeated.
pub fn write_adf(desc: &SceneDescription) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "scene: {}", desc.name);
    let _ = writeln!(out, "bodies:");
    for b in &desc.bodies {
        let _ = writeln!(out, "  - name: {}", b.name);
        let _ = writeln!(out, "    mesh: {}", b.mesh_path);
        if desc.joint_for_child(&b.name).is_none() {
            let parent = match &b.parent {
                ParentRef::World => super::WORLD.to_string(),
                ParentRef::Body(p) => p.clone(),
            };
            let _ = writeln!(out, "    parent: {parent}");
            pose_lines(&mut out, &b.initial_pose);
        }
        if b.mass != 0.0 {
            let _ = writeln!(out, "    mass: {:?}", b.mass);
        }
    }
    if !desc.joints.is_empty() {
        let _ = writeln!(out, "joints:");
    }
    for j in &desc.joints {
        let _ = writeln!(out, "  - name: {}", j.name);
        let _ = writeln!(out, "    type: {}", j.kind.as_str());
        let _ = writeln!(out, "    parent: {}", j.parent);
        let _ = writeln!(out, "    child: {}", j.child);
        pose_lines(&mut out, &j.origin);
        let _ = writeln!(out, "    axis: {}", fmt_list(&j.axis.to_array()));
        if let Some(l) = j.limits {
            let _ = writeln!(out, "    limits: {}", fmt_list(&[l.lower, l.upper]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_LINK: &str = "\
# two bodies
scene: two_link
bodies:
  - name: base
    mesh: meshes/base.stl
    parent: WORLD
    xyz: [0, 0, 0]
    rpy: [0, 0, 0]
    mass: 2.0
  - name: arm
    mesh: meshes/arm.stl   # trailing comment
joints:
  - name: shoulder
    type: revolute
    parent: base
    child: arm
    xyz: [0, 0, 0.1]
    rpy: [0, 0, 0]
    axis: [0, 0, 1]
    limits: [-1.57, 1.57]
";

    #[test]
    fn minimal_scene() {
        let desc = parse_adf("scene: one\nbodies:\n  - name: base\n    mesh: base.stl\n    parent: WORLD\n").unwrap();
        assert_eq!(desc.bodies.len(), 1);
        assert_eq!(desc.joints.len(), 0);
        assert_eq!(desc.bodies[0].initial_pose, RigidTransform::IDENTITY);
    }

    #[test]
    fn two_link_scene() {
        let desc = parse_adf(TWO_LINK).unwrap();
        assert_eq!(desc.name, "two_link");
        assert_eq!(desc.bodies.len(), 2);
        assert_eq!(desc.bodies[0].mass, 2.0);
        assert_eq!(desc.bodies[1].parent, ParentRef::Body("base".into()));
        assert_eq!(desc.joints[0].axis, Vec3::Z);
        assert_eq!(
            desc.bodies[1].initial_pose.translation,
            Vec3::new(0.0, 0.0, 0.1)
        );
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let cases = [
            ("scene: s\nbodies:\n  - name: a\n    mesh a.stl\n", 4),
            ("scene: s\nbodies:\n    mesh: a.stl\n", 3),
            ("scene: s\nbodies:\n  - name: a\n    xyz: [1, 2]\n", 4),
            ("scene: s\nbodies:\n  - name: a\n    colour: red\n", 4),
            ("scene: s\nwidgets:\n", 2),
            ("scene: s\njoints:\n  - name: j\n    type: spherical\n", 4),
            ("scene: s\nbodies:\n  - name: a\n    name: b\n", 4),
        ];
        for (text, line) in cases {
            match parse_adf(text) {
                Err(SceneError::Syntax { line: got, .. }) => assert_eq!(got, line, "{text}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn joint_with_missing_child_is_semantic_error() {
        let text = TWO_LINK.replace("child: arm", "child: forearm");
        match parse_adf(&text) {
            Err(SceneError::Semantic { item, message }) => {
                assert_eq!(item, "joint shoulder");
                assert!(message.contains("forearm"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conflicting_body_parent_is_rejected() {
        let text = TWO_LINK.replace(
            "    mesh: meshes/arm.stl   # trailing comment\n",
            "    mesh: meshes/arm.stl\n    parent: WORLD\n",
        );
        assert!(matches!(parse_adf(&text), Err(SceneError::Semantic { .. })));
    }

    #[test]
    fn writer_round_trips() {
        let desc = parse_adf(TWO_LINK).unwrap();
        let again = parse_adf(&write_adf(&desc)).unwrap();
        assert_eq!(desc, again);
    }
}
