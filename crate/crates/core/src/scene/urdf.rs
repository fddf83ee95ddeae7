//! URDF subset: `robot`, `link`, `joint`, `origin`, `axis`, `limit`,
//! `parent`, `child`. Anything else is rejected with
//! [`SceneError::Unsupported`].
//!
//! Links may carry a non-standard `mesh` attribute; without it the mesh path
//! defaults to `meshes/<link>.stl`. Root links hang off `WORLD` at identity.

use roxmltree::{Document, Node};

use super::{assemble, JointKind, RawBody, RawJoint, SceneDescription, SceneError};
use crate::transforms::{RigidTransform, Vec3};

pub fn parse_urdf_subset(text: &str) -> Result<SceneDescription, SceneError> {
    let doc = Document::parse(text).map_err(|e| SceneError::syntax(e.pos().row as usize, e.to_string()))?;
    let line_of = |n: Node| doc.text_pos_at(n.range().start).row as usize;

    let robot = doc.root_element();
    if robot.tag_name().name() != "robot" {
        return Err(SceneError::Unsupported {
            line: line_of(robot),
            feature: format!("root element <{}>", robot.tag_name().name()),
        });
    }
    check_attrs(robot, &["name"], line_of(robot))?;
    let name = required_attr(robot, "name", line_of(robot))?;

    let mut bodies = Vec::new();
    let mut joints = Vec::new();
    for child in robot.children().filter(Node::is_element) {
        let line = line_of(child);
        match child.tag_name().name() {
            "link" => {
                check_attrs(child, &["name", "mesh"], line)?;
                if let Some(inner) = child.children().find(Node::is_element) {
                    return Err(unsupported(inner, line_of(inner)));
                }
                let link = required_attr(child, "name", line)?;
                bodies.push(RawBody {
                    mesh: Some(
                        child
                            .attribute("mesh")
                            .map(str::to_owned)
                            .unwrap_or_else(|| format!("meshes/{link}.stl")),
                    ),
                    name: link,
                    ..Default::default()
                });
            }
            "joint" => joints.push(parse_joint(child, &line_of)?),
            _ => return Err(unsupported(child, line)),
        }
    }
    assemble(name, bodies, joints)
}

fn parse_joint<'a>(
    node: Node<'a, 'a>,
    line_of: &dyn Fn(Node) -> usize,
) -> Result<RawJoint, SceneError> {
    let line = line_of(node);
    check_attrs(node, &["name", "type"], line)?;
    let name = required_attr(node, "name", line)?;
    let type_name = required_attr(node, "type", line)?;
    let kind = JointKind::parse(&type_name).ok_or_else(|| SceneError::Unsupported {
        line,
        feature: format!("joint type {type_name:?}"),
    })?;

    let mut parent = None;
    let mut child = None;
    let mut origin = RigidTransform::IDENTITY;
    let mut axis = Vec3::X;
    let mut limits = None;
    for el in node.children().filter(Node::is_element) {
        let l = line_of(el);
        match el.tag_name().name() {
            "parent" | "child" => {
                check_attrs(el, &["link"], l)?;
                let link = required_attr(el, "link", l)?;
                if el.tag_name().name() == "parent" {
                    parent = Some(link);
                } else {
                    child = Some(link);
                }
            }
            "origin" => {
                check_attrs(el, &["xyz", "rpy"], l)?;
                let xyz = optional_triple(el, "xyz", l)?.unwrap_or_default();
                let rpy = optional_triple(el, "rpy", l)?.unwrap_or_default();
                origin = RigidTransform::from_xyz_rpy(xyz, rpy);
            }
            "axis" => {
                check_attrs(el, &["xyz"], l)?;
                axis = Vec3::from_array(
                    optional_triple(el, "xyz", l)?
                        .ok_or_else(|| SceneError::syntax(l, "axis needs xyz"))?,
                );
            }
            "limit" => {
                check_attrs(el, &["lower", "upper"], l)?;
                let lower = number_attr(el, "lower", l)?;
                let upper = number_attr(el, "upper", l)?;
                limits = Some((lower, upper));
            }
            _ => return Err(unsupported(el, l)),
        }
        if let Some(inner) = el.children().find(Node::is_element) {
            return Err(unsupported(inner, line_of(inner)));
        }
    }
    Ok(RawJoint {
        parent: parent.ok_or_else(|| SceneError::syntax(line, format!("joint {name} has no parent")))?,
        child: child.ok_or_else(|| SceneError::syntax(line, format!("joint {name} has no child")))?,
        name,
        kind,
        origin,
        axis,
        limits,
    })
}

fn unsupported(node: Node, line: usize) -> SceneError {
    SceneError::Unsupported {
        line,
        feature: format!("element <{}>", node.tag_name().name()),
    }
}

fn check_attrs(node: Node, allowed: &[&str], line: usize) -> Result<(), SceneError> {
    for a in node.attributes() {
        if !allowed.contains(&a.name()) {
            return Err(SceneError::Unsupported {
                line,
                feature: format!("attribute {}=\"{}\" on <{}>", a.name(), a.value(), node.tag_name().name()),
            });
        }
    }
    Ok(())
}

fn required_attr(node: Node, attr: &str, line: usize) -> Result<String, SceneError> {
    node.attribute(attr).map(str::to_owned).ok_or_else(|| {
        SceneError::syntax(
            line,
            format!("<{}> requires attribute {attr}", node.tag_name().name()),
        )
    })
}

fn number_attr(node: Node, attr: &str, line: usize) -> Result<f64, SceneError> {
    required_attr(node, attr, line)?
        .trim()
        .parse()
        .map_err(|_| SceneError::syntax(line, format!("{attr} must be a number")))
}

fn optional_triple(node: Node, attr: &str, line: usize) -> Result<Option<[f64; 3]>, SceneError> {
    let Some(raw) = node.attribute(attr) else {
        return Ok(None);
    };
    let nums = raw
        .split_whitespace()
        .map(str::parse::<f64>)
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| SceneError::syntax(line, format!("{attr} must hold 3 numbers")))?;
    match nums.as_slice() {
        [a, b, c] => Ok(Some([*a, *b, *c])),
        _ => Err(SceneError::syntax(line, format!("{attr} must hold 3 numbers"))),
    }
}
