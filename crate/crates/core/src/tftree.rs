//! Time-buffered transform tree.
//!
//! Edges are keyed by child frame, so a frame has at most one parent. Each
//! edge keeps a strictly increasing run of stamped samples spanning at most
//! the retention window. Lookups interpolate per edge and never extrapolate.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use thiserror::Error;

use crate::bus::is_valid_name;
use crate::messages::TransformUpdate;
use crate::transforms::{compose, interpolate, invert, RigidTransform, Timestamp};

pub const DEFAULT_RETENTION: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TfError {
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("stale insert on {parent}->{child}: {stamp} is not newer than {newest}")]
    StaleInsert {
        parent: String,
        child: String,
        stamp: Timestamp,
        newest: Timestamp,
    },
    #[error("tree violation: {0}")]
    TreeViolation(String),
    #[error("not connected: {0}")]
    Connectivity(String),
    #[error("{requested} outside [{oldest}, {newest}] on edge {parent}->{child}")]
    TimeBounds {
        parent: String,
        child: String,
        requested: Timestamp,
        oldest: Timestamp,
        newest: Timestamp,
    },
}

/// Pose of `child` expressed in `parent` at `stamp`.
#[derive(Debug, Clone, PartialEq)]
pub struct StampedTransform {
    pub parent: String,
    pub child: String,
    pub stamp: Timestamp,
    pub transform: RigidTransform,
}

impl StampedTransform {
    pub fn new(
        parent: impl Into<String>,
        child: impl Into<String>,
        stamp: Timestamp,
        transform: RigidTransform,
    ) -> Self {
        Self {
            parent: parent.into(),
            child: child.into(),
            stamp,
            transform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupTime {
    At(Timestamp),
    Latest,
}

impl From<Timestamp> for LookupTime {
    fn from(t: Timestamp) -> Self {
        LookupTime::At(t)
    }
}

#[derive(Debug, Clone)]
struct Edge {
    parent: String,
    samples: VecDeque<(Timestamp, RigidTransform)>,
}

impl Edge {
    fn newest(&self) -> Timestamp {
        self.samples.back().map(|s| s.0).unwrap_or(Timestamp::ZERO)
    }

    fn oldest(&self) -> Timestamp {
        self.samples.front().map(|s| s.0).unwrap_or(Timestamp::ZERO)
    }

    fn sample(&self, child: &str, t: Timestamp) -> Result<RigidTransform, TfError> {
        let out_of_bounds = || TfError::TimeBounds {
            parent: self.parent.clone(),
            child: child.to_owned(),
            requested: t,
            oldest: self.oldest(),
            newest: self.newest(),
        };
        if self.samples.is_empty() || t < self.oldest() || t > self.newest() {
            return Err(out_of_bounds());
        }
        let idx = self.samples.partition_point(|s| s.0 < t);
        let (t1, tf1) = self.samples[idx];
        if t1 == t {
            return Ok(tf1);
        }
        let (t0, tf0) = self.samples[idx - 1];
        let alpha = (t.as_nanos() - t0.as_nanos()) as f64 / (t1.as_nanos() - t0.as_nanos()) as f64;
        interpolate(&tf0, &tf1, alpha).map_err(|_| out_of_bounds())
    }
}

#[derive(Debug, Clone)]
pub struct TransformBuffer {
    retention: Duration,
    edges: HashMap<String, Edge>,
}

impl Default for TransformBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_RETENTION)
    }
}

impl TransformBuffer {
    pub fn new(retention: Duration) -> Self {
        Self {
            retention,
            edges: HashMap::new(),
        }
    }

    pub fn retention(&self) -> Duration {
        self.retention
    }

    pub fn clear(&mut self) {
        self.edges.clear();
    }

    pub fn is_known(&self, frame: &str) -> bool {
        self.edges.contains_key(frame) || self.edges.values().any(|e| e.parent == frame)
    }

    pub fn parent_of(&self, frame: &str) -> Option<&str> {
        self.edges.get(frame).map(|e| e.parent.as_str())
    }

    /// Number of samples retained on the edge ending at `child`.
    pub fn edge_len(&self, child: &str) -> usize {
        self.edges.get(child).map_or(0, |e| e.samples.len())
    }

    pub fn insert(&mut self, st: StampedTransform) -> Result<(), TfError> {
        for f in [&st.parent, &st.child] {
            if !is_valid_name(f) {
                return Err(TfError::InvalidFrame(f.clone()));
            }
        }
        if st.parent == st.child {
            return Err(TfError::InvalidFrame(format!("{} is its own parent", st.child)));
        }
        if !st.transform.is_finite() {
            return Err(TfError::InvalidFrame(format!("non-finite transform for {}", st.child)));
        }

        let mut replace = false;
        if let Some(edge) = self.edges.get(&st.child) {
            if edge.parent == st.parent {
                if st.stamp <= edge.newest() {
                    return Err(TfError::StaleInsert {
                        parent: st.parent,
                        child: st.child,
                        stamp: st.stamp,
                        newest: edge.newest(),
                    });
                }
            } else if edge.newest() < st.stamp.saturating_sub(self.retention) {
                replace = true;
            } else {
                return Err(TfError::TreeViolation(format!(
                    "{} already has parent {} with retained data",
                    st.child, edge.parent
                )));
            }
        }
        if (replace || !self.edges.contains_key(&st.child)) && self.is_ancestor(&st.child, &st.parent)
        {
            return Err(TfError::TreeViolation(format!(
                "{}->{} would close a cycle",
                st.parent, st.child
            )));
        }

        let horizon = st.stamp.saturating_sub(self.retention);
        let edge = self.edges.entry(st.child).or_insert_with(|| Edge {
            parent: st.parent.clone(),
            samples: VecDeque::new(),
        });
        if replace {
            edge.parent = st.parent;
            edge.samples.clear();
        }
        edge.samples.push_back((st.stamp, st.transform));
        while edge.samples.front().is_some_and(|s| s.0 < horizon) {
            edge.samples.pop_front();
        }
        Ok(())
    }

    /// Inserts every transform of a bus update; returns the rejected ones.
    pub fn insert_update(&mut self, update: &TransformUpdate) -> Vec<TfError> {
        let stamp = Timestamp::from_nanos(update.stamp_nanos);
        update
            .transforms
            .iter()
            .filter_map(|ft| {
                self.insert(StampedTransform::new(&ft.parent, &ft.child, stamp, ft.pose))
                    .err()
            })
            .collect()
    }

    fn is_ancestor(&self, candidate: &str, frame: &str) -> bool {
        let mut cur = frame;
        while let Some(edge) = self.edges.get(cur) {
            if edge.parent == candidate {
                return true;
            }
            cur = &edge.parent;
        }
        false
    }

    /// `frame`, its parent, grandparent, ... up to the root.
    fn chain<'a>(&'a self, frame: &'a str) -> Vec<&'a str> {
        let mut out = vec![frame];
        let mut cur = frame;
        while let Some(edge) = self.edges.get(cur) {
            cur = &edge.parent;
            out.push(cur);
        }
        out
    }

    fn require_known(&self, frame: &str) -> Result<(), TfError> {
        if self.is_known(frame) {
            Ok(())
        } else {
            Err(TfError::Connectivity(format!("unknown frame {frame}")))
        }
    }

    /// Child frames on the path between `a` and `b`, split into the part
    /// below `a` and the part below `b`, each ordered from the common
    /// ancestor downward.
    fn path<'a>(
        &'a self,
        a: &'a str,
        b: &'a str,
    ) -> Result<(Vec<&'a str>, Vec<&'a str>), TfError> {
        self.require_known(a)?;
        self.require_known(b)?;
        let ca = self.chain(a);
        let cb = self.chain(b);
        let lca = ca
            .iter()
            .find(|f| cb.contains(f))
            .ok_or_else(|| TfError::Connectivity(format!("{a} and {b} have no common root")))?;
        let below = |c: &[&'a str]| -> Vec<&'a str> {
            let mut v: Vec<&str> = c.iter().take_while(|f| *f != lca).copied().collect();
            v.reverse();
            v
        };
        Ok((below(&ca), below(&cb)))
    }

    fn newest_on(&self, children: &[&str]) -> Timestamp {
        children
            .iter()
            .filter_map(|c| self.edges.get(*c).map(Edge::newest))
            .min()
            .unwrap_or(Timestamp::ZERO)
    }

    /// Newest time at which every edge connecting `frames` has data.
    pub fn latest_common_time(&self, frames: &[&str]) -> Result<Timestamp, TfError> {
        let Some((first, rest)) = frames.split_first() else {
            return Ok(Timestamp::ZERO);
        };
        self.require_known(first)?;
        if rest.is_empty() {
            return Ok(Timestamp::ZERO);
        }
        let mut involved = Vec::new();
        for other in rest {
            let (x, y) = self.path(first, other)?;
            involved.extend(x);
            involved.extend(y);
        }
        Ok(self.newest_on(&involved))
    }

    /// Pose of `source` expressed in `target`: maps points in the source
    /// frame into the target frame.
    pub fn lookup(
        &self,
        target: &str,
        source: &str,
        time: impl Into<LookupTime>,
    ) -> Result<RigidTransform, TfError> {
        let (down_target, down_source) = self.path(target, source)?;
        let t = match time.into() {
            LookupTime::At(t) => t,
            LookupTime::Latest => {
                let mut all = down_target.clone();
                all.extend(&down_source);
                self.newest_on(&all)
            }
        };
        let from_lca_source = self.fold(&down_source, t)?;
        let from_lca_target = self.fold(&down_target, t)?;
        Ok(match (from_lca_target, from_lca_source) {
            (None, None) => RigidTransform::IDENTITY,
            (None, Some(s)) => s,
            (Some(tg), None) => invert(&tg),
            (Some(tg), Some(s)) => compose(&invert(&tg), &s),
        })
    }

    fn fold(&self, children: &[&str], t: Timestamp) -> Result<Option<RigidTransform>, TfError> {
        let mut acc: Option<RigidTransform> = None;
        for child in children {
            let local = self.edges[*child].sample(child, t)?;
            acc = Some(match acc {
                None => local,
                Some(a) => compose(&a, &local),
            });
        }
        Ok(acc)
    }

    pub fn can_transform(&self, target: &str, source: &str, time: impl Into<LookupTime>) -> bool {
        self.lookup(target, source, time).is_ok()
    }
}

/// A buffer shared between one writer and many readers. Each call takes the
/// lock once, so readers never observe a half-applied insert.
#[derive(Debug, Clone, Default)]
pub struct SharedTransformBuffer(Arc<RwLock<TransformBuffer>>);

impl SharedTransformBuffer {
    pub fn new(retention: Duration) -> Self {
        Self(Arc::new(RwLock::new(TransformBuffer::new(retention))))
    }

    pub fn insert(&self, st: StampedTransform) -> Result<(), TfError> {
        self.0.write().insert(st)
    }

    pub fn insert_update(&self, update: &TransformUpdate) -> Vec<TfError> {
        self.0.write().insert_update(update)
    }

    pub fn lookup(
        &self,
        target: &str,
        source: &str,
        time: impl Into<LookupTime>,
    ) -> Result<RigidTransform, TfError> {
        self.0.read().lookup(target, source, time)
    }

    pub fn with<R>(&self, f: impl FnOnce(&TransformBuffer) -> R) -> R {
        f(&self.0.read())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transforms::{UnitQuaternion, Vec3};
    use std::f64::consts::FRAC_PI_2;

    fn secs(s: f64) -> Timestamp {
        Timestamp::from_secs_f64(s)
    }

    fn tr(x: f64, y: f64, z: f64) -> RigidTransform {
        RigidTransform::from_translation(Vec3::new(x, y, z))
    }

    fn rot_z(angle: f64) -> RigidTransform {
        RigidTransform::from_rotation(UnitQuaternion::from_axis_angle(Vec3::Z, angle))
    }

    fn st(parent: &str, child: &str, t: f64, tf: RigidTransform) -> StampedTransform {
        StampedTransform::new(parent, child, secs(t), tf)
    }

    #[test]
    fn ordered_inserts_are_retained() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "base", 1.0, tr(1.0, 0.0, 0.0))).unwrap();
        buf.insert(st("world", "base", 2.0, tr(2.0, 0.0, 0.0))).unwrap();
        assert_eq!(buf.edge_len("base"), 2);
    }

    #[test]
    fn late_arrival_is_stale() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "base", 2.0, tr(1.0, 0.0, 0.0))).unwrap();
        let err = buf.insert(st("world", "base", 1.0, tr(1.0, 0.0, 0.0))).unwrap_err();
        assert!(matches!(err, TfError::StaleInsert { .. }));
        let dup = buf.insert(st("world", "base", 2.0, tr(1.0, 0.0, 0.0))).unwrap_err();
        assert!(matches!(dup, TfError::StaleInsert { .. }));
    }

    #[test]
    fn second_parent_while_retained_is_rejected() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "base", 0.0, RigidTransform::IDENTITY)).unwrap();
        buf.insert(st("world", "tool", 1.0, RigidTransform::IDENTITY)).unwrap();
        let err = buf.insert(st("base", "tool", 1.5, RigidTransform::IDENTITY)).unwrap_err();
        assert!(matches!(err, TfError::TreeViolation(_)));
        // once the old parent data has aged out the reparent is accepted
        buf.insert(st("base", "tool", 12.0, RigidTransform::IDENTITY)).unwrap();
        assert_eq!(buf.parent_of("tool"), Some("base"));
    }

    #[test]
    fn cycles_are_rejected() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("a", "b", 0.0, RigidTransform::IDENTITY)).unwrap();
        buf.insert(st("b", "c", 0.0, RigidTransform::IDENTITY)).unwrap();
        assert!(matches!(
            buf.insert(st("c", "a", 0.0, RigidTransform::IDENTITY)),
            Err(TfError::TreeViolation(_))
        ));
        assert!(matches!(
            buf.insert(st("a", "a", 0.0, RigidTransform::IDENTITY)),
            Err(TfError::InvalidFrame(_))
        ));
    }

    #[test]
    fn retention_evicts_old_samples() {
        let mut buf = TransformBuffer::new(Duration::from_secs(1));
        for i in 0..=30 {
            buf.insert(st("world", "base", i as f64 * 0.1, RigidTransform::IDENTITY))
                .unwrap();
        }
        assert_eq!(buf.edge_len("base"), 11);
        assert!(!buf.can_transform("world", "base", secs(1.5)));
        assert!(buf.can_transform("world", "base", secs(2.0)));
    }

    #[test]
    fn identity_edge_latest() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "base", 0.5, RigidTransform::IDENTITY)).unwrap();
        assert_eq!(
            buf.lookup("world", "base", LookupTime::Latest).unwrap(),
            RigidTransform::IDENTITY
        );
    }

    #[test]
    fn interpolation_midpoint() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "base", 0.0, RigidTransform::IDENTITY)).unwrap();
        buf.insert(st("world", "base", 1.0, rot_z(FRAC_PI_2))).unwrap();
        let mid = buf.lookup("world", "base", secs(0.5)).unwrap();
        let (ang, dist) = mid.distance(&rot_z(FRAC_PI_2 / 2.0));
        assert!(ang < 1e-12 && dist < 1e-12);
    }

    #[test]
    fn no_extrapolation() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "base", 1.0, RigidTransform::IDENTITY)).unwrap();
        buf.insert(st("world", "base", 2.0, RigidTransform::IDENTITY)).unwrap();
        for t in [0.999, 2.000000001] {
            assert!(matches!(
                buf.lookup("world", "base", secs(t)),
                Err(TfError::TimeBounds { .. })
            ));
        }
    }

    #[test]
    fn exact_hit_returns_stored_bits() {
        let mut buf = TransformBuffer::default();
        let odd = RigidTransform::new(
            UnitQuaternion::from_axis_angle(Vec3::new(0.3, -0.2, 0.9), 0.77),
            Vec3::new(0.1, 1.0 / 3.0, -7.0),
        );
        buf.insert(st("world", "base", 1.0, tr(0.0, 0.0, 0.0))).unwrap();
        buf.insert(st("world", "base", 2.0, odd)).unwrap();
        buf.insert(st("world", "base", 3.0, tr(0.0, 0.0, 0.0))).unwrap();
        assert_eq!(buf.lookup("world", "base", secs(2.0)).unwrap(), odd);
    }

    #[test]
    fn latest_common_time_takes_min() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "a", 5.0, RigidTransform::IDENTITY)).unwrap();
        assert_eq!(buf.latest_common_time(&["world", "a"]).unwrap(), secs(5.0));
        buf.insert(st("a", "b", 3.0, RigidTransform::IDENTITY)).unwrap();
        assert_eq!(buf.latest_common_time(&["world", "b"]).unwrap(), secs(3.0));
        assert!(matches!(
            buf.latest_common_time(&["world", "ghost"]),
            Err(TfError::Connectivity(_))
        ));
    }

    #[test]
    fn disconnected_trees() {
        let mut buf = TransformBuffer::default();
        buf.insert(st("world", "a", 0.0, RigidTransform::IDENTITY)).unwrap();
        buf.insert(st("other", "b", 0.0, RigidTransform::IDENTITY)).unwrap();
        assert!(matches!(
            buf.lookup("a", "b", LookupTime::Latest),
            Err(TfError::Connectivity(_))
        ));
        assert!(!buf.can_transform("a", "b", LookupTime::Latest));
        assert!(!buf.can_transform("a", "nope", LookupTime::Latest));
    }

    #[test]
    fn chain_composes_and_siblings_relate() {
        let mut buf = TransformBuffer::default();
        let wa = tr(1.0, 0.0, 0.0).compose(&rot_z(FRAC_PI_2));
        let ab = tr(0.0, 2.0, 0.0);
        let wc = tr(0.0, 0.0, 3.0);
        buf.insert(st("world", "a", 0.0, wa)).unwrap();
        buf.insert(st("a", "b", 0.0, ab)).unwrap();
        buf.insert(st("world", "c", 0.0, wc)).unwrap();
        let wb = buf.lookup("world", "b", LookupTime::Latest).unwrap();
        assert_eq!(wb, wa.compose(&ab));
        let p = wb.transform_point(Vec3::ZERO);
        assert!((p - Vec3::new(-1.0, 0.0, 0.0)).norm() < 1e-12);
        let cb = buf.lookup("c", "b", LookupTime::Latest).unwrap();
        let (ang, dist) = cb.distance(&wc.inverse().compose(&wb));
        assert!(ang < 1e-12 && dist < 1e-12);
        assert_eq!(buf.lookup("b", "b", LookupTime::Latest).unwrap(), RigidTransform::IDENTITY);
    }

    #[test]
    fn update_ingest_reports_rejections() {
        use crate::messages::FrameTransform;
        let mut buf = TransformBuffer::default();
        let update = |stamp| TransformUpdate {
            stamp_nanos: stamp,
            transforms: vec![
                FrameTransform {
                    parent: "world".into(),
                    child: "base".into(),
                    pose: RigidTransform::IDENTITY,
                },
                FrameTransform {
                    parent: "base".into(),
                    child: "arm".into(),
                    pose: RigidTransform::IDENTITY,
                },
            ],
        };
        assert!(buf.insert_update(&update(10)).is_empty());
        assert_eq!(buf.insert_update(&update(10)).len(), 2);
    }
}
