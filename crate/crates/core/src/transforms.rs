//! Rigid-transform algebra shared by every other module.
//!
//! Rotations are unit quaternions stored scalar-first (`w, x, y, z`) and act
//! as right-handed rotations. A [`RigidTransform`] maps a point `p` to
//! `R·p + t`. Serialized poses are always the seven numbers
//! `[tx, ty, tz, qw, qx, qy, qz]`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("interpolation factor {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);
    pub const X: Vec3 = Vec3::new(1.0, 0.0, 0.0);
    pub const Y: Vec3 = Vec3::new(0.0, 1.0, 0.0);
    pub const Z: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Returns `None` for a zero or non-finite vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        if n > 0.0 && n.is_finite() {
            Some(self.scale(1.0 / n))
        } else {
            None
        }
    }

    pub fn lerp(self, o: Vec3, alpha: f64) -> Vec3 {
        self + (o - self).scale(alpha)
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Unit quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes the given components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, TransformError> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(TransformError::NonFinite("quaternion"));
        }
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if n == 0.0 {
            return Err(TransformError::ZeroQuaternion);
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let Some(a) = axis.normalized() else {
            return Self::IDENTITY;
        };
        let (s, c) = (angle * 0.5).sin_cos();
        Self {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
        .renormalized()
    }

    /// Roll/pitch/yaw in radians, applied as `Rz(yaw)·Ry(pitch)·Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = (roll * 0.5).sin_cos();
        let (sp, cp) = (pitch * 0.5).sin_cos();
        let (sy, cy) = (yaw * 0.5).sin_cos();
        Self {
            w: cr * cp * cy + sr * sp * sy,
            x: sr * cp * cy - cr * sp * sy,
            y: cr * sp * cy + sr * cp * sy,
            z: cr * cp * sy - sr * sp * cy,
        }
        .renormalized()
    }

    /// Inverse of [`from_rpy`](Self::from_rpy).
    pub fn to_rpy(self) -> (f64, f64, f64) {
        let Self { w, x, y, z } = self;
        let roll = (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y));
        let sinp = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0);
        let pitch = sinp.asin();
        let yaw = (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z));
        (roll, pitch, yaw)
    }

    /// Row-major 3x3 rotation matrix.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Self { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Converts a proper rotation matrix (row-major) with Shepperd's method.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self, TransformError> {
        let trace = m[0][0] + m[1][1] + m[2][2];
        let (w, x, y, z) = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            (
                0.25 * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            )
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt() * 2.0;
            (
                (m[2][1] - m[1][2]) / s,
                0.25 * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            )
        } else if m[1][1] > m[2][2] {
            let s = (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt() * 2.0;
            (
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                0.25 * s,
                (m[1][2] + m[2][1]) / s,
            )
        } else {
            let s = (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt() * 2.0;
            (
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                0.25 * s,
            )
        };
        Self::new(w, x, y, z)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, o: UnitQuaternion) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn conjugate(self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Same rotation, opposite hemisphere.
    pub fn negated(self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2w(u × v) + 2u × (u × v)
        let u = Vec3::new(self.x, self.y, self.z);
        let t = u.cross(v).scale(2.0);
        v + t.scale(self.w) + u.cross(t)
    }

    /// Rotation angle in `[0, π]` between `self` and `other`.
    pub fn angle_to(self, other: UnitQuaternion) -> f64 {
        // atan2 form keeps precision for tiny angles
        let rel = self.conjugate() * other;
        let v = Vec3::new(rel.x, rel.y, rel.z).norm();
        2.0 * v.atan2(rel.w.abs())
    }

    /// Shortest-arc spherical interpolation.
    pub fn slerp(self, other: UnitQuaternion, alpha: f64) -> Self {
        let mut b = other;
        let mut cos = self.dot(b);
        if cos < 0.0 {
            b = b.negated();
            cos = -cos;
        }
        let (wa, wb) = if cos > 1.0 - 1e-12 {
            (1.0 - alpha, alpha)
        } else {
            let theta = cos.min(1.0).acos();
            let sin = theta.sin();
            (
                ((1.0 - alpha) * theta).sin() / sin,
                (alpha * theta).sin() / sin,
            )
        };
        Self {
            w: wa * self.w + wb * b.w,
            x: wa * self.x + wb * b.x,
            y: wa * self.y + wb * b.y,
            z: wa * self.z + wb * b.z,
        }
        .renormalized()
    }

    fn renormalized(self) -> Self {
        let n = self.norm();
        if (n - 1.0).abs() <= f64::EPSILON {
            return self;
        }
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;
    fn mul(self, o: UnitQuaternion) -> UnitQuaternion {
        UnitQuaternion {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
        .renormalized()
    }
}

/// Rotation followed by translation: `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: UnitQuaternion,
    pub translation: Vec3,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: UnitQuaternion::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: UnitQuaternion, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::IDENTITY, t)
    }

    pub fn from_rotation(r: UnitQuaternion) -> Self {
        Self::new(r, Vec3::ZERO)
    }

    /// Pose from position and roll/pitch/yaw, the file-format convention.
    pub fn from_xyz_rpy(xyz: [f64; 3], rpy: [f64; 3]) -> Self {
        Self::new(
            UnitQuaternion::from_rpy(rpy[0], rpy[1], rpy[2]),
            Vec3::from_array(xyz),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.translation.is_finite() && self.rotation.to_array().iter().all(|v| v.is_finite())
    }

    /// `[tx, ty, tz, qw, qx, qy, qz]`
    pub fn to_pose7(&self) -> [f64; 7] {
        let t = self.translation;
        let q = self.rotation;
        [t.x, t.y, t.z, q.w, q.x, q.y, q.z]
    }

    /// Parses `[tx, ty, tz, qw, qx, qy, qz]`. Quaternions already within
    /// `1e-9` of unit norm are kept bit-for-bit so that serialized poses
    /// round-trip exactly.
    pub fn from_pose7(p: [f64; 7]) -> Result<Self, TransformError> {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(TransformError::NonFinite("pose"));
        }
        let raw = UnitQuaternion {
            w: p[3],
            x: p[4],
            y: p[5],
            z: p[6],
        };
        let rotation = if (raw.norm() - 1.0).abs() <= NORM_TOLERANCE {
            raw
        } else {
            UnitQuaternion::new(p[3], p[4], p[5], p[6])?
        };
        Ok(Self::new(rotation, Vec3::new(p[0], p[1], p[2])))
    }

    /// Row-major homogeneous 4x4 matrix.
    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = self.rotation.to_matrix();
        let t = self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t.x],
            [r[1][0], r[1][1], r[1][2], t.y],
            [r[2][0], r[2][1], r[2][2], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        invert(self)
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        transform_point(self, p)
    }

    /// Rotation angle (rad) and translation distance (m) between two poses.
    pub fn distance(&self, other: &RigidTransform) -> (f64, f64) {
        (
            self.rotation.angle_to(other.rotation),
            (self.translation - other.translation).norm(),
        )
    }
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_pose7().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = <[f64; 7]>::deserialize(d)?;
        RigidTransform::from_pose7(raw).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for RigidTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.to_pose7();
        write!(
            f,
            "t=({:.6}, {:.6}, {:.6}) q=({:.6}, {:.6}, {:.6}, {:.6})",
            p[0], p[1], p[2], p[3], p[4], p[5], p[6]
        )
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation.rotate(b.translation) + a.translation,
    }
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    let r = t.rotation.conjugate();
    RigidTransform {
        rotation: r,
        translation: -r.rotate(t.translation),
    }
}

/// Slerp on rotation, lerp on translation. `alpha` must lie in `[0, 1]`.
pub fn interpolate(
    a: &RigidTransform,
    b: &RigidTransform,
    alpha: f64,
) -> Result<RigidTransform, TransformError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TransformError::AlphaOutOfRange(alpha));
    }
    if alpha == 0.0 {
        return Ok(*a);
    }
    if alpha == 1.0 {
        return Ok(*b);
    }
    Ok(RigidTransform {
        rotation: a.rotation.slerp(b.rotation, alpha),
        translation: a.translation.lerp(b.translation, alpha),
    })
}

pub fn transform_point(t: &RigidTransform, p: Vec3) -> Vec3 {
    t.rotation.rotate(p) + t.translation
}

/// Nanoseconds on the process-wide monotonic clock.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(u64);

static CLOCK_EPOCH: OnceLock<Instant> = OnceLock::new();

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_nanos(nanos: u64) -> Self {
        Self(nanos)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Self((secs.max(0.0) * 1e9).round() as u64)
    }

    /// Current time on the process monotonic clock.
    pub fn now() -> Self {
        Self::from_instant(Instant::now())
    }

    pub fn from_instant(at: Instant) -> Self {
        let epoch = *CLOCK_EPOCH.get_or_init(Instant::now);
        Self(at.saturating_duration_since(epoch).as_nanos() as u64)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 * 1e-9
    }

    pub fn saturating_sub(self, d: Duration) -> Self {
        Self(self.0.saturating_sub(d.as_nanos() as u64))
    }

    pub fn saturating_add(self, d: Duration) -> Self {
        Self(self.0.saturating_add(d.as_nanos() as u64))
    }

    pub fn duration_since(self, earlier: Timestamp) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.as_secs_f64())
    }
}
