//! Paired-point rigid registration (SVD of the cross-covariance) and
//! fiducial registration error.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::transforms::{RigidTransform, UnitQuaternion, Vec3};

/// Second singular value below this fraction of the first means the
/// moving points do not span a plane.
const DEGENERACY_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistrationError {
    #[error("need at least 3 fiducials, got {0}")]
    InsufficientPoints(usize),
    #[error("fixed set has {fixed} points but moving set has {moving}")]
    Pairing { fixed: usize, moving: usize },
    #[error("fiducial {0} is not finite")]
    NonFinite(usize),
    #[error("fiducials are collinear or coincident (singular values {0:?})")]
    Degenerate([f64; 3]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiducialSet {
    pub label: String,
    pub points: Vec<Vec3>,
}

impl FiducialSet {
    pub fn new(label: impl Into<String>, points: Vec<Vec3>) -> Result<Self, RegistrationError> {
        if points.len() < 3 {
            return Err(RegistrationError::InsufficientPoints(points.len()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(RegistrationError::NonFinite(i));
        }
        Ok(Self {
            label: label.into(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

impl AsRef<[Vec3]> for FiducialSet {
    fn as_ref(&self) -> &[Vec3] {
        &self.points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegistrationResult {
    /// Maps moving-set coordinates into the fixed frame.
    #[serde(rename = "pose")]
    pub transform: RigidTransform,
    /// Root-mean-square residual, meters.
    #[serde(rename = "fre_m")]
    pub fre: f64,
    pub n: usize,
}

fn na(v: Vec3) -> Vector3<f64> {
    Vector3::new(v.x, v.y, v.z)
}

fn centroid(points: &[Vec3]) -> Vector3<f64> {
    points.iter().fold(Vector3::zeros(), |acc, p| acc + na(*p)) / points.len() as f64
}

/// Least-squares rigid transform taking `moving` onto `fixed`, paired by index.
pub fn register_rigid(
    fixed: &FiducialSet,
    moving: &FiducialSet,
) -> Result<RegistrationResult, RegistrationError> {
    let (f, m) = (&fixed.points, &moving.points);
    if f.len() != m.len() {
        return Err(RegistrationError::Pairing {
            fixed: f.len(),
            moving: m.len(),
        });
    }
    if f.len() < 3 {
        return Err(RegistrationError::InsufficientPoints(f.len()));
    }
    let cf = centroid(f);
    let cm = centroid(m);
    let h: Matrix3<f64> = m
        .iter()
        .zip(f)
        .fold(Matrix3::zeros(), |acc, (mp, fp)| {
            acc + (na(*mp) - cm) * (na(*fp) - cf).transpose()
        });

    let svd = h.svd(true, true);
    let mut s = [svd.singular_values[0], svd.singular_values[1], svd.singular_values[2]];
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0].is_nan() || s[0] <= 0.0 || s[1] < DEGENERACY_RATIO * s[0] {
        return Err(RegistrationError::Degenerate(s));
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let v = v_t.transpose();
    let mut rotation = v * u.transpose();
    if rotation.determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        let mut d = Matrix3::identity();
        d[(smallest, smallest)] = -1.0;
        rotation = v * d * u.transpose();
    }
    let t = cf - rotation * cm;
    let rows = [
        [rotation[(0, 0)], rotation[(0, 1)], rotation[(0, 2)]],
        [rotation[(1, 0)], rotation[(1, 1)], rotation[(1, 2)]],
        [rotation[(2, 0)], rotation[(2, 1)], rotation[(2, 2)]],
    ];
    let transform = RigidTransform::new(
        UnitQuaternion::from_matrix(rows).map_err(|_| RegistrationError::Degenerate(s))?,
        Vec3::new(t.x, t.y, t.z),
    );
    let fre = fre(&transform, fixed, moving)?;
    Ok(RegistrationResult {
        transform,
        fre,
        n: f.len(),
    })
}

/// `sqrt(mean_i |T(moving_i) - fixed_i|^2)`.
pub fn fre(
    transform: &RigidTransform,
    fixed: impl AsRef<[Vec3]>,
    moving: impl AsRef<[Vec3]>,
) -> Result<f64, RegistrationError> {
    let (f, m) = (fixed.as_ref(), moving.as_ref());
    if f.len() != m.len() || f.is_empty() {
        return Err(RegistrationError::Pairing {
            fixed: f.len(),
            moving: m.len(),
        });
    }
    let sum: f64 = f
        .iter()
        .zip(m)
        .map(|(fp, mp)| {
            let r = transform.transform_point(*mp) - *fp;
            r.dot(r)
        })
        .sum();
    Ok((sum / f.len() as f64).sqrt())
}
