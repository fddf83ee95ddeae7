//! Deterministic inputs for the benchmarks.

use twinbridge_core::registration::FiducialSet;
use twinbridge_core::{RigidTransform, StampedTransform, Timestamp, TransformBuffer, UnitQuaternion, Vec3};

/// Frame name at `depth` in [`chain_buffer`].
pub fn chain_frame(depth: usize) -> String {
    if depth == 0 {
        "world".into()
    } else {
        format!("link{depth}")
    }
}

/// Linear chain `world -> link1 -> ... -> link{depth}` with `samples`
/// stamps per edge, 5 ms apart.
pub fn chain_buffer(depth: usize, samples: u64) -> TransformBuffer {
    let mut buf = TransformBuffer::default();
    for s in 0..samples {
        let stamp = Timestamp::from_nanos(1_000_000_000 + s * 5_000_000);
        for d in 1..=depth {
            let a = 0.1 * d as f64 + 0.01 * s as f64;
            let pose = RigidTransform::new(
                UnitQuaternion::from_axis_angle(Vec3::new(0.3, 0.5, 1.0), a),
                Vec3::new(0.1, 0.02 * a.sin(), 0.05),
            );
            buf.insert(StampedTransform::new(chain_frame(d - 1), chain_frame(d), stamp, pose))
                .expect("chain edge");
        }
    }
    buf
}

/// `n` spread-out fiducials and the same points under a fixed rigid motion.
pub fn fiducial_pair(n: usize) -> (FiducialSet, FiducialSet) {
    let motion = RigidTransform::new(
        UnitQuaternion::from_axis_angle(Vec3::new(1.0, -2.0, 0.5), 0.7),
        Vec3::new(0.1, -0.05, 0.2),
    );
    let fixed: Vec<Vec3> = (0..n)
        .map(|i| {
            let t = i as f64;
            Vec3::new(0.05 * (1.3 * t).sin(), 0.05 * (2.1 * t).cos(), 0.05 * (0.7 * t + 1.0).sin())
        })
        .collect();
    let moving = fixed.iter().map(|p| motion.transform_point(*p)).collect();
    (
        FiducialSet::new("fixed", fixed).expect("fixed"),
        FiducialSet::new("moving", moving).expect("moving"),
    )
}
