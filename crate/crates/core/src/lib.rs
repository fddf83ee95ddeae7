pub mod bus;
pub mod demo;
pub mod messages;
pub mod latency;
pub mod mirror;
pub mod registration;
pub mod scene;
pub mod sim;
pub mod tftree;
pub mod timer;
pub mod transforms;

pub use latency::LatencyStats;
pub use messages::{JointCommand, TransformUpdate};
pub use scene::SceneDescription;
pub use tftree::{StampedTransform, TransformBuffer};
pub use transforms::{RigidTransform, Timestamp, UnitQuaternion, Vec3};
