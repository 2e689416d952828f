//! Ring-marker surgical navigation on synthetic depth-camera data.
//!
//! The geometric core ([`geometry`], [`linalg`], circle fitting, the hand-eye
//! solver, TCP correction and FOV interpolation) is generic over the scalar
//! type through [`Real`]; the aliases below fix it to `f64`, which is what the
//! scene synthesis, detection pipeline and scenario harness use.

pub mod fov;
pub mod fusion;
pub mod geometry;
pub mod handeye;
pub mod harness;
pub mod linalg;
pub mod marker;
pub mod respiration;
pub mod scalar;
pub mod scene;

pub use scalar::Real;

pub type Point = geometry::Point3<f64>;
pub type Transform = geometry::RigidTransform<f64>;
pub type Quaternion = geometry::UnitQuaternion<f64>;
pub type PoseError = geometry::PoseError<f64>;
pub type FovTable = fov::FovTable<f64>;
pub type ViewFrustum = fov::ViewFrustum<f64>;
pub type OrientedBox = fov::OrientedBox<f64>;

pub type Point32 = geometry::Point3<f32>;
pub type Transform32 = geometry::RigidTransform<f32>;
pub type HandEyeResult = handeye::HandEyeResult<f64>;
pub type CalibrationSample = handeye::CalibrationSample<f64>;
pub type TcpCorrection = fusion::TcpCorrection<f64>;
pub type ExecutionRecord = fusion::ExecutionRecord<f64>;
pub use harness::{RunReport, Scenario};
