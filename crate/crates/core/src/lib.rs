//! Core library for minimap-guided drone navigation: frames and transforms,
//! occupancy mapping, grid planning, minimum-snap trajectories, a simulated
//! quadrotor with a depth camera, and the mission pipeline tying them together.

pub mod geom;
pub mod mapping;
pub mod mission;
pub mod planner;
pub mod policy;
pub mod runlog;
pub mod scenario;
pub mod scalar;
pub mod sim;
pub mod trajectory;

pub use scalar::Scalar;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type RigidTransform = geom::RigidTransform<f64>;
pub type MinimapTransform = geom::MinimapTransform<f64>;
pub type FramedPoint = geom::FramedPoint<f64>;
pub type DroneState = geom::DroneState<f64>;
pub type Trajectory = trajectory::PolynomialTrajectory<f64>;

pub type Vec3F32 = nalgebra::Vector3<f32>;
pub type RigidTransformF32 = geom::RigidTransform<f32>;
pub type MinimapTransformF32 = geom::MinimapTransform<f32>;
pub type FramedPointF32 = geom::FramedPoint<f32>;
pub type DroneStateF32 = geom::DroneState<f32>;
pub type TrajectoryF32 = trajectory::PolynomialTrajectory<f32>;
