//! Modular automated-driving motion pipeline.
//!
//! Stages communicate only through the fixed types in [`geometry`],
//! [`types`] and [`trajectory`]: the map yields a route and a driving area,
//! prediction and the costmap describe the environment, the maneuver
//! resolver adjusts the driving area, the planner emits Curvepoints and the
//! execution stage guards and tracks them.

pub mod costmap;
pub mod diagnostics;
pub mod execution;
pub mod geometry;
pub mod maneuver;
pub mod map;
pub mod mission;
pub mod planner;
pub mod prediction;
pub mod trajectory;
pub mod types;

pub use geometry::{Pose2D, Vec2};
pub use trajectory::{Curvepoint, Trajectory};
pub use types::{Classification, VehicleState};
