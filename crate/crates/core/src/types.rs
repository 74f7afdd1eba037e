use serde::{Deserialize, Serialize};

use crate::geometry::{Pose2D, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub pose: Pose2D,
    pub v: f64,
    pub a: f64,
    pub steering_angle: f64,
    pub timestamp: f64,
}

impl VehicleState {
    pub fn at_rest(pose: Pose2D) -> Self {
        Self {
            pose,
            ..Default::default()
        }
    }

    pub fn is_valid(&self) -> bool {
        self.pose.is_finite()
            && self.v.is_finite()
            && self.v >= 0.0
            && self.a.is_finite()
            && self.steering_angle.is_finite()
            && self.timestamp.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Classification {
    Pedestrian,
    Bicycle,
    Car,
    Truck,
    Unknown,
}

impl Classification {
    /// Objects expected to follow lanes.
    pub fn is_lane_bound(self) -> bool {
        matches!(
            self,
            Classification::Car | Classification::Truck | Classification::Bicycle
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extents {
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

/// Perception output consumed by prediction, maneuver and planning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub id: u64,
    pub position: [f64; 3],
    pub extents: Extents,
    pub heading: f64,
    pub classification: Classification,
    pub velocity: f64,
}

impl Obstacle {
    pub fn position_2d(&self) -> Vec2 {
        Vec2::new(self.position[0], self.position[1])
    }

    pub fn is_valid(&self) -> bool {
        self.extents.length > 0.0
            && self.extents.width > 0.0
            && self.extents.height > 0.0
            && self.position.iter().all(|v| v.is_finite())
            && self.heading.is_finite()
            && self.velocity.is_finite()
    }
}
