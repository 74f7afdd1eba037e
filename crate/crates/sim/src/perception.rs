//! Ground-truth sensor models: a planar range scan and an object list.

use motionstack::costmap::PlanarScan;
use motionstack::geometry::{segment_intersection, segments_intersect};
use motionstack::prediction::TrackedObject;
use motionstack::{Pose2D, Vec2};

use crate::agents::Agent;
use crate::scenario::PerceptionConfig;

fn edges(poly: &[Vec2; 4]) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
    (0..4).map(move |i| (poly[i], poly[(i + 1) % 4]))
}

/// Ray-casts from `origin` against the given rectangles. Rays without a
/// return end at `max_range`.
pub fn synthesize_scan(origin: Pose2D, targets: &[[Vec2; 4]], cfg: &PerceptionConfig) -> PlanarScan {
    let o = origin.position();
    let points = (0..cfg.rays)
        .map(|i| {
            let angle = origin.theta + std::f64::consts::TAU * i as f64 / cfg.rays as f64;
            let far = o + Vec2::from_angle(angle) * cfg.max_range;
            let nearest = targets
                .iter()
                .flat_map(edges)
                .filter_map(|(a, b)| segment_intersection(o, far, a, b))
                .min_by(|x, y| x.0.total_cmp(&y.0));
            nearest.map_or(far, |(_, p)| p)
        })
        .collect();
    PlanarScan {
        sensor_origin: origin,
        points,
        max_range: cfg.max_range,
    }
}

/// Active agents in range whose center is not hidden behind a static
/// obstacle, as tracked objects with range-dependent position uncertainty.
pub fn visible_objects(origin: Vec2, agents: &[Agent], occluders: &[[Vec2; 4]], t: f64, cfg: &PerceptionConfig) -> Vec<TrackedObject> {
    agents
        .iter()
        .filter(|a| a.active)
        .filter_map(|a| {
            let c = a.pose.position();
            let range = c.distance(origin);
            if range > cfg.max_range {
                return None;
            }
            let hidden = occluders.iter().flat_map(edges).any(|(p, q)| segments_intersect(origin, c, p, q));
            if hidden {
                return None;
            }
            let sigma = cfg.sigma_base + cfg.sigma_per_meter * range;
            Some(TrackedObject::from_obstacle(&a.obstacle(), t, a.accel, sigma))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use motionstack::geometry::rectangle_corners;

    #[test]
    fn ray_hits_the_near_face() {
        let cfg = PerceptionConfig { rays: 4, ..Default::default() };
        let box_ahead = rectangle_corners(Vec2::new(10.0, 0.0), 0.0, 2.0, 2.0);
        let scan = synthesize_scan(Pose2D::new(0.0, 0.0, 0.0), &[box_ahead], &cfg);
        assert!((scan.points[0].x - 9.0).abs() < 1e-12);
        // the other three rays see nothing
        for p in &scan.points[1..] {
            assert!((p.norm() - cfg.max_range).abs() < 1e-9);
        }
    }

    #[test]
    fn occluded_agent_is_not_reported() {
        use crate::scenario::{AgentMotion, AgentSpec};
        use motionstack::map::{LaneMap, MapDocument, SCHEMA_VERSION};
        use motionstack::types::{Classification, Extents};
        let map = LaneMap::from_document(&MapDocument { schema_version: SCHEMA_VERSION, lanes: vec![] }).unwrap();
        let spec = AgentSpec {
            id: 3,
            class: Classification::Car,
            extents: Extents { length: 4.0, width: 1.8, height: 1.5 },
            motion: AgentMotion::Path(vec![[20.0, 0.0]]),
            speed: 0.0,
            speed_profile: vec![],
            spawn_time: 0.0,
        };
        let mut a = Agent::new(&spec, &map);
        a.advance(0.0);
        let cfg = PerceptionConfig::default();
        let wall = rectangle_corners(Vec2::new(10.0, 0.0), 0.0, 1.0, 6.0);
        assert_eq!(visible_objects(Vec2::new(0.0, 0.0), std::slice::from_ref(&a), &[], 0.0, &cfg).len(), 1);
        assert!(visible_objects(Vec2::new(0.0, 0.0), &[a], &[wall], 0.0, &cfg).is_empty());
    }
}
