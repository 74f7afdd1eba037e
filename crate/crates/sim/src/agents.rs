//! Scripted road users.

use motionstack::geometry::Polyline;
use motionstack::map::LaneMap;
use motionstack::types::Obstacle;
use motionstack::{Pose2D, Vec2};

use crate::scenario::{AgentMotion, AgentSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub spec: AgentSpec,
    path: Polyline,
    start_station: f64,
    pub active: bool,
    pub pose: Pose2D,
    pub speed: f64,
    pub accel: f64,
}

impl Agent {
    pub fn new(spec: &AgentSpec, map: &LaneMap) -> Self {
        let (points, start_station) = match &spec.motion {
            AgentMotion::Path(p) => (p.iter().map(|&q| Vec2::from(q)).collect::<Vec<_>>(), 0.0),
            AgentMotion::Lanes { ids, station } => {
                let mut pts: Vec<Vec2> = Vec::new();
                for id in ids {
                    let lane = map.get(id).expect("lanes checked when the scenario was resolved");
                    for &p in lane.reference().points() {
                        if pts.last().is_none_or(|q| q.distance(p) > 1e-9) {
                            pts.push(p);
                        }
                    }
                }
                (pts, *station)
            }
        };
        let path = Polyline::new(points);
        let mut agent = Self {
            spec: spec.clone(),
            path,
            start_station,
            active: false,
            pose: Pose2D::default(),
            speed: 0.0,
            accel: 0.0,
        };
        agent.place(start_station);
        agent
    }

    fn speed_at(&self, tau: f64) -> (f64, f64) {
        let prof = &self.spec.speed_profile;
        if prof.is_empty() {
            return (self.spec.speed, 0.0);
        }
        if tau <= prof[0][0] {
            return (prof[0][1], 0.0);
        }
        for w in prof.windows(2) {
            let ([t0, v0], [t1, v1]) = (w[0], w[1]);
            if tau <= t1 && t1 > t0 {
                let slope = (v1 - v0) / (t1 - t0);
                return (v0 + slope * (tau - t0), slope);
            }
        }
        (prof[prof.len() - 1][1], 0.0)
    }

    /// Distance covered `tau` seconds after spawning: the exact integral of
    /// the piecewise-linear speed profile.
    fn distance_at(&self, tau: f64) -> f64 {
        let prof = &self.spec.speed_profile;
        if prof.is_empty() {
            return self.spec.speed * tau;
        }
        let mut d = prof[0][1] * prof[0][0].min(tau).max(0.0);
        for w in prof.windows(2) {
            let ([t0, v0], [t1, _]) = (w[0], w[1]);
            if tau <= t0 {
                return d;
            }
            let end = tau.min(t1);
            if end > t0 {
                let (v_end, _) = self.speed_at(end);
                d += 0.5 * (v0 + v_end) * (end - t0);
            }
        }
        let last = prof[prof.len() - 1];
        d + last[1] * (tau - last[0]).max(0.0)
    }

    fn place(&mut self, station: f64) {
        let pts = self.path.points();
        if pts.len() < 2 {
            self.pose = Pose2D::new(pts[0].x, pts[0].y, 0.0);
            return;
        }
        let (p, heading) = self.path.sample(station.clamp(0.0, self.path.length()));
        self.pose = Pose2D::new(p.x, p.y, heading);
    }

    /// Moves the agent to its scripted state at time `t`. Agents stop at
    /// the end of their path.
    pub fn advance(&mut self, t: f64) {
        let tau = t - self.spec.spawn_time;
        self.active = tau >= -1e-9;
        if !self.active {
            return;
        }
        let tau = tau.max(0.0);
        let station = self.start_station + self.distance_at(tau);
        self.place(station);
        let at_end = self.path.points().len() < 2 || station >= self.path.length();
        (self.speed, self.accel) = if at_end { (0.0, 0.0) } else { self.speed_at(tau) };
    }

    pub fn corners(&self) -> [Vec2; 4] {
        motionstack::geometry::rectangle_corners(self.pose.position(), self.pose.theta, self.spec.extents.length, self.spec.extents.width)
    }

    pub fn obstacle(&self) -> Obstacle {
        Obstacle {
            id: self.spec.id,
            position: [self.pose.x, self.pose.y, 0.5 * self.spec.extents.height],
            extents: self.spec.extents,
            heading: self.pose.theta,
            classification: self.spec.class,
            velocity: self.speed,
        }
    }
}
