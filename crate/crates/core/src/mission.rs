//! Mission acceptance, goal queue and the preparation sequence in front of
//! the motion pipeline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::geometry::Pose2D;
use crate::map::{match_pose_to_lane, plan_route, LaneMap, Route, RouteConfig};
use crate::types::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RequestMode {
    New,
    Append,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionRequest {
    pub goals: Vec<Pose2D>,
    pub mode: RequestMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Idle,
    Preparing,
    Driving,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "reason", rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    Rejected(String),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "directive", rename_all = "snake_case")]
pub enum Directive {
    Idle,
    /// Keep the current plan but do not proceed; guards stop the vehicle.
    Hold { reason: String },
    Drive { route: Route, goal: Pose2D, last_goal: bool },
    Finished,
    Aborted { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MissionConfig {
    pub goal_tolerance: f64,
    pub stop_speed: f64,
    pub route: RouteConfig,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            goal_tolerance: 1.0,
            stop_speed: 0.1,
            route: RouteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionState {
    /// Pending goals; the head is the one being driven to.
    pub queue: VecDeque<Pose2D>,
    pub active_route: Option<Route>,
    pub phase: Phase,
    pub last_reason: Option<String>,
}

impl Default for MissionState {
    fn default() -> Self {
        Self {
            queue: VecDeque::new(),
            active_route: None,
            phase: Phase::Idle,
            last_reason: None,
        }
    }
}

fn check_chain(map: &LaneMap, from: Pose2D, goals: &[Pose2D], cfg: &RouteConfig) -> Result<(), String> {
    let mut prev = from;
    for (i, g) in goals.iter().enumerate() {
        plan_route(map, prev, *g, cfg).map_err(|e| format!("goal {i} not routable: {e}"))?;
        prev = *g;
    }
    Ok(())
}

/// Drops route lanes the vehicle has left, keeping the lane just behind the
/// current one.
pub fn trim_route(map: &LaneMap, route: &Route, pose: Pose2D, cfg: &RouteConfig) -> Route {
    let matches = match_pose_to_lane(map, pose, &cfg.matching);
    let Some(current) = route
        .lane_ids
        .iter()
        .position(|id| matches.iter().any(|m| &m.lane_id == id))
    else {
        return route.clone();
    };
    let drop = current.saturating_sub(1);
    if drop == 0 {
        return route.clone();
    }
    let removed: f64 = route.lane_ids[..drop]
        .iter()
        .filter_map(|id| map.get(id))
        .map(|l| l.length())
        .sum();
    Route {
        lane_ids: route.lane_ids[drop..].to_vec(),
        length: route.length - removed,
        cost: route.cost - removed,
    }
}

impl MissionState {
    /// Accepts a request only if every leg is routable. A rejected request
    /// leaves the state untouched.
    pub fn submit(&mut self, request: &MissionRequest, map: &LaneMap, ego: Pose2D, cfg: &MissionConfig) -> Verdict {
        if request.goals.is_empty() {
            return Verdict::Rejected("empty goal list".into());
        }
        let active = matches!(self.phase, Phase::Preparing | Phase::Driving);
        match request.mode {
            RequestMode::New => {
                if active {
                    return Verdict::Rejected("mission active".into());
                }
                if let Err(e) = check_chain(map, ego, &request.goals, &cfg.route) {
                    return Verdict::Rejected(e);
                }
                self.queue = request.goals.iter().copied().collect();
                self.active_route = None;
                self.phase = Phase::Preparing;
            }
            RequestMode::Append => {
                let from = if active { self.queue.back().copied().unwrap_or(ego) } else { ego };
                if let Err(e) = check_chain(map, from, &request.goals, &cfg.route) {
                    return Verdict::Rejected(format!("continuity violation: {e}"));
                }
                self.queue.extend(request.goals.iter().copied());
                if !active {
                    self.active_route = None;
                    self.phase = Phase::Preparing;
                }
            }
        }
        self.last_reason = None;
        Verdict::Accepted
    }

    fn start_leg(&mut self, map: &LaneMap, ego: &VehicleState, cfg: &MissionConfig) -> Directive {
        let goal = *self.queue.front().expect("caller checks the queue");
        match plan_route(map, ego.pose, goal, &cfg.route) {
            Ok(route) => {
                self.active_route = Some(route.clone());
                self.phase = Phase::Driving;
                Directive::Drive { route, goal, last_goal: self.queue.len() == 1 }
            }
            Err(e) => {
                let reason = format!("route planning failed: {e}");
                *self = MissionState { last_reason: Some(reason.clone()), ..Default::default() };
                Directive::Aborted { reason }
            }
        }
    }

    /// One step of the preparation and driving sequence.
    pub fn tick(&mut self, map: &LaneMap, ego: &VehicleState, diagnostics_ok: bool, cfg: &MissionConfig) -> Directive {
        match self.phase {
            Phase::Idle => Directive::Idle,
            Phase::Finished => Directive::Finished,
            Phase::Preparing => {
                if !diagnostics_ok {
                    return Directive::Hold { reason: "diagnostics not OK".into() };
                }
                self.start_leg(map, ego, cfg)
            }
            Phase::Driving => {
                let goal = *self.queue.front().expect("driving has a goal");
                let reached = ego.pose.position().distance(goal.position()) <= cfg.goal_tolerance && ego.v < cfg.stop_speed;
                if reached {
                    self.queue.pop_front();
                    if self.queue.is_empty() {
                        self.active_route = None;
                        self.phase = Phase::Finished;
                        return Directive::Finished;
                    }
                    if !diagnostics_ok {
                        self.active_route = None;
                        self.phase = Phase::Preparing;
                        return Directive::Hold { reason: "diagnostics not OK".into() };
                    }
                    return self.start_leg(map, ego, cfg);
                }
                let route = self.active_route.as_ref().expect("driving has a route");
                let route = trim_route(map, route, ego.pose, &cfg.route);
                self.active_route = Some(route.clone());
                if !diagnostics_ok {
                    return Directive::Hold { reason: "diagnostics not OK".into() };
                }
                Directive::Drive { route, goal, last_goal: self.queue.len() == 1 }
            }
        }
    }
}
