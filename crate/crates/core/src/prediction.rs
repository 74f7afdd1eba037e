//! Rule-based motion prediction for tracked traffic participants.
//!
//! Lane-bound objects are matched to lanes, expanded into route hypotheses
//! and rolled out with a car-following law, a path-tracking law and a
//! kinematic bicycle filter. Everything else moves with constant velocity or
//! constant acceleration.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, normalize_angle, offset_vertices, Polyline, Pose2D, Vec2};
use crate::map::{match_pose_to_lane, LaneMap, LaneMatch, MatchConfig};
use crate::types::{Classification, Extents, Obstacle};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictionError {
    #[error("gap must be positive, got {0}")]
    InvalidGap(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("no lane match above threshold")]
    EmptyHypothesisSet,
    #[error("unknown lane {0}")]
    UnknownLane(String),
}

/// (x, y, theta, v)
pub type StateVector = Vector4<f64>;
pub type Covariance = Matrix4<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedObject {
    pub id: u64,
    pub classification: Classification,
    pub state: StateVector,
    pub covariance: Covariance,
    pub timestamp: f64,
    /// Longitudinal acceleration estimate.
    pub accel: f64,
    pub extents: Extents,
}

impl TrackedObject {
    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.state[0], self.state[1], self.state[2])
    }

    pub fn speed(&self) -> f64 {
        self.state[3]
    }

    /// Object built from a perception obstacle with a diagonal covariance.
    pub fn from_obstacle(obs: &Obstacle, timestamp: f64, accel: f64, pos_sigma: f64) -> Self {
        let p = obs.position_2d();
        let var = pos_sigma * pos_sigma;
        Self {
            id: obs.id,
            classification: obs.classification,
            state: Vector4::new(p.x, p.y, normalize_angle(obs.heading), obs.velocity.max(0.0)),
            covariance: Matrix4::from_diagonal(&Vector4::new(var, var, 0.01, 0.25)),
            timestamp,
            accel,
            extents: obs.extents,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteHypothesis {
    pub lane_ids: Vec<String>,
    pub likelihood: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedState {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl TimedState {
    fn from_vector(t: f64, s: &StateVector) -> Self {
        Self {
            t,
            x: s[0],
            y: s[1],
            theta: s[2],
            v: s[3],
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::new(self.x, self.y, self.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTrajectory {
    /// States at `t0 + k * dt` for k = 1..=n.
    pub states: Vec<TimedState>,
    pub likelihood: f64,
    /// Lane sequence followed, empty for free-space motion.
    pub lane_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedObject {
    pub id: u64,
    pub classification: Classification,
    pub extents: Extents,
    pub start: TimedState,
    pub trajectories: Vec<PredictedTrajectory>,
}

impl PredictedObject {
    /// Position at time `t` along trajectory `k`, linearly interpolated and
    /// held constant past the horizon.
    pub fn position_at(&self, k: usize, t: f64) -> Vec2 {
        let states = &self.trajectories[k].states;
        if t <= self.start.t || states.is_empty() {
            return self.start.position();
        }
        let mut prev = &self.start;
        for s in states {
            if t <= s.t {
                let f = (t - prev.t) / (s.t - prev.t);
                return prev.position().lerp(s.position(), f);
            }
            prev = s;
        }
        prev.position()
    }

    /// Radius of the disc enclosing the object footprint.
    pub fn radius(&self) -> f64 {
        0.5 * self.extents.length.hypot(self.extents.width)
    }

    pub fn mirrored(&self) -> PredictedObject {
        let m = |s: &TimedState| TimedState {
            y: -s.y,
            theta: normalize_angle(-s.theta),
            ..*s
        };
        PredictedObject {
            start: m(&self.start),
            trajectories: self
                .trajectories
                .iter()
                .map(|t| PredictedTrajectory {
                    states: t.states.iter().map(m).collect(),
                    ..t.clone()
                })
                .collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    pub a_max: f64,
    pub b_comfort: f64,
    pub v0: f64,
    pub s0: f64,
    pub time_headway: f64,
    pub delta: f64,
    pub b_hard: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 1.5,
            b_comfort: 2.0,
            v0: 13.9,
            s0: 2.0,
            time_headway: 1.5,
            delta: 4.0,
            b_hard: 8.0,
        }
    }
}

/// Car-following acceleration. `gap` is `None` on a free road; `dv` is the
/// closing speed (own minus leader).
pub fn idm_acceleration(v: f64, gap: Option<f64>, dv: f64, p: &IdmParams) -> Result<f64, PredictionError> {
    let free = 1.0 - (v / p.v0).powf(p.delta);
    let interaction = match gap {
        None => 0.0,
        Some(g) if g <= 0.0 || g.is_nan() => return Err(PredictionError::InvalidGap(g)),
        Some(g) => {
            let dynamic = v * p.time_headway + v * dv / (2.0 * (p.a_max * p.b_comfort).sqrt());
            let s_star = p.s0 + dynamic.max(0.0);
            (s_star / g).powi(2)
        }
    };
    Ok((p.a_max * (free - interaction)).clamp(-p.b_hard, p.a_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StanleyParams {
    pub gain: f64,
    pub v_floor: f64,
    pub max_steer: f64,
}

impl Default for StanleyParams {
    fn default() -> Self {
        Self {
            gain: 1.0,
            v_floor: 0.5,
            max_steer: 0.6,
        }
    }
}

/// Steering toward a path. Both errors are the path relative to the vehicle:
/// `e_lat` positive when the path lies to the left, `e_phi` positive when the
/// path heading is counter-clockwise of the vehicle heading.
pub fn stanley_steering(e_lat: f64, e_phi: f64, v: f64, p: &StanleyParams) -> f64 {
    let delta = e_phi + (p.gain * e_lat / v.max(p.v_floor)).atan();
    delta.clamp(-p.max_steer, p.max_steer)
}

/// Analytic Jacobian of the bicycle transition with respect to the state.
pub fn ekf_jacobian(state: &StateVector, controls: (f64, f64), dt: f64, wheelbase: f64) -> Covariance {
    let (a, steer) = controls;
    let (theta, v) = (state[2], state[3]);
    let (s, c) = theta.sin_cos();
    let dv = if v + a * dt > 0.0 { 1.0 } else { 0.0 };
    Matrix4::new(
        1.0, 0.0, -v * s * dt, c * dt,
        0.0, 1.0, v * c * dt, s * dt,
        0.0, 0.0, 1.0, steer.tan() / wheelbase * dt,
        0.0, 0.0, 0.0, dv,
    )
}

pub fn bicycle_transition(state: &StateVector, controls: (f64, f64), dt: f64, wheelbase: f64) -> StateVector {
    let (a, steer) = controls;
    let (theta, v) = (state[2], state[3]);
    Vector4::new(
        state[0] + v * theta.cos() * dt,
        state[1] + v * theta.sin() * dt,
        normalize_angle(theta + v / wheelbase * steer.tan() * dt),
        (v + a * dt).max(0.0),
    )
}

pub fn ekf_predict(
    state: &StateVector,
    covariance: &Covariance,
    controls: (f64, f64),
    dt: f64,
    wheelbase: f64,
    process_noise: &Covariance,
) -> Result<(StateVector, Covariance), PredictionError> {
    if !(dt > 0.0) {
        return Err(PredictionError::NonPositiveDt(dt));
    }
    let f = ekf_jacobian(state, controls, dt, wheelbase);
    let next = bicycle_transition(state, controls, dt, wheelbase);
    let p = f * covariance * f.transpose() + process_noise;
    let p = (p + p.transpose()) * 0.5;
    Ok((next, p))
}

/// Successor chains from `start_lane` until their length first exceeds the
/// lookahead or they dead-end.
pub fn enumerate_routes(map: &LaneMap, start_lane: &str, lookahead: f64) -> Result<Vec<Vec<String>>, PredictionError> {
    enumerate_routes_from(map, start_lane, 0.0, lookahead)
}

/// Like [`enumerate_routes`] but counting from `station` on the start lane.
pub fn enumerate_routes_from(
    map: &LaneMap,
    start_lane: &str,
    station: f64,
    lookahead: f64,
) -> Result<Vec<Vec<String>>, PredictionError> {
    let lane = map
        .get(start_lane)
        .ok_or_else(|| PredictionError::UnknownLane(start_lane.to_string()))?;
    let mut out = BTreeSet::new();
    let mut stack = vec![(vec![start_lane.to_string()], lane.length() - station)];
    while let Some((chain, covered)) = stack.pop() {
        let last = map.get(chain.last().expect("non-empty")).expect("linked map");
        if covered > lookahead || last.successors.is_empty() {
            out.insert(chain);
            continue;
        }
        for next in &last.successors {
            let len = map.get(next).expect("linked map").length();
            let mut c = chain.clone();
            c.push(next.clone());
            stack.push((c, covered + len));
        }
    }
    Ok(out.into_iter().collect())
}

/// Splits each lane's matching confidence evenly over its routes and
/// normalizes the result.
pub fn weight_hypotheses(
    matches: &[(String, f64)],
    routes_per_lane: &BTreeMap<String, Vec<Vec<String>>>,
) -> Result<Vec<RouteHypothesis>, PredictionError> {
    let mut raw = Vec::new();
    for (lane, conf) in matches {
        let routes = match routes_per_lane.get(lane) {
            Some(r) if !r.is_empty() => r,
            _ => continue,
        };
        let share = conf / routes.len() as f64;
        for r in routes {
            raw.push((r.clone(), share));
        }
    }
    let total: f64 = raw.iter().map(|(_, w)| w).sum();
    if raw.is_empty() || !(total > 0.0) {
        return Err(PredictionError::EmptyHypothesisSet);
    }
    Ok(raw
        .into_iter()
        .map(|(lane_ids, w)| RouteHypothesis {
            lane_ids,
            likelihood: w / total,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub horizon: f64,
    pub dt: f64,
    pub idm: IdmParams,
    pub stanley: StanleyParams,
    pub matching: MatchConfig,
    /// Extra route length beyond what the object covers at its current speed.
    pub lookahead_margin: f64,
    /// Reference offset from the right lane boundary for bicycles.
    pub bicycle_edge_offset: f64,
    /// Constant-acceleration model above this acceleration magnitude.
    pub ca_threshold: f64,
    /// Lateral half-width of the corridor searched for leaders.
    pub leader_corridor: f64,
    /// Process noise per second on (x, y, theta, v).
    pub process_noise: [f64; 4],
}

impl Default for PredictionConfig {
    fn default() -> Self {
        Self {
            horizon: 6.0,
            dt: 0.2,
            idm: IdmParams::default(),
            stanley: StanleyParams::default(),
            matching: MatchConfig::default(),
            lookahead_margin: 10.0,
            bicycle_edge_offset: 1.0,
            ca_threshold: 0.3,
            leader_corridor: 1.75,
            process_noise: [0.05, 0.05, 0.01, 0.1],
        }
    }
}

fn wheelbase_of(obj: &TrackedObject) -> f64 {
    (0.6 * obj.extents.length).clamp(0.8, 6.0)
}

enum Motion {
    Route { reference: Polyline, speed_limit: f64 },
    Free { accel: f64 },
}

struct Rollout {
    object: usize,
    motion: Motion,
    likelihood: f64,
    lane_ids: Vec<String>,
    state: StateVector,
    cov: Covariance,
    states: Vec<TimedState>,
}

fn route_reference(map: &LaneMap, lanes: &[String], bicycle: Option<f64>) -> (Polyline, f64) {
    let mut pts = Vec::new();
    let mut limit = f64::INFINITY;
    for id in lanes {
        let lane = map.get(id).expect("linked map");
        limit = limit.min(lane.speed_limit);
        match bicycle {
            None => pts.extend(lane.reference().points().iter().copied()),
            Some(off) => pts.extend(offset_vertices(&lane.right_boundary, off)),
        }
    }
    (Polyline::new(pts), limit)
}

fn hypotheses_for(map: &LaneMap, obj: &TrackedObject, cfg: &PredictionConfig) -> Option<Vec<(RouteHypothesis, Vec<LaneMatch>)>> {
    if !obj.classification.is_lane_bound() {
        return None;
    }
    let matches = match_pose_to_lane(map, obj.pose(), &cfg.matching);
    if matches.is_empty() {
        return None;
    }
    let lookahead = obj.speed() * cfg.horizon + cfg.lookahead_margin;
    let mut routes = BTreeMap::new();
    let mut pairs = Vec::new();
    for m in &matches {
        let r = enumerate_routes_from(map, &m.lane_id, m.station, lookahead).ok()?;
        routes.insert(m.lane_id.clone(), r);
        pairs.push((m.lane_id.clone(), m.confidence));
    }
    let hyps = weight_hypotheses(&pairs, &routes).ok()?;
    Some(hyps.into_iter().map(|h| (h, matches.clone())).collect())
}

/// Predicts all objects jointly so that lane followers can react to each
/// other. Output is ordered by object id.
pub fn predict_objects(map: &LaneMap, objects: &[TrackedObject], cfg: &PredictionConfig) -> Result<Vec<PredictedObject>, PredictionError> {
    if !(cfg.dt > 0.0) {
        return Err(PredictionError::NonPositiveDt(cfg.dt));
    }
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| objects[i].id);

    let mut rollouts: Vec<Rollout> = Vec::new();
    // index of each object's most likely rollout
    let mut primary: Vec<usize> = Vec::with_capacity(order.len());
    for (slot, &i) in order.iter().enumerate() {
        let obj = &objects[i];
        let first = rollouts.len();
        match hypotheses_for(map, obj, cfg) {
            Some(hyps) => {
                let bicycle = (obj.classification == Classification::Bicycle).then_some(cfg.bicycle_edge_offset);
                for (h, _) in hyps {
                    let (reference, speed_limit) = route_reference(map, &h.lane_ids, bicycle);
                    rollouts.push(Rollout {
                        object: slot,
                        motion: Motion::Route { reference, speed_limit },
                        likelihood: h.likelihood,
                        lane_ids: h.lane_ids,
                        state: obj.state,
                        cov: obj.covariance,
                        states: Vec::new(),
                    });
                }
            }
            None => {
                let accel = if obj.accel.abs() > cfg.ca_threshold { obj.accel } else { 0.0 };
                rollouts.push(Rollout {
                    object: slot,
                    motion: Motion::Free { accel },
                    likelihood: 1.0,
                    lane_ids: Vec::new(),
                    state: obj.state,
                    cov: obj.covariance,
                    states: Vec::new(),
                });
            }
        }
        let best = (first..rollouts.len())
            .max_by(|&a, &b| {
                rollouts[a]
                    .likelihood
                    .partial_cmp(&rollouts[b].likelihood)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.cmp(&a))
            })
            .expect("at least one rollout");
        primary.push(best);
    }

    let steps = (cfg.horizon / cfg.dt).round().max(1.0) as usize;
    let q = Matrix4::from_diagonal(&Vector4::from(cfg.process_noise)) * cfg.dt;
    for k in 1..=steps {
        let t = k as f64 * cfg.dt;
        let snapshot: Vec<(StateVector, f64)> = primary
            .iter()
            .map(|&r| (rollouts[r].state, objects[order[rollouts[r].object]].extents.length))
            .collect();
        for r in rollouts.iter_mut() {
            let obj = &objects[order[r.object]];
            let wheelbase = wheelbase_of(obj);
            let controls = match &r.motion {
                Motion::Free { accel } => (*accel, 0.0),
                Motion::Route { reference, speed_limit } => {
                    let pos = Vec2::new(r.state[0], r.state[1]);
                    let (theta, v) = (r.state[2], r.state[3]);
                    let front = pos + Vec2::from_angle(theta) * wheelbase;
                    let proj = reference.project(front).expect("reference has 2+ points");
                    let own = reference.project(pos).expect("reference has 2+ points");
                    let e_lat = -proj.lateral;
                    let e_phi = angle_diff(proj.heading, theta);
                    let steer = stanley_steering(e_lat, e_phi, v, &cfg.stanley);
                    let mut leader: Option<(f64, f64)> = None;
                    for (other, (s, len)) in snapshot.iter().enumerate() {
                        if other == r.object {
                            continue;
                        }
                        let op = Vec2::new(s[0], s[1]);
                        let Some(pr) = reference.project(op) else { continue };
                        if pr.distance > cfg.leader_corridor || pr.station <= own.station {
                            continue;
                        }
                        let gap = (pr.station - own.station - 0.5 * (len + obj.extents.length)).max(0.1);
                        let along = s[3] * angle_diff(s[2], pr.heading).cos();
                        if leader.map_or(true, |(g, _)| gap < g) {
                            leader = Some((gap, v - along));
                        }
                    }
                    let idm = IdmParams {
                        v0: *speed_limit,
                        ..cfg.idm
                    };
                    let a = match leader {
                        Some((gap, dv)) => idm_acceleration(v, Some(gap), dv, &idm)?,
                        None => idm_acceleration(v, None, 0.0, &idm)?,
                    };
                    (a, steer)
                }
            };
            let (next, cov) = ekf_predict(&r.state, &r.cov, controls, cfg.dt, wheelbase, &q)?;
            r.state = next;
            r.cov = cov;
            r.states.push(TimedState::from_vector(obj.timestamp + t, &next));
        }
    }

    let mut out: Vec<PredictedObject> = order
        .iter()
        .map(|&i| {
            let obj = &objects[i];
            PredictedObject {
                id: obj.id,
                classification: obj.classification,
                extents: obj.extents,
                start: TimedState::from_vector(obj.timestamp, &obj.state),
                trajectories: Vec::new(),
            }
        })
        .collect();
    for r in rollouts {
        out[r.object].trajectories.push(PredictedTrajectory {
            states: r.states,
            likelihood: r.likelihood,
            lane_ids: r.lane_ids,
        });
    }
    Ok(out)
}

/// Single-object convenience wrapper.
pub fn predict_object(map: &LaneMap, object: &TrackedObject, cfg: &PredictionConfig) -> Result<Vec<PredictedTrajectory>, PredictionError> {
    Ok(predict_objects(map, std::slice::from_ref(object), cfg)?
        .pop()
        .map(|p| p.trajectories)
        .unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{lane_doc, MapDocument};
    use proptest::prelude::*;

    fn v(x: f64, y: f64) -> Vec2 {
        Vec2::new(x, y)
    }

    fn build(lanes: Vec<crate::map::LaneDoc>) -> LaneMap {
        LaneMap::from_document(&MapDocument { schema_version: 1, lanes }).unwrap()
    }

    fn object(id: u64, class: Classification, x: f64, y: f64, theta: f64, speed: f64) -> TrackedObject {
        let extents = match class {
            Classification::Pedestrian => Extents { length: 0.5, width: 0.5, height: 1.8 },
            Classification::Bicycle => Extents { length: 1.8, width: 0.6, height: 1.7 },
            _ => Extents { length: 4.5, width: 1.8, height: 1.5 },
        };
        TrackedObject {
            id,
            classification: class,
            state: Vector4::new(x, y, theta, speed),
            covariance: Matrix4::identity() * 0.1,
            timestamp: 0.0,
            accel: 0.0,
            extents,
        }
    }

    fn chain_map() -> LaneMap {
        build(vec![
            lane_doc("A", &[v(0.0, 0.0), v(30.0, 0.0)], 3.5, 13.9, &["B"]),
            lane_doc("B", &[v(30.0, 0.0), v(60.0, 0.0)], 3.5, 13.9, &["C"]),
            lane_doc("C", &[v(60.0, 0.0), v(90.0, 0.0)], 3.5, 13.9, &[]),
        ])
    }

    fn fork_map() -> LaneMap {
        build(vec![
            lane_doc("S", &[v(0.0, 0.0), v(50.0, 0.0)], 3.5, 10.0, &["L", "R"]),
            lane_doc("L", &[v(50.0, 0.0), v(70.0, 5.0), v(100.0, 15.0)], 3.5, 10.0, &[]),
            lane_doc("R", &[v(50.0, 0.0), v(70.0, -5.0), v(100.0, -15.0)], 3.5, 10.0, &[]),
        ])
    }

    /// Exhaustive DFS over successor chains.
    fn dfs_routes(map: &LaneMap, chain: Vec<String>, covered: f64, lookahead: f64, out: &mut Vec<Vec<String>>) {
        let last = map.get(chain.last().unwrap()).unwrap();
        if covered > lookahead || last.successors.is_empty() {
            out.push(chain);
            return;
        }
        for s in &last.successors {
            let mut c = chain.clone();
            c.push(s.clone());
            dfs_routes(map, c, covered + map.get(s).unwrap().length(), lookahead, out);
        }
    }

    #[test]
    fn route_enumeration() {
        let map = chain_map();
        assert_eq!(enumerate_routes(&map, "A", 200.0).unwrap(), vec![vec!["A", "B", "C"]]);
        let fork = fork_map();
        assert_eq!(enumerate_routes(&fork, "S", 60.0).unwrap().len(), 2);
        let short = enumerate_routes(&fork, "S", 40.0).unwrap();
        let mut oracle = Vec::new();
        dfs_routes(&fork, vec!["S".into()], 50.0, 40.0, &mut oracle);
        assert_eq!(short, oracle);
        assert_eq!(short, vec![vec!["S".to_string()]]);
    }

    #[test]
    fn hypothesis_weights() {
        let one = |lane: &str, n: usize| {
            let mut m = BTreeMap::new();
            m.insert(lane.to_string(), (0..n).map(|i| vec![lane.to_string(), format!("X{i}")]).collect::<Vec<_>>());
            m
        };
        let h = weight_hypotheses(&[("A".into(), 1.0)], &one("A", 1)).unwrap();
        assert_eq!(h[0].likelihood, 1.0);
        let h = weight_hypotheses(&[("A".into(), 1.0)], &one("A", 2)).unwrap();
        assert_eq!((h[0].likelihood, h[1].likelihood), (0.5, 0.5));
        let mut routes = one("A", 1);
        routes.extend(one("B", 1));
        let h = weight_hypotheses(&[("A".into(), 0.8), ("B".into(), 0.2)], &routes).unwrap();
        assert!((h[0].likelihood - 0.8).abs() < 1e-12 && (h[1].likelihood - 0.2).abs() < 1e-12);
        assert_eq!(weight_hypotheses(&[], &routes), Err(PredictionError::EmptyHypothesisSet));
    }

    #[test]
    fn idm_examples() {
        let p = IdmParams {
            a_max: 1.5,
            b_comfort: 2.0,
            v0: 15.0,
            s0: 2.0,
            time_headway: 1.5,
            delta: 4.0,
            b_hard: 8.0,
        };
        assert_eq!(idm_acceleration(0.0, None, 0.0, &p).unwrap(), 1.5);
        assert_eq!(idm_acceleration(15.0, None, 0.0, &p).unwrap(), 0.0);
        let a = idm_acceleration(10.0, Some(20.0), 0.0, &p).unwrap();
        let oracle = 1.5 * (1.0 - (2.0f64 / 3.0).powi(4) - (17.0f64 / 20.0).powi(2));
        assert!((a - oracle).abs() < 1e-12);
        assert!((a - 0.12).abs() < 5e-3);
        assert!(matches!(idm_acceleration(5.0, Some(0.0), 0.0, &p), Err(PredictionError::InvalidGap(_))));
        assert_eq!(idm_acceleration(10.0, Some(0.5), 5.0, &p).unwrap(), -8.0);
    }

    #[test]
    fn stanley_examples() {
        let p = StanleyParams::default();
        assert_eq!(stanley_steering(0.0, 0.0, 5.0, &p), 0.0);
        assert!((stanley_steering(0.0, 0.1, 5.0, &p) - 0.1).abs() < 1e-15);
        assert!((stanley_steering(1.0, 0.0, 5.0, &p) - 0.2f64.atan()).abs() < 1e-15);
        assert!((stanley_steering(1.0, 0.0, 5.0, &p) - 0.1974).abs() < 1e-4);
        assert_eq!(stanley_steering(100.0, 0.0, 0.0, &p), p.max_steer);
    }

    #[test]
    fn ekf_examples() {
        let q = Matrix4::identity() * 0.01;
        let s = Vector4::new(1.0, 2.0, 0.3, 0.0);
        // speed uncertainty still couples into position through dx/dv
        let p0 = Matrix4::from_diagonal(&Vector4::new(0.5, 0.5, 0.5, 0.0));
        let (n, p) = ekf_predict(&s, &p0, (0.0, 0.0), 0.1, 2.5, &q).unwrap();
        assert_eq!(n, s);
        assert!((p - (p0 + q)).abs().max() < 1e-15);
        let p0 = Matrix4::identity() * 0.5;
        let (_, p) = ekf_predict(&s, &p0, (0.0, 0.0), 0.1, 2.5, &q).unwrap();
        let f = ekf_jacobian(&s, (0.0, 0.0), 0.1, 2.5);
        assert!((p - (f * p0 * f.transpose() + q)).abs().max() < 1e-15);

        let s = Vector4::new(0.0, 0.0, 0.0, 10.0);
        let (n, _) = ekf_predict(&s, &p0, (0.0, 0.0), 0.1, 2.5, &q).unwrap();
        assert!((n[0] - 1.0).abs() < 1e-15 && n[1] == 0.0 && n[2] == 0.0 && n[3] == 10.0);

        let (n, _) = ekf_predict(&s, &p0, (0.0, 0.1), 0.1, 2.5, &q).unwrap();
        let oracle = 10.0 / 2.5 * 0.1f64.tan() * 0.1;
        assert!((n[2] - oracle).abs() < 1e-15);
        assert!((n[2] - 0.04013).abs() < 1e-5);

        assert!(matches!(ekf_predict(&s, &p0, (0.0, 0.0), 0.0, 2.5, &q), Err(PredictionError::NonPositiveDt(_))));
    }

    #[test]
    fn pedestrian_constant_velocity() {
        let map = chain_map();
        let cfg = PredictionConfig { horizon: 2.0, dt: 0.5, ..Default::default() };
        let ped = object(1, Classification::Pedestrian, 0.0, 20.0, 0.0, 1.5);
        let t = predict_object(&map, &ped, &cfg).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].likelihood, 1.0);
        let xs: Vec<f64> = t[0].states.iter().map(|s| s.x).collect();
        assert_eq!(xs, vec![0.75, 1.5, 2.25, 3.0]);
    }

    #[test]
    fn accelerating_pedestrian_uses_constant_acceleration() {
        let map = chain_map();
        let cfg = PredictionConfig { horizon: 1.0, dt: 0.5, ..Default::default() };
        let mut ped = object(1, Classification::Pedestrian, 0.0, 20.0, 0.0, 1.0);
        ped.accel = 1.0;
        let t = predict_object(&map, &ped, &cfg).unwrap();
        assert_eq!(t[0].states[1].v, 2.0);
        ped.accel = 0.2;
        let t = predict_object(&map, &ped, &cfg).unwrap();
        assert_eq!(t[0].states[1].v, 1.0);
    }

    #[test]
    fn car_at_equilibrium_drives_straight() {
        let map = chain_map();
        let cfg = PredictionConfig::default();
        let car = object(1, Classification::Car, 5.0, 0.0, 0.0, 13.9);
        let t = predict_object(&map, &car, &cfg).unwrap();
        assert_eq!(t.len(), 1);
        for (k, s) in t[0].states.iter().enumerate() {
            assert!((s.v - 13.9).abs() < 1e-12);
            assert!(s.y.abs() < 1e-12 && s.theta.abs() < 1e-12);
            assert!((s.x - (5.0 + 13.9 * cfg.dt * (k + 1) as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn car_at_fork_splits_into_two_hypotheses() {
        let map = fork_map();
        let cfg = PredictionConfig { horizon: 4.0, dt: 0.2, ..Default::default() };
        let car = object(1, Classification::Car, 30.0, 0.0, 0.0, 10.0);
        let t = predict_object(&map, &car, &cfg).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!((t[0].likelihood, t[1].likelihood), (0.5, 0.5));
        let end_l = t.iter().find(|h| h.lane_ids.contains(&"L".to_string())).unwrap().states.last().unwrap();
        let end_r = t.iter().find(|h| h.lane_ids.contains(&"R".to_string())).unwrap().states.last().unwrap();
        assert!(end_l.y > 1.0 && end_r.y < -1.0);
        assert!((end_l.y + end_r.y).abs() < 1e-9);

        // step-by-step replay of the left hypothesis
        let (reference, limit) = route_reference(&map, &["S".into(), "L".into()], None);
        let wb = wheelbase_of(&car);
        let q = Matrix4::from_diagonal(&Vector4::from(cfg.process_noise)) * cfg.dt;
        let mut s = car.state;
        let mut p = car.covariance;
        let left = t.iter().find(|h| h.lane_ids.contains(&"L".to_string())).unwrap();
        for st in &left.states {
            let pos = v(s[0], s[1]);
            let proj = reference.project(pos + Vec2::from_angle(s[2]) * wb).unwrap();
            let steer = stanley_steering(-proj.lateral, angle_diff(proj.heading, s[2]), s[3], &cfg.stanley);
            let a = idm_acceleration(s[3], None, 0.0, &IdmParams { v0: limit, ..cfg.idm }).unwrap();
            let (n, np) = ekf_predict(&s, &p, (a, steer), cfg.dt, wb, &q).unwrap();
            s = n;
            p = np;
            assert_eq!((st.x, st.y, st.theta, st.v), (s[0], s[1], s[2], s[3]));
        }
    }

    #[test]
    fn follower_brakes_behind_slow_leader() {
        let map = chain_map();
        let cfg = PredictionConfig::default();
        let lead = object(1, Classification::Car, 30.0, 0.0, 0.0, 2.0);
        let follow = object(2, Classification::Car, 10.0, 0.0, 0.0, 12.0);
        let out = predict_objects(&map, &[follow, lead], &cfg).unwrap();
        assert_eq!(out[0].id, 1);
        let f = &out[1].trajectories[0].states;
        assert!(f[0].v < 12.0);
        let l = &out[0].trajectories[0].states;
        for (a, b) in f.iter().zip(l) {
            assert!(b.x - a.x > 4.5, "follower runs into leader");
        }
    }

    #[test]
    fn bicycle_keeps_to_the_right() {
        let map = chain_map();
        let cfg = PredictionConfig::default();
        let bike = object(3, Classification::Bicycle, 5.0, -0.5, 0.0, 4.0);
        let t = predict_object(&map, &bike, &cfg).unwrap();
        let last = t[0].states.last().unwrap();
        assert!((last.y - (-1.75 + 1.0)).abs() < 0.05, "{}", last.y);
    }

    #[test]
    fn prediction_is_deterministic() {
        let map = fork_map();
        let cfg = PredictionConfig::default();
        let objs = vec![
            object(4, Classification::Car, 30.0, 0.3, 0.05, 9.0),
            object(2, Classification::Truck, 10.0, 0.0, 0.0, 8.0),
            object(7, Classification::Pedestrian, 40.0, 5.0, -1.5, 1.2),
        ];
        let a = predict_objects(&map, &objs, &cfg).unwrap();
        let b = predict_objects(&map, &objs, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|o| o.id).collect::<Vec<_>>(), vec![2, 4, 7]);
        for o in &a {
            let sum: f64 = o.trajectories.iter().map(|t| t.likelihood).sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for t in &o.trajectories {
                for w in t.states.windows(2) {
                    assert!(((w[1].t - w[0].t) - cfg.dt).abs() < 1e-9);
                }
                assert!(t.states.iter().all(|s| s.v >= 0.0));
            }
        }
    }

    fn finite_difference(s: &StateVector, u: (f64, f64), dt: f64, wb: f64) -> Covariance {
        let h = 1e-5;
        let mut j = Matrix4::zeros();
        for c in 0..4 {
            let mut plus = *s;
            let mut minus = *s;
            plus[c] += h;
            minus[c] -= h;
            let fp = bicycle_transition(&plus, u, dt, wb);
            let fm = bicycle_transition(&minus, u, dt, wb);
            for r in 0..4 {
                let d = if r == 2 { angle_diff(fp[r], fm[r]) } else { fp[r] - fm[r] };
                j[(r, c)] = d / (2.0 * h);
            }
        }
        j
    }

    fn is_psd(p: &Covariance) -> bool {
        let sym = (p - p.transpose()).abs().max() <= 1e-12 * p.abs().max().max(1.0);
        sym && p.symmetric_eigenvalues().iter().all(|e| *e >= -1e-9 * p.abs().max().max(1.0))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn jacobian_matches_finite_differences(
            x in -100.0f64..100.0, y in -100.0f64..100.0, theta in -3.1f64..3.1, speed in 0.5f64..30.0,
            a in -3.0f64..3.0, steer in -0.5f64..0.5, dt in 0.01f64..0.5, wb in 1.0f64..5.0,
        ) {
            prop_assume!(speed + a * dt > 1e-3);
            let s = Vector4::new(x, y, theta, speed);
            let analytic = ekf_jacobian(&s, (a, steer), dt, wb);
            let numeric = finite_difference(&s, (a, steer), dt, wb);
            for r in 0..4 {
                for c in 0..4 {
                    let tol = 1e-6 * analytic[(r, c)].abs().max(1.0);
                    prop_assert!((analytic[(r, c)] - numeric[(r, c)]).abs() <= tol,
                        "J[{},{}] {} vs {}", r, c, analytic[(r, c)], numeric[(r, c)]);
                }
            }
        }

        #[test]
        fn covariance_stays_symmetric_psd(
            seed_state in proptest::collection::vec(-1.0f64..1.0, 4),
            controls in proptest::collection::vec((-3.0f64..2.0, -0.5f64..0.5), 30),
        ) {
            let mut s = Vector4::new(seed_state[0] * 50.0, seed_state[1] * 50.0, seed_state[2] * 3.0, (seed_state[3] + 1.0) * 8.0);
            let mut p = Matrix4::from_diagonal(&Vector4::new(0.3, 0.3, 0.02, 0.5));
            let q = Matrix4::from_diagonal(&Vector4::new(0.01, 0.01, 0.001, 0.02));
            for u in controls {
                let (n, np) = ekf_predict(&s, &p, u, 0.2, 2.7, &q).unwrap();
                s = n;
                p = np;
                prop_assert!(is_psd(&p));
                prop_assert!(s[3] >= 0.0);
            }
        }

        #[test]
        fn likelihoods_sum_to_one(confs in proptest::collection::vec((0.01f64..1.0, 1usize..5), 1..6)) {
            let mut routes = BTreeMap::new();
            let mut matches = Vec::new();
            for (i, (c, n)) in confs.iter().enumerate() {
                let id = format!("L{i}");
                routes.insert(id.clone(), (0..*n).map(|k| vec![id.clone(), format!("S{k}")]).collect());
                matches.push((id, *c));
            }
            let h = weight_hypotheses(&matches, &routes).unwrap();
            let sum: f64 = h.iter().map(|h| h.likelihood).sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }

        #[test]
        fn idm_rollout_never_negative_speed(v0 in 0.0f64..20.0, gap in 0.5f64..60.0, lead_v in 0.0f64..10.0) {
            let p = IdmParams::default();
            let mut v = v0;
            let mut g = gap;
            for _ in 0..100 {
                let a = idm_acceleration(v, Some(g.max(0.1)), v - lead_v, &p).unwrap();
                v = (v + a * 0.1).max(0.0);
                g += (lead_v - v) * 0.1;
                prop_assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn idm_equilibrium_is_exact() {
        for v0 in [1.0, 5.5, 13.9, 27.7, 33.3] {
            let p = IdmParams { v0, ..Default::default() };
            assert!(idm_acceleration(v0, None, 0.0, &p).unwrap().abs() < 1e-12);
        }
    }
}
