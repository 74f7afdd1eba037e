//! Guards overriding planned velocities, and the trajectory tracking controller.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmap::FootprintVerdict;
use crate::geometry::{angle_diff, Polyline, Vec2};
use crate::planner::{InternalConstraints, PlanningEnv, VehicleGeometry};
use crate::trajectory::{interpolate_state_at, GeometryError, Trajectory};
use crate::types::VehicleState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("vehicle is {distance:.2} m from the trajectory (capture radius {radius} m)")]
    OffTrack { distance: f64, radius: f64 },
    #[error("trajectory has fewer than two points")]
    EmptyTrajectory,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GuardMode {
    Triggered,
    Ramping,
    Pass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardState {
    pub mode: GuardMode,
    pub ramp_start_v: f64,
    pub entered_at: f64,
}

impl Default for GuardState {
    fn default() -> Self {
        Self {
            mode: GuardMode::Triggered,
            ramp_start_v: 0.0,
            entered_at: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardConfig {
    pub braking_decel: f64,
    pub ramp_accel: f64,
    /// Clearance to predicted objects below which a point is in conflict.
    pub object_margin: f64,
    pub min_likelihood: f64,
    /// Sampling step for objects around a standstill point.
    pub standstill_step: f64,
    /// Speed difference at which the ramp counts as having met the plan.
    pub ramp_tolerance: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            braking_decel: 2.5,
            ramp_accel: 1.0,
            object_margin: 0.2,
            min_likelihood: 0.05,
            standstill_step: 0.2,
            ramp_tolerance: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuardViolation {
    OutsideArea { index: usize },
    Collision { index: usize },
    ObjectConflict { index: usize, object: u64, t: f64 },
    Curvature { index: usize, curvature: f64 },
    SpeedLimit { index: usize, v: f64, limit: f64 },
    /// Stop request from outside the trajectory checks, e.g. a mission hold.
    External { index: usize, reason: String },
}

impl GuardViolation {
    pub fn index(&self) -> usize {
        match self {
            Self::OutsideArea { index }
            | Self::Collision { index }
            | Self::ObjectConflict { index, .. }
            | Self::Curvature { index, .. }
            | Self::SpeedLimit { index, .. }
            | Self::External { index, .. } => *index,
        }
    }
}

/// Arrival time at each point from `from` onward, relative to the start.
/// Points after a standstill are unreachable (infinite).
fn arrival_times(traj: &Trajectory, from: usize) -> Vec<f64> {
    let pts = traj.valid_points();
    let mut t = vec![f64::INFINITY; pts.len()];
    if from >= pts.len() {
        return t;
    }
    t[from] = 0.0;
    for i in from..pts.len() - 1 {
        let vsum = pts[i].v.max(0.0) + pts[i + 1].v.max(0.0);
        if vsum <= 1e-6 || !t[i].is_finite() {
            break;
        }
        t[i + 1] = t[i] + 2.0 * traj.spacing / vsum;
    }
    t
}

/// Checks the trajectory from `car_index` onward against the environment and
/// the internal constraints. Point times start at the environment's ego
/// timestamp.
pub fn guard_check(
    traj: &Trajectory,
    env: &PlanningEnv,
    constraints: &InternalConstraints,
    vehicle: &VehicleGeometry,
    cfg: &GuardConfig,
) -> Vec<GuardViolation> {
    let pts = traj.valid_points();
    let mut out = Vec::new();
    if pts.is_empty() {
        return out;
    }
    let from = traj.car_index.min(pts.len() - 1);
    let ring = env.area.ring();
    let times = arrival_times(traj, from);
    let t0 = env.ego.timestamp;
    let mut seg = env.reference.project(pts[from].position()).segment;
    for (i, p) in pts.iter().enumerate().skip(from) {
        if !crate::geometry::point_in_polygon(p.position(), &ring) {
            out.push(GuardViolation::OutsideArea { index: i });
        }
        if let Some(grid) = &env.grid {
            if grid.query_footprint(&vehicle.footprint(&p.pose)) == FootprintVerdict::Collision {
                out.push(GuardViolation::Collision { index: i });
            }
        }
        if p.curvature.abs() > constraints.kappa_max + 1e-9 {
            out.push(GuardViolation::Curvature { index: i, curvature: p.curvature });
        }
        let proj = env
            .reference
            .polyline
            .project_range(p.position(), seg.saturating_sub(2), seg + 12)
            .or_else(|| env.reference.project(p.position()).into());
        if let Some(proj) = proj {
            seg = proj.segment;
            let limit = env.reference.speed_limit_at_segment(seg);
            if p.v > limit + 1e-6 {
                out.push(GuardViolation::SpeedLimit { index: i, v: p.v, limit });
            }
        }
        // object conflicts at the arrival time, or over the remaining
        // prediction horizon for the point where the vehicle comes to rest
        let standstill = i + 1 == pts.len() || !times[i + 1].is_finite();
        if !times[i].is_finite() {
            continue;
        }
        let (discs, r) = vehicle.discs(&p.pose);
        'objects: for o in &env.objects {
            let horizon = o
                .trajectories
                .iter()
                .filter_map(|h| h.states.last().map(|s| s.t))
                .fold(o.start.t, f64::max);
            let mut t = t0 + times[i];
            while t <= horizon + 1e-9 {
                for (k, h) in o.trajectories.iter().enumerate() {
                    if h.likelihood < cfg.min_likelihood {
                        continue;
                    }
                    let q = o.position_at(k, t);
                    let lim = r + o.radius() + cfg.object_margin;
                    if discs.iter().any(|d| d.distance(q) < lim) {
                        out.push(GuardViolation::ObjectConflict { index: i, object: o.id, t });
                        continue 'objects;
                    }
                }
                if !standstill {
                    break;
                }
                t += cfg.standstill_step;
            }
        }
    }
    out
}

/// Moves `car_index` to the point nearest the vehicle, searching forward.
pub fn reanchor(traj: &Trajectory, position: Vec2) -> Trajectory {
    let mut out = traj.clone();
    let pts = traj.valid_points();
    if pts.is_empty() {
        return out;
    }
    let mut best = traj.car_index.min(pts.len() - 1);
    let mut best_d = pts[best].position().distance(position);
    for (i, p) in pts.iter().enumerate().skip(best + 1) {
        let d = p.position().distance(position);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    out.car_index = best;
    out
}

fn recompute_accelerations(traj: &mut Trajectory, changed: &[bool]) {
    let n = traj.valid_count;
    let spacing = traj.spacing;
    for i in 0..n {
        let next_changed = i + 1 < n && changed[i + 1];
        if !(changed[i] || next_changed) {
            continue;
        }
        traj.points[i].a = if i + 1 < n {
            let (v0, v1) = (traj.points[i].v, traj.points[i + 1].v);
            (v1 * v1 - v0 * v0) / (2.0 * spacing)
        } else {
            0.0
        };
    }
}

/// Applies the guard state machine and returns the new state together with the
/// trajectory whose velocities from `car_index` are capped by the active
/// profile. Output velocities never exceed the input velocities.
pub fn guard_apply(
    state: GuardState,
    traj: &Trajectory,
    violations: &[GuardViolation],
    current_v: f64,
    now: f64,
    cfg: &GuardConfig,
) -> (GuardState, Trajectory) {
    let v_c = current_v.max(0.0);
    let mut next = state;
    if !violations.is_empty() {
        if state.mode != GuardMode::Triggered {
            next = GuardState { mode: GuardMode::Triggered, ramp_start_v: v_c, entered_at: now };
        }
    } else if state.mode == GuardMode::Triggered {
        next = GuardState { mode: GuardMode::Ramping, ramp_start_v: v_c, entered_at: now };
    }
    let mut out = traj.clone();
    let n = out.valid_count;
    if n == 0 {
        return (next, out);
    }
    let from = out.car_index.min(n - 1);
    let mut changed = vec![false; n];
    match next.mode {
        GuardMode::Pass => {}
        GuardMode::Triggered | GuardMode::Ramping => {
            for i in from..n {
                let ds = (i - from) as f64 * out.spacing;
                let profile = if next.mode == GuardMode::Triggered {
                    (v_c * v_c - 2.0 * cfg.braking_decel * ds).max(0.0).sqrt()
                } else {
                    (v_c * v_c + 2.0 * cfg.ramp_accel * ds).sqrt()
                };
                if profile < out.points[i].v {
                    out.points[i].v = profile;
                    changed[i] = true;
                }
            }
            if next.mode == GuardMode::Ramping && v_c + cfg.ramp_tolerance >= traj.points[from].v {
                next = GuardState { mode: GuardMode::Pass, ramp_start_v: v_c, entered_at: now };
            }
        }
    }
    recompute_accelerations(&mut out, &changed);
    (next, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReferenceMode {
    RearAxle,
    AxleCenter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub wheelbase: f64,
    pub reference_mode: ReferenceMode,
    pub lookahead_time: f64,
    pub actuator_delay: f64,
    pub k_lat: f64,
    pub k_phi: f64,
    pub k_v: f64,
    pub v_floor: f64,
    pub max_steer: f64,
    /// Steering angle rate limit in rad/s, if any.
    pub steering_rate_limit: Option<f64>,
    pub decel_limit: f64,
    pub accel_limit: f64,
    pub capture_radius: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            reference_mode: ReferenceMode::RearAxle,
            lookahead_time: 0.2,
            actuator_delay: 0.1,
            k_lat: 0.8,
            k_phi: 1.2,
            k_v: 0.8,
            v_floor: 1.0,
            max_steer: 0.6,
            steering_rate_limit: None,
            decel_limit: 6.0,
            accel_limit: 2.0,
            capture_radius: 5.0,
        }
    }
}

impl ControllerConfig {
    /// Wheelbase of the equivalent single-track model at the reference point.
    pub fn effective_wheelbase(&self) -> f64 {
        match self.reference_mode {
            ReferenceMode::RearAxle => self.wheelbase,
            ReferenceMode::AxleCenter => 0.5 * self.wheelbase,
        }
    }

    /// Reference point of a vehicle whose pose is the rear axle center.
    pub fn reference_point(&self, vehicle: &VehicleState) -> Vec2 {
        match self.reference_mode {
            ReferenceMode::RearAxle => vehicle.pose.position(),
            ReferenceMode::AxleCenter => vehicle.pose.advanced(0.5 * self.wheelbase).position(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub s: f64,
    pub e_lat: f64,
    pub e_phi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuationCommand {
    pub steering_angle: f64,
    pub acceleration: f64,
}

pub fn project_onto_trajectory(
    traj: &Trajectory,
    vehicle: &VehicleState,
    cfg: &ControllerConfig,
) -> Result<Projection, ControlError> {
    let pts = traj.valid_points();
    if pts.len() < 2 {
        return Err(ControlError::EmptyTrajectory);
    }
    let p = cfg.reference_point(vehicle);
    let line = Polyline::new(pts.iter().map(|c| c.position()));
    let proj = line.project(p).ok_or(ControlError::EmptyTrajectory)?;
    let distance = proj.lateral.abs().max(p.distance(proj.point));
    if distance > cfg.capture_radius {
        return Err(ControlError::OffTrack { distance, radius: cfg.capture_radius });
    }
    // chords are equidistant, so the station along the chain is index·spacing
    let seg_len = line.stations()[proj.segment + 1] - line.stations()[proj.segment];
    let f = if seg_len > 0.0 { (proj.station - line.stations()[proj.segment]) / seg_len } else { 0.0 };
    let s = (proj.segment as f64 + f) * traj.spacing;
    let reference = interpolate_state_at(traj, s.min(traj.length()))?;
    Ok(Projection {
        s,
        e_lat: proj.lateral,
        e_phi: angle_diff(vehicle.pose.theta, reference.pose.theta),
    })
}

/// Feed-forward steering from the look-ahead curvature plus feedback on the
/// heading and lateral errors.
pub fn compute_command(
    projection: &Result<Projection, ControlError>,
    traj: &Trajectory,
    vehicle: &VehicleState,
    cfg: &ControllerConfig,
) -> ActuationCommand {
    let full_braking = ActuationCommand {
        steering_angle: vehicle.steering_angle,
        acceleration: -cfg.decel_limit,
    };
    let Ok(proj) = projection else {
        return full_braking;
    };
    let v = vehicle.v.max(0.0);
    let s_la = (proj.s + v * (cfg.lookahead_time + cfg.actuator_delay)).clamp(0.0, traj.length());
    let Ok(la) = interpolate_state_at(traj, s_la) else {
        return full_braking;
    };
    let l_eff = cfg.effective_wheelbase();
    let steering = (la.curvature * l_eff).atan() - cfg.k_phi * proj.e_phi - (cfg.k_lat * proj.e_lat / v.max(cfg.v_floor)).atan();
    let acceleration = la.a + cfg.k_v * (la.v - v);
    ActuationCommand {
        steering_angle: steering.clamp(-cfg.max_steer, cfg.max_steer),
        acceleration: acceleration.clamp(-cfg.decel_limit, cfg.accel_limit),
    }
}

/// Steering rate needed on each segment at the given speed, |dδ/ds|·v with
/// the larger endpoint speed.
pub fn segment_steering_rates(traj: &Trajectory, cfg: &ControllerConfig) -> Vec<f64> {
    let l_eff = cfg.effective_wheelbase();
    traj.valid_points()
        .windows(2)
        .map(|w| {
            let d = ((w[1].curvature * l_eff).atan() - (w[0].curvature * l_eff).atan()).abs() / traj.spacing;
            d * w[0].v.max(w[1].v)
        })
        .collect()
}

/// Lowers speeds where the steering rate would exceed the limit, then
/// restores consistency with the deceleration and acceleration limits.
/// Output speeds never exceed input speeds and the operation is idempotent.
pub fn limit_steering_rate_velocity(traj: &Trajectory, cfg: &ControllerConfig) -> Trajectory {
    let mut out = traj.clone();
    let Some(limit) = cfg.steering_rate_limit else {
        return out;
    };
    let n = out.valid_count;
    if n < 2 {
        return out;
    }
    let l_eff = cfg.effective_wheelbase();
    let ds = out.spacing;
    let orig: Vec<f64> = out.points[..n].iter().map(|p| p.v).collect();
    let mut v = orig.clone();
    for i in 0..n - 1 {
        let (k0, k1) = (out.points[i].curvature, out.points[i + 1].curvature);
        let gradient = ((k1 * l_eff).atan() - (k0 * l_eff).atan()).abs() / ds;
        if gradient * v[i].max(v[i + 1]) > limit {
            let cap = limit / gradient;
            v[i] = v[i].min(cap);
            v[i + 1] = v[i + 1].min(cap);
        }
    }
    for i in (0..n - 1).rev() {
        let reachable = (v[i + 1] * v[i + 1] + 2.0 * cfg.decel_limit * ds).sqrt();
        if v[i] > reachable {
            v[i] = reachable;
        }
    }
    for i in 0..n - 1 {
        let reachable = (v[i] * v[i] + 2.0 * cfg.accel_limit * ds).sqrt();
        if v[i + 1] > reachable {
            v[i + 1] = reachable;
        }
    }
    let mut changed = vec![false; n];
    for i in 0..n {
        if v[i] != orig[i] {
            out.points[i].v = v[i];
            changed[i] = true;
        }
    }
    recompute_accelerations(&mut out, &changed);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose2D;
    use crate::map::{DrivingArea, RouteReference};
    use crate::prediction::{PredictedObject, PredictedTrajectory, TimedState};
    use crate::trajectory::Curvepoint;
    use crate::types::{Classification, Extents};
    use proptest::prelude::*;

    fn straight(n: usize, v: f64) -> Trajectory {
        let pts = (0..n)
            .map(|i| Curvepoint {
                pose: Pose2D::new(i as f64 * 0.5, 0.0, 0.0),
                curvature: 0.0,
                v,
                a: 0.0,
            })
            .collect();
        Trajectory::new(pts, 0.5, 0.0, 1)
    }

    fn env() -> PlanningEnv {
        let area = DrivingArea {
            left_edge: vec![Vec2::new(-10.0, 3.5), Vec2::new(200.0, 3.5)],
            right_edge: vec![Vec2::new(-10.0, -3.5), Vec2::new(200.0, -3.5)],
        };
        PlanningEnv {
            area,
            grid: None,
            objects: vec![],
            ego: VehicleState::at_rest(Pose2D::new(0.0, 0.0, 0.0)),
            reference: RouteReference::from_polyline(Polyline::new([Vec2::new(-10.0, 0.0), Vec2::new(200.0, 0.0)]), 13.9),
            goal_station: 100.0,
            stop_at_goal: false,
        }
    }

    fn check(traj: &Trajectory, env: &PlanningEnv) -> Vec<GuardViolation> {
        guard_check(traj, env, &InternalConstraints::default(), &VehicleGeometry::default(), &GuardConfig::default())
    }

    #[test]
    fn feasible_trajectory_passes() {
        assert!(check(&straight(100, 5.0), &env()).is_empty());
    }

    #[test]
    fn point_outside_area_is_reported_by_index() {
        let mut t = straight(100, 5.0);
        t.points[40].pose.y = 5.0;
        assert_eq!(check(&t, &env()), vec![GuardViolation::OutsideArea { index: 40 }]);
    }

    fn crossing_pedestrian(x: f64, at: f64) -> PredictedObject {
        let speed = 1.5;
        let start = TimedState { t: 0.0, x, y: -speed * at, theta: std::f64::consts::FRAC_PI_2, v: speed };
        let states = (1..=30)
            .map(|k| {
                let t = k as f64 * 0.2;
                TimedState { t, y: start.y + speed * t, ..start }
            })
            .collect();
        PredictedObject {
            id: 4,
            classification: Classification::Pedestrian,
            extents: Extents { length: 0.5, width: 0.5, height: 1.8 },
            start,
            trajectories: vec![PredictedTrajectory { states, likelihood: 1.0, lane_ids: vec![] }],
        }
    }

    #[test]
    fn crossing_pedestrian_conflicts() {
        let mut e = env();
        // at 5 m/s the point at x = 10 is reached at t = 2
        e.objects.push(crossing_pedestrian(10.0 + 1.35, 2.0));
        let v = check(&straight(100, 5.0), &e);
        assert!(!v.is_empty());
        // discretized oracle: the first conflicting point is where the
        // front disc meets the pedestrian disc at the same time
        let geo = VehicleGeometry::default();
        let ped = &e.objects[0];
        let mut expected = None;
        for i in 0..100 {
            let t = i as f64 * 0.5 / 5.0;
            let pose = Pose2D::new(i as f64 * 0.5, 0.0, 0.0);
            let (discs, r) = geo.discs(&pose);
            let q = ped.position_at(0, t);
            if discs.iter().any(|d| d.distance(q) < r + ped.radius() + 0.2) {
                expected = Some(i);
                break;
            }
        }
        assert_eq!(v[0].index(), expected.unwrap());
        // a pedestrian long gone does not conflict
        let mut late = env();
        late.objects.push(crossing_pedestrian(10.0 + 1.35, 0.0));
        late.objects[0].start.y += 30.0;
        for s in &mut late.objects[0].trajectories[0].states {
            s.y += 30.0;
        }
        assert!(check(&straight(100, 5.0), &late).is_empty());
    }

    #[test]
    fn triggered_braking_profile() {
        let cfg = GuardConfig { braking_decel: 2.0, ..Default::default() };
        let t = straight(40, 8.0);
        let (state, out) = guard_apply(GuardState::default(), &t, &[], 5.0, 0.0, &cfg);
        // no violations moves to ramping; force the triggered profile
        assert_eq!(state.mode, GuardMode::Ramping);
        let v = [GuardViolation::OutsideArea { index: 3 }];
        let (state, out2) = guard_apply(GuardState::default(), &t, &v, 5.0, 0.0, &cfg);
        assert_eq!(state.mode, GuardMode::Triggered);
        for (i, p) in out2.points.iter().enumerate() {
            let ds = i as f64 * 0.5;
            let expected = if ds >= 6.25 { 0.0 } else { (25.0 - 4.0 * ds).sqrt() };
            assert!((p.v - expected).abs() < 1e-12, "{i}: {}", p.v);
        }
        assert!(out.points.iter().zip(&t.points).all(|(a, b)| a.v <= b.v));
        let (_, stopped) = guard_apply(GuardState::default(), &t, &v, 0.0, 0.0, &cfg);
        assert!(stopped.points.iter().all(|p| p.v == 0.0 && p.a == 0.0));
    }

    #[test]
    fn ramp_meeting_the_plan_passes_through() {
        let cfg = GuardConfig::default();
        let t = straight(40, 4.0);
        let ramping = GuardState { mode: GuardMode::Ramping, ..Default::default() };
        let (state, out) = guard_apply(ramping, &t, &[], 4.0, 1.0, &cfg);
        assert_eq!(state.mode, GuardMode::Pass);
        assert_eq!(out, t);
        let (state, _) = guard_apply(state, &t, &[GuardViolation::Collision { index: 5 }], 4.0, 2.0, &cfg);
        assert_eq!(state.mode, GuardMode::Triggered);
    }

    proptest! {
        #[test]
        fn guard_output_is_dominated_by_the_plan(
            speeds in proptest::collection::vec(0.0f64..15.0, 10..60),
            current in 0.0f64..15.0,
            mode in 0usize..3,
            violated in any::<bool>(),
        ) {
            let pts = speeds.iter().enumerate().map(|(i, &v)| Curvepoint { pose: Pose2D::new(i as f64 * 0.5, 0.0, 0.0), curvature: 0.0, v, a: 0.0 }).collect();
            let t = Trajectory::new(pts, 0.5, 0.0, 1);
            let mode = [GuardMode::Triggered, GuardMode::Ramping, GuardMode::Pass][mode];
            let viol = if violated { vec![GuardViolation::Collision { index: 1 }] } else { vec![] };
            let (state, out) = guard_apply(GuardState { mode, ..Default::default() }, &t, &viol, current, 0.0, &GuardConfig::default());
            for (a, b) in out.points.iter().zip(&t.points) {
                prop_assert!(a.v <= b.v);
            }
            if violated {
                prop_assert_eq!(state.mode, GuardMode::Triggered);
            }
            if mode == GuardMode::Triggered {
                prop_assert!(state.mode != GuardMode::Pass || !violated);
            }
        }
    }

    #[test]
    fn projection_sign_conventions() {
        let t = straight(40, 5.0);
        let cfg = ControllerConfig::default();
        let on = VehicleState::at_rest(Pose2D::new(3.0, 0.0, 0.0));
        let p = project_onto_trajectory(&t, &on, &cfg).unwrap();
        assert_eq!((p.s, p.e_lat, p.e_phi), (3.0, 0.0, 0.0));
        let off = VehicleState::at_rest(Pose2D::new(5.0, 1.0, 0.0));
        let p = project_onto_trajectory(&t, &off, &cfg).unwrap();
        assert!((p.s - 5.0).abs() < 1e-12 && (p.e_lat - 1.0).abs() < 1e-12 && p.e_phi == 0.0);
        let far = VehicleState::at_rest(Pose2D::new(5.0, 6.0, 0.0));
        assert!(matches!(project_onto_trajectory(&t, &far, &cfg), Err(ControlError::OffTrack { .. })));
    }

    #[test]
    fn command_examples() {
        let cfg = ControllerConfig { wheelbase: 2.5, ..Default::default() };
        let mut t = straight(40, 5.0);
        let vehicle = VehicleState { v: 5.0, ..VehicleState::at_rest(Pose2D::new(2.0, 0.0, 0.0)) };
        let proj = project_onto_trajectory(&t, &vehicle, &cfg);
        assert_eq!(compute_command(&proj, &t, &vehicle, &cfg).steering_angle, 0.0);
        for p in &mut t.points {
            p.curvature = 0.1;
        }
        let cmd = compute_command(&proj, &t, &vehicle, &cfg);
        assert!((cmd.steering_angle - 0.25f64.atan()).abs() < 1e-12);
        assert!((cmd.steering_angle - 0.2450).abs() < 1e-4);
        let left = VehicleState { v: 5.0, ..VehicleState::at_rest(Pose2D::new(2.0, 1.0, 0.0)) };
        let cmd = compute_command(&project_onto_trajectory(&straight(40, 5.0), &left, &cfg), &straight(40, 5.0), &left, &cfg);
        assert!(cmd.steering_angle < 0.0);
        let braking = compute_command(&Err(ControlError::EmptyTrajectory), &t, &left, &cfg);
        assert_eq!(braking.acceleration, -cfg.decel_limit);
        assert_eq!(braking.steering_angle, left.steering_angle);
    }

    /// Kinematic single-track model with the pose at the rear axle.
    fn step_vehicle(s: &mut VehicleState, cmd: &ActuationCommand, l: f64, dt: f64) {
        s.steering_angle = cmd.steering_angle;
        s.a = cmd.acceleration;
        let k = s.steering_angle.tan() / l;
        let th = s.pose.theta + 0.5 * k * s.v * dt;
        s.pose = Pose2D::new(s.pose.x + s.v * dt * th.cos(), s.pose.y + s.v * dt * th.sin(), s.pose.theta + k * s.v * dt);
        s.v = (s.v + s.a * dt).max(0.0);
        s.timestamp += dt;
    }

    #[test]
    fn tracks_a_circle() {
        let cfg = ControllerConfig::default();
        let r = 20.0;
        // a full lap of the circle, counterclockwise from (0, -r)
        let n = (2.0 * std::f64::consts::PI * r / 0.5) as usize;
        let step = 2.0 * (0.25 / r).asin();
        let pts = (0..n)
            .map(|i| {
                let phi = i as f64 * step - std::f64::consts::FRAC_PI_2;
                Curvepoint { pose: Pose2D::new(r * phi.cos(), r * phi.sin(), phi + std::f64::consts::FRAC_PI_2), curvature: 1.0 / r, v: 5.0, a: 0.0 }
            })
            .collect();
        let traj = Trajectory::new(pts, 0.5, 0.0, 1);
        let mut ego = VehicleState { v: 5.0, ..VehicleState::at_rest(Pose2D::new(0.0, -r + 0.5, 0.1)) };
        for k in 0..1500 {
            let proj = project_onto_trajectory(&traj, &ego, &cfg);
            if k as f64 * 0.01 >= 5.0 {
                let p = proj.clone().unwrap();
                assert!(p.e_lat.abs() < 0.15 && p.e_phi.abs() < 0.05, "t={}: {p:?}", k as f64 * 0.01);
            }
            let cmd = compute_command(&proj, &traj, &ego, &cfg);
            step_vehicle(&mut ego, &cmd, cfg.wheelbase, 0.01);
        }
    }

    #[test]
    fn steering_rate_cap_example() {
        let cfg = ControllerConfig { wheelbase: 1.0, steering_rate_limit: Some(0.5), decel_limit: 1e6, accel_limit: 1e6, ..Default::default() };
        // δ grows by 0.1 rad per 0.5 m point: dδ/ds = 0.2 rad/m
        let pts = (0..20)
            .map(|i| Curvepoint { pose: Pose2D::new(i as f64 * 0.5, 0.0, 0.0), curvature: (0.1 * i as f64).min(1.0).tan(), v: 6.0, a: 0.0 })
            .collect();
        let t = Trajectory::new(pts, 0.5, 0.0, 1);
        let out = limit_steering_rate_velocity(&t, &cfg);
        for p in &out.points[..10] {
            assert!((p.v - 2.5).abs() < 1e-9, "{}", p.v);
        }
        let straight_in = straight(20, 6.0);
        assert_eq!(limit_steering_rate_velocity(&straight_in, &cfg), straight_in);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn steering_rate_limit_holds_and_is_idempotent(
            curv in proptest::collection::vec(-0.2f64..0.2, 5..60),
            speeds in proptest::collection::vec(0.0f64..14.0, 60),
            limit in 0.05f64..1.0,
        ) {
            let cfg = ControllerConfig { steering_rate_limit: Some(limit), decel_limit: 3.0, ..Default::default() };
            let pts = curv.iter().enumerate().map(|(i, &k)| Curvepoint { pose: Pose2D::new(i as f64 * 0.5, 0.0, 0.0), curvature: k, v: speeds[i], a: 0.0 }).collect();
            let t = Trajectory::new(pts, 0.5, 0.0, 1);
            let once = limit_steering_rate_velocity(&t, &cfg);
            for r in segment_steering_rates(&once, &cfg) {
                prop_assert!(r <= limit + 1e-9, "{} > {}", r, limit);
            }
            for (a, b) in once.points.iter().zip(&t.points) {
                prop_assert!(a.v <= b.v);
            }
            let twice = limit_steering_rate_velocity(&once, &cfg);
            prop_assert_eq!(once, twice);
        }
    }
}
