//! Trajectory optimization with a particle swarm over control sequences.
//!
//! A particle is a sequence of (acceleration, curvature rate) pairs over
//! equal time steps. Rolling it out with clamping always gives a kinematically
//! feasible pose sequence; the environment enters only through the cost. A
//! beam-searched tree over discrete controls provides the first seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmap::{ClearanceField, OccupancyGrid};
use crate::geometry::{lerp_angle, rectangle_corners, Polyline, PolylineProjection, Pose2D, RingIndex, Vec2};
use crate::map::{DrivingArea, RouteReference};
use crate::prediction::PredictedObject;
use crate::trajectory::{resample_polyline, Curvepoint, GeometryError, Trajectory};
use crate::types::VehicleState;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("no feasible seed: {0}")]
    NoFeasibleSeed(String),
    #[error("invalid planner input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InternalConstraints {
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub kappa_max: f64,
    /// Bound on dκ/ds in 1/m².
    pub kappa_rate_max: f64,
    /// Steering-wheel rate bound in rad/s, if the platform has one.
    pub steering_rate_max: Option<f64>,
    /// Wheelbase used to map curvature to steering angle.
    pub wheelbase: f64,
}

impl Default for InternalConstraints {
    fn default() -> Self {
        Self {
            v_max: 13.9,
            a_min: -3.0,
            a_max: 2.0,
            kappa_max: 0.2,
            kappa_rate_max: 0.1,
            steering_rate_max: None,
            wheelbase: 2.7,
        }
    }
}

impl InternalConstraints {
    pub fn validate(&self) -> Result<(), PlanError> {
        let ok = self.v_max > 0.0
            && self.a_min < 0.0
            && self.a_max > 0.0
            && self.kappa_max > 0.0
            && self.kappa_rate_max > 0.0
            && self.wheelbase > 0.0
            && self.steering_rate_max.is_none_or(|r| r > 0.0)
            && [self.v_max, self.a_min, self.a_max, self.kappa_max, self.kappa_rate_max, self.wheelbase]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(PlanError::InvalidInput(format!("constraints out of range: {self:?}")))
        }
    }

    /// Search range for the curvature rate dκ/dt.
    pub fn kappa_dot_bound(&self) -> f64 {
        let by_path = self.kappa_rate_max * self.v_max;
        match self.steering_rate_max {
            Some(r) => by_path.min(r / self.wheelbase),
            None => by_path,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleGeometry {
    pub length: f64,
    pub width: f64,
    /// Distance from the reference point forward to the footprint center.
    pub center_offset: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self {
            length: 4.5,
            width: 1.9,
            center_offset: 1.35,
        }
    }
}

impl VehicleGeometry {
    pub fn footprint(&self, pose: &Pose2D) -> [Vec2; 4] {
        let center = pose.position() + Vec2::from_angle(pose.theta) * self.center_offset;
        rectangle_corners(center, pose.theta, self.length, self.width)
    }

    /// Three discs along the body covering the footprint.
    pub fn discs(&self, pose: &Pose2D) -> ([Vec2; 3], f64) {
        let h = Vec2::from_angle(pose.theta);
        let c = pose.position() + h * self.center_offset;
        let step = self.length / 3.0;
        ([c - h * step, c, c + h * step], (self.length / 6.0).hypot(self.width / 2.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmParams {
    pub population: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SwarmParams {
    fn default() -> Self {
        Self {
            population: 40,
            inertia: 0.7,
            cognitive: 1.4,
            social: 1.4,
            iterations: 60,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub progress: f64,
    pub comfort: f64,
    pub centering: f64,
    /// Squared speed in excess of what can be shed before a stop goal.
    pub terminal_speed: f64,
    pub penalty: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            progress: 10.0,
            comfort: 1.0,
            centering: 0.5,
            terminal_speed: 5.0,
            penalty: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub beam_width: usize,
    pub accel_levels: usize,
    pub kappa_rate_levels: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            beam_width: 12,
            accel_levels: 5,
            kappa_rate_levels: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub steps: usize,
    pub dt: f64,
    pub substeps: usize,
    pub spacing: f64,
    pub prefix_length: f64,
    pub constraints: InternalConstraints,
    pub vehicle: VehicleGeometry,
    pub weights: CostWeights,
    pub swarm: SwarmParams,
    pub tree: TreeParams,
    /// Clearance kept to occupied grid cells.
    pub obstacle_margin: f64,
    /// Clearance kept to predicted objects.
    pub object_margin: f64,
    /// Hypotheses below this likelihood are ignored.
    pub min_likelihood: f64,
    /// Steps per block of piecewise-constant seed perturbation.
    pub perturbation_block: usize,
    /// Perturbation amplitudes as fractions of the acceleration range and
    /// of the curvature-rate bound.
    pub perturbation_accel: f64,
    pub perturbation_kappa_rate: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            dt: 0.2,
            substeps: 8,
            spacing: 0.5,
            prefix_length: 2.0,
            constraints: InternalConstraints::default(),
            vehicle: VehicleGeometry::default(),
            weights: CostWeights::default(),
            swarm: SwarmParams::default(),
            tree: TreeParams::default(),
            obstacle_margin: 0.2,
            object_margin: 0.5,
            min_likelihood: 0.05,
            perturbation_block: 5,
            perturbation_accel: 0.25,
            perturbation_kappa_rate: 0.5,
        }
    }
}

/// Everything the planner looks at, in world coordinates.
#[derive(Debug, Clone)]
pub struct PlanningEnv {
    pub area: DrivingArea,
    pub grid: Option<OccupancyGrid>,
    pub objects: Vec<PredictedObject>,
    pub ego: VehicleState,
    pub reference: RouteReference,
    /// Arclength target along the reference.
    pub goal_station: f64,
    /// The goal is where the vehicle should come to rest.
    pub stop_at_goal: bool,
}

impl PlanningEnv {
    pub fn mirrored(&self) -> PlanningEnv {
        let mut ego = self.ego;
        ego.pose = ego.pose.mirrored();
        ego.steering_angle = -ego.steering_angle;
        PlanningEnv {
            area: self.area.mirrored(),
            grid: self.grid.as_ref().map(|g| g.mirrored()),
            objects: self.objects.iter().map(|o| o.mirrored()).collect(),
            ego,
            reference: self.reference.mirrored(),
            goal_station: self.goal_station,
            stop_at_goal: self.stop_at_goal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RolloutState {
    pub t: f64,
    pub pose: Pose2D,
    pub v: f64,
    pub kappa: f64,
    /// Acceleration applied over the step ending here.
    pub a: f64,
    /// Curvature rate applied over the step ending here.
    pub kappa_rate: f64,
    /// Distance travelled since the start.
    pub distance: f64,
}

impl RolloutState {
    pub fn start(ego: &VehicleState, c: &InternalConstraints) -> Self {
        Self {
            t: 0.0,
            pose: ego.pose,
            v: ego.v.max(0.0),
            kappa: (ego.steering_angle.tan() / c.wheelbase).clamp(-c.kappa_max, c.kappa_max),
            a: 0.0,
            kappa_rate: 0.0,
            distance: 0.0,
        }
    }
}

/// Advances one control step with clamping. `visit` sees every substep state
/// (indices 1..=substeps).
fn integrate_step(
    s: &RolloutState,
    a: f64,
    kappa_rate: f64,
    dt: f64,
    substeps: usize,
    c: &InternalConstraints,
    v_cap: f64,
    mut visit: impl FnMut(usize, &RolloutState),
) -> RolloutState {
    let a = a.clamp(c.a_min, c.a_max);
    let mut v1 = s.v + a * dt;
    if v1 > v_cap {
        v1 = v_cap.max(s.v + c.a_min * dt);
    }
    if v1 < 0.0 {
        v1 = 0.0;
    }
    let a_eff = (v1 - s.v) / dt;
    // dκ/ds stays bounded at the slowest speed inside the step
    let mut bound = 0.99 * c.kappa_rate_max * s.v.min(v1);
    if let Some(r) = c.steering_rate_max {
        bound = bound.min(r / c.wheelbase);
    }
    let kd = kappa_rate.clamp(-bound, bound);
    let k1 = (s.kappa + kd * dt).clamp(-c.kappa_max, c.kappa_max);
    let kd_eff = (k1 - s.kappa) / dt;

    let h = dt / substeps as f64;
    let (mut x, mut y, mut theta) = (s.pose.x, s.pose.y, s.pose.theta);
    let mut dist = s.distance;
    let mut out = *s;
    for m in 0..substeps {
        let t0 = m as f64 * h;
        let t1 = (m + 1) as f64 * h;
        let tm = 0.5 * (t0 + t1);
        let (va, vm, vb) = (s.v + a_eff * t0, s.v + a_eff * tm, s.v + a_eff * t1);
        let (ka, km, kb) = (s.kappa + kd_eff * t0, s.kappa + kd_eff * tm, s.kappa + kd_eff * t1);
        let ds = 0.5 * (va + vb) * h;
        let dtheta = h / 6.0 * (ka * va + 4.0 * km * vm + kb * vb);
        let mid = theta + 0.5 * dtheta;
        x += ds * mid.cos();
        y += ds * mid.sin();
        theta += dtheta;
        dist += ds;
        out = RolloutState {
            t: s.t + t1,
            pose: Pose2D::new(x, y, theta),
            v: vb,
            kappa: kb,
            a: a_eff,
            kappa_rate: kd_eff,
            distance: dist,
        };
        visit(m + 1, &out);
    }
    // exact end values
    out.v = v1;
    out.kappa = k1;
    out.t = s.t + dt;
    out
}

/// Forward integration of a control sequence. Returns the N+1 states and the
/// controls actually applied after clamping.
pub fn rollout(
    controls: &[(f64, f64)],
    start: &RolloutState,
    dt: f64,
    substeps: usize,
    c: &InternalConstraints,
) -> (Vec<RolloutState>, Vec<(f64, f64)>) {
    let mut states = Vec::with_capacity(controls.len() + 1);
    let mut applied = Vec::with_capacity(controls.len());
    let mut s = *start;
    states.push(s);
    for &(a, kd) in controls {
        s = integrate_step(&s, a, kd, dt, substeps.max(1), c, c.v_max, |_, _| {});
        applied.push((s.a, s.kappa_rate));
        states.push(s);
    }
    (states, applied)
}

/// Minimization problem over a box. `evaluate` may repair the point in place.
pub trait Objective: Sync {
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn evaluate(&self, x: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub cost: f64,
    pub best_position: Vec<f64>,
    pub best_cost: f64,
}

#[derive(Debug, Clone)]
pub struct Swarm {
    pub particles: Vec<Particle>,
    pub gbest: Vec<f64>,
    pub gbest_cost: f64,
    rng: ChaCha8Rng,
}

impl Swarm {
    /// Evaluates the initial positions (in parallel) and picks the global
    /// best, lowest index first on ties.
    pub fn new<O: Objective>(initial: Vec<Vec<f64>>, objective: &O, seed: u64) -> Self {
        assert!(!initial.is_empty(), "swarm needs at least one particle");
        let mut particles: Vec<Particle> = initial
            .into_iter()
            .map(|p| Particle {
                velocity: vec![0.0; p.len()],
                position: p,
                cost: f64::INFINITY,
                best_position: Vec::new(),
                best_cost: f64::INFINITY,
            })
            .collect();
        particles.par_iter_mut().for_each(|p| {
            p.cost = objective.evaluate(&mut p.position);
            p.best_position = p.position.clone();
            p.best_cost = p.cost;
        });
        let mut gbest = 0;
        for (i, p) in particles.iter().enumerate() {
            if p.cost < particles[gbest].cost {
                gbest = i;
            }
        }
        Self {
            gbest: particles[gbest].position.clone(),
            gbest_cost: particles[gbest].cost,
            particles,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// One velocity/position update. Random factors are drawn up front, one
    /// vector per particle pair, so the update does not depend on evaluation
    /// order.
    pub fn step<O: Objective>(&mut self, params: &SwarmParams, objective: &O) {
        let dim = self.gbest.len();
        let pairs = self.particles.len().div_ceil(2);
        let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs)
            .map(|_| {
                let r1 = (0..dim).map(|_| self.rng.random::<f64>()).collect();
                let r2 = (0..dim).map(|_| self.rng.random::<f64>()).collect();
                (r1, r2)
            })
            .collect();
        let (lo, hi) = (objective.lower(), objective.upper());
        let gbest = &self.gbest;
        self.particles.par_iter_mut().enumerate().for_each(|(i, p)| {
            let (r1, r2) = &draws[i / 2];
            for d in 0..dim {
                let vmax = 0.5 * (hi[d] - lo[d]);
                let v = params.inertia * p.velocity[d]
                    + params.cognitive * r1[d] * (p.best_position[d] - p.position[d])
                    + params.social * r2[d] * (gbest[d] - p.position[d]);
                p.velocity[d] = v.clamp(-vmax, vmax);
                p.position[d] = (p.position[d] + p.velocity[d]).clamp(lo[d], hi[d]);
            }
            p.cost = objective.evaluate(&mut p.position);
            if p.cost < p.best_cost {
                p.best_cost = p.cost;
                p.best_position.clone_from(&p.position);
            }
        });
        for p in &self.particles {
            if p.best_cost < self.gbest_cost {
                self.gbest_cost = p.best_cost;
                self.gbest.clone_from(&p.best_position);
            }
        }
    }
}

pub fn pso_step<O: Objective>(swarm: &mut Swarm, params: &SwarmParams, objective: &O) {
    swarm.step(params, objective);
}

const MAX_TAIL_STEPS: usize = 200;

/// Environment with lookup structures built once per planning cycle.
struct Prepared<'a> {
    cfg: &'a PlannerConfig,
    env: &'a PlanningEnv,
    ring: RingIndex,
    clearance: Option<ClearanceField>,
    /// Object discs at each check sample (midpoint and end of every step).
    objects: Vec<Vec<(Vec2, f64)>>,
    start: RolloutState,
    v_cap: f64,
    start_segment: usize,
    /// Whole-footprint containment; falls back to the reference point when
    /// the vehicle starts partly outside the area.
    strict_area: bool,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Nearest point on the reference near the previous match.
fn project_near(reference: &Polyline, p: Vec2, hint: usize) -> PolylineProjection {
    reference
        .project_range(p, hint.saturating_sub(2), hint + 12)
        .or_else(|| reference.project(p))
        .expect("reference has 2+ points")
}

#[derive(Debug, Clone, Copy, Default)]
struct Violations {
    area: bool,
    grid: bool,
    object: bool,
}

impl Violations {
    fn any(&self) -> bool {
        self.area || self.grid || self.object
    }

    fn count(&self) -> u32 {
        self.area as u32 + self.grid as u32 + self.object as u32
    }
}

impl<'a> Prepared<'a> {
    fn new(env: &'a PlanningEnv, cfg: &'a PlannerConfig) -> Result<Self, PlanError> {
        cfg.constraints.validate()?;
        if cfg.steps == 0 || !(cfg.dt > 0.0) || cfg.substeps == 0 || !(cfg.spacing > 0.0) {
            return Err(PlanError::InvalidInput("steps, dt, substeps and spacing must be positive".into()));
        }
        if !env.ego.is_valid() {
            return Err(PlanError::InvalidInput("ego state not finite".into()));
        }
        if env.area.left_edge.len() < 2 || env.area.right_edge.len() < 2 {
            return Err(PlanError::InvalidInput("driving area edges need two points".into()));
        }
        let ring = RingIndex::new(env.area.ring(), 1.0);
        let clearance = env.grid.as_ref().map(ClearanceField::from_grid);
        let t0 = env.ego.timestamp;
        let samples = 2 * cfg.steps;
        let mut objects = vec![Vec::new(); samples];
        for (j, slot) in objects.iter_mut().enumerate() {
            let t = t0 + (j + 1) as f64 * 0.5 * cfg.dt;
            for o in &env.objects {
                for (k, traj) in o.trajectories.iter().enumerate() {
                    if traj.likelihood >= cfg.min_likelihood {
                        slot.push((o.position_at(k, t), o.radius()));
                    }
                }
            }
        }
        let c = &cfg.constraints;
        let v_cap = c.v_max.min(env.reference.max_speed_limit());
        let kb = c.kappa_dot_bound();
        let mut lower = Vec::with_capacity(2 * cfg.steps);
        let mut upper = Vec::with_capacity(2 * cfg.steps);
        for _ in 0..cfg.steps {
            lower.extend([c.a_min, -kb]);
            upper.extend([c.a_max, kb]);
        }
        let start = RolloutState::start(&env.ego, c);
        let start_segment = env.reference.project(env.ego.pose.position()).segment;
        let strict_area = cfg.vehicle.footprint(&start.pose).iter().all(|c| ring.contains(*c));
        Ok(Self {
            cfg,
            env,
            ring,
            clearance,
            objects,
            start,
            v_cap,
            start_segment,
            strict_area,
            lower,
            upper,
        })
    }

    fn step(&self, s: &RolloutState, a: f64, kd: f64, mut visit: impl FnMut(usize, &RolloutState)) -> RolloutState {
        integrate_step(s, a, kd, self.cfg.dt, self.cfg.substeps, &self.cfg.constraints, self.v_cap, &mut visit)
    }

    fn step_with_mid(&self, s: &RolloutState, a: f64, kd: f64) -> (RolloutState, RolloutState) {
        let half = self.cfg.substeps.div_ceil(2);
        let mut mid = *s;
        let end = self.step(s, a, kd, |m, st| {
            if m == half {
                mid = *st;
            }
        });
        (mid, end)
    }

    /// External constraint check at check sample `j`; `None` checks the
    /// static environment only.
    fn violations(&self, pose: &Pose2D, j: Option<usize>) -> Violations {
        let veh = &self.cfg.vehicle;
        let mut out = Violations::default();
        out.area = if self.strict_area {
            veh.footprint(pose).iter().any(|c| !self.ring.contains(*c))
        } else {
            !self.ring.contains(pose.position())
        };
        let (discs, r) = veh.discs(pose);
        if let Some(field) = &self.clearance {
            out.grid = discs.iter().any(|d| field.clearance(*d) < r + self.cfg.obstacle_margin);
        }
        if let Some(j) = j {
            out.object = self.objects[j].iter().any(|(q, rq)| {
                let lim = r + rq + self.cfg.object_margin;
                discs.iter().any(|d| d.distance(*q) < lim)
            });
        }
        out
    }

    /// Full braking with constant curvature until standstill.
    fn braking_tail(&self, s: &RolloutState, mut visit: impl FnMut(&RolloutState)) {
        let mut s = *s;
        for _ in 0..MAX_TAIL_STEPS {
            if s.v <= 0.0 {
                break;
            }
            let n = self.cfg.substeps;
            s = self.step(&s, self.cfg.constraints.a_min, 0.0, |m, st| {
                if m < n {
                    visit(st)
                }
            });
            visit(&s);
        }
    }

    /// The braking tail leaves the area or meets an obstacle.
    fn tail_blocked(&self, s: &RolloutState) -> bool {
        let mut blocked = false;
        let mut k = 0;
        let half = self.cfg.substeps.div_ceil(2);
        self.braking_tail(s, |st| {
            k += 1;
            if !blocked && (k % half == 0) {
                let v = self.violations(&st.pose, None);
                blocked = v.area || v.grid;
            }
        });
        blocked
    }

    fn penalty(&self, j: usize) -> f64 {
        let n = (2 * self.cfg.steps) as f64;
        self.cfg.weights.penalty * (1.0 + (n - j as f64) / n)
    }

    /// Cost of a control vector laid out as [a0, k0, a1, k1, ...]. The vector
    /// is overwritten with the applied (clamped) controls.
    fn cost(&self, x: &mut [f64]) -> f64 {
        let w = &self.cfg.weights;
        let reference = &self.env.reference;
        let mut s = self.start;
        let mut seg = self.start_segment;
        let (mut pen, mut comfort, mut centering) = (0.0, 0.0, 0.0);
        let mut station = 0.0;
        for k in 0..self.cfg.steps {
            let (mid, end) = self.step_with_mid(&s, x[2 * k], x[2 * k + 1]);
            x[2 * k] = end.a;
            x[2 * k + 1] = end.kappa_rate;
            pen += self.violations(&mid.pose, Some(2 * k)).count() as f64 * self.penalty(2 * k);
            pen += self.violations(&end.pose, Some(2 * k + 1)).count() as f64 * self.penalty(2 * k + 1);
            let proj = project_near(&reference.polyline, end.pose.position(), seg);
            seg = proj.segment;
            station = proj.station;
            if end.v > reference.speed_limit_at_segment(seg) + 1e-6 {
                pen += self.penalty(2 * k + 1);
            }
            centering += proj.lateral * proj.lateral;
            let vm = 0.5 * (s.v + end.v);
            comfort += end.a * end.a + end.kappa_rate * end.kappa_rate * vm * vm;
            s = end;
        }
        if self.tail_blocked(&s) {
            pen += w.penalty;
        }
        let mut cost = w.progress * (self.env.goal_station - station).abs() + w.comfort * comfort + w.centering * centering + pen;
        if self.env.stop_at_goal {
            // speed the vehicle cannot shed before the goal at half the braking limit
            let remaining = (self.env.goal_station - station).max(0.0);
            let excess = (s.v - (remaining * self.cfg.constraints.a_min.abs()).sqrt()).max(0.0);
            cost += w.terminal_speed * excess * excess;
        }
        cost
    }

    fn controls_to_vec(controls: &[(f64, f64)]) -> Vec<f64> {
        controls.iter().flat_map(|&(a, k)| [a, k]).collect()
    }

    fn vec_to_controls(x: &[f64]) -> Vec<(f64, f64)> {
        x.chunks(2).map(|c| (c[0], c[1])).collect()
    }

    fn levels(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n <= 1 {
            return vec![0.0];
        }
        // symmetric around zero when the range is
        let mut v: Vec<f64> = (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                lo + (hi - lo) * f
            })
            .collect();
        if n % 2 == 1 && (lo + hi).abs() < 1e-12 {
            v[n / 2] = 0.0;
        }
        v
    }

    /// Curvature rate that moves toward the pure-pursuit curvature for a
    /// reference point one look-ahead distance ahead.
    fn tracking_rate(&self, s: &RolloutState, hint: usize) -> f64 {
        let reference = &self.env.reference.polyline;
        let proj = project_near(reference, s.pose.position(), hint);
        let lookahead = 4.0 + s.v;
        let (target, _) = reference.sample(proj.station + lookahead);
        let local = s.pose.to_local(target);
        let d2 = local.norm_sq();
        let kappa = if d2 > 1e-9 { 2.0 * local.y / d2 } else { 0.0 };
        let kb = self.cfg.constraints.kappa_dot_bound();
        ((kappa - s.kappa) / self.cfg.dt).clamp(-kb, kb)
    }

    fn preplan(&self) -> Result<Vec<(f64, f64)>, PlanError> {
        let start = self.start;
        let at_start = self.violations(&start.pose, None);
        if at_start.grid {
            return Err(PlanError::NoFeasibleSeed("vehicle footprint overlaps an obstacle".into()));
        }
        let c = &self.cfg.constraints;
        let tp = &self.cfg.tree;
        let mut accels = Self::levels(c.a_min, c.a_max, tp.accel_levels);
        if !accels.contains(&0.0) {
            accels.push(0.0);
        }
        let kb = c.kappa_dot_bound();
        let rates = Self::levels(-kb, kb, tp.kappa_rate_levels);
        let w = &self.cfg.weights;
        let reference = &self.env.reference.polyline;

        #[derive(Clone)]
        struct Node {
            state: RolloutState,
            controls: Vec<(f64, f64)>,
            g: f64,
            score: f64,
            seg: usize,
        }
        let mut beam = vec![Node {
            state: start,
            controls: Vec::new(),
            g: 0.0,
            score: 0.0,
            seg: self.start_segment,
        }];
        for depth in 0..self.cfg.steps {
            let mut children: Vec<Node> = Vec::new();
            for node in &beam {
                let mut seen: Vec<(f64, f64)> = Vec::new();
                let mut node_rates = rates.clone();
                node_rates.push(self.tracking_rate(&node.state, node.seg));
                for &a in &accels {
                    for &kd in &node_rates {
                        let (mid, end) = self.step_with_mid(&node.state, a, kd);
                        let applied = (end.a, end.kappa_rate);
                        if seen.contains(&applied) {
                            continue;
                        }
                        seen.push(applied);
                        if self.violations(&mid.pose, Some(2 * depth)).any()
                            || self.violations(&end.pose, Some(2 * depth + 1)).any()
                        {
                            continue;
                        }
                        let proj = project_near(reference, end.pose.position(), node.seg);
                        if end.v > self.env.reference.speed_limit_at_segment(proj.segment) + 1e-6 {
                            continue;
                        }
                        let vm = 0.5 * (node.state.v + end.v);
                        let g = node.g
                            + w.comfort * (end.a * end.a + end.kappa_rate * end.kappa_rate * vm * vm)
                            + w.centering * proj.lateral * proj.lateral;
                        // progress estimated by holding the speed to the horizon
                        let remaining = (self.cfg.steps - depth - 1) as f64 * self.cfg.dt;
                        let reach = proj.station + end.v * remaining;
                        let mut score = g + w.progress * (self.env.goal_station - reach).abs();
                        // demote branches that could not brake to a stop inside the area and clear of the grid
                        if self.tail_blocked(&end) {
                            score += w.penalty;
                        }
                        let mut controls = node.controls.clone();
                        controls.push(applied);
                        children.push(Node {
                            state: end,
                            controls,
                            g,
                            score,
                            seg: proj.segment,
                        });
                    }
                }
            }
            if children.is_empty() {
                break;
            }
            // half the beam by score, the rest by lowest speed so that a
            // branch able to stop survives greedy progress
            children.sort_by(|a, b| a.score.total_cmp(&b.score));
            let by_score = (tp.beam_width / 2).max(1).min(children.len());
            let cutoff = children[by_score - 1].score;
            let split = children.iter().position(|n| n.score > cutoff).unwrap_or(children.len());
            let mut rest = children.split_off(split);
            rest.sort_by(|a, b| a.state.v.total_cmp(&b.state.v).then(a.score.total_cmp(&b.score)));
            let slow = tp.beam_width.saturating_sub(by_score).min(rest.len());
            if slow > 0 {
                let key = (rest[slow - 1].state.v, rest[slow - 1].score);
                let end = rest.iter().position(|n| (n.state.v, n.score) > key).unwrap_or(rest.len());
                rest.truncate(end);
                children.extend(rest);
            }
            beam = children;
        }
        let mut best: Option<(f64, Vec<(f64, f64)>)> = None;
        for node in &beam {
            let mut controls = node.controls.clone();
            controls.resize(self.cfg.steps, (c.a_min, 0.0));
            let mut x = Self::controls_to_vec(&controls);
            let cost = self.cost(&mut x);
            if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                best = Some((cost, Self::vec_to_controls(&x)));
            }
        }
        Ok(best.expect("beam is never empty").1)
    }

    fn dense_rollout(&self, controls: &[(f64, f64)]) -> Vec<RolloutState> {
        let mut dense = vec![self.start];
        let mut s = self.start;
        for &(a, kd) in controls {
            let mut subs = Vec::with_capacity(self.cfg.substeps);
            s = self.step(&s, a, kd, |_, st| subs.push(*st));
            *subs.last_mut().expect("substeps > 0") = s;
            dense.extend(subs);
        }
        let mut tail = Vec::new();
        self.braking_tail(&s, |st| tail.push(*st));
        dense.extend(tail);
        dense
    }

    fn emit(&self, dense: &[RolloutState], generation: u64) -> Result<Trajectory, PlanError> {
        let spacing = self.cfg.spacing;
        let ego = &self.start;
        // forward part
        let mut kept: Vec<&RolloutState> = vec![&dense[0]];
        for st in &dense[1..] {
            if st.pose.position().distance(kept.last().expect("non-empty").pose.position()) > 1e-9 {
                kept.push(st);
            }
        }
        let mut forward = Vec::new();
        let positions: Vec<Vec2> = kept.iter().map(|s| s.pose.position()).collect();
        let path_len: f64 = positions.windows(2).map(|w| w[0].distance(w[1])).sum();
        if positions.len() >= 2 && path_len >= spacing {
            let stations: Vec<f64> = std::iter::once(0.0)
                .chain(positions.windows(2).scan(0.0, |acc, w| {
                    *acc += w[0].distance(w[1]);
                    Some(*acc)
                }))
                .collect();
            let mut seg = 0usize;
            for (q, st) in resample_polyline(&positions, spacing, false)? {
                while seg + 2 < stations.len() && stations[seg + 1] < st {
                    seg += 1;
                }
                let len = stations[seg + 1] - stations[seg];
                let f = if len > 0.0 { ((st - stations[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
                let (a, b) = (kept[seg], kept[seg + 1]);
                forward.push(Curvepoint {
                    pose: Pose2D::new(q.x, q.y, lerp_angle(a.pose.theta, b.pose.theta, f)),
                    curvature: a.kappa + (b.kappa - a.kappa) * f,
                    v: a.v + (b.v - a.v) * f,
                    a: b.a,
                });
            }
            forward[0].pose = ego.pose;
            forward[0].curvature = ego.kappa;
            forward[0].v = ego.v;
        } else {
            forward.push(Curvepoint {
                pose: ego.pose,
                curvature: ego.kappa,
                v: ego.v,
                a: dense.get(1).map_or(0.0, |s| s.a),
            });
        }
        if dense.last().is_some_and(|s| s.v <= 1e-9) {
            if let Some(last) = forward.last_mut() {
                last.v = 0.0;
            }
        }

        // prefix: arc of the current curvature behind the vehicle
        let prefix = self.prefix(ego.pose, ego.kappa, ego.v);
        let car_index = prefix.len();
        let mut points = prefix;
        points.extend(forward);
        let mut traj = Trajectory::new(points, spacing, self.env.ego.timestamp, generation);
        traj.car_index = car_index.min(traj.valid_count.saturating_sub(1));
        Ok(traj)
    }

    fn prefix(&self, pose: Pose2D, kappa: f64, v: f64) -> Vec<Curvepoint> {
        let len = self.cfg.prefix_length;
        if len < self.cfg.spacing {
            return Vec::new();
        }
        let fine = (self.cfg.spacing / 10.0).min(0.05);
        let n = (len / fine).ceil() as usize;
        let at = |s: f64| -> Vec2 {
            let p = pose.position();
            if kappa.abs() < 1e-9 {
                p + Vec2::from_angle(pose.theta) * s
            } else {
                let t1 = pose.theta + kappa * s;
                p + Vec2::new((t1.sin() - pose.theta.sin()) / kappa, (pose.theta.cos() - t1.cos()) / kappa)
            }
        };
        let back: Vec<Vec2> = (0..=n).map(|i| at(-(i as f64) * len / n as f64)).collect();
        let Ok(samples) = resample_polyline(&back, self.cfg.spacing, false) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for (q, st) in samples.into_iter().skip(1) {
            if !self.ring.contains(q) {
                break;
            }
            out.push(Curvepoint {
                pose: Pose2D::new(q.x, q.y, pose.theta - kappa * st),
                curvature: kappa,
                v,
                a: 0.0,
            });
        }
        out.reverse();
        out
    }
}

impl Objective for Prepared<'_> {
    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    fn evaluate(&self, x: &mut [f64]) -> f64 {
        self.cost(x)
    }
}

/// Cost of a control sequence in an environment.
pub fn evaluate_cost(controls: &[(f64, f64)], env: &PlanningEnv, cfg: &PlannerConfig) -> Result<f64, PlanError> {
    let prepared = Prepared::new(env, cfg)?;
    let mut x = Prepared::controls_to_vec(controls);
    x.resize(2 * cfg.steps, 0.0);
    Ok(prepared.cost(&mut x))
}

/// Beam search over discrete control expansions. Branches that leave the
/// driving area, hit an obstacle or meet a predicted object are pruned; the
/// surviving full-depth branch with the lowest cost is returned. If the tree
/// dies out early, the best branch is completed with full braking.
pub fn preplan_tree(env: &PlanningEnv, cfg: &PlannerConfig) -> Result<Vec<(f64, f64)>, PlanError> {
    Prepared::new(env, cfg)?.preplan()
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub seed_cost: f64,
    /// Global best cost after initialization and after each iteration.
    pub history: Vec<f64>,
    pub controls: Vec<(f64, f64)>,
    pub rollout: Vec<RolloutState>,
}

/// Stateful planner: owns the generation counter and the warm start.
#[derive(Debug, Clone)]
pub struct Planner {
    pub config: PlannerConfig,
    generation: u64,
    last: Option<(f64, Vec<(f64, f64)>)>,
}

impl Planner {
    pub fn new(config: PlannerConfig) -> Self {
        Self {
            config,
            generation: 0,
            last: None,
        }
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Forget the warm start, e.g. after a route change.
    pub fn reset_warm_start(&mut self) {
        self.last = None;
    }

    fn warm_start(&self, now: f64) -> Option<Vec<(f64, f64)>> {
        let (t, prev) = self.last.as_ref()?;
        let shift = ((now - t) / self.config.dt).round();
        if !(shift >= 0.0) || shift as usize >= prev.len() {
            return None;
        }
        let mut c: Vec<(f64, f64)> = prev[shift as usize..].to_vec();
        c.resize(self.config.steps, (0.0, 0.0));
        Some(c)
    }

    pub fn plan(&mut self, env: &PlanningEnv) -> Result<PlanOutcome, PlanError> {
        let cfg = self.config;
        let prepared = Prepared::new(env, &cfg)?;
        let seed = prepared.preplan()?;
        let warm = self.warm_start(env.ego.timestamp);
        let next_generation = self.generation + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.swarm.seed ^ next_generation.wrapping_mul(0x9E37_79B9_7F4A_7C15));

        let seed_vec = Prepared::controls_to_vec(&seed);
        let warm_vec = warm.as_ref().map(|w| Prepared::controls_to_vec(w));
        let pop = cfg.swarm.population.max(1);
        let mut initial = vec![seed_vec.clone()];
        if pop > 1 {
            initial.push(warm_vec.clone().unwrap_or_else(|| seed_vec.clone()));
        }
        let pairs = pop / 2;
        let c = &cfg.constraints;
        let (sigma_a, sigma_k) = (cfg.perturbation_accel * (c.a_max - c.a_min), cfg.perturbation_kappa_rate * c.kappa_dot_bound());
        let block = cfg.perturbation_block.max(1);
        for j in 1..pairs {
            let base = match (&warm_vec, j % 2) {
                (Some(w), 0) => w,
                _ => &seed_vec,
            };
            let amp = j as f64 / pairs as f64;
            // every third pair varies the speed profile only
            let speed_only = j % 3 == 1;
            let mut plus = base.clone();
            let mut minus = base.clone();
            for b in 0..cfg.steps.div_ceil(block) {
                let da = amp * sigma_a * rng.random_range(-1.0..1.0);
                let dk = amp * sigma_k * rng.random_range(-1.0..1.0);
                for k in b * block..((b + 1) * block).min(cfg.steps) {
                    plus[2 * k] += da;
                    if speed_only {
                        minus[2 * k] -= da;
                    } else {
                        minus[2 * k] += da;
                        plus[2 * k + 1] += dk;
                        minus[2 * k + 1] -= dk;
                    }
                }
            }
            for x in [&mut plus, &mut minus] {
                for (d, v) in x.iter_mut().enumerate() {
                    *v = v.clamp(prepared.lower[d], prepared.upper[d]);
                }
            }
            initial.push(plus);
            initial.push(minus);
        }
        while initial.len() < pop {
            initial.push(seed_vec.clone());
        }

        let seed_cost = prepared.cost(&mut seed_vec.clone());
        let mut swarm = Swarm::new(initial, &prepared, rng.random());
        let mut history = vec![swarm.gbest_cost];
        for _ in 0..cfg.swarm.iterations {
            swarm.step(&cfg.swarm, &prepared);
            history.push(swarm.gbest_cost);
        }
        let controls = Prepared::vec_to_controls(&swarm.gbest);
        let dense = prepared.dense_rollout(&controls);
        let trajectory = prepared.emit(&dense, next_generation)?;
        let rollout = rollout(&controls, &prepared.start, cfg.dt, cfg.substeps, &InternalConstraints { v_max: prepared.v_cap, ..*c }).0;

        self.generation = next_generation;
        self.last = Some((env.ego.timestamp, controls.clone()));
        Ok(PlanOutcome {
            trajectory,
            cost: swarm.gbest_cost,
            seed_cost,
            history,
            controls,
            rollout,
        })
    }
}

/// Pointwise internal-constraint audit of an emitted trajectory.
pub fn internal_violations(traj: &Trajectory, c: &InternalConstraints, v_cap: f64) -> Vec<String> {
    let tol = 1e-9;
    let pts = traj.valid_points();
    let mut out = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        if p.v < -tol || p.v > v_cap + tol {
            out.push(format!("point {i}: speed {}", p.v));
        }
        if p.a < c.a_min - tol || p.a > c.a_max + tol {
            out.push(format!("point {i}: acceleration {}", p.a));
        }
        if p.curvature.abs() > c.kappa_max + tol {
            out.push(format!("point {i}: curvature {}", p.curvature));
        }
        if i > 0 {
            let rate = (p.curvature - pts[i - 1].curvature).abs() / traj.spacing;
            if rate > c.kappa_rate_max + tol {
                out.push(format!("point {i}: curvature rate {rate}"));
            }
        }
    }
    out
}
