//! One fixed-step tick of the closed loop: world, perception, pipeline and
//! vehicle.

use std::collections::BTreeMap;

use motionstack::costmap::OccupancyGrid;
use motionstack::diagnostics::{aggregate, ComponentReport, MonitorSpec, Registry, Status, TreeSpec};
use motionstack::execution::{
    compute_command, guard_apply, guard_check, limit_steering_rate_velocity, project_onto_trajectory, reanchor, ActuationCommand,
    GuardMode, GuardState, GuardViolation,
};
use motionstack::geometry::convex_distance;
use motionstack::maneuver::{apply_consent, derive_lateral_traits, resolve, Consent};
use motionstack::map::{derive_driving_area, DrivingArea, Route, RouteReference};
use motionstack::mission::{Directive, MissionState, Verdict};
use motionstack::planner::{Planner, PlanningEnv};
use motionstack::prediction::{predict_objects, PredictedObject};
use motionstack::trajectory::{validate_trajectory, Trajectory};
use motionstack::{Pose2D, Vec2, VehicleState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::perception::{synthesize_scan, visible_objects};
use crate::scenario::{Scenario, ScenarioError};
use crate::vehicle::{integrate, ActuatorQueue};

pub const COMPONENTS: [&str; 6] = ["controller", "localization", "maneuver", "perception", "planner", "prediction"];

fn diagnostics_tree() -> TreeSpec {
    [
        ("control", vec!["controller"]),
        ("planning", vec!["maneuver", "planner", "prediction"]),
        ("sensing", vec!["localization", "perception"]),
    ]
    .into_iter()
    .map(|(g, m)| (g.to_string(), m.into_iter().map(String::from).collect()))
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoRecord {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub a: f64,
    pub steering_angle: f64,
}

impl From<&VehicleState> for EgoRecord {
    fn from(s: &VehicleState) -> Self {
        Self {
            x: s.pose.x,
            y: s.pose.y,
            theta: s.pose.theta,
            v: s.v,
            a: s.a,
            steering_angle: s.steering_angle,
        }
    }
}

/// Per-tick log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub tick: usize,
    pub t: f64,
    /// Ground truth at the start of the tick.
    pub truth: EgoRecord,
    pub localized: Pose2D,
    /// Absent when guards are disabled.
    pub guard: Option<GuardMode>,
    pub consent: Option<Consent>,
    pub gbest_cost: Option<f64>,
    /// Cost of the tree-search seed of the same plan.
    pub seed_cost: Option<f64>,
    pub generation: u64,
    /// Command issued this tick, before the actuator delay.
    pub command: ActuationCommand,
    pub diagnostics: BTreeMap<String, Status>,
    pub violations: Vec<GuardViolation>,
    pub directive: String,
    /// Largest amount by which a guarded speed exceeds the planned speed.
    pub guard_excess: f64,
    pub e_lat: Option<f64>,
    pub collision: bool,
    pub clearance: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepOptions {
    pub disable_guards: bool,
}

#[derive(Debug, Clone)]
struct DriveContext {
    route: Route,
    goal: Pose2D,
    area: DrivingArea,
    reference: RouteReference,
}

pub struct World {
    pub scenario: Scenario,
    pub options: StepOptions,
    pub tick: usize,
    pub truth: VehicleState,
    pub agents: Vec<Agent>,
    pub distance: f64,
    pub finished: bool,
    pub mission_failed: bool,
    pub warnings: Vec<String>,
    grid: OccupancyGrid,
    queue: ActuatorQueue,
    rng: ChaCha8Rng,
    pos_noise: Normal<f64>,
    heading_noise: Normal<f64>,
    registry: Registry,
    reports: Vec<ComponentReport>,
    mission: MissionState,
    submitted: Vec<bool>,
    drive: Option<DriveContext>,
    planner: Planner,
    trajectory: Option<Trajectory>,
    guard: GuardState,
    contacts: Vec<bool>,
    pub collisions: usize,
}

fn status_of(ok: bool) -> Status {
    if ok {
        Status::Ok
    } else {
        Status::Error
    }
}

impl World {
    pub fn new(scenario: Scenario, options: StepOptions) -> Result<Self, ScenarioError> {
        let spec = &scenario.spec;
        let truth = VehicleState {
            pose: spec.ego.pose,
            v: spec.ego.v,
            a: 0.0,
            steering_angle: spec.ego.steering_angle,
            timestamp: 0.0,
        };
        if !truth.is_valid() {
            return Err(ScenarioError::Invalid("initial ego state".into()));
        }
        let agents: Vec<Agent> = spec.agents.iter().map(|a| Agent::new(a, &scenario.map)).collect();
        let grid = OccupancyGrid::centered(truth.pose.position(), &scenario.configs.grid)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        let idle = ActuationCommand {
            steering_angle: truth.steering_angle,
            acceleration: 0.0,
        };
        let queue = ActuatorQueue::new(scenario.profile.actuator_delay, spec.dt, idle);
        let noise = spec.localization_noise;
        let normal = |s: f64| Normal::new(0.0, s).map_err(|e| ScenarioError::Invalid(e.to_string()));
        let mut registry = Registry::new();
        for c in COMPONENTS {
            let period = if c == "planner" { spec.dt * spec.planner_period as f64 } else { spec.dt };
            registry
                .register(MonitorSpec::new(c, period, 3.0 * period, spec.dt))
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        let mut planner_cfg = scenario.configs.planner;
        planner_cfg.swarm.seed ^= spec.seed;
        let n_agents = agents.len();
        let n_requests = spec.mission.len();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            pos_noise: normal(noise.sigma_pos)?,
            heading_noise: normal(noise.sigma_theta)?,
            warnings: scenario.warnings.clone(),
            options,
            tick: 0,
            truth,
            agents,
            distance: 0.0,
            finished: false,
            mission_failed: false,
            grid,
            queue,
            registry,
            reports: Vec::new(),
            mission: MissionState::default(),
            submitted: vec![false; n_requests],
            drive: None,
            planner: Planner::new(planner_cfg),
            trajectory: None,
            guard: GuardState::default(),
            contacts: vec![false; n_agents + scenario.spec.static_obstacles.len()],
            collisions: 0,
            scenario,
        })
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.scenario.spec.dt
    }

    fn report(&mut self, component: &str, status: Status, message: impl Into<String>) {
        let t = self.time();
        self.reports.push(ComponentReport::new(component, status, message, t));
    }

    fn ego_footprint(&self) -> [Vec2; 4] {
        self.scenario.profile.body.footprint(&self.truth.pose)
    }

    /// Contact and clearance of the true ego footprint against every
    /// present agent and static obstacle. Counts new contacts.
    fn check_contacts(&mut self) -> (bool, Option<f64>) {
        let fp = self.ego_footprint();
        let mut bodies: Vec<(usize, [Vec2; 4])> = self
            .agents
            .iter()
            .enumerate()
            .filter(|(_, a)| a.active)
            .map(|(i, a)| (i, a.corners()))
            .collect();
        let n = self.agents.len();
        bodies.extend(self.scenario.spec.static_obstacles.iter().enumerate().map(|(i, s)| (n + i, s.corners())));
        let mut clearance: Option<f64> = None;
        let mut any = false;
        let mut touching = vec![false; self.contacts.len()];
        for (i, body) in &bodies {
            let d = convex_distance(&fp, body);
            clearance = Some(clearance.map_or(d, |c| c.min(d)));
            if d <= 0.0 {
                touching[*i] = true;
                any = true;
                if !self.contacts[*i] {
                    self.collisions += 1;
                }
            }
        }
        self.contacts = touching;
        (any, clearance)
    }

    fn localize(&mut self) -> VehicleState {
        let mut s = self.truth;
        s.pose = Pose2D::new(
            s.pose.x + self.pos_noise.sample(&mut self.rng),
            s.pose.y + self.pos_noise.sample(&mut self.rng),
            s.pose.theta + self.heading_noise.sample(&mut self.rng),
        );
        s.timestamp = self.time();
        s
    }

    fn update_drive(&mut self, directive: &Directive, notes: &mut Vec<String>) {
        match directive {
            Directive::Drive { route, goal, .. } => {
                let same = self.drive.as_ref().is_some_and(|d| d.route == *route && d.goal == *goal);
                if same {
                    return;
                }
                if self.drive.as_ref().is_none_or(|d| d.goal != *goal) {
                    self.planner.reset_warm_start();
                }
                let map = &self.scenario.map;
                match (derive_driving_area(map, route), RouteReference::new(map, route)) {
                    (Ok(area), Ok(reference)) => {
                        self.drive = Some(DriveContext {
                            route: route.clone(),
                            goal: *goal,
                            area,
                            reference,
                        });
                    }
                    (Err(e), _) | (_, Err(e)) => {
                        notes.push(format!("route geometry: {e}"));
                        self.report("planner", Status::Error, e.to_string());
                    }
                }
            }
            Directive::Hold { .. } => {}
            Directive::Idle | Directive::Finished | Directive::Aborted { .. } => {
                self.drive = None;
                self.trajectory = None;
            }
        }
    }

    /// Runs one tick and returns its log record.
    pub fn step(&mut self) -> StepRecord {
        let t = self.time();
        let dt = self.scenario.spec.dt;
        let mut notes = Vec::new();
        self.reports.clear();

        // (1) scripted agents
        for a in &mut self.agents {
            a.advance(t);
        }
        let (collision, clearance) = self.check_contacts();

        // (2) perception
        let pcfg = self.scenario.configs.perception.clone();
        let sensor = self.truth.pose.advanced(self.scenario.profile.body.center_offset);
        let statics: Vec<[Vec2; 4]> = self.scenario.spec.static_obstacles.iter().map(|s| s.corners()).collect();
        let mut targets = statics.clone();
        targets.extend(self.agents.iter().filter(|a| a.active).map(|a| a.corners()));
        let scan = synthesize_scan(sensor, &targets, &pcfg);
        self.grid.recenter(sensor.position());
        let scan_ok = self.grid.integrate_scan(&scan);
        let tracked = visible_objects(sensor.position(), &self.agents, &statics, t, &pcfg);
        match scan_ok {
            Ok(()) => self.report("perception", Status::Ok, format!("{} objects", tracked.len())),
            Err(e) => self.report("perception", Status::Error, e.to_string()),
        }

        // (3) localization
        let ego = self.localize();
        self.report("localization", status_of(ego.is_valid()), "");

        // (4) diagnostics
        let statuses = self.registry.evaluate(t);
        let diagnostics_ok = match aggregate(&statuses, &diagnostics_tree()) {
            Ok(summary) => summary.is_ok(),
            Err(e) => {
                notes.push(e.to_string());
                false
            }
        };

        // (5) mission
        let mcfg = self.scenario.configs.mission;
        for (i, req) in self.scenario.spec.mission.iter().enumerate() {
            if !self.submitted[i] && req.time <= t + 1e-9 {
                self.submitted[i] = true;
                if let Verdict::Rejected(reason) = self.mission.submit(&req.request(), &self.scenario.map, ego.pose, &mcfg) {
                    let w = format!("mission request {i} rejected: {reason}");
                    notes.push(w.clone());
                    self.warnings.push(w);
                }
            }
        }
        let directive = self.mission.tick(&self.scenario.map, &ego, diagnostics_ok, &mcfg);
        self.update_drive(&directive, &mut notes);
        let directive_name = match &directive {
            Directive::Idle => "idle",
            Directive::Hold { .. } => "hold",
            Directive::Drive { .. } => "drive",
            Directive::Finished => "finished",
            Directive::Aborted { .. } => "aborted",
        };
        match &directive {
            Directive::Finished => self.finished = true,
            Directive::Aborted { reason } => {
                self.mission_failed = true;
                notes.push(reason.clone());
            }
            _ => {}
        }

        // (6) prediction
        let objects: Vec<PredictedObject> = match predict_objects(&self.scenario.map, &tracked, &self.scenario.configs.prediction) {
            Ok(o) => {
                self.report("prediction", Status::Ok, "");
                o
            }
            Err(e) => {
                self.report("prediction", Status::Error, e.to_string());
                Vec::new()
            }
        };

        // (7) maneuver
        let mut consent = None;
        let mut env = None;
        if let Some(d) = &self.drive {
            let cfg = &self.scenario.configs.maneuver;
            let traits = derive_lateral_traits(&d.area, &d.reference, ego.pose.position(), &objects, cfg);
            let c = if traits.is_empty() { Ok(Consent::none(cfg.passing_side)) } else { resolve(&traits, cfg.passing_side) };
            let area = match c.and_then(|c| apply_consent(&d.area, &c).map(|a| (c, a))) {
                Ok((c, a)) => {
                    consent = Some(c);
                    self.reports.push(ComponentReport::new("maneuver", Status::Ok, "", t));
                    a
                }
                Err(e) => {
                    self.reports.push(ComponentReport::new("maneuver", Status::Error, e.to_string(), t));
                    d.area.clone()
                }
            };
            let goal_station = d.reference.project(d.goal.position()).station;
            env = Some(PlanningEnv {
                area,
                grid: Some(self.grid.clone()),
                objects: objects.clone(),
                ego,
                reference: d.reference.clone(),
                goal_station,
                stop_at_goal: true,
            });
        } else {
            self.report("maneuver", Status::Ok, "idle");
        }

        // (8) planning
        let mut gbest_cost = None;
        let mut seed_cost = None;
        let period = self.scenario.spec.planner_period;
        let due = self.tick % period == 0;
        match &env {
            Some(env) if due || self.trajectory.is_none() => match self.planner.plan(env) {
                Ok(out) => {
                    let verdict = validate_trajectory(&out.trajectory, self.trajectory.as_ref().map(|t| t.generation));
                    if verdict.is_valid() {
                        gbest_cost = Some(out.cost);
                        seed_cost = Some(out.seed_cost);
                        self.trajectory = Some(out.trajectory);
                        self.report("planner", Status::Ok, "");
                    } else {
                        let msg = verdict.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
                        self.report("planner", Status::Error, msg);
                    }
                }
                Err(e) => {
                    notes.push(format!("planner: {e}"));
                    self.report("planner", Status::Error, e.to_string());
                }
            },
            None if due => self.report("planner", Status::Ok, "idle"),
            _ => {}
        }

        // (9) guards
        let profile = self.scenario.profile.clone();
        let ccfg = self.scenario.configs.controller;
        let rear = VehicleState {
            pose: profile.rear_axle_pose(&ego.pose),
            ..ego
        };
        let reference_point = ccfg.reference_point(&rear);
        let mut violations = Vec::new();
        let mut guard_excess: f64 = 0.0;
        let mut guard_mode = None;
        let active = match (&self.trajectory, &env) {
            (Some(traj), Some(env)) => {
                let planned = reanchor(traj, reference_point);
                self.trajectory = Some(planned.clone());
                let guarded = if self.options.disable_guards {
                    planned.clone()
                } else {
                    let gcfg = self.scenario.configs.guard;
                    violations = guard_check(&planned, env, &self.scenario.configs.planner.constraints, &profile.body, &gcfg);
                    if let Directive::Hold { reason } = &directive {
                        violations.push(GuardViolation::External {
                            index: planned.car_index,
                            reason: reason.clone(),
                        });
                    }
                    let (state, out) = guard_apply(self.guard, &planned, &violations, ego.v, t, &gcfg);
                    self.guard = state;
                    guard_mode = Some(state.mode);
                    out
                };
                let limited = limit_steering_rate_velocity(&guarded, &ccfg);
                for (p, q) in limited.valid_points().iter().zip(planned.valid_points()).skip(planned.car_index) {
                    guard_excess = guard_excess.max(p.v - q.v);
                }
                Some(limited)
            }
            _ => None,
        };

        // (10) controller
        let mut e_lat = None;
        let command = match &active {
            Some(traj) => {
                let proj = project_onto_trajectory(traj, &rear, &ccfg);
                match &proj {
                    Ok(p) => {
                        e_lat = Some(p.e_lat);
                        self.report("controller", Status::Ok, "");
                    }
                    Err(e) => self.report("controller", Status::Error, e.to_string()),
                }
                compute_command(&proj, traj, &rear, &ccfg)
            }
            None => {
                self.report("controller", Status::Ok, "holding");
                ActuationCommand {
                    steering_angle: self.truth.steering_angle,
                    acceleration: if self.truth.v > 0.0 { -ccfg.decel_limit } else { 0.0 },
                }
            }
        };

        // (11) vehicle
        let applied = self.queue.push(command);
        let before = self.truth;
        let (next, ds) = integrate(&self.truth, &applied, &profile, dt);
        self.truth = next;
        self.distance += ds;

        for r in std::mem::take(&mut self.reports) {
            let at = r.timestamp;
            if let Err(e) = self.registry.observe(r, at) {
                notes.push(e.to_string());
            }
        }

        let record = StepRecord {
            tick: self.tick,
            t,
            truth: EgoRecord::from(&before),
            localized: ego.pose,
            guard: guard_mode,
            consent,
            gbest_cost,
            seed_cost,
            generation: self.planner.generation(),
            command,
            diagnostics: statuses.into_iter().map(|(k, v)| (k, v.status)).collect(),
            violations,
            directive: directive_name.into(),
            guard_excess,
            e_lat,
            collision,
            clearance,
            notes,
        };
        self.tick += 1;
        record
    }
}
