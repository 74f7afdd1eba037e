//! Vehicle profiles and the kinematic ego model.

use std::collections::VecDeque;

use motionstack::execution::{ActuationCommand, ControllerConfig, ReferenceMode};
use motionstack::geometry::normalize_angle;
use motionstack::planner::{InternalConstraints, PlannerConfig, VehicleGeometry};
use motionstack::{Pose2D, VehicleState};
use serde::{Deserialize, Serialize};

/// Physical limits and geometry of a simulated vehicle. Poses refer to the
/// control reference point: the rear axle for `RearAxle`, the midpoint
/// between the axles for `AxleCenter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleProfile {
    pub name: String,
    pub reference_mode: ReferenceMode,
    pub wheelbase: f64,
    pub body: VehicleGeometry,
    pub max_steer: f64,
    pub max_steer_rate: f64,
    /// Whether planner and controller know the steering rate limit.
    pub steer_rate_aware: bool,
    pub a_min: f64,
    pub a_max: f64,
    pub v_max: f64,
    pub actuator_delay: f64,
}

pub const PROFILES: [&str; 2] = ["car", "shuttle"];

pub fn profile_by_name(name: &str) -> Option<VehicleProfile> {
    match name {
        "car" => Some(VehicleProfile {
            name: "car".into(),
            reference_mode: ReferenceMode::RearAxle,
            wheelbase: 2.7,
            body: VehicleGeometry {
                length: 4.5,
                width: 1.9,
                center_offset: 1.35,
            },
            max_steer: 0.6,
            max_steer_rate: 1.0,
            steer_rate_aware: false,
            a_min: -6.0,
            a_max: 2.5,
            v_max: 16.0,
            actuator_delay: 0.1,
        }),
        // four-wheel steered, symmetric about the axle center
        "shuttle" => Some(VehicleProfile {
            name: "shuttle".into(),
            reference_mode: ReferenceMode::AxleCenter,
            wheelbase: 2.8,
            body: VehicleGeometry {
                length: 4.0,
                width: 2.0,
                center_offset: 0.0,
            },
            max_steer: 0.5,
            max_steer_rate: 0.4,
            steer_rate_aware: true,
            a_min: -5.0,
            a_max: 1.5,
            v_max: 8.0,
            actuator_delay: 0.2,
        }),
        _ => None,
    }
}

impl VehicleProfile {
    pub fn effective_wheelbase(&self) -> f64 {
        match self.reference_mode {
            ReferenceMode::RearAxle => self.wheelbase,
            ReferenceMode::AxleCenter => 0.5 * self.wheelbase,
        }
    }

    fn steering_limit(&self) -> Option<f64> {
        self.steer_rate_aware.then_some(self.max_steer_rate)
    }

    pub fn planner_config(&self) -> PlannerConfig {
        let d = PlannerConfig::default();
        let kappa_max = (self.max_steer.tan() / self.effective_wheelbase()).min(d.constraints.kappa_max);
        PlannerConfig {
            constraints: InternalConstraints {
                v_max: d.constraints.v_max.min(self.v_max),
                a_min: d.constraints.a_min.max(self.a_min),
                a_max: d.constraints.a_max.min(self.a_max),
                kappa_max,
                steering_rate_max: self.steering_limit(),
                wheelbase: self.effective_wheelbase(),
                ..d.constraints
            },
            vehicle: self.body,
            ..d
        }
    }

    pub fn controller_config(&self) -> ControllerConfig {
        let d = ControllerConfig::default();
        ControllerConfig {
            wheelbase: self.wheelbase,
            reference_mode: self.reference_mode,
            actuator_delay: self.actuator_delay,
            max_steer: self.max_steer,
            steering_rate_limit: self.steering_limit(),
            decel_limit: d.decel_limit.min(-self.a_min),
            accel_limit: d.accel_limit.min(self.a_max),
            ..d
        }
    }

    /// Rear-axle pose for a reference-point pose, as the controller expects.
    pub fn rear_axle_pose(&self, reference: &Pose2D) -> Pose2D {
        match self.reference_mode {
            ReferenceMode::RearAxle => *reference,
            ReferenceMode::AxleCenter => reference.advanced(-0.5 * self.wheelbase),
        }
    }
}

/// Commands wait `⌈delay/dt⌉` ticks before they reach the actuators.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuatorQueue {
    pending: VecDeque<ActuationCommand>,
}

impl ActuatorQueue {
    pub fn new(delay: f64, dt: f64, idle: ActuationCommand) -> Self {
        let n = ((delay / dt) - 1e-9).ceil().max(0.0) as usize;
        Self {
            pending: std::iter::repeat_n(idle, n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Enqueues `cmd` and returns the command applied this tick.
    pub fn push(&mut self, cmd: ActuationCommand) -> ActuationCommand {
        self.pending.push_back(cmd);
        self.pending.pop_front().expect("just pushed")
    }
}

/// Advances the reference-point state by one tick of the kinematic
/// single-track model. Steering and acceleration are clamped to the profile;
/// speed stays in [0, v_max]. Returns the new state and the distance driven.
pub fn integrate(state: &VehicleState, cmd: &ActuationCommand, profile: &VehicleProfile, dt: f64) -> (VehicleState, f64) {
    let max_step = profile.max_steer_rate * dt;
    let target = cmd.steering_angle.clamp(-profile.max_steer, profile.max_steer);
    let steering = state.steering_angle + (target - state.steering_angle).clamp(-max_step, max_step);
    let accel = cmd.acceleration.clamp(profile.a_min, profile.a_max);
    let v1 = (state.v + accel * dt).clamp(0.0, profile.v_max);
    let ds = 0.5 * (state.v + v1) * dt;
    let kappa = steering.tan() / profile.effective_wheelbase();
    let dtheta = kappa * ds;
    let half = 0.5 * dtheta;
    let mid = state.pose.theta + half;
    // exact chord of the constant-curvature arc
    let chord = if half.abs() > 1e-6 { ds * half.sin() / half } else { ds * (1.0 - half * half / 6.0) };
    let pose = Pose2D {
        x: state.pose.x + chord * mid.cos(),
        y: state.pose.y + chord * mid.sin(),
        theta: normalize_angle(state.pose.theta + dtheta),
    };
    let next = VehicleState {
        pose,
        v: v1,
        a: (v1 - state.v) / dt,
        steering_angle: steering,
        timestamp: state.timestamp + dt,
    };
    (next, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn car() -> VehicleProfile {
        profile_by_name("car").unwrap()
    }

    #[test]
    fn stationary_under_zero_command() {
        let mut s = VehicleState::at_rest(Pose2D::new(3.0, -1.0, 0.4));
        let zero = ActuationCommand { steering_angle: 0.0, acceleration: 0.0 };
        for _ in 0..1000 {
            s = integrate(&s, &zero, &car(), 0.1).0;
        }
        assert_eq!(s.pose.position(), Pose2D::new(3.0, -1.0, 0.4).position());
        assert_eq!(s.v, 0.0);
    }

    #[test]
    fn constant_speed_straight_line() {
        let mut s = VehicleState { v: 1.0, ..VehicleState::at_rest(Pose2D::new(0.0, 0.0, 0.0)) };
        let cmd = ActuationCommand { steering_angle: 0.0, acceleration: 0.0 };
        for _ in 0..100 {
            s = integrate(&s, &cmd, &car(), 0.1).0;
        }
        assert!((s.pose.x - 10.0).abs() < 1e-9, "{}", s.pose.x);
        assert_eq!(s.pose.y, 0.0);
    }

    #[test]
    fn constant_steering_closes_the_circle() {
        let p = car();
        let delta = 0.2;
        let radius = p.wheelbase / f64::tan(delta);
        let mut s = VehicleState { v: 5.0, steering_angle: delta, ..VehicleState::at_rest(Pose2D::new(0.0, 0.0, 0.0)) };
        let cmd = ActuationCommand { steering_angle: delta, acceleration: 0.0 };
        for _ in 0..500 {
            s = integrate(&s, &cmd, &p, 0.01).0;
            // centre of the circle is (0, R)
            assert!((s.pose.position().distance(motionstack::Vec2::new(0.0, radius)) - radius).abs() < 1e-9);
        }
    }

    #[test]
    fn actuator_queue_delays_by_whole_ticks() {
        let idle = ActuationCommand { steering_angle: 0.0, acceleration: 0.0 };
        assert_eq!(ActuatorQueue::new(0.1, 0.1, idle).len(), 1);
        assert_eq!(ActuatorQueue::new(0.25, 0.1, idle).len(), 3);
        assert!(ActuatorQueue::new(0.0, 0.1, idle).is_empty());
        let mut q = ActuatorQueue::new(0.2, 0.1, idle);
        let c = |a| ActuationCommand { steering_angle: 0.0, acceleration: a };
        assert_eq!(q.push(c(1.0)), idle);
        assert_eq!(q.push(c(2.0)), idle);
        assert_eq!(q.push(c(3.0)), c(1.0));
    }

    #[test]
    fn shuttle_rear_axle_is_half_a_wheelbase_back() {
        let p = profile_by_name("shuttle").unwrap();
        let rear = p.rear_axle_pose(&Pose2D::new(10.0, 0.0, 0.0));
        assert!((rear.x - 8.6).abs() < 1e-12);
        let cfg = p.controller_config();
        let back = cfg.reference_point(&VehicleState::at_rest(rear));
        assert!((back.x - 10.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn integrated_state_respects_profile_limits(
            v in 0.0f64..16.0,
            steer in -0.6f64..0.6,
            cmd_steer in -3.0f64..3.0,
            cmd_a in -20.0f64..20.0,
            shuttle in any::<bool>(),
        ) {
            let p = profile_by_name(if shuttle { "shuttle" } else { "car" }).unwrap();
            let steer = steer.clamp(-p.max_steer, p.max_steer);
            let v = v.min(p.v_max);
            let s = VehicleState { v, steering_angle: steer, ..VehicleState::at_rest(Pose2D::new(0.0, 0.0, 0.0)) };
            let dt = 0.1;
            let (n, ds) = integrate(&s, &ActuationCommand { steering_angle: cmd_steer, acceleration: cmd_a }, &p, dt);
            prop_assert!(n.steering_angle.abs() <= p.max_steer + 1e-12);
            prop_assert!((n.steering_angle - steer).abs() <= p.max_steer_rate * dt + 1e-12);
            prop_assert!(n.a >= p.a_min - 1e-9 && n.a <= p.a_max + 1e-9);
            prop_assert!(n.v >= 0.0 && n.v <= p.v_max);
            prop_assert!(ds >= 0.0);
        }
    }
}
