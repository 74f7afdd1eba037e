//! Deterministic fixed-step simulation around the motionstack pipeline:
//! scripted agents, ground-truth perception, noisy localization, a kinematic
//! ego vehicle with actuator delay, per-tick logs and run metrics.

pub mod agents;
pub mod perception;
pub mod run;
pub mod scenario;
pub mod vehicle;
pub mod world;

pub use run::{run, Metrics, RunOutput};
pub use scenario::{load_scenario, load_scenario_file, Scenario, ScenarioError, ScenarioSpec};
pub use world::{StepOptions, StepRecord, World};
