//! Whole-scenario runs and their summary metrics.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::scenario::{Scenario, ScenarioError};
use crate::world::{StepOptions, StepRecord, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub completed: bool,
    pub collisions: usize,
    /// Smallest ego-to-object distance seen, if there was anything to measure.
    pub min_clearance: Option<f64>,
    pub max_abs_lateral_error: f64,
    pub max_abs_accel: f64,
    pub max_abs_jerk: f64,
    pub distance: f64,
    pub ticks: usize,
    pub mission_failed: bool,
    pub warnings: Vec<String>,
    /// Not part of the deterministic output.
    pub wall_time_s: f64,
}

impl Metrics {
    /// 0 completed, 2 completed with warnings, 3 collision or mission failure.
    pub fn exit_code(&self) -> i32 {
        if self.collisions > 0 || self.mission_failed || !self.completed {
            3
        } else if !self.warnings.is_empty() {
            2
        } else {
            0
        }
    }

    /// Metrics without the wall-clock field, for replay comparisons.
    pub fn deterministic(&self) -> Metrics {
        Metrics { wall_time_s: 0.0, ..self.clone() }
    }
}

/// Folds log records into metrics.
pub fn summarize(records: &[StepRecord], dt: f64) -> Metrics {
    let mut m = Metrics {
        completed: false,
        collisions: 0,
        min_clearance: None,
        max_abs_lateral_error: 0.0,
        max_abs_accel: 0.0,
        max_abs_jerk: 0.0,
        distance: 0.0,
        ticks: records.len(),
        mission_failed: false,
        warnings: Vec::new(),
        wall_time_s: 0.0,
    };
    let mut in_contact = false;
    for (i, r) in records.iter().enumerate() {
        if r.collision && !in_contact {
            m.collisions += 1;
        }
        in_contact = r.collision;
        if let Some(c) = r.clearance {
            m.min_clearance = Some(m.min_clearance.map_or(c, |x: f64| x.min(c)));
        }
        if let Some(e) = r.e_lat {
            m.max_abs_lateral_error = m.max_abs_lateral_error.max(e.abs());
        }
        m.max_abs_accel = m.max_abs_accel.max(r.truth.a.abs());
        if i > 0 {
            let jerk = (r.truth.a - records[i - 1].truth.a) / dt;
            m.max_abs_jerk = m.max_abs_jerk.max(jerk.abs());
        }
        m.completed |= r.directive == "finished";
        m.mission_failed |= r.directive == "aborted";
    }
    m
}

pub struct RunOutput {
    pub metrics: Metrics,
    pub records: Vec<StepRecord>,
}

/// Steps until the duration elapses or the mission finishes. Records are
/// written to `log` as JSON lines, one per tick, when given.
pub fn run(scenario: Scenario, options: StepOptions, mut log: Option<&mut dyn Write>) -> Result<RunOutput, ScenarioError> {
    let start = Instant::now();
    let ticks = scenario.ticks();
    let dt = scenario.spec.dt;
    let mut world = World::new(scenario, options)?;
    let mut records = Vec::with_capacity(ticks);
    for _ in 0..ticks {
        let rec = world.step();
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&rec).expect("records serialize");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|source| ScenarioError::Io {
                path: "log".into(),
                source,
            })?;
        }
        records.push(rec);
        if world.finished {
            break;
        }
    }
    let mut metrics = summarize(&records, dt);
    metrics.collisions = world.collisions;
    metrics.distance = world.distance;
    metrics.warnings = world.warnings.clone();
    metrics.wall_time_s = start.elapsed().as_secs_f64();
    Ok(RunOutput { metrics, records })
}
