//! Scenario documents and their resolution against maps and vehicle profiles.

use std::path::{Path, PathBuf};

use motionstack::execution::GuardConfig;
use motionstack::maneuver::ManeuverConfig;
use motionstack::map::{load_map, LaneMap, MapDocument, MapError};
use motionstack::mission::{MissionConfig, MissionRequest, RequestMode};
use motionstack::planner::PlannerConfig;
use motionstack::prediction::PredictionConfig;
use motionstack::costmap::GridConfig;
use motionstack::types::{Classification, Extents};
use motionstack::{Pose2D, Vec2};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::vehicle::{profile_by_name, VehicleProfile};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("unknown vehicle profile {0:?}")]
    UnknownProfile(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("map: {0}")]
    Map(#[from] MapError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MapSource {
    Path(String),
    Inline(MapDocument),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub pose: Pose2D,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub steering_angle: f64,
    #[serde(default = "default_profile")]
    pub profile: String,
}

fn default_profile() -> String {
    "car".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMotion {
    /// Explicit waypoints.
    Path(Vec<[f64; 2]>),
    /// Centerlines of the listed lanes, starting `station` meters into the first.
    Lanes {
        ids: Vec<String>,
        #[serde(default)]
        station: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: u64,
    pub class: Classification,
    pub extents: Extents,
    #[serde(flatten)]
    pub motion: AgentMotion,
    /// Constant speed, used when no profile is given.
    #[serde(default)]
    pub speed: f64,
    /// (seconds since spawn, speed) breakpoints, linearly interpolated and
    /// held past the ends.
    #[serde(default)]
    pub speed_profile: Vec<[f64; 2]>,
    #[serde(default)]
    pub spawn_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticObstacle {
    pub center: [f64; 2],
    #[serde(default)]
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl StaticObstacle {
    pub fn corners(&self) -> [Vec2; 4] {
        motionstack::geometry::rectangle_corners(self.center.into(), self.heading, self.length, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedRequest {
    #[serde(default)]
    pub time: f64,
    pub goals: Vec<Pose2D>,
    #[serde(default = "default_mode")]
    pub mode: RequestMode,
}

fn default_mode() -> RequestMode {
    RequestMode::New
}

impl TimedRequest {
    pub fn request(&self) -> MissionRequest {
        MissionRequest {
            goals: self.goals.clone(),
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationNoise {
    #[serde(default)]
    pub sigma_pos: f64,
    #[serde(default)]
    pub sigma_theta: f64,
}

/// Scenario document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default)]
    pub name: String,
    pub map: MapSource,
    pub ego: EgoSpec,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub static_obstacles: Vec<StaticObstacle>,
    #[serde(default)]
    pub mission: Vec<TimedRequest>,
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub localization_noise: LocalizationNoise,
    /// Control ticks per planner run.
    #[serde(default = "default_planner_period")]
    pub planner_period: usize,
    /// Partial overrides merged over the profile-derived module configs.
    #[serde(default)]
    pub config: Value,
}

fn default_dt() -> f64 {
    0.1
}

fn default_planner_period() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    pub rays: usize,
    pub max_range: f64,
    /// Position sigma of tracked objects at zero range, growing per meter.
    pub sigma_base: f64,
    pub sigma_per_meter: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            rays: 720,
            max_range: 30.0,
            sigma_base: 0.1,
            sigma_per_meter: 0.01,
        }
    }
}

/// Module configurations used by one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleConfigs {
    pub planner: PlannerConfig,
    pub controller: motionstack::execution::ControllerConfig,
    pub guard: GuardConfig,
    pub prediction: PredictionConfig,
    pub maneuver: ManeuverConfig,
    pub mission: MissionConfig,
    pub grid: GridConfig,
    pub perception: PerceptionConfig,
}

/// Fully resolved scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub map: LaneMap,
    pub profile: VehicleProfile,
    pub configs: ModuleConfigs,
    /// Accepted oddities, e.g. agents that never spawn.
    pub warnings: Vec<String>,
}

impl Scenario {
    pub fn ticks(&self) -> usize {
        ((self.spec.duration / self.spec.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn with_overrides<T: Serialize + serde::de::DeserializeOwned>(base: T, patch: Option<&Value>) -> Result<T, ScenarioError> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let mut v = serde_json::to_value(&base).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| ScenarioError::Parse(e.to_string()))
}

fn build_configs(profile: &VehicleProfile, overrides: &Value, dt: f64) -> Result<ModuleConfigs, ScenarioError> {
    if !(overrides.is_null() || overrides.is_object()) {
        return Err(ScenarioError::Parse("config must be an object".into()));
    }
    let known = ["planner", "controller", "guard", "prediction", "maneuver", "mission", "grid", "perception"];
    if let Value::Object(m) = overrides {
        if let Some(k) = m.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(ScenarioError::Parse(format!("unknown config section {k:?}")));
        }
    }
    let get = |k: &str| overrides.get(k);
    let mut maneuver = ManeuverConfig {
        ego_width: profile.body.width,
        ..Default::default()
    };
    maneuver = with_overrides(maneuver, get("maneuver"))?;
    let mut controller = profile.controller_config();
    controller.actuator_delay = controller.actuator_delay.max(0.0);
    Ok(ModuleConfigs {
        planner: with_overrides(profile.planner_config(), get("planner"))?,
        controller: with_overrides(controller, get("controller"))?,
        guard: with_overrides(GuardConfig::default(), get("guard"))?,
        prediction: with_overrides(
            PredictionConfig {
                dt: PredictionConfig::default().dt.max(dt),
                ..Default::default()
            },
            get("prediction"),
        )?,
        maneuver,
        mission: with_overrides(MissionConfig::default(), get("mission"))?,
        grid: with_overrides(GridConfig::default(), get("grid"))?,
        perception: with_overrides(PerceptionConfig::default(), get("perception"))?,
    })
}

pub fn parse_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads the map, binds the vehicle profile and checks the invariants.
/// Relative map paths are resolved against `base_dir`.
pub fn resolve(spec: ScenarioSpec, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(ScenarioError::Invalid(format!("dt must be positive, got {}", spec.dt)));
    }
    if !(spec.duration >= spec.dt) || !spec.duration.is_finite() {
        return Err(ScenarioError::Invalid(format!("duration {} shorter than dt {}", spec.duration, spec.dt)));
    }
    if spec.planner_period == 0 {
        return Err(ScenarioError::Invalid("planner_period must be at least 1".into()));
    }
    let noise = spec.localization_noise;
    if !(noise.sigma_pos >= 0.0 && noise.sigma_theta >= 0.0) {
        return Err(ScenarioError::Invalid("negative localization noise".into()));
    }
    let profile = profile_by_name(&spec.ego.profile).ok_or_else(|| ScenarioError::UnknownProfile(spec.ego.profile.clone()))?;
    let map = match &spec.map {
        MapSource::Inline(doc) => LaneMap::from_document(doc)?,
        MapSource::Path(p) => {
            let path = base_dir.map_or_else(|| PathBuf::from(p), |b| b.join(p));
            load_map(&read(&path)?)?
        }
    };
    let configs = build_configs(&profile, &spec.config, spec.dt)?;
    let mut warnings = Vec::new();
    for a in &spec.agents {
        if a.extents.length <= 0.0 || a.extents.width <= 0.0 {
            return Err(ScenarioError::Invalid(format!("agent {} has empty extents", a.id)));
        }
        match &a.motion {
            AgentMotion::Path(p) if p.is_empty() => {
                return Err(ScenarioError::Invalid(format!("agent {} has an empty path", a.id)));
            }
            AgentMotion::Lanes { ids, .. } => {
                if let Some(id) = ids.iter().find(|id| map.get(id).is_none()) {
                    return Err(ScenarioError::Invalid(format!("agent {} follows unknown lane {id}", a.id)));
                }
            }
            _ => {}
        }
        if a.spawn_time > spec.duration {
            warnings.push(format!("agent {} spawns at {} s after the scenario ends; it never appears", a.id, a.spawn_time));
        }
    }
    let mut ids: Vec<u64> = spec.agents.iter().map(|a| a.id).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(ScenarioError::Invalid("duplicate agent id".into()));
    }
    Ok(Scenario {
        spec,
        map,
        profile,
        configs,
        warnings,
    })
}

pub fn load_scenario(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioError> {
    resolve(parse_scenario(text)?, base_dir)
}

pub fn load_scenario_file(path: &Path) -> Result<Scenario, ScenarioError> {
    load_scenario(&read(path)?, path.parent())
}
