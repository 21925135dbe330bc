//! Scenario files: world layout, agents, channel and protocol settings.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ChannelError, LatencyModel, UniformRange};
use crate::dpp::DppConfig;
use crate::drive::{Action, DriveConfig, DriveError, Route};
use crate::geometry::{overlaps, Pose};
use crate::grids::{GridError, GridSpec};
use crate::metrics::{MetricsError, PenaltyConfig, WeightProfile};
use crate::pragcomm::VolumeMode;
use crate::seed::stream;
use crate::world::{AgentState, ObjectClass, PerceptionConfig, PoseNoise, Role, VehicleDynamics, World, WorldEvent, WorldObject};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid scenario json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Drive(#[from] DriveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub id: u32,
    pub role: Role,
    pub pose: Pose,
    #[serde(default)]
    pub speed: f64,
    #[serde(default = "default_range")]
    pub sensing_range: f64,
    #[serde(default = "default_fov")]
    pub fov: f64,
    #[serde(default = "default_extent")]
    pub extent: (f64, f64),
    /// Polyline the agent follows; RSUs have none.
    #[serde(default)]
    pub route: Vec<(f64, f64)>,
    #[serde(default)]
    pub target_speed: f64,
}

fn default_range() -> f64 {
    50.0
}

fn default_fov() -> f64 {
    std::f64::consts::TAU
}

fn default_extent() -> (f64, f64) {
    (4.5, 2.0)
}

/// Random objects placed in a rectangle, moving along a fixed heading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnGroup {
    pub class: ObjectClass,
    pub count: usize,
    /// `[x_min, y_min, x_max, y_max]` in meters.
    pub region: [f64; 4],
    pub extent: (f64, f64),
    /// Speed range in m/s; the sign picks the direction.
    pub speed: UniformRange,
    /// Heading in radians, mirrored by pi for negative speeds.
    #[serde(default)]
    pub heading: f64,
    /// Randomize the travel direction along the heading.
    #[serde(default)]
    pub both_directions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpawnSpec {
    pub groups: Vec<SpawnGroup>,
    /// Minimum gap between spawned footprints.
    #[serde(default = "default_gap")]
    pub min_gap_m: f64,
    #[serde(default = "default_first_id")]
    pub first_id: u32,
}

fn default_gap() -> f64 {
    1.0
}

fn default_first_id() -> u32 {
    1000
}

/// Message-exchange settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub p_thre: f64,
    pub confidence_sigma_cells: f64,
    /// Focus radius of the area-of-importance request map, meters.
    pub sigma_f_m: f64,
    pub normalize_request: bool,
    pub packet_loss: f64,
    /// Half width of the uniform receive-time jitter, ms.
    pub jitter_ms: f64,
    /// Frames kept per sender for forecasting.
    pub history: usize,
    /// `cv`, `static` or `oracle`.
    pub predictor: String,
    pub dpp: DppConfig,
    /// Messages older than this are no longer fused, ms.
    pub max_age_ms: f64,
    pub volume_mode: VolumeMode,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            p_thre: 0.05,
            confidence_sigma_cells: 1.0,
            sigma_f_m: 15.0,
            normalize_request: true,
            packet_loss: 0.0,
            jitter_ms: 0.0,
            history: 4,
            predictor: "cv".into(),
            dpp: DppConfig::default(),
            max_age_ms: 1000.0,
            volume_mode: VolumeMode::default(),
        }
    }
}

/// Detection evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Ground truth and detections farther than this from the ego are ignored.
    pub range_m: f64,
    pub peak_thresh: f64,
    pub nms_iou: f64,
    /// Ticks skipped before accumulating AP.
    pub warmup_ticks: usize,
    /// Only objects seen by at least one agent count as ground truth.
    pub require_visible: bool,
    pub profile: WeightProfile,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            range_m: 30.0,
            peak_thresh: 0.3,
            nms_iou: 0.1,
            warmup_ticks: 5,
            require_visible: true,
            profile: WeightProfile::Latency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub grid: GridConfig,
    #[serde(default = "default_tick")]
    pub tick_ms: f64,
    pub duration_s: f64,
    #[serde(default)]
    pub perception: PerceptionConfig,
    #[serde(default)]
    pub dynamics: VehicleDynamics,
    pub agents: Vec<AgentConfig>,
    #[serde(default)]
    pub objects: Vec<WorldObject>,
    #[serde(default)]
    pub events: Vec<WorldEvent>,
    #[serde(default)]
    pub spawn: Option<SpawnSpec>,
    #[serde(default)]
    pub channel: LatencyModel,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    /// Localization noise of collaborating agents.
    #[serde(default)]
    pub noise: PoseNoise,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub drive: DriveConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
}

fn default_tick() -> f64 {
    100.0
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn spec(&self) -> Result<GridSpec, GridError> {
        GridSpec::new(self.grid.height, self.grid.width, self.grid.resolution)
    }

    pub fn ego(&self) -> Result<&AgentConfig, ScenarioError> {
        let mut egos = self.agents.iter().filter(|a| a.role == Role::Ego);
        match (egos.next(), egos.next()) {
            (Some(e), None) => Ok(e),
            _ => Err(ScenarioError::Invalid("exactly one agent must have role \"ego\"".into())),
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.spec()?;
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.tick_ms > 0.0) {
            return invalid(format!("tick_ms must be positive, got {}", self.tick_ms));
        }
        if !(self.duration_s > 0.0) {
            return invalid(format!("duration_s must be positive, got {}", self.duration_s));
        }
        let ego = self.ego()?;
        Route::new(ego.route.clone())?;
        let mut ids: Vec<u32> = self.agents.iter().map(|a| a.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return invalid("agent ids must be unique".into());
        }
        for a in &self.agents {
            if a.role == Role::Vehicle && a.route.len() < 2 && a.target_speed > 0.0 {
                return invalid(format!("moving agent {} needs a route", a.id));
            }
        }
        let p = &self.protocol;
        if !(0.0..=1.0).contains(&p.p_thre) {
            return invalid(format!("p_thre must lie in [0, 1], got {}", p.p_thre));
        }
        if !(0.0..=1.0).contains(&p.packet_loss) {
            return invalid(format!("packet_loss must lie in [0, 1], got {}", p.packet_loss));
        }
        if !(p.jitter_ms >= 0.0) {
            return invalid(format!("jitter_ms must be nonnegative, got {}", p.jitter_ms));
        }
        if !(p.sigma_f_m > 0.0) {
            return invalid(format!("sigma_f_m must be positive, got {}", p.sigma_f_m));
        }
        if p.history < 2 {
            return invalid("protocol.history must be at least 2".into());
        }
        if !["cv", "static", "oracle"].contains(&p.predictor.as_str()) {
            return invalid(format!(
                "unknown predictor {:?}; valid: cv, static, oracle",
                p.predictor
            ));
        }
        if !(self.noise.sigma_p >= 0.0 && self.noise.sigma_r >= 0.0) {
            return invalid("noise sigmas must be nonnegative".into());
        }
        self.channel.validate()?;
        self.penalty.validate()?;
        Ok(())
    }

    /// Initial world. Spawned objects depend only on `seed`.
    pub fn build_world(&self, seed: u64) -> Result<World, ScenarioError> {
        let mut world = World::new(self.spec()?);
        world.dynamics = self.dynamics.clone();
        world.perception = self.perception.clone();
        world.agents = self
            .agents
            .iter()
            .map(|a| AgentState {
                id: a.id,
                role: a.role,
                pose: a.pose,
                speed: a.speed,
                sensing_range: a.sensing_range,
                fov: a.fov,
                action: Action::default(),
                extent: a.extent,
            })
            .collect();
        world.objects = self.objects.clone();
        world.events = self.events.clone();
        if let Some(spawn) = &self.spawn {
            spawn_objects(spawn, &mut world, seed);
        }
        Ok(world)
    }
}

fn spawn_objects(spec: &SpawnSpec, world: &mut World, seed: u64) {
    let mut rng = stream(seed, 0, "spawn", 0);
    let mut next_id = spec.first_id;
    let agent_boxes: Vec<_> = world.agents.iter().map(|a| a.footprint()).collect();
    for group in &spec.groups {
        let [x0, y0, x1, y1] = group.region;
        for _ in 0..group.count {
            // Bounded rejection sampling; crowded regions simply get fewer objects.
            for _attempt in 0..50 {
                let x = rng.random_range(x0..=x1);
                let y = rng.random_range(y0..=y1);
                let mut speed = group.speed.sample(&mut rng);
                if group.both_directions && rng.random::<bool>() {
                    speed = -speed;
                }
                let heading = if speed < 0.0 {
                    group.heading + std::f64::consts::PI
                } else {
                    group.heading
                };
                let obj = WorldObject {
                    id: next_id,
                    class: group.class,
                    pose: Pose::new(x, y, heading),
                    extent: group.extent,
                    velocity: (speed.abs() * heading.cos(), speed.abs() * heading.sin()),
                };
                let mut grown = obj.footprint();
                grown.length += spec.min_gap_m;
                grown.width += spec.min_gap_m;
                let clash = world.objects.iter().any(|o| overlaps(&o.footprint(), &grown))
                    || agent_boxes.iter().any(|b| overlaps(b, &grown));
                if !clash {
                    world.objects.push(obj);
                    next_id += 1;
                    break;
                }
            }
        }
    }
}
