//! Scenario state and oracle sensing.
//!
//! Sensing skips learned encoders entirely: every object an agent can see is
//! rasterized straight into the BEV feature layout
//!
//! ```text
//! [ C heatmap channels | 8C regression channels | zero padding up to D ]
//! ```
//!
//! where regression block `c` holds `(dx, dy, ln l, ln w, cos yaw, sin yaw, vx, vy)`
//! for class `c`. `dx, dy` are meters from the cell center to the object center.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::drive::Action;
use crate::geometry::{wrap_angle, OrientedBox, Pose};
use crate::grids::{Grid, GridSpec};

pub const NUM_CLASSES: usize = 3;
pub const REGRESSION_PER_CLASS: usize = 8;
/// Channels populated by the oracle: heatmaps plus regression.
pub const ORACLE_CHANNELS: usize = NUM_CLASSES * (1 + REGRESSION_PER_CLASS);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Vehicle,
    Bicycle,
    Pedestrian,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; NUM_CLASSES] =
        [ObjectClass::Vehicle, ObjectClass::Bicycle, ObjectClass::Pedestrian];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Vehicle => "vehicle",
            ObjectClass::Bicycle => "bicycle",
            ObjectClass::Pedestrian => "pedestrian",
        }
    }
}

/// Heatmap channel of a class.
pub fn heatmap_channel(class: ObjectClass) -> usize {
    class.index()
}

/// First regression channel of a class.
pub fn regression_channel(class: ObjectClass) -> usize {
    NUM_CLASSES + REGRESSION_PER_CLASS * class.index()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: u32,
    pub class: ObjectClass,
    pub pose: Pose,
    /// (length, width) in meters.
    pub extent: (f64, f64),
    /// (vx, vy) in m/s.
    pub velocity: (f64, f64),
}

impl WorldObject {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::new(self.pose.x, self.pose.y, self.extent.0, self.extent.1, self.pose.yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ego,
    Vehicle,
    Rsu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub id: u32,
    pub role: Role,
    pub pose: Pose,
    pub speed: f64,
    pub sensing_range: f64,
    /// Field of view in radians; `>= 2 pi` sees all around.
    pub fov: f64,
    pub action: Action,
    /// Vehicle footprint (length, width).
    pub extent: (f64, f64),
}

impl AgentState {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::new(self.pose.x, self.pose.y, self.extent.0, self.extent.1, self.pose.yaw)
    }
}

/// Localization error applied to collaborators' poses.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseNoise {
    /// Positional std-dev per axis, meters.
    pub sigma_p: f64,
    /// Heading std-dev, degrees.
    pub sigma_r: f64,
}

impl PoseNoise {
    pub fn is_zero(&self) -> bool {
        self.sigma_p == 0.0 && self.sigma_r == 0.0
    }

    /// Von Mises concentration matching `sigma_r`.
    pub fn kappa(&self) -> f64 {
        (180.0 / (std::f64::consts::PI * self.sigma_r)).powi(2)
    }

    /// Draws `(ex, ey, eyaw)`. The heading uses the normal approximation of
    /// the von Mises distribution, variance `(pi * sigma_r / 180)^2`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64, f64) {
        let draw = |sd: f64, rng: &mut R| {
            if sd > 0.0 {
                Normal::new(0.0, sd).expect("finite sd").sample(rng)
            } else {
                0.0
            }
        };
        let ex = draw(self.sigma_p, rng);
        let ey = draw(self.sigma_p, rng);
        let eyaw = draw(std::f64::consts::PI * self.sigma_r / 180.0, rng);
        (ex, ey, eyaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptionConfig {
    /// Feature depth D.
    pub feature_channels: usize,
    /// Blob sigma as a fraction of the object's smaller extent.
    pub blob_sigma_scale: f64,
    pub min_blob_sigma_cells: f64,
    /// Blob support radius in sigmas.
    pub support_sigmas: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            blob_sigma_scale: 0.5,
            min_blob_sigma_cells: 0.5,
            support_sigmas: 2.0,
        }
    }
}

/// Kinematic bicycle parameters shared by all vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleDynamics {
    pub wheelbase: f64,
    pub max_steer_rad: f64,
    /// Acceleration at full throttle, m/s^2.
    pub max_accel: f64,
    /// Deceleration when braking, m/s^2.
    pub brake_decel: f64,
    /// Deceleration when coasting, m/s^2.
    pub coast_decel: f64,
}

impl Default for VehicleDynamics {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            max_steer_rad: 0.6,
            max_accel: 3.0,
            brake_decel: 6.0,
            coast_decel: 0.3,
        }
    }
}

/// Velocity change applied to an object once simulated time reaches `at_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldEvent {
    pub at_s: f64,
    pub object: u32,
    pub velocity: (f64, f64),
}

/// Per-cell owner of the rasterized blob, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLabels {
    height: usize,
    width: usize,
    labels: Vec<Option<u32>>,
}

impl InstanceLabels {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![None; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<u32> {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, id: Option<u32>) {
        self.labels[y * self.width + x] = id;
    }

    /// Cells owned by `id`, row-major.
    pub fn support(&self, id: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) == Some(id) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Distinct instance ids, ascending.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.labels.iter().flatten().copied().collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// What one agent perceives in one frame.
#[derive(Debug, Clone)]
pub struct Observation {
    pub heatmap: Grid,
    pub regression: Grid,
    pub features: Grid,
    pub labels: InstanceLabels,
    /// Ids of the objects that were rasterized.
    pub visible: Vec<u32>,
}

/// Rasterizes objects (already in observed poses) into the oracle feature layout.
pub fn rasterize_objects(
    spec: GridSpec,
    objects: &[WorldObject],
    cfg: &PerceptionConfig,
) -> (Grid, InstanceLabels) {
    let d = cfg.feature_channels.max(ORACLE_CHANNELS);
    let mut features = Grid::zeros(spec, d);
    let mut labels = InstanceLabels::empty(spec.height, spec.width);
    // Heat of the current owner of each cell, across classes.
    let mut owner_heat = vec![0.0f32; spec.cells()];
    for obj in objects {
        let Some((cx, cy)) = spec.cell_of(obj.pose.x, obj.pose.y) else {
            continue;
        };
        let sigma = (cfg.blob_sigma_scale * obj.extent.0.min(obj.extent.1) / spec.resolution)
            .max(cfg.min_blob_sigma_cells);
        let radius = cfg.support_sigmas * sigma;
        let r = radius.floor() as i64;
        let hc = heatmap_channel(obj.class);
        let rc = regression_channel(obj.class);
        let (yaw_s, yaw_c) = obj.pose.yaw.sin_cos();
        for oy in -r..=r {
            for ox in -r..=r {
                let d2 = (ox * ox + oy * oy) as f64;
                if d2 > radius * radius {
                    continue;
                }
                let x = cx as i64 + ox;
                let y = cy as i64 + oy;
                if x < 0 || y < 0 || x >= spec.width as i64 || y >= spec.height as i64 {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                let heat = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                let cell = features.cell_mut(x, y);
                if heat <= cell[hc] {
                    continue;
                }
                cell[hc] = heat;
                let (ccx, ccy) = spec.cell_center(x, y);
                let reg = [
                    obj.pose.x - ccx,
                    obj.pose.y - ccy,
                    obj.extent.0.ln(),
                    obj.extent.1.ln(),
                    yaw_c,
                    yaw_s,
                    obj.velocity.0,
                    obj.velocity.1,
                ];
                for (k, v) in reg.iter().enumerate() {
                    cell[rc + k] = *v as f32;
                }
                let i = y * spec.width + x;
                if heat > owner_heat[i] {
                    owner_heat[i] = heat;
                    labels.set(x, y, Some(obj.id));
                }
            }
        }
    }
    (features, labels)
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: GridSpec,
    pub time_s: f64,
    pub agents: Vec<AgentState>,
    pub objects: Vec<WorldObject>,
    pub events: Vec<WorldEvent>,
    pub dynamics: VehicleDynamics,
    pub perception: PerceptionConfig,
}

impl World {
    pub fn new(spec: GridSpec) -> Self {
        Self {
            spec,
            time_s: 0.0,
            agents: Vec::new(),
            objects: Vec::new(),
            events: Vec::new(),
            dynamics: VehicleDynamics::default(),
            perception: PerceptionConfig::default(),
        }
    }

    pub fn agent(&self, id: u32) -> Option<&AgentState> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn agent_mut(&mut self, id: u32) -> Option<&mut AgentState> {
        self.agents.iter_mut().find(|a| a.id == id)
    }

    pub fn object(&self, id: u32) -> Option<&WorldObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn set_action(&mut self, agent: u32, action: Action) {
        if let Some(a) = self.agent_mut(agent) {
            a.action = action;
        }
    }

    fn apply_due_events(&mut self) {
        let now = self.time_s + 1e-9;
        let (due, pending): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.events).into_iter().partition(|e| e.at_s <= now);
        self.events = pending;
        for ev in due {
            if let Some(o) = self.objects.iter_mut().find(|o| o.id == ev.object) {
                o.velocity = ev.velocity;
                if ev.velocity.0 != 0.0 || ev.velocity.1 != 0.0 {
                    o.pose.yaw = ev.velocity.1.atan2(ev.velocity.0);
                }
            }
        }
    }

    /// Advances the world by `dt` seconds.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "step needs a positive dt");
        self.apply_due_events();
        for o in &mut self.objects {
            o.pose.x += o.velocity.0 * dt;
            o.pose.y += o.velocity.1 * dt;
        }
        let dyn_ = &self.dynamics;
        for a in &mut self.agents {
            if a.role == Role::Rsu {
                continue;
            }
            let act = a.action;
            let accel = if act.brake {
                -dyn_.brake_decel
            } else if act.throttle > 0.0 {
                act.throttle * dyn_.max_accel
            } else {
                -dyn_.coast_decel
            };
            let steer = act.steer.clamp(-1.0, 1.0) * dyn_.max_steer_rad;
            a.pose.x += a.speed * a.pose.yaw.cos() * dt;
            a.pose.y += a.speed * a.pose.yaw.sin() * dt;
            a.pose.yaw = wrap_angle(a.pose.yaw + a.speed / dyn_.wheelbase * steer.tan() * dt);
            a.speed = (a.speed + accel * dt).max(0.0);
        }
        self.time_s += dt;
        self.apply_due_events();
    }

    /// Whether `target` is in range, inside the field of view and not fully
    /// occluded. Sample rays go to the target center and its four corners;
    /// one clear ray suffices.
    pub fn is_visible(&self, agent: &AgentState, target: &WorldObject) -> bool {
        let origin = (agent.pose.x, agent.pose.y);
        let dx = target.pose.x - origin.0;
        let dy = target.pose.y - origin.1;
        if dx.hypot(dy) > agent.sensing_range {
            return false;
        }
        if agent.fov < std::f64::consts::TAU {
            let bearing = wrap_angle(dy.atan2(dx) - agent.pose.yaw);
            if bearing.abs() > 0.5 * agent.fov {
                return false;
            }
        }
        let blockers: Vec<OrientedBox> = self
            .objects
            .iter()
            .filter(|o| o.id != target.id)
            .map(|o| o.footprint())
            .collect();
        let fp = target.footprint();
        std::iter::once((target.pose.x, target.pose.y))
            .chain(fp.corners())
            .any(|p| {
                !blockers
                    .iter()
                    .any(|b| !b.contains(origin.0, origin.1) && b.intersects_segment(origin, p))
            })
    }

    /// Oracle sensing from agent `agent_id`. Noise perturbs the agent's own
    /// pose estimate, so every observed object shifts and rotates rigidly.
    pub fn sense<R: Rng + ?Sized>(&self, agent_id: u32, noise: &PoseNoise, rng: &mut R) -> Observation {
        let agent = self.agent(agent_id).expect("sensing agent exists");
        let (ex, ey, eyaw) = noise.sample(rng);
        let (s, c) = eyaw.sin_cos();
        let perturbed = ex != 0.0 || ey != 0.0 || eyaw != 0.0;
        let mut seen = Vec::new();
        let mut visible = Vec::new();
        for obj in &self.objects {
            if !self.is_visible(agent, obj) {
                continue;
            }
            visible.push(obj.id);
            let mut o = obj.clone();
            if perturbed {
                let rx = obj.pose.x - agent.pose.x;
                let ry = obj.pose.y - agent.pose.y;
                o.pose.x = agent.pose.x + ex + c * rx - s * ry;
                o.pose.y = agent.pose.y + ey + s * rx + c * ry;
                o.pose.yaw = wrap_angle(obj.pose.yaw + eyaw);
                o.velocity = (
                    c * obj.velocity.0 - s * obj.velocity.1,
                    s * obj.velocity.0 + c * obj.velocity.1,
                );
            }
            seen.push(o);
        }
        let (features, labels) = rasterize_objects(self.spec, &seen, &self.perception);
        Observation {
            heatmap: features.channel_range(0, NUM_CLASSES),
            regression: features.channel_range(NUM_CLASSES, ORACLE_CHANNELS),
            features,
            labels,
            visible,
        }
    }
}
