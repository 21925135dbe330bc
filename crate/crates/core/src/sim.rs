//! Closed-loop episode runner.
//!
//! Each tick: every agent senses the world, the ego publishes its request
//! map, collaborators forecast and pack their features, the channel delays
//! them, and the ego fuses whatever has arrived, detects, plans and acts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{
    delivery_time, inject_loss_and_jitter, ChannelError, LatencyTraceRow, SlotSchedule, UniformRange,
};
use crate::dpp::{
    dpp_pipeline, find_blobs, CvPredictor, DppError, HeatmapHistory, PredictionErrorRow, Predictor,
    ReplayPredictor, StaticPredictor,
};
use crate::drive::{control, corridor_blocker, plan, Action, Controller, DriveError, EgoState, Plan, Route, TrajectoryRow};
use crate::fusion::{decode, fuse, nms, rasterize_occupancy_swept, Detection, DetectionFrame, FusionError, OccupancyMap};
use crate::geometry::{overlaps, OrientedBox};
use crate::grids::{Grid, GridError, GridSpec};
use crate::metrics::{
    class_merged_ap, composited_ap, driving_result, ApAccumulator, DrivingResult, Infraction, InfractionKind,
    MetricsError,
};
use crate::pragcomm::{
    aoim_request_map, baseline_request_map, comm_volume, confidence_map, message_size_bits, pack_apc, pack_baseline,
    Message, MessageHeader,
};
use crate::scenario::{Scenario, ScenarioError};
use crate::seed::stream;
use crate::world::{ObjectClass, PoseNoise, Role, World};

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Dpp(#[from] DppError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Drive(#[from] DriveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Collaboration strategy of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Ego perception only.
    NoFusion,
    /// Confidence-driven packing of current features.
    Baseline,
    /// Predicted and warped features, confidence-driven packing.
    Dpp,
    /// Predicted features with area-of-importance packing.
    DppApc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NoFusion, Method::Baseline, Method::Dpp, Method::DppApc];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoFusion => "no-fusion",
            Method::Baseline => "baseline",
            Method::Dpp => "dpp",
            Method::DppApc => "dpp-apc",
        }
    }

    fn predicts(self) -> bool {
        matches!(self, Method::Dpp | Method::DppApc)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown method {0:?}; valid: no-fusion, baseline, dpp, dpp-apc")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| UnknownMethod(s.to_string()))
    }
}

/// One transmitted feature message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageLog {
    pub t_send: f64,
    pub sender: u32,
    pub t_r: f64,
    pub n_steps: u32,
    pub tau_est_ms: f64,
    pub tx_pr_ms: f64,
    pub cardinality: usize,
    pub size_bits: u64,
    pub volume: f64,
    pub lost: bool,
}

/// Start of a braking episode caused by an obstacle in the corridor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrakeEvent {
    pub t: f64,
    pub speed: f64,
    /// Free distance between the ego front and the obstacle.
    pub gap_m: f64,
    /// Deceleration needed to stop within the gap.
    pub required_decel: f64,
    /// Needs more than the vehicle's braking capability.
    pub late: bool,
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub method: Method,
    pub seed: u64,
    /// AP accumulators at IoU 0.3, 0.5 and 0.7.
    pub ap: [ApAccumulator; 3],
    pub messages: Vec<MessageLog>,
    pub latency: Vec<LatencyTraceRow>,
    pub detections: Vec<DetectionFrame>,
    pub trajectory: Vec<TrajectoryRow>,
    pub infractions: Vec<Infraction>,
    pub brakes: Vec<BrakeEvent>,
    pub prediction_errors: Vec<PredictionErrorRow>,
    pub driving: DrivingResult,
    /// The ego left its route and the episode ended early.
    pub route_lost: bool,
}

pub const IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Per-run scalar metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub ap30: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub composited_ap: f64,
    pub messages: usize,
    pub mean_cardinality: f64,
    pub mean_volume: f64,
    pub mean_latency_ms: f64,
    pub mean_tx_pr_ms: f64,
    pub route_completion: f64,
    pub infraction_penalty: f64,
    pub driving_score: f64,
    pub pedestrian_collisions: u32,
    pub late_brakes: usize,
}

impl RunLog {
    pub fn merged_ap(&self, threshold_index: usize, scenario: &Scenario) -> f64 {
        class_merged_ap(self.ap[threshold_index].per_class(), scenario.eval.profile)
    }

    pub fn summary(&self, scenario: &Scenario) -> RunSummary {
        let ap30 = self.merged_ap(0, scenario);
        let ap50 = self.merged_ap(1, scenario);
        let ap70 = self.merged_ap(2, scenario);
        let mean = |f: &dyn Fn(&MessageLog) -> f64| {
            if self.messages.is_empty() {
                0.0
            } else {
                self.messages.iter().map(f).sum::<f64>() / self.messages.len() as f64
            }
        };
        RunSummary {
            method: self.method,
            seed: self.seed,
            ap30,
            ap50,
            ap70,
            composited_ap: composited_ap(ap30, ap50, ap70),
            messages: self.messages.len(),
            mean_cardinality: mean(&|m| m.cardinality as f64),
            mean_volume: mean(&|m| m.volume),
            mean_latency_ms: mean(&|m| m.t_r - m.t_send),
            mean_tx_pr_ms: mean(&|m| m.tx_pr_ms),
            route_completion: self.driving.route_completion,
            infraction_penalty: self.driving.infraction_penalty,
            driving_score: self.driving.driving_score,
            pedestrian_collisions: self.driving.pedestrian_collisions,
            late_brakes: self.brakes.iter().filter(|b| b.late).count(),
        }
    }

    pub fn collided_with_pedestrian(&self) -> bool {
        self.driving.pedestrian_collisions > 0
    }
}

struct Driver {
    route: Route,
    target_speed: f64,
    controller: Controller,
}

fn make_predictor(
    name: &str,
    cfg: &crate::dpp::DppConfig,
    world: &World,
    sender: u32,
    n: u32,
    dt_s: f64,
) -> Box<dyn Predictor> {
    match name {
        "static" => Box::new(StaticPredictor),
        "oracle" => {
            // Future frames of the sender rendered from a copy of the world.
            let mut future = world.clone();
            let mut rng = stream(0, 0, "oracle", 0);
            let frames: Vec<Grid> = (0..n)
                .map(|_| {
                    future.step(dt_s);
                    future.sense(sender, &PoseNoise::default(), &mut rng).heatmap
                })
                .collect();
            Box::new(ReplayPredictor::new(frames))
        }
        _ => Box::new(CvPredictor::new(cfg.clone())),
    }
}

struct PendingPrediction {
    due_tick: usize,
    row_template: PredictionErrorRow,
    objects: Vec<u32>,
    peaks: Vec<(usize, usize)>,
}

fn ground_truth(world: &World, ego: (f64, f64), range: f64, visible: &[u32]) -> Vec<(ObjectClass, OrientedBox)> {
    world
        .objects
        .iter()
        .filter(|o| (o.pose.x - ego.0).hypot(o.pose.y - ego.1) <= range)
        .filter(|o| world.spec.cell_of(o.pose.x, o.pose.y).is_some())
        .filter(|o| visible.binary_search(&o.id).is_ok())
        .map(|o| (o.class, o.footprint()))
        .collect()
}

/// Runs one episode of `scenario` with `method`; all randomness derives from `seed`.
pub fn run(scenario: &Scenario, method: Method, seed: u64) -> Result<RunLog, SimError> {
    scenario.validate()?;
    let mut world = scenario.build_world(seed)?;
    let spec: GridSpec = world.spec;
    let dt_ms = scenario.tick_ms;
    let dt_s = dt_ms / 1e3;
    let ticks = (scenario.duration_s * 1e3 / dt_ms).round() as usize;
    let proto = &scenario.protocol;
    let schedule = SlotSchedule::new(dt_ms / 2.0)?;
    let ego_id = scenario.ego()?.id;
    let d = world.perception.feature_channels.max(crate::world::ORACLE_CHANNELS);
    let full_size = message_size_bits(spec.cells(), d);

    let mut drivers: BTreeMap<u32, Driver> = BTreeMap::new();
    for a in &scenario.agents {
        if a.role != Role::Rsu && a.route.len() >= 2 {
            drivers.insert(
                a.id,
                Driver {
                    route: Route::new(a.route.clone())?,
                    target_speed: a.target_speed,
                    controller: Controller::new(&scenario.drive),
                },
            );
        }
    }
    let ego_route = drivers[&ego_id].route.clone();
    let senders: Vec<u32> = scenario.agents.iter().filter(|a| a.id != ego_id).map(|a| a.id).collect();
    let mut histories: BTreeMap<u32, HeatmapHistory> = BTreeMap::new();
    for &s in &senders {
        histories.insert(s, HeatmapHistory::new(proto.history, Some(dt_ms))?);
    }
    let mut prev_size: BTreeMap<u32, u64> = BTreeMap::new();
    let mut inbox: Vec<Message> = Vec::new();
    let mut prev_plan: Option<Plan> = None;
    let mut occupancy_history: Vec<OccupancyMap> = Vec::new();
    let mut was_blocked = false;
    let mut pending: Vec<PendingPrediction> = Vec::new();
    let mut hit: Vec<u32> = Vec::new();
    let mut route_lost = false;

    let mut log = RunLog {
        method,
        seed,
        ap: IOU_THRESHOLDS.map(ApAccumulator::new),
        messages: Vec::new(),
        latency: Vec::new(),
        detections: Vec::new(),
        trajectory: Vec::new(),
        infractions: Vec::new(),
        brakes: Vec::new(),
        prediction_errors: Vec::new(),
        driving: DrivingResult {
            route_completion: 0.0,
            pedestrian_collisions: 0,
            vehicle_collisions: 0,
            layout_collisions: 0,
            infraction_penalty: 1.0,
            driving_score: 0.0,
        },
        route_lost: false,
    };

    for k in 0..=ticks {
        let t_ms = k as f64 * dt_ms;

        // Prediction errors that have come due.
        pending.retain(|p| {
            if p.due_tick != k {
                return true;
            }
            for &id in &p.objects {
                let Some(obj) = world.object(id) else { continue };
                let Some((gx, gy)) = spec.cell_of(obj.pose.x, obj.pose.y) else { continue };
                let err = p
                    .peaks
                    .iter()
                    .map(|&(x, y)| (x as f64 - gx as f64).hypot(y as f64 - gy as f64))
                    .fold(f64::INFINITY, f64::min);
                if err.is_finite() {
                    log.prediction_errors.push(PredictionErrorRow {
                        object: id,
                        error_cells: err,
                        ..p.row_template.clone()
                    });
                }
            }
            false
        });

        // Sensing.
        let mut obs = BTreeMap::new();
        for a in &world.agents {
            let noise = if a.id == ego_id { PoseNoise::default() } else { scenario.noise };
            let mut rng = stream(seed, a.id as u64, "pose", k as u64);
            obs.insert(a.id, world.sense(a.id, &noise, &mut rng));
        }
        let mut visible: Vec<u32> = obs.values().flat_map(|o| o.visible.iter().copied()).collect();
        visible.sort_unstable();
        visible.dedup();

        let ego_state = world.agent(ego_id).expect("ego exists").clone();
        let ego_obs = &obs[&ego_id];
        let ego_conf = confidence_map(&ego_obs.heatmap, proto.confidence_sigma_cells);

        // Request map broadcast by the ego.
        let request = match method {
            Method::DppApc => prev_plan
                .as_ref()
                .and_then(|p| {
                    aoim_request_map(
                        &p.waypoints,
                        (ego_state.pose.x, ego_state.pose.y),
                        spec,
                        proto.sigma_f_m,
                        proto.normalize_request,
                    )
                })
                .unwrap_or_else(|| baseline_request_map(&ego_conf)),
            _ => baseline_request_map(&ego_conf),
        };

        // Collaborators pack and send.
        for &j in &senders {
            let o = &obs[&j];
            let history = histories.get_mut(&j).expect("history per sender");
            history.push(t_ms, o.heatmap.clone())?;
            if method == Method::NoFusion {
                continue;
            }
            let sender = world.agent(j).expect("sender exists");
            let dist = sender.pose.distance_to(&ego_state.pose);
            let conf = confidence_map(&o.heatmap, proto.confidence_sigma_cells);
            let header = MessageHeader {
                sender: j,
                receiver: ego_id,
                t_send: t_ms,
            };
            let size_est = prev_size.get(&j).copied().unwrap_or(full_size);
            let tau_est = scenario.channel.expected(size_est, dist)?.total().max(0.0);
            let (msg, n_steps) = if method.predicts() && history.len() >= 2 {
                let n = crate::channel::discretize_latency(tau_est, dt_ms)?;
                let mut predictor = make_predictor(&proto.predictor, &proto.dpp, &world, j, n, dt_s);
                let out = dpp_pipeline(
                    &o.features,
                    history,
                    tau_est,
                    dt_ms,
                    predictor.as_mut(),
                    &proto.dpp,
                    proto.confidence_sigma_cells,
                )?;
                if out.n_steps > 0 {
                    let peaks = find_blobs(&out.predicted_heatmap, proto.dpp.blob_threshold)
                        .into_iter()
                        .map(|b| b.peak)
                        .collect();
                    pending.push(PendingPrediction {
                        due_tick: k + out.n_steps as usize,
                        row_template: PredictionErrorRow {
                            t_send: t_ms,
                            sender: j,
                            object: 0,
                            n_steps: out.n_steps,
                            error_cells: 0.0,
                        },
                        objects: o.visible.clone(),
                        peaks,
                    });
                }
                let msg = if method == Method::DppApc {
                    pack_apc(&out.features, &out.predicted_conf, &conf, &request, out.n_steps, proto.p_thre, header)?
                } else {
                    pack_baseline(&out.features, &out.predicted_conf, &request, proto.p_thre, header)?
                };
                (msg, out.n_steps)
            } else if method == Method::DppApc {
                (pack_apc(&o.features, &conf, &conf, &request, 0, proto.p_thre, header)?, 0)
            } else {
                (pack_baseline(&o.features, &conf, &request, proto.p_thre, header)?, 0)
            };
            prev_size.insert(j, msg.size_bits);

            let mut rng = stream(seed, j as u64, "latency", k as u64);
            let breakdown = scenario.channel.sample(msg.size_bits, dist, &mut rng)?;
            let mut msg = msg;
            msg.t_r = delivery_time(t_ms, &schedule, &breakdown);
            let mut rng = stream(seed, j as u64, "loss", k as u64);
            let delivered = inject_loss_and_jitter(
                msg,
                proto.packet_loss,
                UniformRange::symmetric(proto.jitter_ms),
                &mut rng,
            );
            let m = &delivered.message;
            log.messages.push(MessageLog {
                t_send: t_ms,
                sender: j,
                t_r: m.t_r,
                n_steps,
                tau_est_ms: tau_est,
                tx_pr_ms: breakdown.tx_pr,
                cardinality: m.mask.cardinality(),
                size_bits: m.size_bits,
                volume: comm_volume(m.mask.cardinality(), spec.height, spec.width, d, proto.volume_mode),
                lost: delivered.lost,
            });
            log.latency.push(LatencyTraceRow {
                sender: j,
                receiver: ego_id,
                t_send: t_ms,
                t_r: m.t_r,
                ext: breakdown.ext,
                asyn: breakdown.asyn,
                tx_pr: breakdown.tx_pr,
                tx_net: breakdown.tx_net,
                dm: breakdown.dm,
                queue: breakdown.queue,
            });
            inbox.push(delivered.message);
        }

        // Latest arrived message per sender.
        inbox.retain(|m| t_ms - m.t_send <= proto.max_age_ms);
        let mut latest: BTreeMap<u32, &Message> = BTreeMap::new();
        for m in inbox.iter().filter(|m| m.t_r <= t_ms) {
            let slot = latest.entry(m.sender).or_insert(m);
            if m.t_send > slot.t_send {
                *slot = m;
            }
        }
        let arrived: Vec<Message> = latest.into_values().cloned().collect();
        let fused = fuse(&ego_obs.features, &ego_conf, &arrived)?;
        let dets: Vec<Detection> = nms(&decode(&fused, scenario.eval.peak_thresh)?, scenario.eval.nms_iou);

        // Evaluation.
        let ego_xy = (ego_state.pose.x, ego_state.pose.y);
        if k >= scenario.eval.warmup_ticks {
            let all_ids: Vec<u32>;
            let vis: &[u32] = if scenario.eval.require_visible {
                &visible
            } else {
                all_ids = {
                    let mut v: Vec<u32> = world.objects.iter().map(|o| o.id).collect();
                    v.sort_unstable();
                    v
                };
                &all_ids
            };
            let gts = ground_truth(&world, ego_xy, scenario.eval.range_m, vis);
            let in_range: Vec<Detection> = dets
                .iter()
                .filter(|d| (d.center.0 - ego_xy.0).hypot(d.center.1 - ego_xy.1) <= scenario.eval.range_m)
                .cloned()
                .collect();
            for acc in &mut log.ap {
                acc.add_frame(&in_range, &gts);
            }
        }
        log.detections.push(DetectionFrame {
            t: t_ms / 1e3,
            detections: dets.clone(),
        });

        // Planning and control for the ego.
        let occ = rasterize_occupancy_swept(&dets, spec, scenario.drive.hazard_horizon_s, dt_s);
        occupancy_history.push(occ);
        if occupancy_history.len() > scenario.drive.history_frames.max(1) {
            occupancy_history.remove(0);
        }
        let ego_drive = EgoState {
            pose: ego_state.pose,
            speed: ego_state.speed,
            extent: ego_state.extent,
        };
        let driver = drivers.get_mut(&ego_id).expect("ego has a route");
        let ego_plan = match plan(
            &occupancy_history,
            &driver.route,
            &ego_drive,
            driver.target_speed,
            dt_s,
            &scenario.drive,
        ) {
            Ok(p) => p,
            Err(DriveError::RouteLost { .. }) => {
                route_lost = true;
                break;
            }
            Err(e) => return Err(e.into()),
        };
        if ego_plan.blocked && !was_blocked {
            let occ = occupancy_history.last().expect("just pushed");
            if let Some((rel, _, _)) = corridor_blocker(occ, &driver.route, &ego_drive, &scenario.drive) {
                let gap = (rel - 0.5 * ego_state.extent.0).max(0.0);
                let v = ego_state.speed;
                let required = if v <= 1e-6 { 0.0 } else { v * v / (2.0 * gap.max(0.05)) };
                log.brakes.push(BrakeEvent {
                    t: t_ms / 1e3,
                    speed: v,
                    gap_m: gap,
                    required_decel: required,
                    late: required > world.dynamics.brake_decel,
                });
            }
        }
        was_blocked = ego_plan.blocked;
        let action = control(&ego_plan, &ego_state.pose, ego_state.speed, &mut driver.controller, dt_s);
        world.set_action(ego_id, action);
        log.trajectory.push(TrajectoryRow {
            t: t_ms / 1e3,
            x: ego_state.pose.x,
            y: ego_state.pose.y,
            yaw: ego_state.pose.yaw,
            speed: ego_state.speed,
            steer: action.steer,
            throttle: action.throttle,
            brake: action.brake,
        });
        prev_plan = Some(ego_plan);

        // Collaborating vehicles follow their routes blindly.
        for (&id, drv) in drivers.iter_mut().filter(|(&id, _)| id != ego_id) {
            let a = world.agent(id).expect("driver agent exists");
            let st = EgoState {
                pose: a.pose,
                speed: a.speed,
                extent: a.extent,
            };
            let act = match plan(&[], &drv.route, &st, drv.target_speed, dt_s, &scenario.drive) {
                Ok(p) => control(&p, &a.pose, a.speed, &mut drv.controller, dt_s),
                Err(_) => Action {
                    steer: 0.0,
                    throttle: 0.0,
                    brake: true,
                },
            };
            world.set_action(id, act);
        }

        if k == ticks {
            break;
        }
        world.step(dt_s);

        // Contacts after the move, one infraction per object.
        let ego = world.agent(ego_id).expect("ego exists");
        let fp = ego.footprint();
        for o in &world.objects {
            if !hit.contains(&o.id) && overlaps(&fp, &o.footprint()) {
                hit.push(o.id);
                let kind = match o.class {
                    ObjectClass::Pedestrian => InfractionKind::PedestrianCollision,
                    _ => InfractionKind::VehicleCollision,
                };
                log.infractions.push(Infraction {
                    t: world.time_s,
                    kind,
                    other: Some(o.id),
                });
            }
        }
    }

    log.route_lost = route_lost;
    log.driving = driving_result(&log.trajectory, &ego_route, &log.infractions, &scenario.penalty)?;
    Ok(log)
}
