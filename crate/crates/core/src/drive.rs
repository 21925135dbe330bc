//! Rule-based waypoint planning over occupancy maps and PID control.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::OccupancyMap;
use crate::geometry::{wrap_angle, Pose};

#[derive(Debug, Error, PartialEq)]
pub enum DriveError {
    #[error("route is empty")]
    EmptyRoute,
    #[error("ego is {offset_m:.2} m off route (tolerance {tolerance_m} m)")]
    RouteLost { offset_m: f64, tolerance_m: f64 },
}

/// Control command. Positive steer turns left (counter-clockwise).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    /// In `[-1, 1]`.
    pub steer: f64,
    /// In `[0, 1]`; zero whenever `brake` is set.
    pub throttle: f64,
    pub brake: bool,
}

/// Polyline with cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    points: Vec<(f64, f64)>,
    cumulative: Vec<f64>,
}

impl Route {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, DriveError> {
        if points.is_empty() {
            return Err(DriveError::EmptyRoute);
        }
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
            cumulative.push(acc);
        }
        Ok(Self { points, cumulative })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length of the closest route point and the distance to it.
    pub fn project(&self, px: f64, py: f64) -> (f64, f64) {
        if self.points.len() == 1 {
            let p = self.points[0];
            return (0.0, (px - p.0).hypot(py - p.1));
        }
        let mut best = (0.0, f64::INFINITY);
        for (i, w) in self.points.windows(2).enumerate() {
            let (ax, ay) = w[0];
            let (bx, by) = w[1];
            let (dx, dy) = (bx - ax, by - ay);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (ax + t * dx, ay + t * dy);
            let d = (px - qx).hypot(py - qy);
            if d < best.1 {
                best = (self.cumulative[i] + t * len2.sqrt(), d);
            }
        }
        best
    }

    /// Point at arc length `s`, clamped to the route ends.
    pub fn point_at(&self, s: f64) -> (f64, f64) {
        if self.points.len() == 1 || s <= 0.0 {
            return self.points[0];
        }
        if s >= self.length() {
            return *self.points.last().unwrap();
        }
        let i = self.cumulative.partition_point(|&c| c <= s).max(1) - 1;
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = if seg > 0.0 { (s - self.cumulative[i]) / seg } else { 0.0 };
        let (ax, ay) = self.points[i];
        let (bx, by) = self.points[i + 1];
        (ax + t * (bx - ax), ay + t * (by - ay))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub waypoints: Vec<(f64, f64)>,
    /// Time between consecutive waypoints, seconds.
    pub interval_s: f64,
    /// Set when an occupied cell blocked the corridor.
    pub blocked: bool,
}

impl Plan {
    /// Speed implied by the waypoint spacing.
    pub fn implied_speed(&self) -> f64 {
        let n = self.waypoints.len();
        if n < 2 || self.interval_s <= 0.0 {
            return 0.0;
        }
        let path: f64 = self
            .waypoints
            .windows(2)
            .map(|w| (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1))
            .sum();
        path / ((n - 1) as f64 * self.interval_s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriveConfig {
    /// Waypoints per plan.
    pub waypoints: usize,
    /// Occupancy frames handed to the planner.
    pub history_frames: usize,
    pub route_tolerance_m: f64,
    /// Clearance added to half the ego width on each side of the corridor.
    pub corridor_margin_m: f64,
    pub min_lookahead_m: f64,
    /// Deceleration used to size the corridor lookahead, m/s^2.
    pub comfort_decel: f64,
    /// Extra distance beyond the comfortable stopping distance.
    pub lookahead_buffer_m: f64,
    pub lateral_gains: (f64, f64, f64),
    pub longitudinal_gains: (f64, f64, f64),
    pub integral_limit: f64,
    /// Brake once the longitudinal PID output falls below minus this value.
    pub brake_threshold: f64,
    /// Distance to the steering target waypoint.
    pub steer_lookahead_m: f64,
    /// Detected objects are extrapolated at constant velocity this far
    /// ahead when building the occupancy map, seconds.
    pub hazard_horizon_s: f64,
}

impl Default for DriveConfig {
    fn default() -> Self {
        Self {
            waypoints: 10,
            history_frames: 5,
            route_tolerance_m: 5.0,
            corridor_margin_m: 0.5,
            min_lookahead_m: 8.0,
            comfort_decel: 3.0,
            lookahead_buffer_m: 4.0,
            lateral_gains: (1.0, 0.0, 0.2),
            longitudinal_gains: (0.5, 0.05, 0.0),
            integral_limit: 10.0,
            brake_threshold: 1.0,
            steer_lookahead_m: 3.0,
            hazard_horizon_s: 1.5,
        }
    }
}

impl DriveConfig {
    pub fn lookahead(&self, speed: f64) -> f64 {
        (speed * speed / (2.0 * self.comfort_decel) + self.lookahead_buffer_m).max(self.min_lookahead_m)
    }
}

/// Ego geometry the planner needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoState {
    pub pose: Pose,
    pub speed: f64,
    /// (length, width)
    pub extent: (f64, f64),
}

/// First occupied cell inside the corridor ahead of the ego: `(arc length ahead, x, y)`.
pub fn corridor_blocker(
    occupancy: &OccupancyMap,
    route: &Route,
    ego: &EgoState,
    cfg: &DriveConfig,
) -> Option<(f64, f64, f64)> {
    let (s0, _) = route.project(ego.pose.x, ego.pose.y);
    let half = 0.5 * ego.extent.1 + cfg.corridor_margin_m;
    let ahead = cfg.lookahead(ego.speed);
    let behind = 0.5 * ego.extent.0;
    let spec = occupancy.grid().spec();
    let mut best: Option<(f64, f64, f64)> = None;
    for (x, y) in occupancy.occupied_cells() {
        let (px, py) = spec.cell_center(x, y);
        // Cheap reject before projecting.
        if (px - ego.pose.x).hypot(py - ego.pose.y) > ahead + behind + half + 1.0 {
            continue;
        }
        let (s, lat) = route.project(px, py);
        let rel = s - s0;
        if lat <= half && rel >= -behind && rel <= ahead && best.is_none_or(|b| rel < b.0) {
            best = Some((rel, px, py));
        }
    }
    best
}

/// Waypoints along the route spaced `target_speed * interval_s`, or a braking
/// plan that holds the current position when the corridor is blocked in the
/// latest occupancy frame.
pub fn plan(
    occupancy_history: &[OccupancyMap],
    route: &Route,
    ego: &EgoState,
    target_speed: f64,
    interval_s: f64,
    cfg: &DriveConfig,
) -> Result<Plan, DriveError> {
    let (s0, offset) = route.project(ego.pose.x, ego.pose.y);
    if offset > cfg.route_tolerance_m {
        return Err(DriveError::RouteLost {
            offset_m: offset,
            tolerance_m: cfg.route_tolerance_m,
        });
    }
    let blocked = occupancy_history
        .last()
        .is_some_and(|occ| corridor_blocker(occ, route, ego, cfg).is_some());
    let spacing = if blocked { 0.0 } else { target_speed.max(0.0) * interval_s };
    let waypoints = if blocked {
        vec![(ego.pose.x, ego.pose.y); cfg.waypoints]
    } else {
        (1..=cfg.waypoints)
            .map(|k| route.point_at(s0 + k as f64 * spacing))
            .collect()
    };
    Ok(Plan {
        waypoints,
        interval_s,
        blocked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral: f64,
    pub prev_error: Option<f64>,
    pub integral_limit: f64,
}

impl PidState {
    pub fn new((kp, ki, kd): (f64, f64, f64), integral_limit: f64) -> Self {
        Self {
            kp,
            ki,
            kd,
            integral: 0.0,
            prev_error: None,
            integral_limit,
        }
    }

    pub fn step(&mut self, error: f64, dt: f64) -> f64 {
        self.integral = (self.integral + error * dt).clamp(-self.integral_limit, self.integral_limit);
        let derivative = match self.prev_error {
            Some(prev) if dt > 0.0 => (error - prev) / dt,
            _ => 0.0,
        };
        self.prev_error = Some(error);
        self.kp * error + self.ki * self.integral + self.kd * derivative
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
        self.prev_error = None;
    }
}

/// Lateral and longitudinal PID pair owned by one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub lateral: PidState,
    pub longitudinal: PidState,
    pub brake_threshold: f64,
    pub steer_lookahead_m: f64,
}

impl Controller {
    pub fn new(cfg: &DriveConfig) -> Self {
        Self {
            lateral: PidState::new(cfg.lateral_gains, cfg.integral_limit),
            longitudinal: PidState::new(cfg.longitudinal_gains, cfg.integral_limit),
            brake_threshold: cfg.brake_threshold,
            steer_lookahead_m: cfg.steer_lookahead_m,
        }
    }
}

/// Heading error to the first waypoint at least `lookahead` away (or the last one).
pub fn heading_error(plan: &Plan, pose: &Pose, lookahead: f64) -> f64 {
    let target = plan
        .waypoints
        .iter()
        .find(|w| (w.0 - pose.x).hypot(w.1 - pose.y) >= lookahead)
        .or(plan.waypoints.last());
    match target {
        Some(&(tx, ty)) if (tx - pose.x).hypot(ty - pose.y) > 0.5 => {
            wrap_angle((ty - pose.y).atan2(tx - pose.x) - pose.yaw)
        }
        _ => 0.0,
    }
}

pub fn control(plan: &Plan, pose: &Pose, speed: f64, pid: &mut Controller, dt: f64) -> Action {
    assert!(dt > 0.0, "control needs a positive dt");
    let steer = pid
        .lateral
        .step(heading_error(plan, pose, pid.steer_lookahead_m), dt)
        .clamp(-1.0, 1.0);
    let target = plan.implied_speed();
    let u = pid.longitudinal.step(target - speed, dt);
    let stop_demanded = target <= 1e-6 && speed > 1e-3;
    if stop_demanded || u < -pid.brake_threshold {
        if stop_demanded {
            pid.longitudinal.integral = 0.0;
        }
        Action {
            steer,
            throttle: 0.0,
            brake: true,
        }
    } else {
        Action {
            steer,
            throttle: u.clamp(0.0, 1.0),
            brake: false,
        }
    }
}

/// One row of a trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub speed: f64,
    pub steer: f64,
    pub throttle: f64,
    pub brake: bool,
}

pub fn write_trajectory_csv<W: std::io::Write>(rows: &[TrajectoryRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv<R: std::io::Read>(input: R) -> csv::Result<Vec<TrajectoryRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
