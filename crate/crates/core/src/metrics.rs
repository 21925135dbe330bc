//! Detection and closed-loop driving metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drive::{Route, TrajectoryRow};
use crate::fusion::Detection;
use crate::geometry::{iou, OrientedBox};
use crate::world::{ObjectClass, NUM_CLASSES};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("weights must be nonnegative and sum to 1, got {0:?}")]
    Weights(Vec<f64>),
    #[error("penalty coefficient {0} outside (0, 1]")]
    Coefficient(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrCurvePoint {
    pub precision: f64,
    pub recall: f64,
}

/// Matches one frame's scored boxes against its ground truth. Boxes are
/// visited in descending score; each takes the unmatched ground-truth box
/// of highest IoU if that IoU reaches `iou_thresh`. Returns `(score, is_tp)`.
pub fn match_frame(dets: &[(f64, OrientedBox)], gts: &[OrientedBox], iou_thresh: f64) -> Vec<(f64, bool)> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].0.total_cmp(&dets[a].0));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|i| {
            let (score, ref b) = dets[i];
            let best = gts
                .iter()
                .enumerate()
                .filter(|(j, _)| !taken[*j])
                .map(|(j, g)| (j, iou(b, g)))
                .filter(|&(_, v)| v >= iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    (score, true)
                }
                None => (score, false),
            }
        })
        .collect()
}

/// Precision/recall after each detection in descending score order.
pub fn pr_curve(records: &[(f64, bool)], num_gt: usize) -> Vec<PrCurvePoint> {
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &(_, hit))| {
            tp += hit as usize;
            PrCurvePoint {
                precision: tp as f64 / (k + 1) as f64,
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            }
        })
        .collect()
}

/// All-point interpolated AP. With no ground truth the AP is 1 when there
/// are also no detections and 0 otherwise.
pub fn average_precision(records: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return if records.is_empty() { 1.0 } else { 0.0 };
    }
    let curve = pr_curve(records, num_gt);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, p) in curve.iter().enumerate() {
        if p.recall > prev_recall {
            let envelope = curve[k..].iter().map(|q| q.precision).fold(0.0, f64::max);
            ap += (p.recall - prev_recall) * envelope;
            prev_recall = p.recall;
        }
    }
    ap
}

/// Per-class AP at one IoU threshold, accumulated over frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ApAccumulator {
    pub iou_thresh: f64,
    records: [Vec<(f64, bool)>; NUM_CLASSES],
    num_gt: [usize; NUM_CLASSES],
}

impl ApAccumulator {
    pub fn new(iou_thresh: f64) -> Self {
        Self {
            iou_thresh,
            records: Default::default(),
            num_gt: [0; NUM_CLASSES],
        }
    }

    pub fn add_frame(&mut self, dets: &[Detection], gts: &[(ObjectClass, OrientedBox)]) {
        for class in ObjectClass::ALL {
            let d: Vec<(f64, OrientedBox)> = dets
                .iter()
                .filter(|d| d.class == class)
                .map(|d| (d.score, d.footprint()))
                .collect();
            let g: Vec<OrientedBox> = gts.iter().filter(|g| g.0 == class).map(|g| g.1).collect();
            self.num_gt[class.index()] += g.len();
            self.records[class.index()].extend(match_frame(&d, &g, self.iou_thresh));
        }
    }

    pub fn ap(&self, class: ObjectClass) -> f64 {
        average_precision(&self.records[class.index()], self.num_gt[class.index()])
    }

    pub fn per_class(&self) -> [f64; NUM_CLASSES] {
        ObjectClass::ALL.map(|c| self.ap(c))
    }

    pub fn num_gt(&self, class: ObjectClass) -> usize {
        self.num_gt[class.index()]
    }
}

fn weighted(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| v * w).sum()
}

pub const COMPOSITED_WEIGHTS: [f64; 3] = [0.3, 0.3, 0.4];

pub fn composited_ap(ap30: f64, ap50: f64, ap70: f64) -> f64 {
    weighted(&[ap30, ap50, ap70], &COMPOSITED_WEIGHTS)
}

/// Class weighting (vehicle, bicycle, pedestrian).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightProfile {
    #[default]
    Latency,
    Noise,
}

impl WeightProfile {
    pub fn weights(self) -> [f64; NUM_CLASSES] {
        match self {
            Self::Latency => [0.4, 0.4, 0.2],
            Self::Noise => [0.8, 0.1, 0.1],
        }
    }
}

pub fn class_merged_ap(per_class: [f64; NUM_CLASSES], profile: WeightProfile) -> f64 {
    weighted(&per_class, &profile.weights())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    PedestrianCollision,
    VehicleCollision,
    LayoutCollision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub t: f64,
    pub kind: InfractionKind,
    /// Object or agent hit, if any.
    pub other: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub pedestrian: f64,
    pub vehicle: f64,
    pub layout: f64,
    /// Frames farther than this from the route count as off-road and
    /// scale route completion down.
    pub off_road_offset_m: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            pedestrian: 0.5,
            vehicle: 0.6,
            layout: 0.65,
            off_road_offset_m: 3.5,
        }
    }
}

impl PenaltyConfig {
    pub fn coefficient(&self, kind: InfractionKind) -> f64 {
        match kind {
            InfractionKind::PedestrianCollision => self.pedestrian,
            InfractionKind::VehicleCollision => self.vehicle,
            InfractionKind::LayoutCollision => self.layout,
        }
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        for c in [self.pedestrian, self.vehicle, self.layout] {
            if !(c > 0.0 && c <= 1.0) {
                return Err(MetricsError::Coefficient(c));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivingResult {
    /// Percent.
    pub route_completion: f64,
    pub pedestrian_collisions: u32,
    pub vehicle_collisions: u32,
    pub layout_collisions: u32,
    pub infraction_penalty: f64,
    pub driving_score: f64,
}

pub fn infraction_penalty(counts: &[(InfractionKind, u32)], cfg: &PenaltyConfig) -> f64 {
    counts
        .iter()
        .map(|&(k, n)| cfg.coefficient(k).powi(n as i32))
        .product()
}

/// Route completion is the farthest arc length reached over the route
/// length, scaled by the share of frames spent on the road.
pub fn driving_result(
    trajectory: &[TrajectoryRow],
    route: &Route,
    infractions: &[Infraction],
    cfg: &PenaltyConfig,
) -> Result<DrivingResult, MetricsError> {
    cfg.validate()?;
    let mut reached: f64 = 0.0;
    let mut off_road = 0usize;
    for row in trajectory {
        let (s, offset) = route.project(row.x, row.y);
        if offset > cfg.off_road_offset_m {
            off_road += 1;
        } else {
            reached = reached.max(s);
        }
    }
    let on_road = if trajectory.is_empty() {
        1.0
    } else {
        1.0 - off_road as f64 / trajectory.len() as f64
    };
    let rc = if route.length() > 0.0 {
        (100.0 * reached / route.length()).clamp(0.0, 100.0) * on_road
    } else {
        100.0
    };
    let count = |k| infractions.iter().filter(|i| i.kind == k).count() as u32;
    let ped = count(InfractionKind::PedestrianCollision);
    let veh = count(InfractionKind::VehicleCollision);
    let lay = count(InfractionKind::LayoutCollision);
    let penalty = infraction_penalty(
        &[
            (InfractionKind::PedestrianCollision, ped),
            (InfractionKind::VehicleCollision, veh),
            (InfractionKind::LayoutCollision, lay),
        ],
        cfg,
    );
    Ok(DrivingResult {
        route_completion: rc,
        pedestrian_collisions: ped,
        vehicle_collisions: veh,
        layout_collisions: lay,
        infraction_penalty: penalty,
        driving_score: rc * penalty,
    })
}

/// Sample mean and the half width of its normal 95% interval.
pub fn mean_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}
