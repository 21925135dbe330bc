//! Receiver-side fusion, box decoding and occupancy.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, OrientedBox};
use crate::grids::{Grid, GridError, GridSpec};
use crate::pragcomm::Message;
use crate::world::{heatmap_channel, regression_channel, ObjectClass, NUM_CLASSES, REGRESSION_PER_CLASS};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("feature grid has {got} channels, decoding needs at least {need}")]
    TooFewChannels { got: usize, need: usize },
    #[error("occupancy grid must have one channel of 0/1 values")]
    Occupancy,
    #[error("detections io: {0}")]
    Io(#[from] std::io::Error),
    #[error("detections json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Confidence-gated attention over the ego and all received messages.
///
/// At every cell the candidates are the ego feature and each message whose
/// mask covers the cell. Scores are `softmax(F_ego . F_j / sqrt(D))`, scaled
/// by each source's confidence and renormalized. A cell where every scaled
/// score vanishes keeps the ego feature.
pub fn fuse(ego_features: &Grid, ego_conf: &Grid, messages: &[Message]) -> Result<Grid, FusionError> {
    let shape_err = |g: &Grid| GridError::ShapeMismatch {
        left: (ego_features.height(), ego_features.width()),
        right: (g.height(), g.width()),
    };
    if !ego_features.same_shape(ego_conf) {
        return Err(shape_err(ego_conf).into());
    }
    let d = ego_features.channels();
    for m in messages {
        if !m.payload.same_shape(ego_features) || !m.confidence.same_shape(ego_features) {
            return Err(shape_err(&m.payload).into());
        }
        if m.payload.channels() != d {
            return Err(GridError::ChannelMismatch {
                left: d,
                right: m.payload.channels(),
            }
            .into());
        }
    }
    // Fixed order so the result does not depend on arrival order.
    let mut order: Vec<&Message> = messages.iter().collect();
    order.sort_by(|a, b| a.sender.cmp(&b.sender).then(a.t_send.total_cmp(&b.t_send)));

    let scale = 1.0 / (d as f64).sqrt();
    let mut out = ego_features.clone();
    let mut logits = Vec::with_capacity(order.len() + 1);
    let mut sources: Vec<(&[f32], f64)> = Vec::with_capacity(order.len() + 1);
    let mut acc = vec![0.0f64; d];
    for y in 0..ego_features.height() {
        for x in 0..ego_features.width() {
            sources.clear();
            sources.push((ego_features.cell(x, y), ego_conf.get(x, y, 0) as f64));
            for m in &order {
                if m.mask.get(x, y) {
                    sources.push((m.payload.cell(x, y), m.confidence.get(x, y, 0) as f64));
                }
            }
            if sources.len() == 1 {
                continue;
            }
            let query = sources[0].0;
            logits.clear();
            logits.extend(sources.iter().map(|(f, _)| {
                query.iter().zip(f.iter()).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() * scale
            }));
            let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (l, (_, c)) in logits.iter_mut().zip(&sources) {
                *l = (*l - top).exp() * c.max(0.0);
                total += *l;
            }
            if total <= 0.0 {
                continue;
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (wt, (f, _)) in logits.iter().zip(&sources) {
                let wt = wt / total;
                for (a, v) in acc.iter_mut().zip(f.iter()) {
                    *a += wt * *v as f64;
                }
            }
            for (o, a) in out.cell_mut(x, y).iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: ObjectClass,
    pub center: (f64, f64),
    /// (length, width)
    pub extent: (f64, f64),
    pub yaw: f64,
    pub score: f64,
    /// (vx, vy) in m/s.
    #[serde(default)]
    pub velocity: (f64, f64),
}

impl Detection {
    pub fn footprint(&self) -> OrientedBox {
        OrientedBox::new(self.center.0, self.center.1, self.extent.0, self.extent.1, self.yaw)
    }
}

/// Peak extraction: per class, every cell that is a 3x3 local maximum of its
/// heatmap channel with value `>= peak_thresh` becomes a box read from the
/// regression channels at that cell. Plateaus yield their first cell in
/// row-major order.
pub fn decode(features: &Grid, peak_thresh: f64) -> Result<Vec<Detection>, FusionError> {
    let need = NUM_CLASSES * (1 + REGRESSION_PER_CLASS);
    if features.channels() < need {
        return Err(FusionError::TooFewChannels {
            got: features.channels(),
            need,
        });
    }
    let spec = features.spec();
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut out = Vec::new();
    for class in ObjectClass::ALL {
        let hc = heatmap_channel(class);
        let rc = regression_channel(class);
        for y in 0..h {
            for x in 0..w {
                let v = features.get(x as usize, y as usize, hc);
                if (v as f64) < peak_thresh || v <= 0.0 {
                    continue;
                }
                let mut is_peak = true;
                'nb: for ny in y - 1..=y + 1 {
                    for nx in x - 1..=x + 1 {
                        if (nx, ny) == (x, y) || nx < 0 || ny < 0 || nx >= w || ny >= h {
                            continue;
                        }
                        let u = features.get(nx as usize, ny as usize, hc);
                        let earlier = (ny, nx) < (y, x);
                        if u > v || (earlier && u == v) {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let r = &features.cell(x as usize, y as usize)[rc..rc + REGRESSION_PER_CLASS];
                let (cx, cy) = spec.cell_center(x as usize, y as usize);
                out.push(Detection {
                    class,
                    center: (cx + r[0] as f64, cy + r[1] as f64),
                    extent: ((r[2] as f64).exp(), (r[3] as f64).exp()),
                    yaw: (r[5] as f64).atan2(r[4] as f64),
                    score: (v as f64).clamp(0.0, 1.0),
                    velocity: (r[6] as f64, r[7] as f64),
                });
            }
        }
    }
    Ok(out)
}

/// Greedy per-class suppression by oriented IoU. Output is sorted by class,
/// then descending score.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::with_capacity(dets.len());
    for class in ObjectClass::ALL {
        let mut cands: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        let start = out.len();
        for c in cands {
            let fp = c.footprint();
            if out[start..].iter().all(|k| iou(&k.footprint(), &fp) < iou_thresh) {
                out.push(c.clone());
            }
        }
    }
    out
}

/// Binary occupancy grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    grid: Grid,
}

impl OccupancyMap {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            grid: Grid::zeros(spec, 1),
        }
    }

    pub fn from_grid(grid: Grid) -> Result<Self, FusionError> {
        if grid.channels() != 1 || grid.values().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(FusionError::Occupancy);
        }
        Ok(Self { grid })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_occupied(&self, x: usize, y: usize) -> bool {
        self.grid.get(x, y, 0) == 1.0
    }

    /// Row-major occupied cells.
    pub fn occupied_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.grid.width();
        self.grid
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(move |(i, _)| (i % w, i / w))
    }

    pub fn count(&self) -> usize {
        self.occupied_cells().count()
    }
}

/// Marks every cell whose center lies inside a detection footprint.
pub fn rasterize_occupancy(dets: &[Detection], spec: GridSpec) -> OccupancyMap {
    rasterize_occupancy_swept(dets, spec, 0.0, 1.0)
}

/// Like [`rasterize_occupancy`], with every box also drawn at its
/// constant-velocity positions `k * step_s` for all `k * step_s <= horizon_s`.
pub fn rasterize_occupancy_swept(dets: &[Detection], spec: GridSpec, horizon_s: f64, step_s: f64) -> OccupancyMap {
    let steps = if horizon_s > 0.0 && step_s > 0.0 {
        (horizon_s / step_s + 1e-9).floor() as usize
    } else {
        0
    };
    let mut grid = Grid::zeros(spec, 1);
    for det in dets {
        for k in 0..=steps {
            let dt = k as f64 * step_s;
            let mut fp = det.footprint();
            fp.cx += det.velocity.0 * dt;
            fp.cy += det.velocity.1 * dt;
            mark_box(&mut grid, &fp);
        }
    }
    OccupancyMap { grid }
}

fn mark_box(grid: &mut Grid, fp: &OrientedBox) {
    let spec = grid.spec();
    let r = 0.5 * fp.length.hypot(fp.width);
    let lo_x = ((fp.cx - r) / spec.resolution).floor().max(0.0) as usize;
    let lo_y = ((fp.cy - r) / spec.resolution).floor().max(0.0) as usize;
    let hi_x = (((fp.cx + r) / spec.resolution).ceil().max(0.0) as usize).min(spec.width);
    let hi_y = (((fp.cy + r) / spec.resolution).ceil().max(0.0) as usize).min(spec.height);
    for y in lo_y..hi_y {
        for x in lo_x..hi_x {
            let (px, py) = spec.cell_center(x, y);
            if fp.contains(px, py) {
                grid.set(x, y, 0, 1.0);
            }
        }
    }
}

/// One frame of detections in the JSON-lines log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub t: f64,
    pub detections: Vec<Detection>,
}

pub fn write_detections_jsonl<W: Write>(frames: &[DetectionFrame], mut out: W) -> Result<(), FusionError> {
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections_jsonl<R: BufRead>(input: R) -> Result<Vec<DetectionFrame>, FusionError> {
    let mut frames = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            frames.push(serde_json::from_str(&line)?);
        }
    }
    Ok(frames)
}
