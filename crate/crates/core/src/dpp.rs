//! Predictive perception on heatmaps.
//!
//! A sender forecasts its heatmap `n` decision intervals ahead, derives a
//! motion flow between the current and the forecast heatmap, and warps its
//! features along that flow before packing them, so the receiver gets
//! features aligned with the moment they arrive.
//!
//! Flow convention: a [`FlowField`] produced here is *forward* flow, stored at
//! the source cell and pointing to where that cell's content moves.
//! [`forward_warp`] turns it into the gather form consumed by
//! [`affine_warp`] and clears the cells a moving blob leaves behind.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{discretize_latency, ChannelError};
use crate::grids::{affine_warp, channel_max, FlowField, Grid, GridError, Mask};
use crate::pragcomm::confidence_map;
use crate::world::InstanceLabels;

#[derive(Debug, Error, PartialEq)]
pub enum DppError {
    #[error("prediction needs at least 2 history frames, have {0}")]
    InsufficientHistory(usize),
    #[error("history timestamps must increase: {prev} then {next}")]
    NonIncreasing { prev: f64, next: f64 },
    #[error("history frames must be {expected} ms apart, got {got}")]
    Spacing { expected: f64, got: f64 },
    #[error("history capacity must be at least 2")]
    Capacity,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DppConfig {
    /// Cells above this value (after channel max) belong to a blob.
    pub blob_threshold: f32,
    /// Largest expected per-frame motion; the match radius is twice this.
    pub max_displacement_cells: f64,
}

impl Default for DppConfig {
    fn default() -> Self {
        Self {
            blob_threshold: 0.05,
            max_displacement_cells: 4.0,
        }
    }
}

impl DppConfig {
    pub fn search_radius(&self) -> f64 {
        2.0 * self.max_displacement_cells
    }
}

/// Connected region of a heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub peak: (usize, usize),
    pub peak_value: f32,
    pub centroid: (f64, f64),
    /// Row-major.
    pub cells: Vec<(usize, usize)>,
}

/// 4-connected components of `channel_max(g) > threshold`, ordered by their first cell.
pub fn find_blobs(g: &Grid, threshold: f32) -> Vec<Blob> {
    let m = channel_max(g);
    let (h, w) = (m.height(), m.width());
    let mut seen = vec![false; h * w];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            if seen[y0 * w + x0] || m.get(x0, y0, 0) <= threshold {
                continue;
            }
            seen[y0 * w + x0] = true;
            stack.push((x0, y0));
            let mut cells = Vec::new();
            while let Some((x, y)) = stack.pop() {
                cells.push((x, y));
                let neighbors = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx < w && ny < h && !seen[ny * w + nx] && m.get(nx, ny, 0) > threshold {
                        seen[ny * w + nx] = true;
                        stack.push((nx, ny));
                    }
                }
            }
            cells.sort_unstable_by_key(|&(x, y)| (y, x));
            let mut peak = cells[0];
            let mut peak_value = m.get(peak.0, peak.1, 0);
            for &(x, y) in &cells {
                let v = m.get(x, y, 0);
                if v > peak_value {
                    peak = (x, y);
                    peak_value = v;
                }
            }
            let n = cells.len() as f64;
            let centroid = (
                cells.iter().map(|c| c.0 as f64).sum::<f64>() / n,
                cells.iter().map(|c| c.1 as f64).sum::<f64>() / n,
            );
            blobs.push(Blob {
                peak,
                peak_value,
                centroid,
                cells,
            });
        }
    }
    blobs
}

/// Greedy nearest-centroid matching within `radius`. Returns, for each blob
/// in `to`, the index of its partner in `from`. Ties go to the lowest
/// `from` index, then the lowest `to` index.
pub fn match_blobs(from: &[Blob], to: &[Blob], radius: f64) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (i, a) in from.iter().enumerate() {
        for (j, b) in to.iter().enumerate() {
            let d = (a.centroid.0 - b.centroid.0).hypot(a.centroid.1 - b.centroid.1);
            if d <= radius {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_from = vec![false; from.len()];
    let mut out = vec![None; to.len()];
    for (_, i, j) in pairs {
        if !used_from[i] && out[j].is_none() {
            used_from[i] = true;
            out[j] = Some(i);
        }
    }
    out
}

fn peak_shift(a: &Blob, b: &Blob) -> [f32; 2] {
    [
        b.peak.0 as f32 - a.peak.0 as f32,
        b.peak.1 as f32 - a.peak.1 as f32,
    ]
}

/// Label-free forward flow from `h_t` to `h_pred`: every matched blob's peak
/// displacement is written on its support in `h_t`; everything else is zero.
pub fn estimate_flow(h_t: &Grid, h_pred: &Grid, cfg: &DppConfig) -> FlowField {
    let from = find_blobs(h_t, cfg.blob_threshold);
    let to = find_blobs(h_pred, cfg.blob_threshold);
    let matches = match_blobs(&from, &to, cfg.search_radius());
    let mut flow = FlowField::zeros(h_t.height(), h_t.width());
    for (j, m) in matches.iter().enumerate() {
        if let Some(i) = *m {
            let d = peak_shift(&from[i], &to[j]);
            for &(x, y) in &from[i].cells {
                flow.set(x, y, d);
            }
        }
    }
    flow
}

/// Instances present in only one of the two label grids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowReport {
    pub disappeared: Vec<u32>,
    pub appeared: Vec<u32>,
}

/// Ground-truth forward flow: each instance's support at `t` carries its
/// rounded centroid displacement between the two label grids.
pub fn extract_flow_oracle(labels_t: &InstanceLabels, labels_tr: &InstanceLabels) -> (FlowField, FlowReport) {
    let mut flow = FlowField::zeros(labels_t.height(), labels_t.width());
    let mut report = FlowReport::default();
    let later = labels_tr.ids();
    let centroid = |cells: &[(usize, usize)]| {
        let n = cells.len() as f64;
        (
            cells.iter().map(|c| c.0 as f64).sum::<f64>() / n,
            cells.iter().map(|c| c.1 as f64).sum::<f64>() / n,
        )
    };
    for id in labels_t.ids() {
        let src = labels_t.support(id);
        if later.binary_search(&id).is_err() {
            report.disappeared.push(id);
            continue;
        }
        let dst = labels_tr.support(id);
        let (ax, ay) = centroid(&src);
        let (bx, by) = centroid(&dst);
        let d = [(bx - ax).round() as f32, (by - ay).round() as f32];
        for (x, y) in src {
            flow.set(x, y, d);
        }
    }
    let earlier = labels_t.ids();
    report.appeared = later
        .into_iter()
        .filter(|id| earlier.binary_search(id).is_err())
        .collect();
    (flow, report)
}

/// Moves every cell along its forward flow. Destination cells gather from
/// their source through [`affine_warp`]; source cells that nothing moves
/// into are cleared. Colliding destinations keep the last source in
/// row-major order.
pub fn forward_warp(g: &Grid, forward: &FlowField) -> Result<Grid, GridError> {
    if forward.is_zero() {
        return affine_warp(g, forward);
    }
    let (h, w) = (g.height(), g.width());
    let mut gather = FlowField::zeros(h, w);
    let mut is_dest = vec![false; h * w];
    let mut is_src = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = forward.get(x, y);
            let (dx, dy) = (dx.round(), dy.round());
            if dx == 0.0 && dy == 0.0 {
                continue;
            }
            is_src[y * w + x] = true;
            let tx = x as i64 + dx as i64;
            let ty = y as i64 + dy as i64;
            if tx >= 0 && ty >= 0 && (tx as usize) < w && (ty as usize) < h {
                let (tx, ty) = (tx as usize, ty as usize);
                gather.set(tx, ty, [-dx, -dy]);
                is_dest[ty * w + tx] = true;
            }
        }
    }
    let mut out = affine_warp(g, &gather)?;
    let vacated = Mask::from_fn(h, w, |x, y| is_src[y * w + x] && !is_dest[y * w + x]);
    for y in 0..h {
        for x in 0..w {
            if vacated.get(x, y) {
                out.cell_mut(x, y).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Forecasts the next heatmap from the two most recent ones.
pub trait Predictor {
    fn name(&self) -> &str;
    fn step(&mut self, prev: &Grid, curr: &Grid) -> Grid;
}

/// Constant-velocity blob extrapolation.
#[derive(Debug, Clone, Default)]
pub struct CvPredictor {
    pub cfg: DppConfig,
}

impl CvPredictor {
    pub fn new(cfg: DppConfig) -> Self {
        Self { cfg }
    }
}

impl Predictor for CvPredictor {
    fn name(&self) -> &str {
        "cv"
    }

    fn step(&mut self, prev: &Grid, curr: &Grid) -> Grid {
        cv_predict(prev, curr, &self.cfg)
    }
}

/// Each blob of `curr` moves again by its displacement since `prev`;
/// unmatched blobs stay put.
pub fn cv_predict(prev: &Grid, curr: &Grid, cfg: &DppConfig) -> Grid {
    let from = find_blobs(prev, cfg.blob_threshold);
    let to = find_blobs(curr, cfg.blob_threshold);
    let matches = match_blobs(&from, &to, cfg.search_radius());
    let mut flow = FlowField::zeros(curr.height(), curr.width());
    for (j, m) in matches.iter().enumerate() {
        if let Some(i) = *m {
            let d = peak_shift(&from[i], &to[j]);
            for &(x, y) in &to[j].cells {
                flow.set(x, y, d);
            }
        }
    }
    forward_warp(curr, &flow).expect("flow matches frame shape")
}

/// Zero-motion forecast.
#[derive(Debug, Clone, Default)]
pub struct StaticPredictor;

impl Predictor for StaticPredictor {
    fn name(&self) -> &str {
        "static"
    }

    fn step(&mut self, _prev: &Grid, curr: &Grid) -> Grid {
        curr.clone()
    }
}

/// Replays precomputed future frames, e.g. ground truth rendered from a
/// cloned world. Falls back to holding the last frame once exhausted.
#[derive(Debug, Clone, Default)]
pub struct ReplayPredictor {
    frames: VecDeque<Grid>,
}

impl ReplayPredictor {
    pub fn new(frames: impl IntoIterator<Item = Grid>) -> Self {
        Self {
            frames: frames.into_iter().collect(),
        }
    }
}

impl Predictor for ReplayPredictor {
    fn name(&self) -> &str {
        "oracle"
    }

    fn step(&mut self, _prev: &Grid, curr: &Grid) -> Grid {
        self.frames.pop_front().unwrap_or_else(|| curr.clone())
    }
}

/// Bounded, time-ordered frame buffer.
#[derive(Debug, Clone)]
pub struct HeatmapHistory {
    capacity: usize,
    interval_ms: Option<f64>,
    frames: VecDeque<(f64, Grid)>,
}

impl HeatmapHistory {
    pub fn new(capacity: usize, interval_ms: Option<f64>) -> Result<Self, DppError> {
        if capacity < 2 {
            return Err(DppError::Capacity);
        }
        Ok(Self {
            capacity,
            interval_ms,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, t_ms: f64, frame: Grid) -> Result<(), DppError> {
        if let Some(&(prev, _)) = self.frames.back() {
            if !(t_ms > prev) {
                return Err(DppError::NonIncreasing { prev, next: t_ms });
            }
            if let Some(dt) = self.interval_ms {
                if ((t_ms - prev) - dt).abs() > 1e-6 {
                    return Err(DppError::Spacing {
                        expected: dt,
                        got: t_ms - prev,
                    });
                }
            }
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back((t_ms, frame));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn latest(&self) -> Option<&(f64, Grid)> {
        self.frames.back()
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// The two most recent frames, oldest first.
    pub fn last_two(&self) -> Option<(&Grid, &Grid)> {
        let n = self.frames.len();
        (n >= 2).then(|| (&self.frames[n - 2].1, &self.frames[n - 1].1))
    }
}

/// Applies the predictor `n_steps` times, feeding each forecast back as the newest frame.
pub fn predict_iterative(
    history: &HeatmapHistory,
    n_steps: u32,
    predictor: &mut dyn Predictor,
) -> Result<Grid, DppError> {
    let (prev, curr) = history
        .last_two()
        .ok_or(DppError::InsufficientHistory(history.len()))?;
    let mut prev = prev.clone();
    let mut curr = curr.clone();
    for _ in 0..n_steps {
        let next = predictor.step(&prev, &curr);
        prev = std::mem::replace(&mut curr, next);
    }
    Ok(curr)
}

#[derive(Debug, Clone)]
pub struct DppOutput {
    pub n_steps: u32,
    pub predicted_heatmap: Grid,
    /// Forward flow from the current to the predicted heatmap.
    pub flow: FlowField,
    pub features: Grid,
    pub predicted_conf: Grid,
}

/// Sender-side prediction: discretize the latency estimate, forecast the
/// heatmap, estimate motion and warp the features to the predicted instant.
pub fn dpp_pipeline(
    features: &Grid,
    history: &HeatmapHistory,
    tau_est_ms: f64,
    delta_t_ms: f64,
    predictor: &mut dyn Predictor,
    cfg: &DppConfig,
    conf_sigma_cells: f64,
) -> Result<DppOutput, DppError> {
    let n = discretize_latency(tau_est_ms, delta_t_ms)?;
    let (_, h_t) = history
        .latest()
        .ok_or(DppError::InsufficientHistory(history.len()))?;
    let predicted = predict_iterative(history, n, predictor)?;
    let flow = if n == 0 {
        FlowField::zeros(h_t.height(), h_t.width())
    } else {
        estimate_flow(h_t, &predicted, cfg)
    };
    let warped = forward_warp(features, &flow)?;
    Ok(DppOutput {
        n_steps: n,
        predicted_conf: confidence_map(&predicted, conf_sigma_cells),
        predicted_heatmap: predicted,
        flow,
        features: warped,
    })
}

/// One row of the prediction error log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionErrorRow {
    pub t_send: f64,
    pub sender: u32,
    pub object: u32,
    pub n_steps: u32,
    /// Distance in cells between the predicted peak and the ground-truth cell.
    pub error_cells: f64,
}
