//! Pragmatic message selection.
//!
//! The receiver advertises a request map, each sender a confidence map. A
//! sender transmits only the feature cells where request times confidence
//! clears `p_thre`. The area-of-importance variant replaces the request map
//! with a Gaussian around the receiver's planned path and adds an alert term
//! for cells whose predicted confidence differs from the current one.

use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::grids::{apply_mask, channel_max, gaussian_filter, ByteReader, Grid, GridError, GridSpec, Mask};

/// Bits per transmitted feature value.
pub const BITS_PER_VALUE: u64 = 32;

/// Feature message from `sender` to `receiver`.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: u32,
    pub receiver: u32,
    /// Features, zero outside `mask`.
    pub payload: Grid,
    pub mask: Mask,
    /// Sender confidence used for fusion gating.
    pub confidence: Grid,
    pub t_send: f64,
    pub t_r: f64,
    pub size_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MessageHeader {
    pub sender: u32,
    pub receiver: u32,
    pub t_send: f64,
}

impl Message {
    fn assemble(header: MessageHeader, features: &Grid, mask: Mask, confidence: Grid) -> Result<Self, GridError> {
        let payload = apply_mask(features, &mask)?;
        let size_bits = message_size_bits(mask.cardinality(), features.channels());
        Ok(Self {
            sender: header.sender,
            receiver: header.receiver,
            payload,
            mask,
            confidence,
            t_send: header.t_send,
            t_r: header.t_send,
            size_bits,
        })
    }

    /// Wire layout (little-endian): `u32 sender, u32 receiver, f64 t_send,
    /// u64 size_bits`, then `u32 H, u32 W` and the LSB-first packed mask,
    /// then the payload grid and the confidence grid in the flat grid layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.receiver.to_le_bytes());
        out.extend_from_slice(&self.t_send.to_le_bytes());
        out.extend_from_slice(&self.size_bits.to_le_bytes());
        out.extend_from_slice(&(self.mask.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.mask.width() as u32).to_le_bytes());
        out.extend_from_slice(&self.mask.to_packed());
        self.payload.write_bytes(&mut out);
        self.confidence.write_bytes(&mut out);
        out
    }

    /// Decodes a message; the receive time starts equal to the send time.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        let mut r = ByteReader::new(bytes);
        let sender = r.u32()?;
        let receiver = r.u32()?;
        let t_send = r.f64()?;
        let size_bits = r.u64()?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let mask = Mask::from_packed(h, w, r.slice((h * w).div_ceil(8))?)?;
        let (payload, used) = Grid::read_bytes(&bytes[r.pos..])?;
        r.pos += used;
        let (confidence, used) = Grid::read_bytes(&bytes[r.pos..])?;
        r.pos += used;
        if r.remaining() != 0 {
            return Err(GridError::Decode("trailing bytes after message".into()));
        }
        if payload.height() != h || payload.width() != w {
            return Err(GridError::Decode("payload and mask shapes differ".into()));
        }
        Ok(Self {
            sender,
            receiver,
            payload,
            mask,
            confidence,
            t_send,
            t_r: t_send,
            size_bits,
        })
    }
}

pub fn message_size_bits(cardinality: usize, channels: usize) -> u64 {
    cardinality as u64 * channels as u64 * BITS_PER_VALUE
}

/// Low-rate broadcast carrying an agent's maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Bsm {
    pub sender: u32,
    pub confidence: Grid,
    pub request: Grid,
    pub pose: Pose,
    pub timestamp: f64,
}

/// Channel max followed by a Gaussian filter, clipped to `[0, 1]`.
pub fn confidence_map(heatmap: &Grid, sigma_cells: f64) -> Grid {
    gaussian_filter(&channel_max(heatmap), sigma_cells).map(|v| v.clamp(0.0, 1.0))
}

pub fn baseline_request_map(conf: &Grid) -> Grid {
    conf.map(|v| 1.0 - v)
}

/// Gaussian request map centered on the waypoint of `prev_plan` nearest to
/// the ego. With `normalize` the peak is rescaled to one. Returns `None` for
/// an empty plan; callers fall back to [`baseline_request_map`].
pub fn aoim_request_map(
    prev_plan: &[(f64, f64)],
    ego: (f64, f64),
    spec: GridSpec,
    sigma_f_m: f64,
    normalize: bool,
) -> Option<Grid> {
    let &(wx, wy) = prev_plan.iter().min_by(|a, b| {
        let da = (a.0 - ego.0).hypot(a.1 - ego.1);
        let db = (b.0 - ego.0).hypot(b.1 - ego.1);
        da.total_cmp(&db)
    })?;
    let peak = if normalize {
        1.0
    } else {
        1.0 / (sigma_f_m * (2.0 * std::f64::consts::PI).sqrt())
    };
    let mut g = Grid::zeros(spec, 1);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let (px, py) = spec.cell_center(x, y);
            let d2 = (px - wx).powi(2) + (py - wy).powi(2);
            g.set(x, y, 0, (peak * (-d2 / (2.0 * sigma_f_m * sigma_f_m)).exp()) as f32);
        }
    }
    Some(g)
}

fn check_same(a: &Grid, b: &Grid) -> Result<(), GridError> {
    if !a.same_shape(b) {
        return Err(GridError::ShapeMismatch {
            left: (a.height(), a.width()),
            right: (b.height(), b.width()),
        });
    }
    Ok(())
}

/// Mask of cells where `request * confidence >= p_thre`.
pub fn baseline_mask(conf_sender: &Grid, req_receiver: &Grid, p_thre: f64) -> Result<Mask, GridError> {
    check_same(conf_sender, req_receiver)?;
    let (h, w) = (conf_sender.height(), conf_sender.width());
    Ok(Mask::from_fn(h, w, |x, y| {
        req_receiver.get(x, y, 0) as f64 * conf_sender.get(x, y, 0) as f64 >= p_thre
    }))
}

/// Confidence-driven packing.
pub fn pack_baseline(
    features: &Grid,
    conf_sender: &Grid,
    req_receiver: &Grid,
    p_thre: f64,
    header: MessageHeader,
) -> Result<Message, GridError> {
    check_same(features, conf_sender)?;
    let mask = baseline_mask(conf_sender, req_receiver, p_thre)?;
    Message::assemble(header, features, mask, conf_sender.clone())
}

/// Mask of cells where `max(request * predicted, |predicted - current| / max(n, 1)) >= p_thre`.
pub fn apc_mask(
    predicted_conf: &Grid,
    current_conf: &Grid,
    req_receiver: &Grid,
    n_steps: u32,
    p_thre: f64,
) -> Result<Mask, GridError> {
    check_same(predicted_conf, current_conf)?;
    check_same(predicted_conf, req_receiver)?;
    let denom = n_steps.max(1) as f64;
    let (h, w) = (predicted_conf.height(), predicted_conf.width());
    Ok(Mask::from_fn(h, w, |x, y| {
        let pred = predicted_conf.get(x, y, 0) as f64;
        let alert = (pred - current_conf.get(x, y, 0) as f64).abs() / denom;
        (req_receiver.get(x, y, 0) as f64 * pred).max(alert) >= p_thre
    }))
}

/// Area-of-importance packing of (possibly warped) features.
pub fn pack_apc(
    warped_features: &Grid,
    predicted_conf: &Grid,
    current_conf: &Grid,
    req_receiver: &Grid,
    n_steps: u32,
    p_thre: f64,
    header: MessageHeader,
) -> Result<Message, GridError> {
    check_same(warped_features, predicted_conf)?;
    let mask = apc_mask(predicted_conf, current_conf, req_receiver, n_steps, p_thre)?;
    Message::assemble(header, warped_features, mask, predicted_conf.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeMode {
    /// `log2(H * W * D * |P| * 32 / 8)`.
    #[default]
    Formula,
    /// `log2(|P| * D * 4)`, the bytes actually selected.
    Bytes,
}

/// Communication volume of one message; an empty mask counts as zero.
pub fn comm_volume(cardinality: usize, height: usize, width: usize, channels: usize, mode: VolumeMode) -> f64 {
    if cardinality == 0 {
        return 0.0;
    }
    let p = cardinality as f64;
    let d = channels as f64;
    match mode {
        VolumeMode::Formula => (height as f64 * width as f64 * d * p * 32.0 / 8.0).log2(),
        VolumeMode::Bytes => (p * d * 4.0).log2(),
    }
}

/// One row of the per-message volume log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRow {
    pub t_send: f64,
    pub sender: u32,
    pub receiver: u32,
    pub cardinality: usize,
    pub size_bits: u64,
    pub volume: f64,
}

pub fn write_volume_csv<W: std::io::Write>(rows: &[VolumeRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
