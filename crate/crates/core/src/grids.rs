//! Bird's-eye-view grid algebra.
//!
//! Every map exchanged or fused in the simulator is a [`Grid`]: an `H x W x C`
//! field of `f32` values stored row-major with channels innermost, so the value
//! at column `x`, row `y`, channel `c` lives at `(y * W + x) * C + c`.
//!
//! The grid frame doubles as the world frame: cell `(x, y)` covers
//! `[x * res, (x + 1) * res) x [y * res, (y + 1) * res)` meters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default meters per cell.
pub const DEFAULT_RESOLUTION: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("invalid grid dimensions {height}x{width}x{channels}")]
    InvalidDims {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("value buffer has {got} entries, expected {expected}")]
    BufferLength { got: usize, expected: usize },
    #[error("resolution must be positive and finite, got {0}")]
    InvalidResolution(f64),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("channel count mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("malformed binary grid: {0}")]
    Decode(String),
}

/// Spatial extent of a grid, without any values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, resolution: f64) -> Result<Self, GridError> {
        if height == 0 || width == 0 {
            return Err(GridError::InvalidDims {
                height,
                width,
                channels: 1,
            });
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::InvalidResolution(resolution));
        }
        Ok(Self {
            height,
            width,
            resolution,
        })
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// World coordinates (meters) of the center of cell `(x, y)`.
    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        (
            (x as f64 + 0.5) * self.resolution,
            (y as f64 + 0.5) * self.resolution,
        )
    }

    /// Cell containing the world point, if inside the grid.
    pub fn cell_of(&self, px: f64, py: f64) -> Option<(usize, usize)> {
        let cx = (px / self.resolution).floor();
        let cy = (py / self.resolution).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.width as f64 || cy >= self.height as f64 {
            return None;
        }
        Some((cx as usize, cy as usize))
    }

    pub fn extent_m(&self) -> (f64, f64) {
        (
            self.width as f64 * self.resolution,
            self.height as f64 * self.resolution,
        )
    }
}

/// Dense `H x W x C` scalar field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    resolution: f64,
    values: Vec<f32>,
}

impl Grid {
    pub fn zeros(spec: GridSpec, channels: usize) -> Self {
        assert!(channels >= 1, "grid needs at least one channel");
        Self {
            height: spec.height,
            width: spec.width,
            channels,
            resolution: spec.resolution,
            values: vec![0.0; spec.cells() * channels],
        }
    }

    pub fn filled(spec: GridSpec, channels: usize, value: f32) -> Self {
        let mut g = Self::zeros(spec, channels);
        g.values.fill(value);
        g
    }

    pub fn from_vec(
        height: usize,
        width: usize,
        channels: usize,
        resolution: f64,
        values: Vec<f32>,
    ) -> Result<Self, GridError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(GridError::InvalidDims {
                height,
                width,
                channels,
            });
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(GridError::InvalidResolution(resolution));
        }
        let expected = height * width * channels;
        if values.len() != expected {
            return Err(GridError::BufferLength {
                got: values.len(),
                expected,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self {
            height,
            width,
            channels,
            resolution,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            height: self.height,
            width: self.width,
            resolution: self.resolution,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    fn index(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.values[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let i = self.index(x, y, c);
        self.values[i] = v;
    }

    /// Channel vector of one cell.
    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.channels;
        &self.values[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let start = (y * self.width + x) * self.channels;
        &mut self.values[start..start + self.channels]
    }

    /// Copy of a single channel as a one-channel grid.
    pub fn channel(&self, c: usize) -> Grid {
        assert!(c < self.channels);
        let values = self
            .values
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect();
        Grid {
            height: self.height,
            width: self.width,
            channels: 1,
            resolution: self.resolution,
            values,
        }
    }

    /// Copy of channels `[start, end)`.
    pub fn channel_range(&self, start: usize, end: usize) -> Grid {
        assert!(start < end && end <= self.channels);
        let n = end - start;
        let mut values = Vec::with_capacity(self.height * self.width * n);
        for cell in self.values.chunks_exact(self.channels) {
            values.extend_from_slice(&cell[start..end]);
        }
        Grid {
            height: self.height,
            width: self.width,
            channels: n,
            resolution: self.resolution,
            values,
        }
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_shape(&self, height: usize, width: usize) -> Result<(), GridError> {
        if self.height != height || self.width != width {
            return Err(GridError::ShapeMismatch {
                left: (self.height, self.width),
                right: (height, width),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Grid {
        Grid {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f32, f32) -> f32) -> Result<Grid, GridError> {
        other.check_shape(self.height, self.width)?;
        if self.channels != other.channels {
            return Err(GridError::ChannelMismatch {
                left: self.channels,
                right: other.channels,
            });
        }
        Ok(Grid {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Position and value of the largest entry of channel `c` (first in row-major order on ties).
    pub fn argmax(&self, c: usize) -> ((usize, usize), f32) {
        let mut best = ((0, 0), f32::NEG_INFINITY);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(x, y, c);
                if v > best.1 {
                    best = ((x, y), v);
                }
            }
        }
        best
    }

    /// Flat binary layout: `u32 H, u32 W, u32 C, f32 resolution`, then the
    /// row-major values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.values.len() * 4);
        self.write_bytes(&mut out);
        out
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.resolution as f32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        let (grid, used) = Self::read_bytes(bytes)?;
        if used != bytes.len() {
            return Err(GridError::Decode(format!(
                "{} trailing bytes",
                bytes.len() - used
            )));
        }
        Ok(grid)
    }

    /// Decodes one grid from the front of `bytes`, returning it with the number of bytes consumed.
    pub(crate) fn read_bytes(bytes: &[u8]) -> Result<(Self, usize), GridError> {
        let mut r = ByteReader::new(bytes);
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.u32()? as usize;
        let resolution = r.f32()? as f64;
        let n = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| GridError::Decode("dimension overflow".into()))?;
        if r.remaining() < n * 4 {
            return Err(GridError::Decode(format!(
                "expected {} value bytes, found {}",
                n * 4,
                r.remaining()
            )));
        }
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(r.f32()?);
        }
        let grid = Self::from_vec(height, width, channels, resolution, values)?;
        Ok((grid, r.pos))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grid serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, GridError> {
        #[derive(Deserialize)]
        struct Raw {
            height: usize,
            width: usize,
            channels: usize,
            resolution: f64,
            values: Vec<f32>,
        }
        let raw: Raw = serde_json::from_str(s).map_err(|e| GridError::Decode(e.to_string()))?;
        Self::from_vec(raw.height, raw.width, raw.channels, raw.resolution, raw.values)
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take<const N: usize>(&mut self) -> Result<[u8; N], GridError> {
        if self.remaining() < N {
            return Err(GridError::Decode("unexpected end of input".into()));
        }
        let mut out = [0u8; N];
        out.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        Ok(out)
    }

    pub(crate) fn slice(&mut self, n: usize) -> Result<&'a [u8], GridError> {
        if self.remaining() < n {
            return Err(GridError::Decode("unexpected end of input".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, GridError> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, GridError> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, GridError> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, GridError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

/// Binary per-cell selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self, GridError> {
        if bits.len() != height * width {
            return Err(GridError::BufferLength {
                got: bits.len(),
                expected: height * width,
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of selected cells, `||P||_1`.
    pub fn cardinality(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// LSB-first bit packing of the row-major cells.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(height: usize, width: usize, packed: &[u8]) -> Result<Self, GridError> {
        let n = height * width;
        if packed.len() != n.div_ceil(8) {
            return Err(GridError::Decode(format!(
                "mask needs {} bytes, got {}",
                n.div_ceil(8),
                packed.len()
            )));
        }
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self {
            height,
            width,
            bits,
        })
    }
}

/// Per-cell displacement field in cells. `dx` runs along columns, `dy` along rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    height: usize,
    width: usize,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vectors: vec![[0.0, 0.0]; height * width],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self {
            height,
            width,
            vectors: vec![[dx, dy]; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: [f32; 2]) {
        assert!(d[0].is_finite() && d[1].is_finite(), "flow must be finite");
        self.vectors[y * self.width + x] = d;
    }

    pub fn is_zero(&self) -> bool {
        self.vectors.iter().all(|v| v[0] == 0.0 && v[1] == 0.0)
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    /// Number of cells whose vectors differ.
    pub fn mismatched_cells(&self, other: &FlowField) -> usize {
        self.vectors
            .iter()
            .zip(&other.vectors)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// How [`affine_warp_with`] samples non-integer source positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Sampling {
    /// Round displacements to the nearest cell.
    #[default]
    Nearest,
    Bilinear,
}

/// 1D normalized Gaussian weights for offsets `-r..=r`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    let radius = (truncate * sigma).ceil().max(0.0) as i64;
    let mut w: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Half-sample symmetric reflection of an index into `[0, n)`.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

/// Separable Gaussian blur of every channel, kernel truncated at 3 sigma.
pub fn gaussian_filter(g: &Grid, sigma_cells: f64) -> Grid {
    gaussian_filter_truncated(g, sigma_cells, 3.0)
}

/// Separable Gaussian blur with reflect padding; the kernel spans `ceil(truncate * sigma)` cells each side.
pub fn gaussian_filter_truncated(g: &Grid, sigma_cells: f64, truncate: f64) -> Grid {
    if !(sigma_cells > 0.0) {
        return g.clone();
    }
    let kernel = gaussian_kernel(sigma_cells, truncate);
    let r = (kernel.len() / 2) as i64;
    let (h, w, ch) = (g.height, g.width, g.channels);

    let mut tmp = vec![0.0f64; g.values.len()];
    for y in 0..h {
        for x in 0..w {
            for (k, &wk) in kernel.iter().enumerate() {
                let sx = reflect(x as i64 + k as i64 - r, w);
                let src = (y * w + sx) * ch;
                let dst = (y * w + x) * ch;
                for c in 0..ch {
                    tmp[dst + c] += wk * g.values[src + c] as f64;
                }
            }
        }
    }
    let mut out = vec![0.0f64; g.values.len()];
    for y in 0..h {
        for (k, &wk) in kernel.iter().enumerate() {
            let sy = reflect(y as i64 + k as i64 - r, h);
            for x in 0..w {
                let src = (sy * w + x) * ch;
                let dst = (y * w + x) * ch;
                for c in 0..ch {
                    out[dst + c] += wk * tmp[src + c];
                }
            }
        }
    }
    Grid {
        values: out.into_iter().map(|v| v as f32).collect(),
        ..g.clone()
    }
}

/// Per-cell maximum over channels.
pub fn channel_max(g: &Grid) -> Grid {
    let values = g
        .values
        .chunks_exact(g.channels)
        .map(|cell| cell.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    Grid {
        height: g.height,
        width: g.width,
        channels: 1,
        resolution: g.resolution,
        values,
    }
}

/// Zeroes every cell outside the mask.
pub fn apply_mask(g: &Grid, m: &Mask) -> Result<Grid, GridError> {
    g.check_shape(m.height, m.width)?;
    let mut out = g.clone();
    for (cell, &keep) in out.values.chunks_exact_mut(g.channels).zip(&m.bits) {
        if !keep {
            cell.fill(0.0);
        }
    }
    Ok(out)
}

/// Gather warp `out(x, y) = f(x + dx, y + dy)` with displacements rounded to
/// the nearest cell. Sources outside the grid read as zero.
pub fn affine_warp(f: &Grid, flow: &FlowField) -> Result<Grid, GridError> {
    affine_warp_with(f, flow, Sampling::Nearest)
}

pub fn affine_warp_with(f: &Grid, flow: &FlowField, sampling: Sampling) -> Result<Grid, GridError> {
    f.check_shape(flow.height, flow.width)?;
    let (h, w, ch) = (f.height, f.width, f.channels);
    let mut out = Grid::zeros(f.spec(), ch);
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = flow.get(x, y);
            match sampling {
                Sampling::Nearest => {
                    let sx = x as i64 + dx.round() as i64;
                    let sy = y as i64 + dy.round() as i64;
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        let src = f.cell(sx as usize, sy as usize);
                        out.cell_mut(x, y).copy_from_slice(src);
                    }
                }
                Sampling::Bilinear => {
                    let sx = x as f64 + dx as f64;
                    let sy = y as f64 + dy as f64;
                    let x0 = sx.floor();
                    let y0 = sy.floor();
                    let fx = sx - x0;
                    let fy = sy - y0;
                    let taps = [
                        (x0, y0, (1.0 - fx) * (1.0 - fy)),
                        (x0 + 1.0, y0, fx * (1.0 - fy)),
                        (x0, y0 + 1.0, (1.0 - fx) * fy),
                        (x0 + 1.0, y0 + 1.0, fx * fy),
                    ];
                    let dst = out.index(x, y, 0);
                    for (tx, ty, wt) in taps {
                        if wt == 0.0 || tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                            continue;
                        }
                        let src = f.index(tx as usize, ty as usize, 0);
                        for c in 0..ch {
                            out.values[dst + c] += (wt * f.values[src + c] as f64) as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(h: usize, w: usize) -> GridSpec {
        GridSpec::new(h, w, 0.5).unwrap()
    }

    fn impulse(h: usize, w: usize, x: usize, y: usize) -> Grid {
        let mut g = Grid::zeros(spec(h, w), 1);
        g.set(x, y, 0, 1.0);
        g
    }

    #[test]
    fn from_vec_rejects_bad_input() {
        assert!(matches!(
            Grid::from_vec(0, 2, 1, 1.0, vec![]),
            Err(GridError::InvalidDims { .. })
        ));
        assert!(matches!(
            Grid::from_vec(2, 2, 1, 1.0, vec![0.0; 3]),
            Err(GridError::BufferLength { .. })
        ));
        assert!(matches!(
            Grid::from_vec(1, 1, 1, 0.0, vec![0.0]),
            Err(GridError::InvalidResolution(_))
        ));
        assert!(matches!(
            Grid::from_vec(1, 2, 1, 1.0, vec![0.0, f32::NAN]),
            Err(GridError::NonFinite(1))
        ));
    }

    #[test]
    fn gaussian_sigma_zero_is_identity() {
        let g = impulse(7, 7, 3, 3);
        assert_eq!(gaussian_filter(&g, 0.0), g);
    }

    #[test]
    fn gaussian_preserves_constant_field() {
        let g = Grid::filled(spec(6, 9), 1, 0.7);
        for sigma in [0.5, 1.0, 2.5, 7.0] {
            let out = gaussian_filter(&g, sigma);
            for &v in out.values() {
                assert_relative_eq!(v, 0.7, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn gaussian_impulse_peak_matches_hand_kernel() {
        // 1D weights exp(-k^2/2) for k in -2..=2, normalized: peak 0.4026199468942474.
        // The filtered impulse center is the squared peak.
        let g = impulse(9, 9, 4, 4);
        let out = gaussian_filter_truncated(&g, 1.0, 2.0);
        assert_relative_eq!(out.get(4, 4, 0), 0.162_102_82, epsilon = 1e-7);
        let k = gaussian_kernel(1.0, 2.0);
        assert_eq!(k.len(), 5);
        assert_relative_eq!(k[2], 0.402_619_946_894_247_4, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_output_within_input_range() {
        let mut g = Grid::zeros(spec(5, 8), 1);
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 11) as f32 / 10.0;
        }
        let (lo, hi) = g.min_max();
        let out = gaussian_filter(&g, 1.3);
        let (olo, ohi) = out.min_max();
        assert!(olo >= lo - 1e-6 && ohi <= hi + 1e-6);
    }

    #[test]
    fn channel_max_cases() {
        let g = impulse(3, 3, 1, 1);
        assert_eq!(channel_max(&g), g);

        let mut g = Grid::zeros(spec(1, 1), 3);
        g.cell_mut(0, 0).copy_from_slice(&[0.2, 0.9, 0.4]);
        assert_eq!(channel_max(&g).get(0, 0, 0), 0.9);

        let z = Grid::zeros(spec(4, 4), 5);
        assert!(channel_max(&z).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mask_cases() {
        let mut g = Grid::zeros(spec(3, 3), 2);
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = i as f32 + 1.0;
        }
        assert_eq!(apply_mask(&g, &Mask::full(3, 3)).unwrap(), g);
        assert!(apply_mask(&g, &Mask::empty(3, 3))
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let one = Mask::from_fn(3, 3, |x, y| x == 2 && y == 1);
        let out = apply_mask(&g, &one).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                if (x, y) == (2, 1) {
                    assert_eq!(out.cell(x, y), g.cell(x, y));
                } else {
                    assert_eq!(out.cell(x, y), &[0.0, 0.0]);
                }
            }
        }
        assert!(matches!(
            apply_mask(&g, &Mask::full(3, 4)),
            Err(GridError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn warp_zero_flow_is_identity() {
        let g = impulse(4, 5, 2, 3);
        assert_eq!(affine_warp(&g, &FlowField::zeros(4, 5)).unwrap(), g);
    }

    #[test]
    fn warp_uniform_shift_fills_zero() {
        let mut g = Grid::zeros(spec(3, 3), 1);
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = i as f32 + 1.0;
        }
        let out = affine_warp(&g, &FlowField::uniform(3, 3, 1.0, 0.0)).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                let expected = if x + 1 < 3 { g.get(x + 1, y, 0) } else { 0.0 };
                assert_eq!(out.get(x, y, 0), expected);
            }
        }
    }

    #[test]
    fn warp_gather_pulls_from_displaced_source() {
        // Brute-force gather: out(x,y) = in(x-1, y) for a (-1, 0) flow.
        let g = impulse(5, 5, 2, 2);
        let out = affine_warp(&g, &FlowField::uniform(5, 5, -1.0, 0.0)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let expected = if x >= 1 { g.get(x - 1, y, 0) } else { 0.0 };
                assert_eq!(out.get(x, y, 0), expected);
            }
        }
        assert_eq!(out.get(3, 2, 0), 1.0);
    }

    #[test]
    fn warp_rounds_fractional_flow() {
        let g = impulse(3, 3, 2, 0);
        let out = affine_warp(&g, &FlowField::uniform(3, 3, 0.6, 0.4)).unwrap();
        assert_eq!(out.get(1, 0, 0), 1.0);
    }

    #[test]
    fn bilinear_half_cell_splits_mass() {
        let g = impulse(1, 4, 2, 0);
        let out = affine_warp_with(&g, &FlowField::uniform(1, 4, 0.5, 0.0), Sampling::Bilinear)
            .unwrap();
        assert_relative_eq!(out.get(1, 0, 0), 0.5);
        assert_relative_eq!(out.get(2, 0, 0), 0.5);
    }

    #[test]
    fn binary_layout_header() {
        let g = impulse(2, 3, 1, 1);
        let bytes = g.to_bytes();
        assert_eq!(&bytes[0..4], &2u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &3u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
        assert_eq!(Grid::from_bytes(&bytes).unwrap(), g);
        assert!(Grid::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn json_fixture_round_trip() {
        let g = impulse(2, 2, 0, 1);
        assert_eq!(Grid::from_json(&g.to_json()).unwrap(), g);
        assert!(Grid::from_json(r#"{"height":1,"width":1,"channels":1,"resolution":1.0,"values":[]}"#).is_err());
    }

    #[test]
    fn mask_packing() {
        let m = Mask::from_fn(3, 5, |x, y| (x + y) % 3 == 0);
        let packed = m.to_packed();
        assert_eq!(packed.len(), 2);
        assert_eq!(Mask::from_packed(3, 5, &packed).unwrap(), m);
    }

    #[test]
    fn spec_cell_lookup() {
        let s = spec(4, 6);
        assert_eq!(s.cell_center(0, 0), (0.25, 0.25));
        assert_eq!(s.cell_of(2.9, 1.1), Some((5, 2)));
        assert_eq!(s.cell_of(3.0, 0.0), None);
        assert_eq!(s.cell_of(-0.1, 0.0), None);
    }
}
