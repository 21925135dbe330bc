//! V2X link and latency model.
//!
//! Overall latency of a feature message is the sum of five parts:
//! semantic extraction, asynchrony/jitter, transmission (propagation plus
//! network processing), decision making, and queueing. Transmission follows
//! the 3GPP path loss and Shannon capacity for DSRC links, or a configured
//! fixed range for C-V2X. Feature payloads ride in the service-channel half of
//! each synchronization interval; BSMs ride in the control half at no cost.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

use crate::pragcomm::Message;

#[derive(Debug, Error, PartialEq)]
pub enum ChannelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("link unreachable: capacity {capacity_bps} bps")]
    Unreachable { capacity_bps: f64 },
    #[error("unstable queue: service rate {service} <= arrival rate {arrival}")]
    UnstableQueue { arrival: f64, service: f64 },
}

/// Closed interval `[lo, hi]` sampled uniformly; `lo == hi` is a point mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformRange {
    pub lo: f64,
    pub hi: f64,
}

impl UniformRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    /// Symmetric range `[-half, half]`.
    pub const fn symmetric(half: f64) -> Self {
        Self { lo: -half, hi: half }
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Draw unconditionally so the stream position does not depend on the range width.
        let u: f64 = rng.random();
        let (lo, hi) = if self.lo <= self.hi {
            (self.lo, self.hi)
        } else {
            (self.hi, self.lo)
        };
        lo + (hi - lo) * u
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkMode {
    Dsrc,
    #[serde(rename = "c-v2x")]
    CV2x,
}

/// Radio parameters of a sender-receiver link. Defaults follow the DSRC settings used throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkConfig {
    pub bandwidth_mhz: f64,
    pub tx_power_dbm: f64,
    /// Noise power, redrawn per message.
    pub noise_power_dbm: UniformRange,
    pub carrier_freq_ghz: f64,
    pub mode: LinkMode,
    /// C-V2X transmission latency (propagation plus network), ms.
    pub cv2x_tx_ms: UniformRange,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            bandwidth_mhz: 10.0,
            tx_power_dbm: 23.0,
            noise_power_dbm: UniformRange::new(-110.0, -95.0),
            carrier_freq_ghz: 5.9,
            mode: LinkMode::Dsrc,
            cv2x_tx_ms: UniformRange::new(0.0, 600.0),
        }
    }
}

impl LinkConfig {
    pub fn bandwidth_hz(&self) -> f64 {
        self.bandwidth_mhz * 1e6
    }

    pub fn budget(&self, noise_power_dbm: f64) -> LinkBudget {
        LinkBudget {
            bandwidth_hz: self.bandwidth_hz(),
            tx_power_dbm: self.tx_power_dbm,
            noise_power_dbm,
            carrier_freq_ghz: self.carrier_freq_ghz,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.bandwidth_mhz > 0.0) {
            return Err(ChannelError::Domain(format!(
                "bandwidth must be positive, got {} MHz",
                self.bandwidth_mhz
            )));
        }
        if !(self.carrier_freq_ghz > 0.0) {
            return Err(ChannelError::Domain(format!(
                "carrier frequency must be positive, got {} GHz",
                self.carrier_freq_ghz
            )));
        }
        if !self.tx_power_dbm.is_finite()
            || !self.noise_power_dbm.lo.is_finite()
            || !self.noise_power_dbm.hi.is_finite()
        {
            return Err(ChannelError::Domain("power levels must be finite".into()));
        }
        Ok(())
    }
}

/// A link with every random quantity fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkBudget {
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub carrier_freq_ghz: f64,
}

/// 3GPP path loss in dB for a distance in meters and a carrier in GHz.
pub fn path_loss(distance_m: f64, carrier_freq_ghz: f64) -> Result<f64, ChannelError> {
    if !(distance_m > 0.0) {
        return Err(ChannelError::Domain(format!(
            "distance must be positive, got {distance_m}"
        )));
    }
    if !(carrier_freq_ghz > 0.0) {
        return Err(ChannelError::Domain(format!(
            "carrier frequency must be positive, got {carrier_freq_ghz}"
        )));
    }
    Ok(28.0 + 22.0 * distance_m.log10() + 20.0 * carrier_freq_ghz.log10())
}

pub fn snr_db(budget: &LinkBudget, distance_m: f64) -> Result<f64, ChannelError> {
    Ok(budget.tx_power_dbm - path_loss(distance_m, budget.carrier_freq_ghz)? - budget.noise_power_dbm)
}

/// Shannon capacity in bits per second.
pub fn capacity_bps(budget: &LinkBudget, distance_m: f64) -> Result<f64, ChannelError> {
    let snr = snr_db(budget, distance_m)?;
    Ok(budget.bandwidth_hz * (1.0 + 10f64.powf(0.1 * snr)).log2())
}

/// Time to push `size_bits` through the link, in ms.
pub fn propagation_latency(
    size_bits: u64,
    budget: &LinkBudget,
    distance_m: f64,
) -> Result<f64, ChannelError> {
    let capacity = capacity_bps(budget, distance_m)?;
    if !(capacity > 0.0) || !capacity.is_finite() {
        return Err(ChannelError::Unreachable {
            capacity_bps: capacity,
        });
    }
    Ok(size_bits as f64 / capacity * 1e3)
}

/// Additive latency components of one message, all in ms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub ext: f64,
    /// Signed: asynchrony and jitter can move a message earlier.
    pub asyn: f64,
    pub tx_pr: f64,
    pub tx_net: f64,
    pub dm: f64,
    pub queue: f64,
}

impl LatencyBreakdown {
    pub fn total(&self) -> f64 {
        self.ext + self.asyn + self.tx_pr + self.tx_net + self.dm + self.queue
    }

    pub fn tx(&self) -> f64 {
        self.tx_pr + self.tx_net
    }

    /// Everything except asynchrony.
    pub fn causal(&self) -> f64 {
        self.total() - self.asyn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum QueueModel {
    Uniform { range_ms: UniformRange },
    /// Stationary M/M/1 sojourn time, rates in 1/s.
    Mm1 { arrival_rate: f64, service_rate: f64 },
}

impl Default for QueueModel {
    fn default() -> Self {
        QueueModel::Uniform {
            range_ms: UniformRange::new(0.0, 50.0),
        }
    }
}

/// Everything needed to draw a [`LatencyBreakdown`] for one link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyModel {
    pub link: LinkConfig,
    pub ext_ms: UniformRange,
    pub asyn_ms: UniformRange,
    pub dm_ms: UniformRange,
    pub queue: QueueModel,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            link: LinkConfig::default(),
            ext_ms: UniformRange::new(40.0, 50.0),
            asyn_ms: UniformRange::new(-100.0, 100.0),
            dm_ms: UniformRange::new(20.0, 30.0),
            queue: QueueModel::default(),
        }
    }
}

impl LatencyModel {
    /// Fixed overall latency: transmission carries `total_ms`, all other parts are zero.
    pub fn fixed(total_ms: f64) -> Self {
        Self {
            link: LinkConfig {
                mode: LinkMode::CV2x,
                cv2x_tx_ms: UniformRange::point(total_ms),
                ..LinkConfig::default()
            },
            ext_ms: UniformRange::point(0.0),
            asyn_ms: UniformRange::point(0.0),
            dm_ms: UniformRange::point(0.0),
            queue: QueueModel::Uniform {
                range_ms: UniformRange::point(0.0),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        self.link.validate()?;
        if let QueueModel::Mm1 {
            arrival_rate,
            service_rate,
        } = self.queue
        {
            mm1_mean_wait(arrival_rate, service_rate)?;
        }
        Ok(())
    }

    fn tx_components<R: Rng + ?Sized>(
        &self,
        size_bits: u64,
        distance_m: f64,
        rng: &mut R,
    ) -> Result<(f64, f64), ChannelError> {
        match self.link.mode {
            LinkMode::Dsrc => {
                let noise = self.link.noise_power_dbm.sample(rng);
                let budget = self.link.budget(noise);
                Ok((propagation_latency(size_bits, &budget, distance_m)?, 0.0))
            }
            LinkMode::CV2x => {
                // The configured range covers propagation and network together.
                let _ = rng.random::<f64>();
                Ok((0.0, self.link.cv2x_tx_ms.sample(rng)))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        size_bits: u64,
        distance_m: f64,
        rng: &mut R,
    ) -> Result<LatencyBreakdown, ChannelError> {
        let ext = self.ext_ms.sample(rng);
        let asyn = self.asyn_ms.sample(rng);
        let (tx_pr, tx_net) = self.tx_components(size_bits, distance_m, rng)?;
        let dm = self.dm_ms.sample(rng);
        let queue = match self.queue {
            QueueModel::Uniform { range_ms } => range_ms.sample(rng),
            QueueModel::Mm1 {
                arrival_rate,
                service_rate,
            } => Mm1Queue::new(arrival_rate, service_rate)?.sample_stationary_sojourn(rng),
        };
        Ok(LatencyBreakdown {
            ext,
            asyn,
            tx_pr,
            tx_net,
            dm,
            queue,
        })
    }

    /// Deterministic latency estimate: range midpoints plus the transmission
    /// time at the midpoint noise power.
    pub fn expected(&self, size_bits: u64, distance_m: f64) -> Result<LatencyBreakdown, ChannelError> {
        let (tx_pr, tx_net) = match self.link.mode {
            LinkMode::Dsrc => {
                let budget = self.link.budget(self.link.noise_power_dbm.midpoint());
                (propagation_latency(size_bits, &budget, distance_m)?, 0.0)
            }
            LinkMode::CV2x => (0.0, self.link.cv2x_tx_ms.midpoint()),
        };
        let queue = match self.queue {
            QueueModel::Uniform { range_ms } => range_ms.midpoint(),
            QueueModel::Mm1 {
                arrival_rate,
                service_rate,
            } => mm1_mean_wait(arrival_rate, service_rate)?,
        };
        Ok(LatencyBreakdown {
            ext: self.ext_ms.midpoint(),
            asyn: self.asyn_ms.midpoint(),
            tx_pr,
            tx_net,
            dm: self.dm_ms.midpoint(),
            queue,
        })
    }
}

/// Draws one breakdown from a dedicated stream seeded with `seed`.
pub fn sample_overall_latency(
    model: &LatencyModel,
    size_bits: u64,
    distance_m: f64,
    seed: u64,
) -> Result<LatencyBreakdown, ChannelError> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    model.sample(size_bits, distance_m, &mut rng)
}

/// Number of whole decision intervals covered by the latency estimate.
pub fn discretize_latency(tau_est_ms: f64, delta_t_ms: f64) -> Result<u32, ChannelError> {
    if !(delta_t_ms > 0.0) {
        return Err(ChannelError::Domain(format!(
            "decision interval must be positive, got {delta_t_ms}"
        )));
    }
    if !(tau_est_ms >= 0.0) || !tau_est_ms.is_finite() {
        return Err(ChannelError::Domain(format!(
            "latency estimate must be finite and nonnegative, got {tau_est_ms}"
        )));
    }
    Ok((tau_est_ms / delta_t_ms).floor() as u32)
}

/// Alternating control/service channel timing. Each synchronization interval
/// of `2 * half_interval_ms` starts with the BSM half, followed by the
/// feature-payload half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotSchedule {
    pub half_interval_ms: f64,
}

impl Default for SlotSchedule {
    fn default() -> Self {
        Self {
            half_interval_ms: 50.0,
        }
    }
}

impl SlotSchedule {
    pub fn new(half_interval_ms: f64) -> Result<Self, ChannelError> {
        if !(half_interval_ms > 0.0) {
            return Err(ChannelError::Domain(format!(
                "slot half-interval must be positive, got {half_interval_ms}"
            )));
        }
        Ok(Self { half_interval_ms })
    }

    pub fn sync_interval(&self) -> f64 {
        2.0 * self.half_interval_ms
    }

    /// BSM window of the synchronization interval containing `t`.
    pub fn bsm_window(&self, t_ms: f64) -> (f64, f64) {
        let start = (t_ms / self.sync_interval()).floor() * self.sync_interval();
        (start, start + self.half_interval_ms)
    }

    /// Earliest payload-window start at or after `t`.
    pub fn next_payload_start(&self, t_ms: f64) -> f64 {
        let si = self.sync_interval();
        let k = ((t_ms - self.half_interval_ms) / si).ceil();
        k * si + self.half_interval_ms
    }
}

/// Receive time of a feature message requested at `send_request_ms`.
///
/// The payload starts at the next payload window and arrives after the full
/// latency. Negative asynchrony may pull the arrival earlier, but never before
/// the request time plus the causal (non-asynchrony) components.
pub fn delivery_time(send_request_ms: f64, schedule: &SlotSchedule, breakdown: &LatencyBreakdown) -> f64 {
    let start = schedule.next_payload_start(send_request_ms);
    (start + breakdown.total()).max(send_request_ms + breakdown.causal())
}

/// Result of pushing a message through a lossy channel.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub message: Message,
    pub lost: bool,
    pub jitter_ms: f64,
}

/// Applies packet loss and receive-time jitter. A lost message keeps its mask
/// and metadata, but every selected payload cell is replaced by standard
/// Gaussian noise.
pub fn inject_loss_and_jitter<R: Rng + ?Sized>(
    mut msg: Message,
    loss_prob: f64,
    jitter_ms: UniformRange,
    rng: &mut R,
) -> Delivery {
    let loss_prob = loss_prob.clamp(0.0, 1.0);
    let lost = rng.random::<f64>() < loss_prob;
    if lost {
        let (h, w) = (msg.mask.height(), msg.mask.width());
        for y in 0..h {
            for x in 0..w {
                if msg.mask.get(x, y) {
                    for v in msg.payload.cell_mut(x, y) {
                        *v = StandardNormal.sample(rng);
                    }
                }
            }
        }
    }
    let jitter = jitter_ms.sample(rng);
    msg.t_r += jitter;
    Delivery {
        message: msg,
        lost,
        jitter_ms: jitter,
    }
}

/// Mean sojourn time `1 / (mu - lambda)` of an M/M/1 queue in ms; rates in 1/s.
pub fn mm1_mean_wait(arrival_rate: f64, service_rate: f64) -> Result<f64, ChannelError> {
    if !(arrival_rate > 0.0) || !(service_rate > arrival_rate) {
        return Err(ChannelError::UnstableQueue {
            arrival: arrival_rate,
            service: service_rate,
        });
    }
    Ok(1e3 / (service_rate - arrival_rate))
}

#[derive(Debug, Clone, Copy)]
pub struct Mm1Queue {
    arrival: Exp<f64>,
    service: Exp<f64>,
    stationary: Exp<f64>,
}

impl Mm1Queue {
    pub fn new(arrival_rate: f64, service_rate: f64) -> Result<Self, ChannelError> {
        mm1_mean_wait(arrival_rate, service_rate)?;
        let exp = |rate: f64| Exp::new(rate).expect("positive rate");
        Ok(Self {
            arrival: exp(arrival_rate),
            service: exp(service_rate),
            stationary: exp(service_rate - arrival_rate),
        })
    }

    /// Sojourn times (ms) of `n` consecutive customers of a FCFS queue that
    /// starts empty, via the Lindley recursion.
    pub fn simulate_sojourns<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(n);
        let mut wait = 0.0f64;
        for _ in 0..n {
            let service = self.service.sample(rng);
            out.push((wait + service) * 1e3);
            let gap = self.arrival.sample(rng);
            wait = (wait + service - gap).max(0.0);
        }
        out
    }

    /// One draw from the stationary sojourn distribution, in ms.
    pub fn sample_stationary_sojourn<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.stationary.sample(rng) * 1e3
    }
}

/// One row of a latency trace.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LatencyTraceRow {
    pub sender: u32,
    pub receiver: u32,
    pub t_send: f64,
    pub t_r: f64,
    pub ext: f64,
    pub asyn: f64,
    pub tx_pr: f64,
    pub tx_net: f64,
    pub dm: f64,
    pub queue: f64,
}

pub fn write_latency_csv<W: Write>(rows: &[LatencyTraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
