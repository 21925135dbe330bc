//! Parameter sweeps over seeds and methods.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{LatencyModel, LinkMode, UniformRange};
use crate::metrics::mean_ci95;
use crate::scenario::{Scenario, ScenarioError};
use crate::sim::{run, Method, RunSummary, SimError, UnknownMethod};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown sweep axis {0:?}; valid: bandwidth, uniform_latency, sigma_p, sigma_r, packet_loss, jitter, p_thre, sigma_F")]
    UnknownAxis(String),
    #[error(transparent)]
    UnknownMethod(#[from] UnknownMethod),
    #[error("invalid value {value} for {axis}: {reason}")]
    InvalidValue { axis: SweepAxis, value: f64, reason: &'static str },
    #[error("at least one seed is required")]
    NoSeeds,
    #[error("at least one method is required")]
    NoMethods,
    #[error("comparison needs at least two methods")]
    TooFewMethods,
    #[error("environment override {name}={value:?}: {reason}")]
    Env { name: String, value: String, reason: String },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("output: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepAxis {
    #[serde(rename = "bandwidth")]
    Bandwidth,
    #[serde(rename = "uniform_latency")]
    UniformLatency,
    #[serde(rename = "sigma_p")]
    SigmaP,
    #[serde(rename = "sigma_r")]
    SigmaR,
    #[serde(rename = "packet_loss")]
    PacketLoss,
    #[serde(rename = "jitter")]
    Jitter,
    #[serde(rename = "p_thre")]
    PThre,
    #[serde(rename = "sigma_F")]
    SigmaF,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 8] = [
        SweepAxis::Bandwidth,
        SweepAxis::UniformLatency,
        SweepAxis::SigmaP,
        SweepAxis::SigmaR,
        SweepAxis::PacketLoss,
        SweepAxis::Jitter,
        SweepAxis::PThre,
        SweepAxis::SigmaF,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::UniformLatency => "uniform_latency",
            SweepAxis::SigmaP => "sigma_p",
            SweepAxis::SigmaR => "sigma_r",
            SweepAxis::PacketLoss => "packet_loss",
            SweepAxis::Jitter => "jitter",
            SweepAxis::PThre => "p_thre",
            SweepAxis::SigmaF => "sigma_F",
        }
    }

    /// Returns a copy of `base` with this axis set to `value`.
    ///
    /// `uniform_latency` replaces the whole latency model by a fixed total;
    /// `jitter` sets the asynchrony range to `[-value, value]` ms.
    pub fn apply(self, base: &Scenario, value: f64) -> Result<Scenario, ExperimentError> {
        let bad = |reason| ExperimentError::InvalidValue {
            axis: self,
            value,
            reason,
        };
        if !value.is_finite() {
            return Err(bad("must be finite"));
        }
        let mut sc = base.clone();
        match self {
            SweepAxis::Bandwidth => {
                if value <= 0.0 {
                    return Err(bad("bandwidth must be positive (MHz)"));
                }
                sc.channel.link.bandwidth_mhz = value;
            }
            SweepAxis::UniformLatency => {
                if value < 0.0 {
                    return Err(bad("latency must be nonnegative (ms)"));
                }
                sc.channel = LatencyModel::fixed(value);
            }
            SweepAxis::SigmaP | SweepAxis::SigmaR => {
                if value < 0.0 {
                    return Err(bad("noise must be nonnegative"));
                }
                if self == SweepAxis::SigmaP {
                    sc.noise.sigma_p = value;
                } else {
                    sc.noise.sigma_r = value;
                }
            }
            SweepAxis::PacketLoss => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(bad("loss probability must lie in [0, 1]"));
                }
                sc.protocol.packet_loss = value;
            }
            SweepAxis::Jitter => {
                if value < 0.0 {
                    return Err(bad("jitter must be nonnegative (ms)"));
                }
                sc.channel.asyn_ms = UniformRange::symmetric(value);
            }
            SweepAxis::PThre => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(bad("threshold must lie in [0, 1]"));
                }
                sc.protocol.p_thre = value;
            }
            SweepAxis::SigmaF => {
                if value <= 0.0 {
                    return Err(bad("focus radius must be positive (m)"));
                }
                sc.protocol.sigma_f_m = value;
            }
        }
        Ok(sc)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepAxis {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ExperimentError::UnknownAxis(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    /// `None` runs the scenario as configured, reported under value 0.
    pub sweep: Option<(SweepAxis, Vec<f64>)>,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.seeds.is_empty() {
            return Err(ExperimentError::NoSeeds);
        }
        if self.methods.is_empty() {
            return Err(ExperimentError::NoMethods);
        }
        self.scenario.validate()?;
        for (_, sc) in self.points()? {
            sc.validate()?;
        }
        Ok(())
    }

    fn points(&self) -> Result<Vec<(f64, Scenario)>, ExperimentError> {
        match &self.sweep {
            None => Ok(vec![(0.0, self.scenario.clone())]),
            Some((axis, values)) => values.iter().map(|&v| Ok((v, axis.apply(&self.scenario, v)?))).collect(),
        }
    }
}

/// One finished run; flat so it serializes as a CSV record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub axis: String,
    pub value: f64,
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

impl RunRow {
    fn new(axis: &str, value: f64, s: RunSummary) -> Self {
        Self {
            axis: axis.to_string(),
            value,
            method: s.method,
            seed: s.seed,
            ap30: s.ap30,
            ap50: s.ap50,
            ap70: s.ap70,
            composited_ap: s.composited_ap,
            messages: s.messages,
            mean_cardinality: s.mean_cardinality,
            mean_volume: s.mean_volume,
            mean_latency_ms: s.mean_latency_ms,
            mean_tx_pr_ms: s.mean_tx_pr_ms,
            route_completion: s.route_completion,
            infraction_penalty: s.infraction_penalty,
            driving_score: s.driving_score,
            pedestrian_collisions: s.pedestrian_collisions,
            late_brakes: s.late_brakes,
        }
    }
}

/// Mean and 95% interval of one metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub axis: String,
    pub value: f64,
    pub method: Method,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub aggregate: Vec<AggregateRow>,
    pub runs: Vec<RunRow>,
}

const METRICS: [&str; 11] = [
    "ap30",
    "ap50",
    "ap70",
    "composited_ap",
    "mean_cardinality",
    "mean_volume",
    "mean_latency_ms",
    "mean_tx_pr_ms",
    "route_completion",
    "driving_score",
    "pedestrian_collisions",
];

fn metric(s: &RunRow, name: &str) -> f64 {
    match name {
        "ap30" => s.ap30,
        "ap50" => s.ap50,
        "ap70" => s.ap70,
        "composited_ap" => s.composited_ap,
        "mean_cardinality" => s.mean_cardinality,
        "mean_volume" => s.mean_volume,
        "mean_latency_ms" => s.mean_latency_ms,
        "mean_tx_pr_ms" => s.mean_tx_pr_ms,
        "route_completion" => s.route_completion,
        "driving_score" => s.driving_score,
        "pedestrian_collisions" => s.pedestrian_collisions as f64,
        _ => unreachable!("metric list is fixed"),
    }
}

/// Runs every (sweep value, method, seed) combination in parallel, each from
/// a fresh world. Row order is independent of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let axis = cfg.sweep.as_ref().map_or("none", |(a, _)| a.name()).to_string();
    let points = cfg.points()?;
    let jobs: Vec<(usize, Method, u64)> = (0..points.len())
        .flat_map(|p| {
            cfg.methods
                .iter()
                .flat_map(move |&m| cfg.seeds.iter().map(move |&s| (p, m, s)))
        })
        .collect();
    let summaries: Vec<RunSummary> = jobs
        .par_iter()
        .map(|&(p, m, s)| run(&points[p].1, m, s).map(|log| log.summary(&points[p].1)))
        .collect::<Result<_, _>>()?;

    let runs: Vec<RunRow> = jobs
        .iter()
        .zip(summaries)
        .map(|(&(p, _, _), summary)| RunRow::new(&axis, points[p].0, summary))
        .collect();
    let mut aggregate = Vec::new();
    for (p, (value, _)) in points.iter().enumerate() {
        for &m in &cfg.methods {
            let group: Vec<&RunRow> = jobs
                .iter()
                .zip(&runs)
                .filter(|((jp, jm, _), _)| *jp == p && *jm == m)
                .map(|(_, r)| r)
                .collect();
            for name in METRICS {
                let samples: Vec<f64> = group.iter().map(|s| metric(s, name)).collect();
                let (mean, half) = mean_ci95(&samples);
                aggregate.push(AggregateRow {
                    axis: axis.clone(),
                    value: *value,
                    method: m,
                    metric: name.to_string(),
                    n: samples.len(),
                    mean,
                    ci_low: mean - half,
                    ci_high: mean + half,
                });
            }
        }
    }
    Ok(ExperimentResult { aggregate, runs })
}

/// Per-seed difference of a method against the reference (first) method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub value: f64,
    pub seed: u64,
    pub reference: Method,
    pub method: Method,
    pub d_ap50: f64,
    pub d_composited_ap: f64,
    pub d_mean_cardinality: f64,
    pub d_driving_score: f64,
}

/// Paired comparison: identical seeds and sweep points for every method.
pub fn compare_methods(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<PairedRow>, ExperimentError> {
    if methods.len() < 2 {
        return Err(ExperimentError::TooFewMethods);
    }
    let cfg = ExperimentConfig {
        methods: methods.to_vec(),
        ..cfg.clone()
    };
    let result = run_experiment(&cfg)?;
    // Runs are ordered by (sweep point, method, seed).
    let (m, n) = (methods.len(), cfg.seeds.len());
    let points = result.runs.len() / (m * n);
    let mut out = Vec::new();
    for p in 0..points {
        for i in 1..m {
            for s in 0..n {
                let b = &result.runs[(p * m) * n + s];
                let a = &result.runs[(p * m + i) * n + s];
                out.push(PairedRow {
                    value: a.value,
                    seed: a.seed,
                    reference: methods[0],
                    method: a.method,
                    d_ap50: a.ap50 - b.ap50,
                    d_composited_ap: a.composited_ap - b.composited_ap,
                    d_mean_cardinality: a.mean_cardinality - b.mean_cardinality,
                    d_driving_score: a.driving_score - b.driving_score,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregate rows as CSV, or the full result as JSON.
pub fn write_result<W: Write>(result: &ExperimentResult, format: OutputFormat, mut out: W) -> Result<(), ExperimentError> {
    match format {
        OutputFormat::Csv => write_csv(&result.aggregate, out),
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut out, result)?;
            out.write_all(b"\n")?;
            Ok(())
        }
    }
}

/// Environment variables that override channel and protocol defaults.
pub const ENV_OVERRIDES: [(&str, &str); 10] = [
    ("V2XSIM_BANDWIDTH_MHZ", "link bandwidth, MHz"),
    ("V2XSIM_TX_POWER_DBM", "transmit power, dBm"),
    ("V2XSIM_NOISE_DBM", "noise power range lo,hi in dBm"),
    ("V2XSIM_CARRIER_GHZ", "carrier frequency, GHz"),
    ("V2XSIM_LINK_MODE", "dsrc or c-v2x"),
    ("V2XSIM_CV2X_TX_MS", "C-V2X transmission latency range lo,hi in ms"),
    ("V2XSIM_EXT_MS", "extraction latency range lo,hi in ms"),
    ("V2XSIM_ASYN_MS", "asynchrony range lo,hi in ms"),
    ("V2XSIM_DM_MS", "decision latency range lo,hi in ms"),
    ("V2XSIM_P_THRE", "selection threshold"),
];

/// Applies the variables in [`ENV_OVERRIDES`] found through `lookup`.
pub fn apply_env_overrides(
    scenario: &mut Scenario,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<(), ExperimentError> {
    fn err(name: &str, value: &str, reason: &str) -> ExperimentError {
        ExperimentError::Env {
            name: name.into(),
            value: value.into(),
            reason: reason.into(),
        }
    }
    let scalar = |name: &str, v: &str| -> Result<f64, ExperimentError> {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| err(name, v, "expected a number"))
    };
    let range = |name: &str, v: &str| -> Result<UniformRange, ExperimentError> {
        let parts: Vec<&str> = v.split(',').collect();
        match parts.as_slice() {
            [x] => Ok(UniformRange::point(scalar(name, x)?)),
            [lo, hi] => {
                let (lo, hi) = (scalar(name, lo)?, scalar(name, hi)?);
                if lo > hi {
                    return Err(err(name, v, "lo must not exceed hi"));
                }
                Ok(UniformRange::new(lo, hi))
            }
            _ => Err(err(name, v, "expected lo,hi")),
        }
    };
    for (name, _) in ENV_OVERRIDES {
        let Some(v) = lookup(name) else { continue };
        let ch = &mut scenario.channel;
        match name {
            "V2XSIM_BANDWIDTH_MHZ" => ch.link.bandwidth_mhz = scalar(name, &v)?,
            "V2XSIM_TX_POWER_DBM" => ch.link.tx_power_dbm = scalar(name, &v)?,
            "V2XSIM_NOISE_DBM" => ch.link.noise_power_dbm = range(name, &v)?,
            "V2XSIM_CARRIER_GHZ" => ch.link.carrier_freq_ghz = scalar(name, &v)?,
            "V2XSIM_LINK_MODE" => {
                ch.link.mode = match v.trim() {
                    "dsrc" => LinkMode::Dsrc,
                    "c-v2x" => LinkMode::CV2x,
                    _ => return Err(err(name, &v, "expected dsrc or c-v2x")),
                }
            }
            "V2XSIM_CV2X_TX_MS" => ch.link.cv2x_tx_ms = range(name, &v)?,
            "V2XSIM_EXT_MS" => ch.ext_ms = range(name, &v)?,
            "V2XSIM_ASYN_MS" => ch.asyn_ms = range(name, &v)?,
            "V2XSIM_DM_MS" => ch.dm_ms = range(name, &v)?,
            "V2XSIM_P_THRE" => scenario.protocol.p_thre = scalar(name, &v)?,
            _ => unreachable!("override table is fixed"),
        }
    }
    scenario.validate()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario() -> Scenario {
        Scenario::from_json(
            r#"{
            "name": "exp",
            "grid": {"height": 20, "width": 80, "resolution": 0.5},
            "duration_s": 0.8,
            "agents": [
                {"id": 0, "role": "ego", "pose": {"x": 2, "y": 5, "yaw": 0}, "speed": 4,
                 "sensing_range": 10, "route": [[0, 5], [40, 5]], "target_speed": 4},
                {"id": 1, "role": "rsu", "pose": {"x": 25, "y": 1, "yaw": 0}, "sensing_range": 30}
            ],
            "objects": [
                {"id": 5, "class": "vehicle", "pose": {"x": 20, "y": 8.5, "yaw": 0},
                 "extent": [4.5, 2.0], "velocity": [6.0, 0.0]}
            ],
            "eval": {"warmup_ticks": 2}
        }"#,
        )
        .unwrap()
    }

    fn cfg(sweep: Option<(SweepAxis, Vec<f64>)>) -> ExperimentConfig {
        ExperimentConfig {
            scenario: scenario(),
            methods: vec![Method::Baseline],
            sweep,
            seeds: vec![1, 2],
        }
    }

    #[test]
    fn axis_names_round_trip() {
        for a in SweepAxis::ALL {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
        }
        let msg = "speed".parse::<SweepAxis>().unwrap_err().to_string();
        assert!(msg.contains("sigma_F"), "{msg}");
    }

    #[test]
    fn invalid_axis_values() {
        let sc = scenario();
        assert!(SweepAxis::Bandwidth.apply(&sc, 0.0).is_err());
        assert!(SweepAxis::PacketLoss.apply(&sc, 1.5).is_err());
        assert!(SweepAxis::UniformLatency.apply(&sc, -1.0).is_err());
        let fixed = SweepAxis::UniformLatency.apply(&sc, 300.0).unwrap();
        assert_eq!(fixed.channel.expected(1, 10.0).unwrap().total(), 300.0);
    }

    #[test]
    fn bandwidth_sweep_lowers_propagation_time() {
        let res = run_experiment(&cfg(Some((SweepAxis::Bandwidth, vec![5.0, 10.0, 20.0])))).unwrap();
        assert_eq!(res.runs.len(), 6);
        let tau: Vec<f64> = res
            .aggregate
            .iter()
            .filter(|r| r.metric == "mean_tx_pr_ms")
            .map(|r| r.mean)
            .collect();
        assert_eq!(tau.len(), 3);
        assert!(tau[0] >= tau[1] && tau[1] >= tau[2], "{tau:?}");
    }

    #[test]
    fn identical_runs_give_identical_bytes() {
        let c = cfg(Some((SweepAxis::PThre, vec![0.05, 0.2])));
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_result(&run_experiment(&c).unwrap(), OutputFormat::Csv, &mut a).unwrap();
        write_result(&run_experiment(&c).unwrap(), OutputFormat::Csv, &mut b).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());
        let mut runs = Vec::new();
        write_csv(&run_experiment(&c).unwrap().runs, &mut runs).unwrap();
        assert_eq!(String::from_utf8(runs).unwrap().lines().count(), 5);
    }

    #[test]
    fn self_comparison_is_zero() {
        let rows = compare_methods(&cfg(None), &[Method::Dpp, Method::Dpp]).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!((r.d_ap50, r.d_composited_ap, r.d_mean_cardinality, r.d_driving_score), (0.0, 0.0, 0.0, 0.0));
        }
        let rows = compare_methods(&cfg(None), &[Method::Baseline, Method::Dpp]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(compare_methods(&cfg(None), &[Method::Dpp]).is_err());
    }

    #[test]
    fn env_overrides_apply_and_validate() {
        let mut sc = scenario();
        apply_env_overrides(&mut sc, |k| match k {
            "V2XSIM_BANDWIDTH_MHZ" => Some("20".into()),
            "V2XSIM_DM_MS" => Some("10,12".into()),
            "V2XSIM_LINK_MODE" => Some("c-v2x".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(sc.channel.link.bandwidth_mhz, 20.0);
        assert_eq!(sc.channel.dm_ms, UniformRange::new(10.0, 12.0));
        assert_eq!(sc.channel.link.mode, LinkMode::CV2x);
        let bad = apply_env_overrides(&mut scenario(), |k| (k == "V2XSIM_P_THRE").then(|| "high".into()));
        assert!(matches!(bad, Err(ExperimentError::Env { .. })));
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let mut c = cfg(None);
        c.seeds.clear();
        assert!(matches!(run_experiment(&c), Err(ExperimentError::NoSeeds)));
    }
}
