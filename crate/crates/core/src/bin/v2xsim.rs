use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use serde_json::json;

use v2xsim::experiment::{
    apply_env_overrides, compare_methods, run_experiment, write_csv, write_result, ExperimentConfig, ExperimentError,
    OutputFormat, SweepAxis,
};
use v2xsim::scenario::Scenario;
use v2xsim::sim::Method;

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Run collaborative-perception experiments on a scenario file.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Scenario JSON file.
    #[arg(long, env = "V2XSIM_SCENARIO")]
    scenario: PathBuf,
    /// Comma-separated methods: no-fusion, baseline, dpp, dpp-apc.
    #[arg(long, default_value = "dpp")]
    method: String,
    /// Sweep axis: bandwidth, uniform_latency, sigma_p, sigma_r, packet_loss, jitter, p_thre, sigma_F.
    #[arg(long, requires = "values")]
    sweep: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long, requires = "sweep")]
    values: Option<String>,
    /// Comma-separated seeds, or a half-open range such as 0..20.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Also write one CSV row per run here.
    #[arg(long)]
    runs: Option<PathBuf>,
    /// Emit per-seed deltas against the first method instead of aggregates.
    #[arg(long)]
    compare: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Sim(_) | ExperimentError::Io(_) | ExperimentError::Csv(_) | ExperimentError::Json(_) => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Failure::Config(format!("invalid {what} {t:?}"))))
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    match s.split_once("..") {
        Some((a, b)) => {
            let lo: u64 = a.trim().parse().map_err(|_| Failure::Config(format!("invalid seed range {s:?}")))?;
            let hi: u64 = b.trim().parse().map_err(|_| Failure::Config(format!("invalid seed range {s:?}")))?;
            Ok((lo..hi).collect())
        }
        None => parse_list("seed", s),
    }
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn execute(args: Args) -> Result<(), Failure> {
    let mut scenario = Scenario::load(&args.scenario).map_err(|e| Failure::Config(e.to_string()))?;
    apply_env_overrides(&mut scenario, |k| std::env::var(k).ok())?;
    let methods = args
        .method
        .split(',')
        .map(|m| m.trim().parse::<Method>().map_err(|e| Failure::Config(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let sweep = match (&args.sweep, &args.values) {
        (Some(axis), Some(values)) => Some((axis.parse::<SweepAxis>()?, parse_list::<f64>("sweep value", values)?)),
        _ => None,
    };
    let cfg = ExperimentConfig {
        scenario,
        methods,
        sweep,
        seeds: parse_seeds(&args.seeds)?,
    };
    let format = match args.format {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
    };
    let mut out = open_out(&args.out)?;
    if args.compare {
        let rows = compare_methods(&cfg, &cfg.methods)?;
        match format {
            OutputFormat::Csv => write_csv(&rows, &mut out)?,
            OutputFormat::Json => {
                serde_json::to_writer_pretty(&mut out, &rows).map_err(ExperimentError::from)?;
                writeln!(out).map_err(ExperimentError::from)?;
            }
        }
    } else {
        let result = run_experiment(&cfg)?;
        write_result(&result, format, &mut out)?;
        if let Some(path) = &args.runs {
            write_csv(&result.runs, open_out(&Some(path.clone()))?)?;
        }
    }
    out.flush().map_err(|e| Failure::Runtime(e.to_string()))
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({"error": {"kind": "usage", "message": msg.trim()}}));
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("{}", json!({"error": {"kind": "config", "message": msg}}));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("{}", json!({"error": {"kind": "runtime", "message": msg}}));
            ExitCode::from(1)
        }
    }
}
