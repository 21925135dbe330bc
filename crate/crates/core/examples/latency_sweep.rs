// Sweep a fixed end-to-end latency and compare detection quality with and
// without feature forecasting on constant-velocity traffic.

use v2xsim::experiment::{run_experiment, ExperimentConfig, SweepAxis};
use v2xsim::scenario::Scenario;
use v2xsim::sim::Method;

const SCENARIO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/constant_velocity.json");

pub fn run_example() {
    let cfg = ExperimentConfig {
        scenario: Scenario::load(SCENARIO).expect("scenario loads"),
        methods: vec![Method::NoFusion, Method::Baseline, Method::Dpp],
        sweep: Some((SweepAxis::UniformLatency, vec![0.0, 100.0, 200.0, 300.0, 400.0])),
        seeds: (0..10).collect(),
    };
    let result = run_experiment(&cfg).expect("experiment runs");
    println!("{:>8} {:>10} {:>8} {:>8}", "latency", "method", "ap50", "ci95");
    for row in result.aggregate.iter().filter(|r| r.metric == "ap50") {
        println!(
            "{:>8} {:>10} {:>8.2} {:>8.2}",
            row.value,
            row.method,
            row.mean,
            row.mean - row.ci_low
        );
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
