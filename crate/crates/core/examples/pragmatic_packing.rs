// Message size under confidence-driven packing versus area-of-importance
// packing on a street lined with parked cars.

use v2xsim::scenario::Scenario;
use v2xsim::sim::{run, Method};

const SCENARIO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/apc_benchmark.json");

pub fn run_example() {
    let scenario = Scenario::load(SCENARIO).expect("benchmark scenario loads");
    println!("seed  card(conf)  card(aoi)  reduction  frames<=  ap50(conf)  ap50(aoi)");
    for seed in 0..5 {
        let conf = run(&scenario, Method::Dpp, seed).expect("run");
        let aoi = run(&scenario, Method::DppApc, seed).expect("run");
        let mean = |log: &v2xsim::sim::RunLog| {
            log.messages.iter().map(|m| m.cardinality as f64).sum::<f64>() / log.messages.len().max(1) as f64
        };
        let within = conf
            .messages
            .iter()
            .zip(&aoi.messages)
            .filter(|(c, a)| a.cardinality <= c.cardinality)
            .count();
        let (mc, ma) = (mean(&conf), mean(&aoi));
        println!(
            "{seed:>4}  {mc:>10.1}  {ma:>9.1}  {:>8.1}%  {within:>4}/{:<4} {:>9.3}  {:>9.3}",
            100.0 * (1.0 - ma / mc),
            conf.messages.len(),
            conf.summary(&scenario).ap50,
            aoi.summary(&scenario).ap50,
        );
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
