// Closed-loop drive past a parked truck while a pedestrian steps out from
// behind it. Compares an RSU-assisted ego against one without messages.

use v2xsim::scenario::Scenario;
use v2xsim::sim::{run, Method};

const SCENARIO: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/blind_spot.json");

pub fn run_example() {
    let scenario = Scenario::load(SCENARIO).expect("blind-spot scenario loads");
    for method in [Method::DppApc, Method::Dpp, Method::Baseline, Method::NoFusion] {
        for seed in 0..10 {
            let log = run(&scenario, method, seed).expect("simulation runs");
            let first = log.brakes.first();
            println!(
                "{:<9} seed {seed}: rc {:.3} ped-collisions {} brake {} late {} ds {:.3}",
                method.name(),
                log.driving.route_completion,
                log.driving.pedestrian_collisions,
                first.map_or("none".to_string(), |b| format!("t={:.1}s gap={:.1}m decel={:.1}", b.t, b.gap_m, b.required_decel)),
                log.brakes.iter().any(|b| b.late),
                log.driving.driving_score,
            );
        }
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
