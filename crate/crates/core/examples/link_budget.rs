// Radio link budget and the latency it implies for a full feature message.

use v2xsim::channel::{
    capacity_bps, delivery_time, discretize_latency, mm1_mean_wait, path_loss, propagation_latency, snr_db,
    LatencyModel, LinkConfig, Mm1Queue, SlotSchedule,
};
use v2xsim::pragcomm::message_size_bits;
use v2xsim::seed::stream;

pub fn run_example() {
    let link = LinkConfig::default();
    let budget = link.budget(link.noise_power_dbm.midpoint());
    // A 64-channel feature map covering a 40 x 80 cell window.
    let size = message_size_bits(40 * 80, 64);

    println!("{:>6} {:>9} {:>8} {:>12} {:>10}", "dist", "loss_dB", "snr_dB", "cap_Mbps", "tx_ms");
    for d in [10.0, 50.0, 100.0, 200.0, 400.0] {
        println!(
            "{d:>6} {:>9.3} {:>8.2} {:>12.2} {:>10.2}",
            path_loss(d, link.carrier_freq_ghz).unwrap(),
            snr_db(&budget, d).unwrap(),
            capacity_bps(&budget, d).unwrap() / 1e6,
            propagation_latency(size, &budget, d).unwrap(),
        );
    }

    let model = LatencyModel::default();
    let schedule = SlotSchedule::default();
    let expected = model.expected(size, 100.0).unwrap();
    println!(
        "expected latency at 100 m: {:.1} ms, forecast steps {}",
        expected.total(),
        discretize_latency(expected.total().max(0.0), 100.0).unwrap()
    );
    for k in 0..3 {
        let b = model.sample(size, 100.0, &mut stream(7, 1, "latency", k)).unwrap();
        let t = 100.0 * k as f64;
        println!("sent {t:>5} ms  received {:>7.1} ms  (total {:.1})", delivery_time(t, &schedule, &b), b.total());
    }

    let q = Mm1Queue::new(8.0, 10.0).unwrap();
    let samples = q.simulate_sojourns(100_000, &mut stream(7, 0, "queue", 0));
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    println!(
        "M/M/1 lambda 8 mu 10: simulated sojourn {mean:.2} ms, analytic {:.2} ms",
        mm1_mean_wait(8.0, 10.0).unwrap()
    );
}

#[allow(dead_code)]
fn main() {
    run_example();
}
