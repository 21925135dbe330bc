// A roadside unit forecasts its heatmap over the expected link latency and
// warps its features to the instant they will be fused.

use v2xsim::dpp::{dpp_pipeline, CvPredictor, DppConfig, HeatmapHistory};
use v2xsim::drive::Action;
use v2xsim::geometry::Pose;
use v2xsim::grids::GridSpec;
use v2xsim::seed::stream;
use v2xsim::world::{AgentState, ObjectClass, PoseNoise, Role, World, WorldObject};

pub fn run_example() {
    let spec = GridSpec::new(40, 120, 0.5).unwrap();
    let mut world = World::new(spec);
    world.agents.push(AgentState {
        id: 1,
        role: Role::Rsu,
        pose: Pose::new(30.0, 10.0, 0.0),
        speed: 0.0,
        sensing_range: 40.0,
        fov: std::f64::consts::TAU,
        action: Action::default(),
        extent: (1.0, 1.0),
    });
    // 10 m/s is exactly two cells per 100 ms tick.
    world.objects.push(WorldObject {
        id: 10,
        class: ObjectClass::Vehicle,
        pose: Pose::new(10.25, 5.25, 0.0),
        extent: (4.5, 2.0),
        velocity: (10.0, 0.0),
    });
    world.objects.push(WorldObject {
        id: 11,
        class: ObjectClass::Pedestrian,
        pose: Pose::new(40.25, 16.25, 0.0),
        extent: (0.6, 0.6),
        velocity: (0.0, -5.0),
    });

    let dt_ms = 100.0;
    let cfg = DppConfig::default();
    let mut history = HeatmapHistory::new(4, Some(dt_ms)).unwrap();
    let mut frames = Vec::new();
    for k in 0..8u64 {
        let obs = world.sense(1, &PoseNoise::default(), &mut stream(0, 1, "pose", k));
        history.push(k as f64 * dt_ms, obs.heatmap.clone()).unwrap();
        frames.push(obs);
        world.step(dt_ms / 1e3);
    }

    // Forecast from frame 3 for three latency estimates and compare with what
    // the sensor really sees later.
    let mut history = HeatmapHistory::new(4, Some(dt_ms)).unwrap();
    for (k, f) in frames.iter().enumerate().take(4) {
        history.push(k as f64 * dt_ms, f.heatmap.clone()).unwrap();
    }
    for tau in [80.0, 150.0, 260.0, 390.0] {
        let mut predictor = CvPredictor::new(cfg.clone());
        let out = dpp_pipeline(&frames[3].features, &history, tau, dt_ms, &mut predictor, &cfg, 1.0).unwrap();
        let truth = &frames[3 + out.n_steps as usize];
        for c in [ObjectClass::Vehicle, ObjectClass::Pedestrian] {
            let ch = c.index();
            println!(
                "tau {tau:>5} ms  n {}  {:<10} predicted {:?}  warped {:?}  actual {:?}",
                out.n_steps,
                c.name(),
                out.predicted_heatmap.argmax(ch).0,
                out.features.argmax(ch).0,
                truth.heatmap.argmax(ch).0
            );
        }
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
