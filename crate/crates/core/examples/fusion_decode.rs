// One exchange between an ego vehicle and a roadside unit: pack, fuse,
// decode and score the result against ground truth.

use v2xsim::drive::Action;
use v2xsim::fusion::{decode, fuse, nms};
use v2xsim::geometry::Pose;
use v2xsim::grids::GridSpec;
use v2xsim::metrics::{class_merged_ap, ApAccumulator, WeightProfile};
use v2xsim::pragcomm::{baseline_request_map, confidence_map, pack_baseline, MessageHeader};
use v2xsim::seed::stream;
use v2xsim::world::{AgentState, ObjectClass, PoseNoise, Role, World, WorldObject};

fn agent(id: u32, role: Role, x: f64, y: f64, range: f64) -> AgentState {
    AgentState {
        id,
        role,
        pose: Pose::new(x, y, 0.0),
        speed: 0.0,
        sensing_range: range,
        fov: std::f64::consts::TAU,
        action: Action::default(),
        extent: (4.5, 2.0),
    }
}

pub fn run_example() {
    let spec = GridSpec::new(60, 120, 0.5).unwrap();
    let mut world = World::new(spec);
    world.agents.push(agent(0, Role::Ego, 5.0, 15.0, 15.0));
    world.agents.push(agent(1, Role::Rsu, 40.0, 25.0, 40.0));
    let specs = [
        (10, ObjectClass::Vehicle, 15.0, 12.0, (4.5, 2.0)),
        (11, ObjectClass::Vehicle, 35.0, 18.0, (4.5, 2.0)),
        (12, ObjectClass::Bicycle, 30.0, 8.0, (1.8, 0.6)),
        (13, ObjectClass::Pedestrian, 45.0, 20.0, (0.6, 0.6)),
        (14, ObjectClass::Pedestrian, 50.0, 10.0, (0.6, 0.6)),
    ];
    for (id, class, x, y, extent) in specs {
        world.objects.push(WorldObject { id, class, pose: Pose::new(x, y, 0.0), extent, velocity: (0.0, 0.0) });
    }

    let ego = world.sense(0, &PoseNoise::default(), &mut stream(1, 0, "pose", 0));
    let rsu = world.sense(1, &PoseNoise { sigma_p: 0.05, sigma_r: 0.1 }, &mut stream(1, 1, "pose", 0));
    let ego_conf = confidence_map(&ego.heatmap, 1.0);
    let rsu_conf = confidence_map(&rsu.heatmap, 1.0);
    let header = MessageHeader { sender: 1, receiver: 0, t_send: 0.0 };
    let msg = pack_baseline(&rsu.features, &rsu_conf, &baseline_request_map(&ego_conf), 0.05, header).unwrap();
    println!(
        "ego sees {:?}, rsu sees {:?}; message carries {} of {} cells ({} bits)",
        ego.visible,
        rsu.visible,
        msg.mask.cardinality(),
        spec.cells(),
        msg.size_bits
    );

    let gts: Vec<_> = world.objects.iter().map(|o| (o.class, o.footprint())).collect();
    for (label, fused) in [
        ("ego only", fuse(&ego.features, &ego_conf, &[]).unwrap()),
        ("fused", fuse(&ego.features, &ego_conf, std::slice::from_ref(&msg)).unwrap()),
    ] {
        let dets = nms(&decode(&fused, 0.3).unwrap(), 0.1);
        let mut acc = ApAccumulator::new(0.5);
        acc.add_frame(&dets, &gts);
        println!(
            "{label:<8} {} detections, AP50 per class {:?}, merged {:.3}",
            dets.len(),
            acc.per_class().map(|a| (a * 1000.0).round() / 1000.0),
            class_merged_ap(acc.per_class(), WeightProfile::Latency)
        );
    }
}

#[allow(dead_code)]
fn main() {
    run_example();
}
