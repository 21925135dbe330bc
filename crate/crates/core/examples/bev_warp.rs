// Moving objects on a BEV grid: ground-truth motion flow, flow recovered
// from heatmaps alone, and the features warped along it.

use v2xsim::dpp::{estimate_flow, extract_flow_oracle, forward_warp, DppConfig};
use v2xsim::geometry::Pose;
use v2xsim::grids::{affine_warp, FlowField, GridSpec};
use v2xsim::world::{rasterize_objects, ObjectClass, PerceptionConfig, WorldObject, NUM_CLASSES};

fn car(id: u32, x: f64, y: f64, class: ObjectClass) -> WorldObject {
    let extent = match class {
        ObjectClass::Vehicle => (4.5, 2.0),
        ObjectClass::Bicycle => (1.8, 0.6),
        ObjectClass::Pedestrian => (0.6, 0.6),
    };
    WorldObject { id, class, pose: Pose::new(x, y, 0.0), extent, velocity: (0.0, 0.0) }
}

pub fn run_example() {
    let spec = GridSpec::new(40, 60, 0.5).unwrap();
    let perception = PerceptionConfig::default();
    let before = [car(1, 8.25, 5.25, ObjectClass::Vehicle), car(2, 20.25, 14.25, ObjectClass::Pedestrian)];
    // Vehicle moves 3 cells right, pedestrian 1 cell down.
    let after = [car(1, 9.75, 5.25, ObjectClass::Vehicle), car(2, 20.25, 13.75, ObjectClass::Pedestrian)];
    let (f0, l0) = rasterize_objects(spec, &before, &perception);
    let (f1, l1) = rasterize_objects(spec, &after, &perception);

    let (oracle, report) = extract_flow_oracle(&l0, &l1);
    let heat0 = f0.channel_range(0, NUM_CLASSES);
    let heat1 = f1.channel_range(0, NUM_CLASSES);
    let estimated = estimate_flow(&heat0, &heat1, &DppConfig::default());
    println!(
        "oracle flow vs heatmap flow: {} mismatched cells, {} appeared, {} disappeared",
        oracle.mismatched_cells(&estimated),
        report.appeared.len(),
        report.disappeared.len()
    );

    let warped = forward_warp(&f0, &estimated).unwrap();
    for c in [ObjectClass::Vehicle, ObjectClass::Pedestrian] {
        let ch = c.index();
        println!(
            "{:<10} peak before {:?}  warped {:?}  actual {:?}",
            c.name(),
            f0.argmax(ch).0,
            warped.argmax(ch).0,
            f1.argmax(ch).0
        );
    }

    // A uniform gather flow of (-2, 0) samples each cell from two columns to
    // the left, shifting content right.
    let shifted = affine_warp(&heat0, &FlowField::uniform(spec.height, spec.width, -2.0, 0.0)).unwrap();
    println!("uniform shift: vehicle peak {:?} -> {:?}", heat0.argmax(0).0, shifted.argmax(0).0);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
