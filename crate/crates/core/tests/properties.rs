use proptest::prelude::*;

use v2xsim::channel::{delivery_time, discretize_latency, LatencyBreakdown, SlotSchedule};
use v2xsim::drive::Action;
use v2xsim::fusion::fuse;
use v2xsim::geometry::{iou, OrientedBox, Pose};
use v2xsim::grids::{affine_warp, channel_max, FlowField, Grid, GridSpec};
use v2xsim::metrics::{average_precision, infraction_penalty, match_frame, InfractionKind, PenaltyConfig};
use v2xsim::pragcomm::{
    aoim_request_map, apc_mask, baseline_mask, message_size_bits, pack_apc, pack_baseline, MessageHeader,
};
use v2xsim::world::{AgentState, ObjectClass, Role, World, WorldObject};

fn grid_strategy(max_h: usize, max_w: usize, max_c: usize) -> impl Strategy<Value = Grid> {
    (1..=max_h, 1..=max_w, 1..=max_c).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-2.0f32..2.0, h * w * c)
            .prop_map(move |v| Grid::from_vec(h, w, c, 0.5, v).unwrap())
    })
}

fn unit_grid(h: usize, w: usize) -> impl Strategy<Value = Grid> {
    prop::collection::vec(0.0f32..1.0, h * w).prop_map(move |v| Grid::from_vec(h, w, 1, 0.5, v).unwrap())
}

fn header(sender: u32, t_send: f64) -> MessageHeader {
    MessageHeader { sender, receiver: 0, t_send }
}

/// Detections perturbed around ground-truth boxes plus clutter.
fn scene_strategy() -> impl Strategy<Value = (Vec<(f64, OrientedBox)>, Vec<OrientedBox>)> {
    let gt = prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 1.0..5.0f64, 0.5..2.5f64, -1.5..1.5f64), 1..8);
    gt.prop_flat_map(|gts| {
        let n = gts.len();
        let noise = prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, 0.7..1.3f64, -0.4..0.4f64, 0.0..1.0f64), n);
        let clutter = prop::collection::vec((0.0..40.0f64, 0.0..40.0f64, 0.0..1.0f64), 0..5);
        (Just(gts), noise, clutter).prop_map(|(gts, noise, clutter)| {
            let boxes: Vec<OrientedBox> =
                gts.iter().map(|&(x, y, l, w, yaw)| OrientedBox::new(x, y, l, w, yaw)).collect();
            let mut dets: Vec<(f64, OrientedBox)> = boxes
                .iter()
                .zip(&noise)
                .map(|(b, &(dx, dy, s, dyaw, score))| {
                    (score, OrientedBox::new(b.cx + dx, b.cy + dy, b.length * s, b.width * s, b.yaw + dyaw))
                })
                .collect();
            dets.extend(clutter.iter().map(|&(x, y, score)| (score, OrientedBox::new(x, y, 2.0, 1.0, 0.0))));
            (dets, boxes)
        })
    })
}

fn ap_at(dets: &[(f64, OrientedBox)], gts: &[OrientedBox], thr: f64) -> f64 {
    average_precision(&match_frame(dets, gts, thr), gts.len())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_flow_warp_is_identity(g in grid_strategy(8, 8, 4)) {
        let out = affine_warp(&g, &FlowField::zeros(g.height(), g.width())).unwrap();
        prop_assert_eq!(out, g);
    }

    #[test]
    fn uniform_flow_shifts_with_zero_fill(g in grid_strategy(8, 8, 3), dx in -4i32..=4, dy in -4i32..=4) {
        let out = affine_warp(&g, &FlowField::uniform(g.height(), g.width(), dx as f32, dy as f32)).unwrap();
        for y in 0..g.height() {
            for x in 0..g.width() {
                let (sx, sy) = (x as i32 + dx, y as i32 + dy);
                let inside = sx >= 0 && sy >= 0 && (sx as usize) < g.width() && (sy as usize) < g.height();
                for c in 0..g.channels() {
                    let want = if inside { g.get(sx as usize, sy as usize, c) } else { 0.0 };
                    prop_assert_eq!(out.get(x, y, c), want);
                }
            }
        }
    }

    #[test]
    fn channel_max_bounds_every_channel(g in grid_strategy(6, 6, 5)) {
        let m = channel_max(&g);
        for y in 0..g.height() {
            for x in 0..g.width() {
                let cell = g.cell(x, y);
                prop_assert!(cell.iter().all(|&v| v <= m.get(x, y, 0)));
                prop_assert!(cell.contains(&m.get(x, y, 0)));
            }
        }
    }

    #[test]
    fn raising_threshold_never_adds_cells(
        conf in unit_grid(6, 7), cur in unit_grid(6, 7), req in unit_grid(6, 7),
        p1 in 0.0..1.0f64, p2 in 0.0..1.0f64, n in 0u32..4,
    ) {
        let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
        prop_assert!(baseline_mask(&conf, &req, hi).unwrap().is_subset_of(&baseline_mask(&conf, &req, lo).unwrap()));
        prop_assert!(apc_mask(&conf, &cur, &req, n, hi).unwrap().is_subset_of(&apc_mask(&conf, &cur, &req, n, lo).unwrap()));
    }

    #[test]
    fn apc_without_alert_matches_baseline(
        conf in unit_grid(5, 6), req in unit_grid(5, 6), p in 0.01..1.0f64, n in 0u32..4,
    ) {
        let f = Grid::filled(conf.spec(), 4, 1.0);
        let a = pack_apc(&f, &conf, &conf, &req, n, p, header(1, 0.0)).unwrap();
        let b = pack_baseline(&f, &conf, &req, p, header(1, 0.0)).unwrap();
        prop_assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn aoim_term_stays_within_radius(
        wx in 0.0..20.0f64, wy in 0.0..15.0f64, sigma in 1.0..10.0f64, r in 0.5..15.0f64,
        conf in unit_grid(30, 40),
    ) {
        let spec = GridSpec::new(30, 40, 0.5).unwrap();
        let req = aoim_request_map(&[(wx, wy)], (wx, wy), spec, sigma, true).unwrap();
        let p = (-r * r / (2.0 * sigma * sigma)).exp() + 1e-6;
        // Without alert the mask is the request term alone.
        let mask = apc_mask(&conf, &conf, &req, 1, p).unwrap();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if mask.get(x, y) {
                    let (px, py) = spec.cell_center(x, y);
                    prop_assert!((px - wx).hypot(py - wy) <= r + 1e-6);
                }
            }
        }
    }

    #[test]
    fn message_size_counts_selected_values(conf in unit_grid(6, 6), p in 0.0..1.0f64, d in 1usize..70) {
        let f = Grid::filled(conf.spec(), d, 0.5);
        let req = Grid::filled(conf.spec(), 1, 1.0);
        let m = pack_baseline(&f, &conf, &req, p, header(2, 0.0)).unwrap();
        prop_assert_eq!(m.size_bits, m.mask.cardinality() as u64 * d as u64 * 32);
        prop_assert_eq!(m.size_bits, message_size_bits(m.mask.cardinality(), d));
    }

    #[test]
    fn ap_is_bounded_and_monotone_in_iou((dets, gts) in scene_strategy()) {
        let a30 = ap_at(&dets, &gts, 0.3);
        let a50 = ap_at(&dets, &gts, 0.5);
        let a70 = ap_at(&dets, &gts, 0.7);
        for a in [a30, a50, a70] {
            prop_assert!((0.0..=1.0).contains(&a));
        }
        prop_assert!(a30 + 1e-12 >= a50 && a50 + 1e-12 >= a70, "{a30} {a50} {a70}");
    }

    #[test]
    fn perfect_detection_of_a_missed_object_never_hurts((dets, gts) in scene_strategy(), pick in 0usize..8) {
        let missed: Vec<_> = gts.iter().filter(|g| dets.iter().all(|(_, d)| iou(d, g) < 0.5)).collect();
        prop_assume!(!missed.is_empty());
        let before = ap_at(&dets, &gts, 0.5);
        let mut more = dets.clone();
        more.push((2.0, *missed[pick % missed.len()]));
        prop_assert!(ap_at(&more, &gts, 0.5) > before);
    }

    #[test]
    fn lowest_false_positive_never_helps((dets, gts) in scene_strategy()) {
        let before = ap_at(&dets, &gts, 0.5);
        let mut more = dets.clone();
        more.push((-1.0, OrientedBox::new(500.0, 500.0, 2.0, 1.0, 0.0)));
        prop_assert!(ap_at(&more, &gts, 0.5) <= before + 1e-12);
    }

    #[test]
    fn penalty_never_increases_with_infractions(p in 0u32..5, v in 0u32..5, l in 0u32..5, which in 0usize..3) {
        let cfg = PenaltyConfig::default();
        let mut counts = [
            (InfractionKind::PedestrianCollision, p),
            (InfractionKind::VehicleCollision, v),
            (InfractionKind::LayoutCollision, l),
        ];
        let before = infraction_penalty(&counts, &cfg);
        counts[which].1 += 1;
        let after = infraction_penalty(&counts, &cfg);
        prop_assert!(after <= before && after > 0.0 && before <= 1.0);
    }

    #[test]
    fn fusion_ignores_message_order(
        ego in prop::collection::vec(-1.0f32..1.0, 4 * 5 * 3),
        payloads in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4 * 5 * 3), 1..4),
        conf in unit_grid(4, 5), p in 0.0..0.6f64,
    ) {
        let ego = Grid::from_vec(4, 5, 3, 0.5, ego).unwrap();
        let req = Grid::filled(ego.spec(), 1, 1.0);
        let msgs: Vec<_> = payloads
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let f = Grid::from_vec(4, 5, 3, 0.5, v).unwrap();
                pack_baseline(&f, &conf, &req, p, header(i as u32 + 1, 0.0)).unwrap()
            })
            .collect();
        let mut rev = msgs.clone();
        rev.reverse();
        prop_assert_eq!(fuse(&ego, &conf, &msgs).unwrap(), fuse(&ego, &conf, &rev).unwrap());
    }

    #[test]
    fn discretization_brackets_the_estimate(tau in 0.0..5000.0f64, dt in 1.0..500.0f64) {
        let n = discretize_latency(tau, dt).unwrap() as f64;
        prop_assert!(n * dt <= tau + 1e-9 && tau < (n + 1.0) * dt + 1e-9);
    }

    #[test]
    fn delivery_respects_causal_bound(
        t in 0.0..10_000.0f64, ext in 0.0..100.0f64, asyn in -200.0..200.0f64,
        tx in 0.0..600.0f64, dm in 0.0..50.0f64, q in 0.0..100.0f64,
    ) {
        let b = LatencyBreakdown { ext, asyn, tx_pr: tx, tx_net: 0.0, dm, queue: q };
        let r = delivery_time(t, &SlotSchedule::default(), &b);
        prop_assert!(r >= t + b.causal() - 1e-9);
        prop_assert!(r >= t);
    }

    #[test]
    fn extra_obstacle_never_reveals(
        tx in 5.0..45.0f64, ty in 5.0..45.0f64,
        ox in 5.0..45.0f64, oy in 5.0..45.0f64, ol in 0.5..8.0f64, ow in 0.5..4.0f64, oyaw in -1.6..1.6f64,
        bx in 5.0..45.0f64, by in 5.0..45.0f64,
    ) {
        let mut world = World::new(GridSpec::new(100, 100, 0.5).unwrap());
        world.agents.push(AgentState {
            id: 0, role: Role::Ego, pose: Pose::new(25.0, 25.0, 0.0), speed: 0.0, sensing_range: 60.0,
            fov: std::f64::consts::TAU, action: Action::default(), extent: (4.5, 2.0),
        });
        let obj = |id, x, y, l, w, yaw| WorldObject {
            id, class: ObjectClass::Vehicle, pose: Pose::new(x, y, yaw), extent: (l, w), velocity: (0.0, 0.0),
        };
        world.objects.push(obj(1, tx, ty, 1.0, 1.0, 0.0));
        world.objects.push(obj(2, ox, oy, ol, ow, oyaw));
        let before = world.is_visible(&world.agents[0], &world.objects[0]);
        world.objects.push(obj(3, bx, by, 3.0, 2.0, 0.5));
        let after = world.is_visible(&world.agents[0], &world.objects[0]);
        prop_assert!(before || !after);
    }
}
