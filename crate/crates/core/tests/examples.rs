//! Every example compiles into this test crate and runs to completion.

macro_rules! example_test {
    ($name:ident, $file:literal) => {
        #[allow(dead_code)]
        mod $name {
            include!($file);
        }

        #[test]
        fn $name() {
            $name::run_example();
        }
    };
}

example_test!(link_budget, "../examples/link_budget.rs");
example_test!(bev_warp, "../examples/bev_warp.rs");
example_test!(predictive_perception, "../examples/predictive_perception.rs");
example_test!(fusion_decode, "../examples/fusion_decode.rs");
example_test!(pragmatic_packing, "../examples/pragmatic_packing.rs");
example_test!(blind_spot, "../examples/blind_spot.rs");
example_test!(latency_sweep, "../examples/latency_sweep.rs");
