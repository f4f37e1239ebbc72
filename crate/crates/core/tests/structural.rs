mod common;

use common::{dense_spec, laws};
use daqtrack::scenario::generate_scenario;
use daqtrack::tracker::EngineKind;
use proptest::prelude::*;

#[test]
fn laws_hold_over_every_frame_of_a_suite() {
    let summary = laws::structural_suite(4).unwrap();
    println!("{summary}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, ..ProptestConfig::default() })]

    #[test]
    fn laws_hold_on_random_scenarios(seed in 0u64..1_000_000, run_seed in 0u64..1000) {
        use std::sync::OnceLock;
        static ENGINE: OnceLock<daqtrack::tracker::Engine> = OnceLock::new();
        let engine = ENGINE.get_or_init(|| laws::stub_engine(EngineKind::Daq, 3));
        let scn = generate_scenario(&dense_spec(16), seed).unwrap();
        let mut tally = laws::StructuralTally::default();
        let r = laws::structural_laws(engine, &scn, run_seed, &mut tally);
        prop_assert!(r.is_ok(), "{:?}", r);
        prop_assert_eq!(tally.frames, scn.frames);
    }
}
