mod common;

use common::{dense_spec, tiny_engine};
use daqtrack::scenario::generate_scenario;
use daqtrack::tracker::EngineKind;
use daqtrack::train::checkpoint::{engine_from_bytes, engine_to_bytes};
use daqtrack::train::{train, AdamWConfig, TrainConfig};
use daqtrack::Error;

fn short_cfg(steps: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        optimizer: AdamWConfig {
            lr,
            ..AdamWConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let scns: Vec<_> = (0..3).map(|s| generate_scenario(&dense_spec(16), 40 + s).unwrap()).collect();
    for kind in [EngineKind::Daq, EngineKind::Baseline] {
        let mut engine = tiny_engine(kind, 16, 3);
        let before = engine.params.clone();
        let trace = train(&mut engine, &scns, &short_cfg(5, 0.0), 9).unwrap();
        assert_eq!(trace.len(), 5);
        for ((name, a), (_, b)) in before.iter().zip(engine.params.iter()) {
            let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "{kind:?} parameter {name} moved");
        }
    }
}

#[test]
fn same_seed_gives_identical_trace_and_weights() {
    let scns: Vec<_> = (0..3).map(|s| generate_scenario(&dense_spec(16), 70 + s).unwrap()).collect();
    let run = |seed| {
        let mut e = tiny_engine(EngineKind::Daq, 16, 1);
        let t = train(&mut e, &scns, &short_cfg(8, 1e-3), seed).unwrap();
        (t, engine_to_bytes(&e))
    };
    let (t1, w1) = run(5);
    let (t2, w2) = run(5);
    let (t3, _) = run(6);
    assert_eq!(t1, t2);
    assert_eq!(w1, w2);
    assert_ne!(t1, t3);
}

#[test]
fn loss_falls_on_a_single_scenario() {
    let scn = generate_scenario(&dense_spec(16), 123).unwrap();
    let mut engine = tiny_engine(EngineKind::Daq, 16, 2);
    let trace = train(&mut engine, std::slice::from_ref(&scn), &short_cfg(500, 3e-3), 11).unwrap();
    let mean = |rows: &[daqtrack::train::TraceRow]| rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
    let first = mean(&trace[..25]);
    let last = mean(&trace[trace.len() - 25..]);
    assert!(last < 0.1 * first, "initial {first}, final {last}");
}

#[test]
fn checkpoint_round_trip_is_exact() {
    for kind in [EngineKind::Daq, EngineKind::Baseline] {
        let engine = tiny_engine(kind, 16, 8);
        let bytes = engine_to_bytes(&engine);
        let back = engine_from_bytes(&bytes).unwrap();
        assert_eq!(back, engine);
        assert_eq!(engine_to_bytes(&back), bytes);
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = engine_to_bytes(&tiny_engine(EngineKind::Daq, 8, 0));
    assert!(engine_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(engine_from_bytes(&bad).is_err());
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(engine_from_bytes(&trailing).is_err());
}

#[test]
fn bad_training_inputs_are_rejected() {
    let mut engine = tiny_engine(EngineKind::Daq, 16, 0);
    assert!(matches!(train(&mut engine, &[], &short_cfg(1, 1e-3), 0), Err(Error::Input(_))));
    let scn = generate_scenario(&dense_spec(16), 1).unwrap();
    let cfg = TrainConfig {
        clip_len: scn.frames + 1,
        ..short_cfg(1, 1e-3)
    };
    assert!(matches!(train(&mut engine, &[scn.clone()], &cfg, 0), Err(Error::Input(_))));
    assert!(matches!(train(&mut engine, &[scn], &short_cfg(1, -1.0), 0), Err(Error::Config(_))));
}
