//! Property checks shared by focused tests and the acceptance suite. Each
//! returns a one-line summary on success and the first violation on failure.

use std::collections::BTreeSet;

use daqtrack::daq::{momentum_update, Track};
use daqtrack::matching::{hungarian, CostMatrix};
use daqtrack::nn::Tensor2;
use daqtrack::pad::{temporal_pad, VideoObjectSeq};
use daqtrack::scenario::{generate_scenario, NoiseSpec, Scenario};
use daqtrack::tracker::{replay_events, run_video_observed, Engine, EngineConfig, EngineKind};
use daqtrack::train::{train, TrainConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{brute_force_cost, dense_spec, rng};

pub type Outcome = Result<String, String>;

pub fn hungarian_oracle(matrices: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for k in 0..matrices {
        let rows = r.random_range(1..=6);
        let cols = r.random_range(1..=6);
        // every third matrix uses small integers so ties are common
        let ints = k % 3 == 0;
        let cm = CostMatrix::from_fn(rows, cols, |_, _| {
            if ints {
                r.random_range(0..4) as f64
            } else {
                r.random_range(-5.0..5.0)
            }
        })
        .map_err(|e| e.to_string())?;
        let m = hungarian(&cm);
        let best = brute_force_cost(&cm);
        if (m.cost - best).abs() > 1e-9 {
            return Err(format!("matrix {k} ({rows}x{cols}): cost {} vs exhaustive {best}", m.cost));
        }
        let sum: f64 = m.pairs.iter().map(|&(i, j)| cm.get(i, j)).sum();
        let rs: BTreeSet<usize> = m.pairs.iter().map(|p| p.0).collect();
        let cs: BTreeSet<usize> = m.pairs.iter().map(|p| p.1).collect();
        if m.pairs.len() != rows.min(cols) || rs.len() != m.pairs.len() || cs.len() != m.pairs.len() {
            return Err(format!("matrix {k}: pairs {:?} are not a matching of size {}", m.pairs, rows.min(cols)));
        }
        if (sum - m.cost).abs() > 1e-9 {
            return Err(format!("matrix {k}: reported cost {} but pairs sum to {sum}", m.cost));
        }
    }
    Ok(format!("{matrices} matrices up to 6x6 equal exhaustive search"))
}

fn gauss(r: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            z
        })
        .collect()
}

/// β-clamp and convex-combination laws on random histories, plus the β = 0
/// bit-identity law on histories built to be anti-aligned with the input.
pub fn momentum_laws(histories: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    let mut zero_beta = 0usize;
    for k in 0..histories {
        let dim = r.random_range(1..=8);
        let len = r.random_range(1..=6);
        let f_new = gauss(&mut r, dim);
        let anti = k % 4 == 0;
        let mut history: Vec<Vec<f64>> = (0..len).map(|_| gauss(&mut r, dim)).collect();
        if anti {
            for h in &mut history {
                *h = f_new.iter().map(|v| -v * r.random_range(0.1..2.0)).collect();
            }
        }
        let mut track = Track::new(1, vec![0.0; dim], history[0].clone(), 0.5, 1);
        track.feat_history = history;
        track.mom_feat = gauss(&mut r, dim);
        let before = track.mom_feat.clone();
        let beta = momentum_update(&mut track, &f_new).map_err(|e| e.to_string())?;
        if !(0.0..=1.0).contains(&beta) {
            return Err(format!("history {k}: beta {beta} outside [0,1]"));
        }
        for (i, ((&m, &o), &f)) in track.mom_feat.iter().zip(&before).zip(&f_new).enumerate() {
            if m < o.min(f) || m > o.max(f) {
                return Err(format!("history {k}, coord {i}: {m} not between {o} and {f}"));
            }
        }
        if anti {
            if beta != 0.0 {
                return Err(format!("history {k}: anti-aligned history gave beta {beta}"));
            }
            if track.mom_feat.iter().zip(&before).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("history {k}: beta = 0 changed the momentum feature"));
            }
            zero_beta += 1;
        }
    }
    Ok(format!("{histories} histories, {zero_beta} with beta = 0 left bit-unchanged"))
}

/// Engine trained for a handful of steps with a low acceptance threshold, so
/// that tracks are born and removed while the laws are checked.
pub fn stub_engine(kind: EngineKind, seed: u64) -> Engine {
    let mut config = EngineConfig::new(kind, 16, 4);
    config.lifecycle.accept_threshold = 0.2;
    let mut engine = Engine::new(config, seed).unwrap();
    let pool: Vec<Scenario> = (0..8).map(|i| generate_scenario(&dense_spec(16), 7000 + i).unwrap()).collect();
    let cfg = TrainConfig {
        steps: 40,
        ..TrainConfig::default()
    };
    train(&mut engine, &pool, &cfg, seed).unwrap();
    engine
}

#[derive(Default)]
pub struct StructuralTally {
    pub frames: usize,
    pub births: usize,
    pub deaths: usize,
    pub t2_columns: usize,
}

/// Anchor-count, arity, Q-dim column-stochastic and event-replay laws on every
/// frame of `scn`.
pub fn structural_laws(engine: &Engine, scn: &Scenario, seed: u64, tally: &mut StructuralTally) -> Result<(), String> {
    let cfg = &engine.config;
    let mut violation: Option<String> = None;
    let mut gone: BTreeSet<u32> = BTreeSet::new();
    let run = run_video_observed(scn, engine, &NoiseSpec::default(), seed, |p| {
        if violation.is_some() {
            return;
        }
        let ff = p.forward;
        let g = &ff.graph;
        let n_ctq = p.active_before.len();
        let mut fail = |m: String| violation = Some(format!("scenario {} frame {}: {m}", scn.seed, p.t));
        tally.frames += 1;
        if ff.n_ctq != n_ctq {
            return fail(format!("{} tracked queries for {n_ctq} active tracks", ff.n_ctq));
        }
        if ff.n_anchor() != cfg.top_k {
            return fail(format!("{} emergence anchors, expected {}", ff.n_anchor(), cfg.top_k));
        }
        let Some(t1) = &ff.t1 else {
            return fail("no tracker-1 rows".into());
        };
        let rows = g.value(t1.logits).rows();
        if rows != n_ctq + cfg.top_k || g.value(t1.mask_logits).rows() != rows {
            return fail(format!("tracker 1 emitted {rows} rows for {n_ctq} + {}", cfg.top_k));
        }
        match (&ff.t2, cfg.kind) {
            (Some(t2), EngineKind::Daq) => {
                if t2.n_dis != n_ctq {
                    return fail(format!("{} disappearance anchors for {n_ctq} tracks", t2.n_dis));
                }
                for (l, node) in t2.cross.iter().enumerate() {
                    let Some(probs) = g.attention_probs(*node) else {
                        return fail(format!("layer {l} has no attention record"));
                    };
                    for (h, pm) in probs.iter().enumerate() {
                        for j in 0..pm.cols() {
                            let s: f64 = (0..pm.rows()).map(|i| pm.get(i, j)).sum();
                            if (s - 1.0).abs() > 1e-12 || (0..pm.rows()).any(|i| pm.get(i, j) < 0.0) {
                                return fail(format!("tracker-2 layer {l} head {h} column {j} sums to {s}"));
                            }
                            tally.t2_columns += 1;
                        }
                    }
                }
            }
            (None, EngineKind::Daq) if n_ctq > 0 => return fail("tracker 2 skipped with active tracks".into()),
            (Some(_), EngineKind::Baseline) => return fail("baseline ran tracker 2".into()),
            _ => {}
        }
        let replay = match replay_events(&p.set.events) {
            Ok(r) => r,
            Err(e) => return fail(e.to_string()),
        };
        let active: BTreeSet<u32> = p.set.active_ids().into_iter().collect();
        if replay != active {
            return fail(format!("event replay {replay:?} != active {active:?}"));
        }
        for e in p.set.events.iter().filter(|e| e.t == p.t) {
            match e.kind {
                daqtrack::tracker::EventKind::Emerged => {
                    if gone.contains(&e.id) {
                        return fail(format!("id {} re-emerged", e.id));
                    }
                    tally.births += 1;
                }
                daqtrack::tracker::EventKind::Disappeared => {
                    gone.insert(e.id);
                    tally.deaths += 1;
                }
            }
        }
    })
    .map_err(|e| e.to_string())?;
    if let Some(v) = violation {
        return Err(v);
    }
    let outputs: BTreeSet<u32> = run.prediction.tracks.iter().map(|t| t.id).collect();
    let events: BTreeSet<u32> = run.track_set.events.iter().map(|e| e.id).collect();
    if outputs != events {
        return Err(format!("scenario {}: output ids {outputs:?} differ from event ids {events:?}", scn.seed));
    }
    Ok(())
}

pub fn structural_suite(scenarios: usize) -> Outcome {
    let mut tally = StructuralTally::default();
    for (k, kind) in [EngineKind::Daq, EngineKind::Baseline].into_iter().enumerate() {
        let engine = stub_engine(kind, 11 + k as u64);
        for i in 0..scenarios as u64 {
            let scn = generate_scenario(&dense_spec(16), 8100 + i).unwrap();
            structural_laws(&engine, &scn, i, &mut tally)?;
        }
    }
    if tally.births == 0 || tally.deaths == 0 {
        return Err(format!("stub engines produced {} births and {} deaths; laws were not exercised", tally.births, tally.deaths));
    }
    Ok(format!(
        "{} frames, {} births, {} removals, {} tracker-2 attention columns",
        tally.frames, tally.births, tally.deaths, tally.t2_columns
    ))
}

/// Random interval configurations through temporal padding: exact shape and
/// bit-preserved in-interval features.
pub fn padding_contract(configs: usize, seed: u64) -> Outcome {
    let mut r = rng(seed);
    for k in 0..configs {
        let frames = r.random_range(1..=20);
        let dim = r.random_range(1..=8);
        let n_tracked = r.random_range(0..=6);
        let extra = r.random_range(0..=4);
        let seqs: Vec<VideoObjectSeq> = (0..n_tracked)
            .map(|i| {
                let start = r.random_range(1..=frames);
                let end = r.random_range(start..=frames);
                let len = end - start + 1;
                VideoObjectSeq {
                    track_id: i as u32 + 1,
                    start,
                    end,
                    features: (0..len).map(|_| gauss(&mut r, dim)).collect(),
                    momentum: (0..len).map(|_| gauss(&mut r, dim)).collect(),
                    score: r.random_range(0.0..1.0),
                }
            })
            .collect();
        let n_seg = r.random_range(1..=6);
        let queries: Vec<Tensor2> = (0..frames)
            .map(|_| Tensor2::from_fn(n_seg, dim, |_, _| StandardNormal.sample(&mut r)))
            .collect();
        let scores: Vec<Vec<f64>> = (0..frames).map(|_| (0..n_seg).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let n = n_tracked + extra;
        let grid = daqtrack::pad::pad_video(&seqs, &queries, &scores, n).map_err(|e| format!("config {k}: {e}"))?;
        if (grid.n, grid.frames, grid.dim) != (n, frames, dim) || grid.data.shape() != (n * frames, dim) {
            return Err(format!("config {k}: grid {}x{}x{} for {n}x{frames}x{dim}", grid.n, grid.frames, grid.dim));
        }
        if grid.track_ids.len() != n || grid.padded_flags.len() != n {
            return Err(format!("config {k}: manifest arrays have wrong length"));
        }
        let temporal = temporal_pad(&seqs, frames).map_err(|e| e.to_string())?;
        for (i, s) in seqs.iter().enumerate() {
            if grid.track_ids[i] != Some(s.track_id) {
                return Err(format!("config {k}: row {i} is not track {}", s.track_id));
            }
            for t in s.start..=s.end {
                let want = &s.features[t - s.start];
                let got = grid.get(i, t);
                if want.iter().zip(got).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!("config {k}: track {} frame {t} altered", s.track_id));
                }
            }
            if temporal[i].frames.len() != frames {
                return Err(format!("config {k}: temporal padding left a frame unfilled"));
            }
        }
    }
    Ok(format!("{configs} random interval configurations"))
}
