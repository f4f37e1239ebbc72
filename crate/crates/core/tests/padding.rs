mod common;

use common::{laws, rng};
use daqtrack::nn::Tensor2;
use daqtrack::pad::{naive_associate, spatial_pad, temporal_pad, GridManifest, PaddedGrid, PaddedSeq, VideoObjectSeq};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn contract_over_five_hundred_configurations() {
    laws::padding_contract(500, 21).unwrap();
}

/// Piecewise-constant extension written out frame by frame.
fn temporal_oracle(s: &VideoObjectSeq, t: usize) -> Vec<f64> {
    let mut v = s.momentum[0].clone();
    for u in 1..=t {
        if u >= s.start && u <= s.end {
            v = if u == t { s.features[u - s.start].clone() } else { s.momentum[u - s.start].clone() };
        }
    }
    v
}

proptest! {
    #[test]
    fn temporal_padding_matches_oracle(
        frames in 1usize..12,
        a in 0usize..12,
        b in 0usize..12,
        seed in 0u64..1000,
    ) {
        let start = a % frames + 1;
        let end = start + b % (frames - start + 1);
        let mut r = rng(seed);
        let len = end - start + 1;
        let s = VideoObjectSeq {
            track_id: 4,
            start,
            end,
            features: (0..len).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect(),
            momentum: (0..len).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect(),
            score: 0.3,
        };
        let out = temporal_pad(std::slice::from_ref(&s), frames).unwrap();
        for t in 1..=frames {
            prop_assert_eq!(&out[0].frames[t - 1], &temporal_oracle(&s, t));
        }
    }

    #[test]
    fn spatial_selection_matches_sort_oracle(
        scores in prop::collection::vec(0.0f64..1.0, 0..10),
        n_tracked in 0usize..4,
        extra in 0usize..6,
    ) {
        let mk = |id: Option<u32>, score: f64| PaddedSeq { track_id: id, frames: vec![vec![score]; 3], score };
        let tracked: Vec<PaddedSeq> = (0..n_tracked).map(|i| mk(Some(i as u32 + 1), 2.0)).collect();
        let naive: Vec<PaddedSeq> = scores.iter().map(|&s| mk(None, s)).collect();
        let n = n_tracked + extra;
        let grid = spatial_pad(&tracked, &naive, n, 3, 1).unwrap();
        let mut want: Vec<(f64, usize)> = scores.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        want.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
        for k in 0..extra {
            let row = n_tracked + k;
            match want.get(k) {
                Some(&(s, _)) => {
                    prop_assert_eq!(grid.get(row, 1), &[s][..]);
                    prop_assert!(!grid.padded_flags[row]);
                }
                None => {
                    prop_assert_eq!(grid.get(row, 2), &[0.0][..]);
                    prop_assert!(grid.padded_flags[row]);
                }
            }
        }
    }
}

#[test]
fn naive_association_recovers_separated_identities() {
    let mut r = rng(33);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let dim = 16;
    let proto: Vec<Vec<f64>> = (0..2)
        .map(|k| (0..dim).map(|j| if j % 2 == k { 0.35 } else { 0.0 }).collect())
        .collect();
    let mut correct = 0;
    let trials = 200;
    for _ in 0..trials {
        let mut ident: Vec<[usize; 2]> = Vec::new();
        let queries: Vec<Tensor2> = (0..5)
            .map(|_| {
                let order = if r.random_bool(0.5) { [0, 1] } else { [1, 0] };
                ident.push(order);
                Tensor2::from_fn(2, dim, |i, j| proto[order[i]][j] + noise.sample(&mut r))
            })
            .collect();
        let scores = vec![vec![0.9, 0.8]; 5];
        let chains = naive_associate(&queries, &scores).unwrap();
        // each chain must stay on one prototype across all five frames
        let ok = chains.iter().all(|c| {
            let who = |t: usize| {
                let f = &c.frames[t];
                let d = |p: &Vec<f64>| f.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                if d(&proto[0]) < d(&proto[1]) { 0 } else { 1 }
            };
            (1..5).all(|t| who(t) == who(0))
        });
        correct += ok as usize;
    }
    assert_eq!(correct, trials);
}

#[test]
fn grid_round_trips_through_manifest_and_blob() {
    let mut r = rng(2);
    let seqs = vec![VideoObjectSeq {
        track_id: 7,
        start: 2,
        end: 3,
        features: vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        momentum: vec![vec![0.5, 0.5], vec![0.25, 0.75]],
        score: 0.9,
    }];
    let queries: Vec<Tensor2> = (0..4).map(|_| Tensor2::from_fn(3, 2, |_, _| r.random_range(-1.0..1.0))).collect();
    let scores = vec![vec![0.1, 0.7, 0.4]; 4];
    let grid = daqtrack::pad::pad_video(&seqs, &queries, &scores, 6).unwrap();
    let manifest: GridManifest = serde_json::from_str(&serde_json::to_string(&grid.manifest()).unwrap()).unwrap();
    let back = PaddedGrid::from_parts(&manifest, &grid.blob()).unwrap();
    assert_eq!(back, grid);
    assert_eq!(grid.padded_flags, vec![false, false, false, false, true, true]);
    assert_eq!(grid.get(0, 1), &[0.5, 0.5]);
    assert_eq!(grid.get(0, 4), &[0.25, 0.75]);
    assert!(PaddedGrid::from_parts(&manifest, &grid.blob()[..20]).is_err());
}
