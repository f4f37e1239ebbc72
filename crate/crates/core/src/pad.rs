//! Spatio-temporal padding of tracker outputs into a fixed `N × T × C` grid
//! for an offline refiner.
//!
//! Temporal padding extends each tracked sequence over the whole clip with its
//! momentum feature held at the nearest boundary. Spatial padding fills the
//! remaining rows with naively associated segmenter sequences, ranked by mean
//! classification score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{hungarian, CostMatrix};
use crate::nn::{cosine, Tensor2};
use crate::train::checkpoint::{write_tensor, Reader};

/// One object's features over its active interval `[start, end]` (1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoObjectSeq {
    pub track_id: u32,
    pub start: usize,
    pub end: usize,
    /// Query feature per active frame.
    pub features: Vec<Vec<f64>>,
    /// Momentum feature per active frame.
    pub momentum: Vec<Vec<f64>>,
    pub score: f64,
}

impl VideoObjectSeq {
    fn check(&self, frames: usize) -> Result<()> {
        if self.start < 1 || self.start > self.end || self.end > frames {
            return Err(Error::Input(format!(
                "track {} interval [{}, {}] outside clip 1..={frames}",
                self.track_id, self.start, self.end
            )));
        }
        let len = self.end - self.start + 1;
        if self.features.len() != len || self.momentum.len() != len {
            return Err(Error::Input(format!(
                "track {} has {} features and {} momentum rows for {len} active frames",
                self.track_id,
                self.features.len(),
                self.momentum.len()
            )));
        }
        Ok(())
    }
}

/// A sequence covering every frame of the clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedSeq {
    pub track_id: Option<u32>,
    /// One feature per frame, `T` rows.
    pub frames: Vec<Vec<f64>>,
    pub score: f64,
}

/// Extends every sequence to `frames` frames.
pub fn temporal_pad(seqs: &[VideoObjectSeq], frames: usize) -> Result<Vec<PaddedSeq>> {
    seqs.iter()
        .map(|s| {
            s.check(frames)?;
            let out = (1..=frames)
                .map(|t| {
                    if t < s.start {
                        s.momentum[0].clone()
                    } else if t > s.end {
                        s.momentum[s.end - s.start].clone()
                    } else {
                        s.features[t - s.start].clone()
                    }
                })
                .collect();
            Ok(PaddedSeq {
                track_id: Some(s.track_id),
                frames: out,
                score: s.score,
            })
        })
        .collect()
}

/// Chains per-frame queries into sequences by frame-to-frame Hungarian
/// matching on negative cosine similarity.
///
/// `queries[t]` holds the `n × C` queries of frame `t` and `scores[t]` their
/// foreground scores. Every frame must carry the same number of queries.
pub fn naive_associate(queries: &[Tensor2], scores: &[Vec<f64>]) -> Result<Vec<PaddedSeq>> {
    let Some(first) = queries.first() else {
        return Err(Error::Input("naive association needs at least one frame".into()));
    };
    let n = first.rows();
    if scores.len() != queries.len() {
        return Err(Error::Input(format!("{} score rows for {} frames", scores.len(), queries.len())));
    }
    for (t, (q, s)) in queries.iter().zip(scores).enumerate() {
        if q.rows() != n || s.len() != n || q.cols() != first.cols() {
            return Err(Error::Input(format!("frame {} has a different query layout", t + 1)));
        }
    }
    // chain[k][t] = query index of chain k at frame t
    let mut chains: Vec<Vec<usize>> = (0..n).map(|k| vec![k]).collect();
    for t in 1..queries.len() {
        let prev = &queries[t - 1];
        let cur = &queries[t];
        let cm = CostMatrix::from_fn(n, n, |k, j| {
            let last = *chains[k].last().expect("chain is nonempty");
            -cosine(prev.row(last), cur.row(j))
        })?;
        let mut next = vec![0; n];
        for (k, j) in hungarian(&cm).pairs {
            next[k] = j;
        }
        for (k, c) in chains.iter_mut().enumerate() {
            c.push(next[k]);
        }
    }
    Ok(chains
        .into_iter()
        .map(|c| {
            let score = c.iter().enumerate().map(|(t, &j)| scores[t][j]).sum::<f64>() / c.len() as f64;
            PaddedSeq {
                track_id: None,
                frames: c.iter().enumerate().map(|(t, &j)| queries[t].row(j).to_vec()).collect(),
                score,
            }
        })
        .collect())
}

/// The refiner input: `N` sequences of `T` frames of `C` features.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedGrid {
    pub n: usize,
    pub frames: usize,
    pub dim: usize,
    pub track_ids: Vec<Option<u32>>,
    /// True for zero-feature rows added because too few sequences existed.
    pub padded_flags: Vec<bool>,
    /// `(N·T) × C`, sequence-major.
    pub data: Tensor2,
}

impl PaddedGrid {
    pub fn get(&self, seq: usize, t: usize) -> &[f64] {
        self.data.row(seq * self.frames + t - 1)
    }
}

/// Tracked sequences first, then the best-scoring naive ones, then zero rows.
pub fn spatial_pad(tracked: &[PaddedSeq], naive: &[PaddedSeq], n: usize, frames: usize, dim: usize) -> Result<PaddedGrid> {
    if n < tracked.len() {
        return Err(Error::Input(format!("N = {n} is smaller than {} tracked sequences", tracked.len())));
    }
    for s in tracked.iter().chain(naive) {
        if s.frames.len() != frames || s.frames.iter().any(|f| f.len() != dim) {
            return Err(Error::Input(format!("sequence is not {frames} x {dim}")));
        }
    }
    let mut order: Vec<usize> = (0..naive.len()).collect();
    order.sort_by(|&a, &b| naive[b].score.total_cmp(&naive[a].score).then(a.cmp(&b)));
    order.truncate(n - tracked.len());

    let mut data = Vec::with_capacity(n * frames * dim);
    let mut track_ids = Vec::with_capacity(n);
    let mut padded_flags = Vec::with_capacity(n);
    for s in tracked.iter().chain(order.iter().map(|&k| &naive[k])) {
        for f in &s.frames {
            data.extend_from_slice(f);
        }
        track_ids.push(s.track_id);
        padded_flags.push(false);
    }
    while track_ids.len() < n {
        data.extend(std::iter::repeat_n(0.0, frames * dim));
        track_ids.push(None);
        padded_flags.push(true);
    }
    Ok(PaddedGrid {
        n,
        frames,
        dim,
        track_ids,
        padded_flags,
        data: Tensor2::new(n * frames, dim, data)?,
    })
}

/// Temporal then spatial padding.
pub fn pad_video(
    tracked: &[VideoObjectSeq],
    queries: &[Tensor2],
    scores: &[Vec<f64>],
    n: usize,
) -> Result<PaddedGrid> {
    let frames = queries.len();
    let dim = queries.first().map_or(0, |q| q.cols());
    let t = temporal_pad(tracked, frames)?;
    let naive = naive_associate(queries, scores)?;
    spatial_pad(&t, &naive, n, frames, dim)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridManifest {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "C")]
    pub dim: usize,
    pub track_ids: Vec<Option<u32>>,
    pub padded_flags: Vec<bool>,
}

impl PaddedGrid {
    pub fn manifest(&self) -> GridManifest {
        GridManifest {
            n: self.n,
            frames: self.frames,
            dim: self.dim,
            track_ids: self.track_ids.clone(),
            padded_flags: self.padded_flags.clone(),
        }
    }

    /// The feature blob in the checkpoint tensor encoding.
    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_tensor(&mut out, &self.data);
        out
    }

    pub fn from_parts(manifest: &GridManifest, blob: &[u8]) -> Result<Self> {
        let mut r = Reader::new(blob);
        let data = r.tensor("padded grid")?;
        if !r.finished() || data.rows() != manifest.n * manifest.frames || data.cols() != manifest.dim {
            return Err(Error::parse("padded grid", "blob does not match manifest"));
        }
        if manifest.track_ids.len() != manifest.n || manifest.padded_flags.len() != manifest.n {
            return Err(Error::parse("manifest", "track_ids/padded_flags must have N entries"));
        }
        Ok(Self {
            n: manifest.n,
            frames: manifest.frames,
            dim: manifest.dim,
            track_ids: manifest.track_ids.clone(),
            padded_flags: manifest.padded_flags.clone(),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(id: u32, start: usize, end: usize) -> VideoObjectSeq {
        let len = end - start + 1;
        VideoObjectSeq {
            track_id: id,
            start,
            end,
            features: (0..len).map(|k| vec![k as f64, 1.0]).collect(),
            momentum: (0..len).map(|k| vec![10.0 + k as f64, 2.0]).collect(),
            score: 0.5,
        }
    }

    #[test]
    fn single_frame_sequence_holds_its_momentum() {
        let out = temporal_pad(&[seq(1, 3, 3)], 5).unwrap();
        let f = &out[0].frames;
        assert_eq!(f[2], vec![0.0, 1.0]);
        for t in [0, 1, 3, 4] {
            assert_eq!(f[t], vec![10.0, 2.0]);
        }
    }

    #[test]
    fn full_span_unchanged() {
        let s = seq(1, 1, 4);
        assert_eq!(temporal_pad(std::slice::from_ref(&s), 4).unwrap()[0].frames, s.features);
    }

    #[test]
    fn interval_outside_clip_rejected() {
        assert!(matches!(temporal_pad(&[seq(1, 2, 6)], 5), Err(Error::Input(_))));
    }

    #[test]
    fn top_naive_scores_fill_remaining_rows() {
        let mk = |score: f64, id: Option<u32>| PaddedSeq {
            track_id: id,
            frames: vec![vec![score]; 2],
            score,
        };
        let tracked = [mk(1.0, Some(1)), mk(1.0, Some(2))];
        let naive = [mk(0.9, None), mk(0.2, None), mk(0.7, None)];
        let g = spatial_pad(&tracked, &naive, 4, 2, 1).unwrap();
        assert_eq!(g.get(2, 1), &[0.9]);
        assert_eq!(g.get(3, 1), &[0.7]);
        let g = spatial_pad(&tracked, &naive[..1], 4, 2, 1).unwrap();
        assert_eq!(g.padded_flags, vec![false, false, false, true]);
        assert_eq!(g.get(3, 2), &[0.0]);
    }

    #[test]
    fn single_query_chains_over_all_frames() {
        let q: Vec<Tensor2> = (0..4).map(|t| Tensor2::from_rows(&[vec![1.0, t as f64]]).unwrap()).collect();
        let s = vec![vec![0.5]; 4];
        let out = naive_associate(&q, &s).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].frames.len(), 4);
    }
}
