//! Frame loop over a whole scenario and the prediction file format.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lifecycle::{lifecycle_update, Candidate, CtqUpdate, Event, TrackSet, Verdict};
use super::{argmax, forward_frame, Engine, EngineKind, FrameForward};
use crate::daq::{appearance_vars, Track};
use crate::error::{Error, Result};
use crate::pad::VideoObjectSeq;
use crate::nn::{kernels, softmax, Axis, Graph, Tensor2};
use crate::scenario::{foreground_score, synth_segment, NoiseSpec, Rle, Scenario};

const PREDICTION_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredFrame {
    pub t: usize,
    pub mask: Rle,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredTrack {
    pub id: u32,
    pub class: usize,
    pub frames: Vec<PredFrame>,
}

impl PredTrack {
    pub fn first_frame(&self) -> Option<usize> {
        self.frames.first().map(|f| f.t)
    }

    pub fn frame(&self, t: usize) -> Option<&PredFrame> {
        self.frames.iter().find(|f| f.t == t)
    }
}

/// Per-track masks and scores for every frame plus the lifecycle event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoPrediction {
    pub version: u32,
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub tracks: Vec<PredTrack>,
    pub events: Vec<Event>,
}

impl VideoPrediction {
    pub fn empty(frames: usize, height: usize, width: usize) -> Self {
        Self {
            version: PREDICTION_VERSION,
            frames,
            height,
            width,
            tracks: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prediction serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)
            .map_err(|e| Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        if p.version != PREDICTION_VERSION {
            return Err(Error::parse("field `version`", format!("unsupported version {}", p.version)));
        }
        Ok(p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapKind {
    Emergence,
    Disappearance,
}

/// An anchor's input (`feat + pos`) and the output feature it turned into.
#[derive(Clone, Debug, PartialEq)]
pub struct GapSample {
    pub kind: GapKind,
    pub anchor: Vec<f64>,
    pub target: Vec<f64>,
}

pub struct VideoRun {
    pub prediction: VideoPrediction,
    pub gap_samples: Vec<GapSample>,
    pub track_set: TrackSet,
    /// Per-track query and momentum features over the active interval.
    pub sequences: Vec<VideoObjectSeq>,
    /// Segmenter queries and scores of every frame.
    pub seg_queries: Vec<Tensor2>,
    pub seg_scores: Vec<Vec<f64>>,
}

pub fn run_video(scn: &Scenario, engine: &Engine, noise: &NoiseSpec, seed: u64) -> Result<VideoPrediction> {
    run_video_detailed(scn, engine, noise, seed).map(|r| r.prediction)
}

fn binarize(mask: &[f64]) -> Vec<bool> {
    mask.iter().map(|&p| p > 0.5).collect()
}

/// What an observer passed to [`run_video_observed`] sees after each frame.
pub struct FrameProbe<'a> {
    pub t: usize,
    pub forward: &'a FrameForward,
    /// Tracks fed to the engine this frame, in row order.
    pub active_before: &'a [u32],
    /// State after the lifecycle update.
    pub set: &'a TrackSet,
}

/// Segments, tracks and updates the lifecycle for every frame of `scn`.
pub fn run_video_detailed(scn: &Scenario, engine: &Engine, noise: &NoiseSpec, seed: u64) -> Result<VideoRun> {
    run_video_observed(scn, engine, noise, seed, |_| {})
}

/// [`run_video_detailed`] with a callback after every processed frame.
pub fn run_video_observed(
    scn: &Scenario,
    engine: &Engine,
    noise: &NoiseSpec,
    seed: u64,
    mut observe: impl FnMut(&FrameProbe),
) -> Result<VideoRun> {
    let cfg = &engine.config;
    let nc = cfg.num_classes;
    if scn.dim() != cfg.dim || scn.num_classes != nc {
        return Err(Error::Input(format!(
            "scenario (dim {}, {} classes) does not fit engine (dim {}, {} classes)",
            scn.dim(),
            scn.num_classes,
            cfg.dim,
            nc
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = TrackSet::new();
    let mut frames: BTreeMap<u32, Vec<PredFrame>> = BTreeMap::new();
    let mut class_mass: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut gaps = Vec::new();
    let mut seqs: BTreeMap<u32, VideoObjectSeq> = BTreeMap::new();
    let mut seg_queries = Vec::with_capacity(scn.frames);
    let mut seg_scores = Vec::with_capacity(scn.frames);

    for t in 1..=scn.frames {
        let obs = synth_segment(scn, t, noise, &cfg.segmenter, &mut rng)?;
        seg_queries.push(obs.queries.clone());
        seg_scores.push(obs.scores.clone());
        let tracks: Vec<Track> = set.active().into_iter().cloned().collect();
        let refs: Vec<&Track> = tracks.iter().collect();
        let ff = forward_frame(engine, &obs, &refs, true)?;
        let Some((feat, logits, mask_logits)) = ff.t1_values() else {
            continue;
        };
        let probs = softmax(logits, Axis::KeyDim);
        let masks = Tensor2::from_fn(mask_logits.rows(), mask_logits.cols(), |i, j| {
            kernels::sigmoid(mask_logits.get(i, j))
        });
        let mut ag = Graph::new();
        let fv = ag.constant(ff.graph.value(ff.features).clone());
        let app = appearance_vars(&mut ag, &engine.params, fv, &masks)?;
        let app = ag.value(app);

        let row = |i: usize| (feat.row(i).to_vec(), app.row(i).to_vec(), foreground_score(logits.row(i)), masks.row(i).to_vec());
        let ctqs: Vec<CtqUpdate> = (0..ff.n_ctq)
            .map(|i| {
                let (feat, app_feat, score, mask) = row(i);
                CtqUpdate {
                    track: refs[i].id,
                    feat,
                    app_feat,
                    score,
                    mask,
                }
            })
            .collect();
        let cands: Vec<Candidate> = (0..ff.n_anchor())
            .map(|a| {
                let (feat, app_feat, score, mask) = row(ff.n_ctq + a);
                Candidate {
                    source: ff.anchor_sources[a],
                    feat,
                    app_feat,
                    score,
                    mask,
                }
            })
            .collect();
        let verdicts: Vec<Verdict> = match (&ff.t2, cfg.kind) {
            (Some(t2), EngineKind::Daq) => {
                let l = ff.graph.value(t2.logits);
                (0..t2.n_dis)
                    .map(|i| Verdict {
                        track: refs[i].id,
                        disappeared: argmax(l.row(i)) == nc,
                    })
                    .collect()
            }
            _ => (0..ff.n_ctq)
                .map(|i| Verdict {
                    track: refs[i].id,
                    disappeared: argmax(logits.row(i)) == nc,
                })
                .collect(),
        };
        let (born, removed) = lifecycle_update(&mut set, t, &ctqs, &cands, &verdicts, &cfg.lifecycle)?;
        let before: Vec<u32> = refs.iter().map(|r| r.id).collect();
        observe(&FrameProbe {
            t,
            forward: &ff,
            active_before: &before,
            set: &set,
        });

        let t1_input = &ff.t1.as_ref().expect("t1 values present").input;
        for &id in &removed {
            let i = refs.iter().position(|r| r.id == id).expect("removed track was active");
            let (anchor, target) = match &ff.t2 {
                Some(t2) => (t2.input.row(i).to_vec(), ff.graph.value(t2.feat).row(i).to_vec()),
                None => (t1_input.row(i).to_vec(), feat.row(i).to_vec()),
            };
            gaps.push(GapSample {
                kind: GapKind::Disappearance,
                anchor,
                target,
            });
        }
        let mut emit = |id: u32, r: usize, score: f64, mask: &[f64]| {
            frames.entry(id).or_default().push(PredFrame {
                t,
                mask: Rle::encode(&binarize(mask)),
                score,
            });
            let mass = class_mass.entry(id).or_insert_with(|| vec![0.0; nc]);
            for (m, p) in mass.iter_mut().zip(probs.row(r)) {
                *m += p;
            }
        };
        let mut record = |id: u32, feat: &[f64], score: f64| {
            let mom = set.get(id).expect("recorded track is active").mom_feat.clone();
            let s = seqs.entry(id).or_insert_with(|| VideoObjectSeq {
                track_id: id,
                start: t,
                end: t,
                features: Vec::new(),
                momentum: Vec::new(),
                score: 0.0,
            });
            s.end = t;
            s.features.push(feat.to_vec());
            s.momentum.push(mom);
            s.score += score;
        };
        for (i, u) in ctqs.iter().enumerate() {
            if !removed.contains(&u.track) {
                emit(u.track, i, u.score, &u.mask);
                record(u.track, &u.feat, u.score);
            }
        }
        for &(id, k) in &born {
            let r = ff.n_ctq + k;
            emit(id, r, cands[k].score, &cands[k].mask);
            record(id, &cands[k].feat, cands[k].score);
            gaps.push(GapSample {
                kind: GapKind::Emergence,
                anchor: t1_input.row(r).to_vec(),
                target: feat.row(r).to_vec(),
            });
        }
    }

    let tracks = frames
        .into_iter()
        .map(|(id, frames)| PredTrack {
            id,
            class: argmax(&class_mass[&id]),
            frames,
        })
        .collect();
    Ok(VideoRun {
        prediction: VideoPrediction {
            version: PREDICTION_VERSION,
            frames: scn.frames,
            height: scn.height,
            width: scn.width,
            tracks,
            events: set.events.clone(),
        },
        gap_samples: gaps,
        track_set: set,
        sequences: seqs
            .into_values()
            .map(|mut s| {
                s.score /= s.features.len() as f64;
                s
            })
            .collect(),
        seg_queries,
        seg_scores,
    })
}
