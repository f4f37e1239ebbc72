//! Emergence/disappearance recall, per-subset association scores and the
//! transition-gap report.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::cosine;
use crate::scenario::{NoiseSpec, Scenario};
use crate::tracker::{run_video_detailed, Engine, GapKind, GapSample, PredTrack, VideoPrediction};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    pub frame_tol: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            frame_tol: 1,
        }
    }
}

/// Event counts for one scenario.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdCounts {
    pub emergence_events: usize,
    pub emergence_hits: usize,
    pub disappearance_events: usize,
    pub disappearance_hits: usize,
}

impl EdCounts {
    fn merge(&mut self, o: &EdCounts) {
        self.emergence_events += o.emergence_events;
        self.emergence_hits += o.emergence_hits;
        self.disappearance_events += o.disappearance_events;
        self.disappearance_hits += o.disappearance_hits;
    }
}

fn ratio(hits: usize, events: usize) -> Option<f64> {
    (events > 0).then(|| hits as f64 / events as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRecall {
    pub seed: u64,
    pub counts: EdCounts,
}

/// Recall of emergence and disappearance events; `None` when there were no events.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdRecallReport {
    pub emergence_recall: Option<f64>,
    pub disappearance_recall: Option<f64>,
    pub combined_recall: Option<f64>,
    pub counts: EdCounts,
    pub per_scenario: Vec<ScenarioRecall>,
}

impl EdRecallReport {
    fn from_parts(per_scenario: Vec<ScenarioRecall>) -> Self {
        let mut c = EdCounts::default();
        for s in &per_scenario {
            c.merge(&s.counts);
        }
        Self {
            emergence_recall: ratio(c.emergence_hits, c.emergence_events),
            disappearance_recall: ratio(c.disappearance_hits, c.disappearance_events),
            combined_recall: ratio(
                c.emergence_hits + c.disappearance_hits,
                c.emergence_events + c.disappearance_events,
            ),
            counts: c,
            per_scenario,
        }
    }

    /// Pools several reports (counts are summed, recalls recomputed).
    pub fn merge(reports: &[EdRecallReport]) -> Self {
        Self::from_parts(reports.iter().flat_map(|r| r.per_scenario.clone()).collect())
    }
}

fn check_dims(pred: &VideoPrediction, gt: &Scenario) -> Result<()> {
    if (pred.frames, pred.height, pred.width) != (gt.frames, gt.height, gt.width) {
        return Err(Error::Input(format!(
            "prediction is {}x{}x{}, scenario is {}x{}x{}",
            pred.frames, pred.height, pred.width, gt.frames, gt.height, gt.width
        )));
    }
    Ok(())
}

fn binary_iou(a: &[bool], b: &[bool]) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Decoded masks of one track, indexed by frame.
struct DecodedTrack {
    id: u32,
    first: Option<usize>,
    masks: Vec<Option<Vec<bool>>>,
}

fn decode(pred: &VideoPrediction) -> Result<Vec<DecodedTrack>> {
    let npix = pred.height * pred.width;
    pred.tracks
        .iter()
        .map(|t: &PredTrack| {
            let mut masks = vec![None; pred.frames + 1];
            for f in &t.frames {
                if f.t < 1 || f.t > pred.frames {
                    return Err(Error::Input(format!("track {} has frame {} outside clip", t.id, f.t)));
                }
                masks[f.t] = Some(f.mask.decode(npix)?);
            }
            Ok(DecodedTrack {
                id: t.id,
                first: t.first_frame(),
                masks,
            })
        })
        .collect()
}

fn iou_at(tr: &DecodedTrack, gt: &Scenario, obj: usize, t: usize) -> f64 {
    let o = &gt.objects[obj];
    match &tr.masks[t] {
        Some(m) if o.alive_at(t) => binary_iou(m, o.mask_at(t)),
        _ => 0.0,
    }
}

/// The track covering object `obj` in the most frames at `iou_thresh`
/// (ties: lower track id). `None` if no track ever covers it.
fn matched_track(tracks: &[DecodedTrack], gt: &Scenario, obj: usize, thr: f64) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (k, tr) in tracks.iter().enumerate() {
        let n = (1..=gt.frames).filter(|&t| iou_at(tr, gt, obj, t) >= thr).count();
        if n > 0 && best.is_none_or(|(bn, bk)| n > bn || (n == bn && tr.id < tracks[bk].id)) {
            best = Some((n, k));
        }
    }
    best.map(|(_, k)| k)
}

/// Emergence and disappearance recall of one prediction.
///
/// An emergence (birth > 1) is hit when some track starts within
/// `frame_tol` of the birth frame and overlaps the object at its first frame
/// with IoU ≥ `iou_thresh`. A disappearance (death < T) is hit unless the
/// track matched to the object later (after `death + frame_tol`) covers a
/// different object at that IoU.
pub fn ed_recall(pred: &VideoPrediction, gt: &Scenario, cfg: &EvalConfig) -> Result<EdRecallReport> {
    check_dims(pred, gt)?;
    let tracks = decode(pred)?;
    let thr = cfg.iou_thresh;
    let mut c = EdCounts::default();
    for (k, o) in gt.objects.iter().enumerate() {
        if o.birth > 1 {
            c.emergence_events += 1;
            let hit = tracks.iter().any(|tr| {
                tr.first.is_some_and(|f| {
                    f.abs_diff(o.birth) <= cfg.frame_tol && iou_at(tr, gt, k, f) >= thr
                })
            });
            c.emergence_hits += hit as usize;
        }
        if o.death < gt.frames {
            c.disappearance_events += 1;
            let hit = match matched_track(&tracks, gt, k, thr) {
                None => true,
                Some(m) => {
                    let tr = &tracks[m];
                    !(o.death + cfg.frame_tol + 1..=gt.frames).any(|t| {
                        (0..gt.objects.len()).any(|j| j != k && iou_at(tr, gt, j, t) >= thr)
                    })
                }
            };
            c.disappearance_hits += hit as usize;
        }
    }
    Ok(EdRecallReport::from_parts(vec![ScenarioRecall {
        seed: gt.seed,
        counts: c,
    }]))
}

/// Association accuracy over all objects and over objects with an event.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetScore {
    pub all: Option<f64>,
    pub ed: Option<f64>,
    pub all_frames: usize,
    pub all_covered: usize,
    pub ed_frames: usize,
    pub ed_covered: usize,
}

impl SubsetScore {
    pub fn merge(scores: &[SubsetScore]) -> Self {
        let mut s = SubsetScore::default();
        for x in scores {
            s.all_frames += x.all_frames;
            s.all_covered += x.all_covered;
            s.ed_frames += x.ed_frames;
            s.ed_covered += x.ed_covered;
        }
        s.all = ratio(s.all_covered, s.all_frames);
        s.ed = ratio(s.ed_covered, s.ed_frames);
        s
    }
}

/// Fraction of gt-object frames covered (IoU ≥ threshold) by the object's
/// matched track, over all objects and over the emerging/disappearing subset.
pub fn ed_subset_score(pred: &VideoPrediction, gt: &Scenario, cfg: &EvalConfig) -> Result<SubsetScore> {
    check_dims(pred, gt)?;
    let tracks = decode(pred)?;
    let mut s = SubsetScore::default();
    for (k, o) in gt.objects.iter().enumerate() {
        let alive = o.death - o.birth + 1;
        let covered = matched_track(&tracks, gt, k, cfg.iou_thresh).map_or(0, |m| {
            (o.birth..=o.death)
                .filter(|&t| iou_at(&tracks[m], gt, k, t) >= cfg.iou_thresh)
                .count()
        });
        s.all_frames += alive;
        s.all_covered += covered;
        if o.birth > 1 || o.death < gt.frames {
            s.ed_frames += alive;
            s.ed_covered += covered;
        }
    }
    Ok(SubsetScore::merge(&[s]))
}

/// Euclidean distance of the L2-normalized vectors, halved (range [0, 1]).
pub fn normalized_euclidean(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let d: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let x = if na > 0.0 { x / na } else { 0.0 };
            let y = if nb > 0.0 { y / nb } else { 0.0 };
            (x - y) * (x - y)
        })
        .sum();
    d.sqrt() / 2.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            n: xs.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapReport {
    pub version: u32,
    pub cs: MeanStd,
    pub ned: MeanStd,
    pub emergence_cs: MeanStd,
    pub disappearance_cs: MeanStd,
    pub emergence_ned: MeanStd,
    pub disappearance_ned: MeanStd,
    /// `(kind, cs, ned)` per realized event.
    pub samples: Vec<(GapKind, f64, f64)>,
}

/// Summarizes anchor → target distances.
pub fn gap_report(samples: &[GapSample]) -> Result<GapReport> {
    if samples.is_empty() {
        return Err(Error::EmptyReport(
            "no emergence or disappearance was realized; use scenarios with events (e.g. the dense-ed preset)"
                .into(),
        ));
    }
    let rows: Vec<(GapKind, f64, f64)> = samples
        .iter()
        .map(|s| (s.kind, cosine(&s.anchor, &s.target), normalized_euclidean(&s.anchor, &s.target)))
        .collect();
    let pick = |k: Option<GapKind>, cs: bool| -> MeanStd {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| k.is_none_or(|k| r.0 == k))
            .map(|r| if cs { r.1 } else { r.2 })
            .collect();
        MeanStd::of(&v)
    };
    Ok(GapReport {
        version: REPORT_VERSION,
        cs: pick(None, true),
        ned: pick(None, false),
        emergence_cs: pick(Some(GapKind::Emergence), true),
        disappearance_cs: pick(Some(GapKind::Disappearance), true),
        emergence_ned: pick(Some(GapKind::Emergence), false),
        disappearance_ned: pick(Some(GapKind::Disappearance), false),
        samples: rows,
    })
}

/// Maps `f` over `items` on up to `available_parallelism` threads. Results
/// come back in input order, so merged reports do not depend on scheduling.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, x)| f(c * chunk + k, x))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Runs `engine` over `scenarios` and reports the transition gap.
pub fn transition_gap(engine: &Engine, scenarios: &[Scenario], noise: &NoiseSpec, seed: u64) -> Result<GapReport> {
    let per = par_map(scenarios, |i, scn| {
        Ok(run_video_detailed(scn, engine, noise, seed.wrapping_add(i as u64))?.gap_samples)
    })?;
    gap_report(&per.concat())
}

/// Recall and subset scores of one engine over a scenario suite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: u32,
    pub recall: EdRecallReport,
    pub subset: SubsetScore,
}

pub fn evaluate(
    engine: &Engine,
    scenarios: &[Scenario],
    noise: &NoiseSpec,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let per = par_map(scenarios, |i, scn| {
        let pred = crate::tracker::run_video(scn, engine, noise, seed.wrapping_add(i as u64))?;
        Ok((ed_recall(&pred, scn, cfg)?, ed_subset_score(&pred, scn, cfg)?))
    })?;
    let (recalls, subsets): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Ok(EvalReport {
        version: REPORT_VERSION,
        recall: EdRecallReport::merge(&recalls),
        subset: SubsetScore::merge(&subsets),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ned_closed_forms() {
        assert_eq!(normalized_euclidean(&[1.0, 0.0], &[2.0, 0.0]), 0.0);
        assert!((normalized_euclidean(&[1.0, 0.0], &[0.0, 3.0]) - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((normalized_euclidean(&[1.0, 0.0], &[-1.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_gap_report_is_error() {
        assert!(matches!(gap_report(&[]), Err(Error::EmptyReport(_))));
    }
}
