//! Teacher-forced clip training: matching, loss, optimizer and checkpoints.

pub mod checkpoint;
pub mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::daq::{appearance_vars, momentum_update, Track};
use crate::eds::{disappearance_sim, emergence_sim, EdsConfig};
use crate::error::{Error, Result};
use crate::matching::{
    assign_daq, historical_match, hungarian, pair_cost, Assignment, CostMatrix, GtTarget, LossConfig,
};
use crate::nn::{kernels, Graph, Tensor2, Var};
use crate::scenario::{foreground_score, synth_segment, FrameObservation, NoiseSpec, Scenario};
use crate::tracker::{forward_frame, Engine, EngineKind, FrameForward};

pub use optim::{AdamW, AdamWConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub clip_len: usize,
    pub optimizer: AdamWConfig,
    pub loss: LossConfig,
    pub eds: EdsConfig,
    pub noise: NoiseSpec,
    /// Class-loss weight of rows supervised toward background.
    pub bg_weight: f64,
    /// Minimum candidate/gt mask IoU for an emergence anchor to be matched.
    pub assign_min_iou: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            clip_len: 5,
            optimizer: AdamWConfig::default(),
            loss: LossConfig::default(),
            eds: EdsConfig::default(),
            noise: NoiseSpec::default(),
            bg_weight: 0.1,
            assign_min_iou: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_len < 2 {
            return Err(Error::Config("train.clip_len must be >= 2".into()));
        }
        if !(self.bg_weight > 0.0 && self.bg_weight <= 1.0) {
            return Err(Error::Config("train.bg_weight must lie in (0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.assign_min_iou) {
            return Err(Error::Config("train.assign_min_iou must lie in [0,1]".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.eds.validate()?;
        self.noise.validate()
    }
}

/// Supervision for one frame. Class index `num_classes` is background.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameTargets {
    pub t1_class: Vec<usize>,
    pub t1_mask: Vec<Option<Vec<f64>>>,
    pub t2_class: Vec<usize>,
}

/// Everything needed to re-evaluate one frame's loss with fixed inputs.
#[derive(Clone, Debug)]
pub struct FrameContext {
    pub obs: FrameObservation,
    pub tracks: Vec<Track>,
    pub targets: FrameTargets,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
}

impl LossTerms {
    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.total += s * o.total;
        self.cls += s * o.cls;
        self.dice += s * o.dice;
        self.bce += s * o.bce;
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.dice.is_finite() && self.bce.is_finite()
    }
}

fn class_weights(targets: &[usize], bg: usize, bg_weight: f64) -> Vec<f64> {
    targets.iter().map(|&c| if c == bg { bg_weight } else { 1.0 }).collect()
}

/// Records the weighted loss on `ff` and returns it with its breakdown.
pub fn frame_loss_vars(
    ff: &mut FrameForward,
    targets: &FrameTargets,
    num_classes: usize,
    loss: &LossConfig,
    bg_weight: f64,
) -> Result<(Option<Var>, LossTerms)> {
    let g = &mut ff.graph;
    let mut parts: Vec<Var> = Vec::new();
    let mut terms = LossTerms::default();
    if let Some(t1) = &ff.t1 {
        let n = g.value(t1.logits).rows();
        if targets.t1_class.len() != n || targets.t1_mask.len() != n {
            return Err(Error::InternalState(format!(
                "{} tracker-1 rows but {} targets",
                n,
                targets.t1_class.len()
            )));
        }
        let w = class_weights(&targets.t1_class, num_classes, bg_weight);
        let ce = g.cross_entropy(t1.logits, &targets.t1_class, &w)?;
        terms.cls += g.value(ce).get(0, 0);
        parts.push(g.scale(ce, loss.lambda_cls));
        let rows: Vec<usize> = (0..n).filter(|&i| targets.t1_mask[i].is_some()).collect();
        if !rows.is_empty() {
            let p = g.value(t1.mask_logits).cols();
            let mut tgt = Tensor2::zeros(rows.len(), p);
            for (k, &i) in rows.iter().enumerate() {
                tgt.row_mut(k).copy_from_slice(targets.t1_mask[i].as_ref().expect("row has mask"));
            }
            let sel = g.select_rows(t1.mask_logits, &rows)?;
            let d = g.dice_loss(sel, &tgt)?;
            let b = g.bce_loss(sel, &tgt)?;
            terms.dice = g.value(d).get(0, 0);
            terms.bce = g.value(b).get(0, 0);
            parts.push(g.scale(d, loss.lambda_dice));
            parts.push(g.scale(b, loss.lambda_bce));
        }
    }
    if let Some(t2) = &ff.t2 {
        let n = g.value(t2.logits).rows();
        if targets.t2_class.len() != n {
            return Err(Error::InternalState(format!(
                "{} tracker-2 rows but {} targets",
                n,
                targets.t2_class.len()
            )));
        }
        let w = class_weights(&targets.t2_class, num_classes, bg_weight);
        let ce = g.cross_entropy(t2.logits, &targets.t2_class, &w)?;
        terms.cls += g.value(ce).get(0, 0);
        parts.push(g.scale(ce, loss.lambda_cls));
    }
    if parts.is_empty() {
        return Ok((None, terms));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    terms.total = g.value(total).get(0, 0);
    Ok((Some(total), terms))
}

/// Loss of one recorded frame under the engine's current parameters.
pub fn frame_loss(engine: &Engine, ctx: &FrameContext, cfg: &TrainConfig) -> Result<LossTerms> {
    let refs: Vec<&Track> = ctx.tracks.iter().collect();
    let mut ff = forward_frame(engine, &ctx.obs, &refs, true)?;
    let (_, terms) = frame_loss_vars(&mut ff, &ctx.targets, engine.config.num_classes, &cfg.loss, cfg.bg_weight)?;
    Ok(terms)
}

/// Mean loss over a recorded clip.
pub fn clip_loss(engine: &Engine, ctxs: &[FrameContext], cfg: &TrainConfig) -> Result<f64> {
    let mut sum = 0.0;
    for c in ctxs {
        sum += frame_loss(engine, c, cfg)?.total;
    }
    Ok(sum / ctxs.len().max(1) as f64)
}

fn gt_target(scn: &Scenario, id: u32, t: usize) -> Result<GtTarget> {
    let o = scn
        .object(id)
        .ok_or_else(|| Error::InternalState(format!("observation binds unknown gt {id}")))?;
    Ok(GtTarget {
        id,
        class_id: o.class_id,
        mask: o.mask_at(t).iter().map(|&b| b as u8 as f64).collect(),
    })
}

struct Tracked {
    track: Track,
    gt: u32,
}

/// Result of running one clip.
pub struct ClipResult {
    pub terms: LossTerms,
    pub contexts: Vec<FrameContext>,
}

/// Runs the teacher-forced pipeline over frames `start..start+len` of `scn`,
/// accumulating parameter gradients of the mean frame loss into the engine.
pub fn run_clip(
    engine: &mut Engine,
    scn: &Scenario,
    start: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    accumulate: bool,
) -> Result<ClipResult> {
    let len = cfg.clip_len;
    if start < 1 || start + len - 1 > scn.frames {
        return Err(Error::Input(format!("clip {start}+{len} outside 1..={}", scn.frames)));
    }
    let nc = engine.config.num_classes;
    let kind = engine.config.kind;
    let mut clip = (start..start + len)
        .map(|t| synth_segment(scn, t, &cfg.noise, &engine.config.segmenter, rng))
        .collect::<Result<Vec<_>>>()?;
    disappearance_sim(&mut clip, engine.bank(), &cfg.eds, rng)?;

    let mut tracked: Vec<Tracked> = Vec::new();
    let mut assignment = Assignment::default();
    let mut next_id = 1u32;
    let mut total = LossTerms::default();
    let mut contexts = Vec::with_capacity(len);
    let scale = 1.0 / len as f64;

    for (f, obs) in clip.into_iter().enumerate() {
        let t = start + f;
        let present: Vec<u32> = obs.gt_binding.iter().flatten().copied().collect();
        let active: Vec<u32> = tracked.iter().map(|x| x.track.id).collect();
        let (next_assign, fm) = historical_match(&active, &present, &assignment)?;
        let snapshot: Vec<Track> = tracked.iter().map(|x| x.track.clone()).collect();
        let refs: Vec<&Track> = snapshot.iter().collect();
        let mut ff = forward_frame(engine, &obs, &refs, true)?;

        let mut targets = FrameTargets::default();
        for x in &tracked {
            let id = x.track.id;
            if let Some(&(_, g)) = fm.kept.iter().find(|p| p.0 == id) {
                let gt = gt_target(scn, g, t)?;
                targets.t1_class.push(gt.class_id);
                targets.t1_mask.push(Some(gt.mask));
            } else {
                targets.t1_class.push(nc);
                targets.t1_mask.push(Some(vec![0.0; scn.pixels()]));
            }
        }
        let residual = fm
            .residual
            .iter()
            .map(|&g| gt_target(scn, g, t))
            .collect::<Result<Vec<_>>>()?;
        let n_anchor = ff.n_anchor();
        let anchor_gt: Vec<Option<usize>> = match kind {
            EngineKind::Daq => {
                let cands: Vec<(&[f64], &[f64])> = ff
                    .anchor_sources
                    .iter()
                    .map(|&c| (obs.masks.row(c), obs.class_logits.row(c)))
                    .collect();
                assign_daq(&residual, &cands, &cfg.loss, cfg.assign_min_iou)?
            }
            EngineKind::Baseline => {
                let (_, logits, mask_logits) = ff.t1_values().expect("anchors produce tracker-1 rows");
                let probs: Vec<Vec<f64>> = (0..n_anchor)
                    .map(|a| mask_logits.row(ff.n_ctq + a).iter().map(|&x| kernels::sigmoid(x)).collect())
                    .collect();
                let cm = CostMatrix::from_fn(n_anchor, residual.len(), |a, g| {
                    pair_cost(&probs[a], logits.row(ff.n_ctq + a), &residual[g], &cfg.loss)
                })?;
                let mut out = vec![None; n_anchor];
                for (a, g) in hungarian(&cm).pairs {
                    out[a] = Some(g);
                }
                out
            }
        };
        for m in &anchor_gt {
            match m {
                Some(g) => {
                    targets.t1_class.push(residual[*g].class_id);
                    targets.t1_mask.push(Some(residual[*g].mask.clone()));
                }
                None => {
                    targets.t1_class.push(nc);
                    targets.t1_mask.push(None);
                }
            }
        }
        if let Some(t2) = &ff.t2 {
            for x in &tracked {
                let kept = fm.kept.iter().find(|p| p.0 == x.track.id);
                targets
                    .t2_class
                    .push(kept.map_or(Ok(nc), |&(_, g)| gt_target(scn, g, t).map(|gt| gt.class_id))?);
            }
            let n_bg = ff.graph.value(t2.logits).rows() - t2.n_dis;
            targets.t2_class.extend(std::iter::repeat_n(nc, n_bg));
        }

        let (loss, terms) = frame_loss_vars(&mut ff, &targets, nc, &cfg.loss, cfg.bg_weight)?;
        if !terms.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at frame {t} (clip start {start}, seed {}): {terms:?}",
                scn.seed
            )));
        }
        total.add_scaled(&terms, scale);
        if let (Some(loss), true) = (loss, accumulate) {
            let scaled = ff.graph.scale(loss, scale);
            let grads = ff.graph.backward(scaled)?;
            grads.accumulate_into(&ff.graph, &mut engine.params)?;
        }

        // propagate tracks to the next frame (teacher forced)
        let mut next: Vec<Tracked> = Vec::new();
        if let Some((feat, logits, mask_logits)) = ff.t1_values() {
            let masks = Tensor2::from_fn(mask_logits.rows(), mask_logits.cols(), |i, j| {
                kernels::sigmoid(mask_logits.get(i, j))
            });
            let mut ag = Graph::new();
            let fv = ag.constant(ff.graph.value(ff.features).clone());
            let app = appearance_vars(&mut ag, &engine.params, fv, &masks)?;
            let app = ag.value(app);
            for (i, x) in tracked.into_iter().enumerate() {
                if let Some(&(_, g)) = fm.kept.iter().find(|p| p.0 == x.track.id) {
                    let mut track = x.track;
                    track.ctq_feat = feat.row(i).to_vec();
                    track.score = foreground_score(logits.row(i));
                    track.last_seen = t;
                    momentum_update(&mut track, app.row(i))?;
                    next.push(Tracked { track, gt: g });
                }
            }
            let mut assign = next_assign;
            for (a, m) in anchor_gt.iter().enumerate() {
                if let Some(g) = m {
                    let r = ff.n_ctq + a;
                    let id = next_id;
                    next_id += 1;
                    let track = Track::new(
                        id,
                        feat.row(r).to_vec(),
                        app.row(r).to_vec(),
                        foreground_score(logits.row(r)),
                        t,
                    );
                    assign.pairs.insert(id, residual[*g].id);
                    next.push(Tracked {
                        track,
                        gt: residual[*g].id,
                    });
                }
            }
            let scores: Vec<(u32, f64)> = next.iter().map(|x| (x.track.id, x.track.score)).collect();
            let (_, removed) = emergence_sim(&scores, &cfg.eds, rng);
            next.retain(|x| !removed.contains(&x.track.id));
            assign.pairs.retain(|id, _| !removed.contains(id));
            assignment = assign;
        } else {
            assignment = next_assign;
        }
        debug_assert!(next.iter().all(|x| assignment.pairs.get(&x.track.id) == Some(&x.gt)));
        contexts.push(FrameContext {
            obs,
            tracks: snapshot,
            targets,
        });
        tracked = next;
    }
    Ok(ClipResult {
        terms: total,
        contexts,
    })
}

/// One row of the training trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total: f64,
    pub cls: f64,
    pub dice: f64,
    pub bce: f64,
}

pub fn trace_to_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,total,cls,dice,bce\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{},{}\n", r.step, r.total, r.cls, r.dice, r.bce));
    }
    s
}

/// Trains `engine` for `cfg.steps` clips sampled uniformly from `scenarios`.
pub fn train(engine: &mut Engine, scenarios: &[Scenario], cfg: &TrainConfig, seed: u64) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if scenarios.is_empty() {
        return Err(Error::Input("training needs at least one scenario".into()));
    }
    if let Some(s) = scenarios.iter().find(|s| s.frames < cfg.clip_len) {
        return Err(Error::Input(format!(
            "scenario seed {} has {} frames, shorter than clip_len {}",
            s.seed, s.frames, cfg.clip_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.optimizer);
    engine.params.zero_grads();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let k = rng.random_range(0..scenarios.len());
        let scn = &scenarios[k];
        let start = rng.random_range(1..=scn.frames - cfg.clip_len + 1);
        let res = run_clip(engine, scn, start, cfg, &mut rng, true).map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("step {step}, scenario index {k}: {m}")),
            other => other,
        })?;
        let gn = AdamW::grad_norm(&engine.params);
        if !gn.is_finite() {
            return Err(Error::Divergence(format!(
                "step {step}, scenario index {k}, clip start {start}: non-finite gradient norm; losses {:?}",
                res.terms
            )));
        }
        opt.step(&mut engine.params);
        trace.push(TraceRow {
            step,
            total: res.terms.total,
            cls: res.terms.cls,
            dice: res.terms.dice,
            bce: res.terms.bce,
        });
    }
    Ok(trace)
}
