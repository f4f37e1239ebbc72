//! The association stage: Tracker 1 (tracked queries plus emergence anchors),
//! Tracker 2 (disappearance anchors plus background embeddings), the
//! static-anchor baseline, track lifecycle and the per-video loop.

mod lifecycle;
mod video;

pub use lifecycle::{
    lifecycle_update, replay_events, Candidate, CtqUpdate, Event, EventKind, LifecycleConfig, TrackSet,
    Verdict,
};
pub use video::{
    run_video, run_video_detailed, run_video_observed, FrameProbe, GapKind, GapSample, PredFrame, PredTrack,
    VideoPrediction, VideoRun,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::daq::{self, DaqConfig, DaqVariant, Track};
use crate::error::{Error, Result};
use crate::nn::{self, kernels, AttentionConfig, Axis, Graph, ParamStore, Tensor2, Var};
use crate::scenario::{FrameObservation, SegmenterSpec};

pub const STATIC_FEAT: &str = "base.anchor_feat";
pub const STATIC_POS: &str = "base.anchor_pos";
pub const BG_FEAT: &str = "t2.bg_feat";
pub const BG_POS: &str = "t2.bg_pos";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineKind {
    /// Dynamic anchors with two trackers.
    Daq,
    /// Static learnable anchors, one tracker.
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub kind: EngineKind,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub segmenter: SegmenterSpec,
    pub top_k: usize,
    pub num_learnable: usize,
    pub variant: DaqVariant,
    pub lifecycle: LifecycleConfig,
}

impl EngineConfig {
    pub fn new(kind: EngineKind, dim: usize, num_classes: usize) -> Self {
        Self {
            kind,
            dim,
            heads: 4,
            layers: 3,
            num_classes,
            segmenter: SegmenterSpec::default(),
            top_k: 10,
            num_learnable: 2,
            variant: DaqVariant::default(),
            lifecycle: LifecycleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        AttentionConfig::new(self.dim, self.heads, Axis::KeyDim)?;
        if self.layers == 0 {
            return Err(Error::Config("tracker needs at least one layer".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.lifecycle.validate()?;
        DaqConfig {
            top_k: self.top_k,
            num_learnable: self.num_learnable,
            init_query_bank: Tensor2::zeros(self.segmenter.n_seg, 1),
            variant: self.variant,
        }
        .validate()
    }
}

/// A tracker engine: configuration, parameters and the segmenter's query bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Engine {
    pub config: EngineConfig,
    pub params: ParamStore,
    bank: Tensor2,
}

const IDENTITY_INIT_NOISE: f64 = 0.02;

fn init_block(store: &mut ParamStore, prefix: &str, c: usize, layers: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        nn::init_attention_identity(store, &format!("{p}.ca"), c, IDENTITY_INIT_NOISE, rng)?;
        nn::init_attention(store, &format!("{p}.sa"), c, rng)?;
        nn::init_mlp(store, &format!("{p}.ffn"), (c, 2 * c, c), rng)?;
        for ln in ["ln1", "ln2", "ln3"] {
            nn::init_layer_norm(store, &format!("{p}.{ln}"), c)?;
        }
    }
    Ok(())
}

impl Engine {
    pub fn new(config: EngineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.dim;
        let nc = config.num_classes;
        let mut ps = ParamStore::new();
        daq::init_appearance_params(&mut ps, c, &mut rng)?;
        init_block(&mut ps, "t1", c, config.layers, &mut rng)?;
        nn::init_linear(&mut ps, "t1.cls", c, nc + 1, &mut rng)?;
        nn::init_mlp_identity(&mut ps, "t1.mask", c, IDENTITY_INIT_NOISE, &mut rng)?;
        nn::init_linear(&mut ps, "t1.mbias", c, 1, &mut rng)?;
        match config.kind {
            EngineKind::Daq => {
                daq::init_daq_params(&mut ps, c, config.num_learnable, &mut rng)?;
                init_block(&mut ps, "t2", c, config.layers, &mut rng)?;
                nn::init_linear(&mut ps, "t2.cls", c, nc + 1, &mut rng)?;
                ps.insert_normal(BG_FEAT, config.num_learnable, c, 1.0, &mut rng)?;
                ps.insert_normal(BG_POS, config.num_learnable, c, 1.0, &mut rng)?;
            }
            EngineKind::Baseline => {
                ps.insert_normal(STATIC_FEAT, config.top_k, c, 1.0, &mut rng)?;
                ps.insert_normal(STATIC_POS, config.top_k, c, 1.0, &mut rng)?;
            }
        }
        Ok(Self::from_parts(config, ps))
    }

    /// Reassembles an engine from a configuration and trained parameters.
    pub fn from_parts(config: EngineConfig, params: ParamStore) -> Self {
        let bank = config.segmenter.init_query_bank(config.dim);
        Self { config, params, bank }
    }

    pub fn daq_config(&self) -> DaqConfig {
        DaqConfig {
            top_k: self.config.top_k,
            num_learnable: self.config.num_learnable,
            init_query_bank: self.bank.scale(self.embed_scale()),
            variant: self.config.variant,
        }
    }

    /// Factor applied to segmenter embeddings on entry, giving them
    /// unit-variance coordinates like the learned embeddings.
    pub fn embed_scale(&self) -> f64 {
        (self.config.dim as f64).sqrt()
    }

    pub fn bank(&self) -> &Tensor2 {
        &self.bank
    }

    fn attn(&self, axis: Axis) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.config.dim,
            num_heads: self.config.heads,
            softmax_axis: axis,
        }
    }
}

/// Post-norm decoder block stack. Returns the output and each layer's
/// cross-attention node.
pub fn block_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    layers: usize,
    x: Var,
    pos: Var,
    memory: Var,
    cross: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    let self_cfg = AttentionConfig {
        softmax_axis: Axis::KeyDim,
        ..*cross
    };
    let mut x = x;
    let mut nodes = Vec::with_capacity(layers);
    for l in 0..layers {
        let p = format!("{prefix}.l{l}");
        let q = g.add(x, pos)?;
        let (a, node) = nn::attention_nodes(g, store, &format!("{p}.ca"), q, memory, memory, cross)?;
        nodes.push(node);
        let s = g.add(x, a)?;
        x = nn::layer_norm(g, store, &format!("{p}.ln1"), s)?;
        let q = g.add(x, pos)?;
        let a = nn::attention(g, store, &format!("{p}.sa"), q, q, x, &self_cfg)?;
        let s = g.add(x, a)?;
        x = nn::layer_norm(g, store, &format!("{p}.ln2"), s)?;
        let f = nn::mlp(g, store, &format!("{p}.ffn"), x)?;
        let s = g.add(x, f)?;
        x = nn::layer_norm(g, store, &format!("{p}.ln3"), s)?;
    }
    Ok((x, nodes))
}

/// Recorded Tracker-1 stage.
pub struct Tracker1Vars {
    /// Input `feat + pos` per row.
    pub input: Tensor2,
    pub feat: Var,
    pub logits: Var,
    pub mask_logits: Var,
    pub cross: Vec<Var>,
}

/// Recorded Tracker-2 stage; rows are the disappearance anchors followed by
/// the background embeddings.
pub struct Tracker2Vars {
    pub input: Tensor2,
    pub feat: Var,
    pub logits: Var,
    pub cross: Vec<Var>,
    pub n_dis: usize,
}

/// One frame's forward pass through an engine.
pub struct FrameForward {
    pub graph: Graph,
    /// Pixel features as seen by the engine (after [`Engine::embed_scale`]).
    pub features: Var,
    pub n_ctq: usize,
    /// Candidate index (dynamic anchors) or static slot of each anchor row.
    pub anchor_sources: Vec<usize>,
    pub t1: Option<Tracker1Vars>,
    pub t2: Option<Tracker2Vars>,
}

impl FrameForward {
    pub fn n_anchor(&self) -> usize {
        self.anchor_sources.len()
    }

    pub fn t1_values(&self) -> Option<(&Tensor2, &Tensor2, &Tensor2)> {
        self.t1.as_ref().map(|t| {
            (
                self.graph.value(t.feat),
                self.graph.value(t.logits),
                self.graph.value(t.mask_logits),
            )
        })
    }
}

/// Runs Tracker 1 (and Tracker 2 for the dynamic-anchor engine) on one frame.
///
/// `tracks` supply the continuously tracked queries; with `anchors` false no
/// emergence or static anchors are added.
pub fn forward_frame(
    engine: &Engine,
    obs: &FrameObservation,
    tracks: &[&Track],
    anchors: bool,
) -> Result<FrameForward> {
    let cfg = &engine.config;
    let c = cfg.dim;
    if obs.queries.cols() != c || obs.pixel_features.cols() != c {
        return Err(Error::dim("forward_frame", obs.queries.shape(), (obs.n_seg(), c)));
    }
    if obs.num_classes() != cfg.num_classes {
        return Err(Error::Input(format!(
            "observation has {} classes, engine expects {}",
            obs.num_classes(),
            cfg.num_classes
        )));
    }
    let obs = &obs.with_embedding_scale(engine.embed_scale());
    let store = &engine.params;
    let mut g = Graph::new();
    let features = g.constant(obs.pixel_features.clone());
    let memory = g.constant(obs.queries.clone());

    let mut feats = Vec::new();
    let mut poss = Vec::new();
    if !tracks.is_empty() {
        let mut f = Tensor2::zeros(tracks.len(), c);
        let mut p = Tensor2::zeros(tracks.len(), c);
        for (i, t) in tracks.iter().enumerate() {
            f.row_mut(i).copy_from_slice(&t.ctq_feat);
            p.row_mut(i).copy_from_slice(daq::ctq_positional(t));
        }
        feats.push(g.constant(f));
        poss.push(g.constant(p));
    }
    let mut anchor_sources = Vec::new();
    if anchors {
        match cfg.kind {
            EngineKind::Daq => {
                let (f, p, cand) = daq::emergence_anchor_vars(&mut g, store, obs, features, &engine.daq_config())?;
                feats.push(f);
                poss.push(p);
                anchor_sources = cand;
            }
            EngineKind::Baseline => {
                feats.push(g.param(store, STATIC_FEAT)?);
                poss.push(g.param(store, STATIC_POS)?);
                anchor_sources = (0..cfg.top_k).collect();
            }
        }
    }

    let t1 = if feats.is_empty() {
        None
    } else {
        let x = g.concat(&feats, c)?;
        let pos = g.concat(&poss, c)?;
        let input = g.value(x).add(g.value(pos))?;
        let (out, cross) = block_forward(&mut g, store, "t1", cfg.layers, x, pos, memory, &engine.attn(Axis::KeyDim))?;
        let logits = nn::linear(&mut g, store, "t1.cls", out)?;
        let emb = nn::mlp(&mut g, store, "t1.mask", out)?;
        let bias = nn::linear(&mut g, store, "t1.mbias", out)?;
        let dots = g.matmul_nt(emb, features)?;
        let mask_logits = g.add_col_bias(dots, bias)?;
        Some(Tracker1Vars {
            input,
            feat: out,
            logits,
            mask_logits,
            cross,
        })
    };

    let t2 = if cfg.kind == EngineKind::Daq && !tracks.is_empty() {
        let (df, dp) = daq::disappearance_anchor_vars(&mut g, store, tracks, &engine.daq_config())?;
        let bf = g.param(store, BG_FEAT)?;
        let bp = g.param(store, BG_POS)?;
        let x = g.concat(&[df, bf], c)?;
        let pos = g.concat(&[dp, bp], c)?;
        let input = g.value(x).add(g.value(pos))?;
        let (out, cross) = block_forward(&mut g, store, "t2", cfg.layers, x, pos, memory, &engine.attn(Axis::QueryDim))?;
        let logits = nn::linear(&mut g, store, "t2.cls", out)?;
        Some(Tracker2Vars {
            input,
            feat: out,
            logits,
            cross,
            n_dis: tracks.len(),
        })
    } else {
        None
    };

    Ok(FrameForward {
        graph: g,
        features,
        n_ctq: tracks.len(),
        anchor_sources,
        t1,
        t2,
    })
}

/// Provenance of one Tracker-1 / Tracker-2 output row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    FromCtq(u32),
    FromEmgAnchor(usize),
    FromStaticAnchor(usize),
    FromDisAnchor(u32),
}

/// Per-query head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutput {
    pub class_logits: Vec<f64>,
    pub feat: Vec<f64>,
    /// Empty for Tracker-2 rows, which have no mask head.
    pub mask_embed: Vec<f64>,
    pub mask: Vec<f64>,
    pub provenance: Provenance,
}

fn t1_outputs(engine: &Engine, ff: &FrameForward, tracks: &[&Track]) -> Result<Vec<FrameOutput>> {
    let Some(t1) = &ff.t1 else {
        return Ok(Vec::new());
    };
    let g = &ff.graph;
    let n = g.value(t1.feat).rows();
    // mask embeddings are recomputed from the stored output for reporting
    let mut eg = Graph::new();
    let out = eg.constant(g.value(t1.feat).clone());
    let emb = nn::mlp(&mut eg, &engine.params, "t1.mask", out)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let provenance = if i < ff.n_ctq {
            Provenance::FromCtq(tracks[i].id)
        } else if engine.config.kind == EngineKind::Daq {
            Provenance::FromEmgAnchor(ff.anchor_sources[i - ff.n_ctq])
        } else {
            Provenance::FromStaticAnchor(ff.anchor_sources[i - ff.n_ctq])
        };
        rows.push(FrameOutput {
            class_logits: g.value(t1.logits).row(i).to_vec(),
            feat: g.value(t1.feat).row(i).to_vec(),
            mask_embed: eg.value(emb).row(i).to_vec(),
            mask: g.value(t1.mask_logits).row(i).iter().map(|&x| kernels::sigmoid(x)).collect(),
            provenance,
        });
    }
    Ok(rows)
}

/// Tracker 1 on tracked queries plus emergence anchors built from `obs`.
pub fn tracker1_step(engine: &Engine, tracks: &[&Track], obs: &FrameObservation) -> Result<Vec<FrameOutput>> {
    if engine.config.kind != EngineKind::Daq {
        return Err(Error::Usage("tracker1_step needs a dynamic-anchor engine".into()));
    }
    let ff = forward_frame(engine, obs, tracks, true)?;
    t1_outputs(engine, &ff, tracks)
}

/// The static-anchor baseline: tracked queries plus fixed learnable anchors.
pub fn baseline_static_step(
    engine: &Engine,
    tracks: &[&Track],
    obs: &FrameObservation,
) -> Result<Vec<FrameOutput>> {
    if engine.config.kind != EngineKind::Baseline {
        return Err(Error::Usage("baseline_static_step needs a baseline engine".into()));
    }
    let ff = forward_frame(engine, obs, tracks, true)?;
    t1_outputs(engine, &ff, tracks)
}

/// Tracker 2 verdict rows, one per track, plus the per-layer cross-attention
/// probabilities (head-major) for inspection.
pub fn tracker2_step(
    engine: &Engine,
    tracks: &[&Track],
    obs: &FrameObservation,
) -> Result<(Vec<FrameOutput>, Vec<Vec<Tensor2>>)> {
    if engine.config.kind != EngineKind::Daq {
        return Err(Error::Usage("tracker2_step needs a dynamic-anchor engine".into()));
    }
    let ff = forward_frame(engine, obs, tracks, false)?;
    let Some(t2) = &ff.t2 else {
        return Ok((Vec::new(), Vec::new()));
    };
    let g = &ff.graph;
    let rows = (0..t2.n_dis)
        .map(|i| FrameOutput {
            class_logits: g.value(t2.logits).row(i).to_vec(),
            feat: g.value(t2.feat).row(i).to_vec(),
            mask_embed: Vec::new(),
            mask: Vec::new(),
            provenance: Provenance::FromDisAnchor(tracks[i].id),
        })
        .collect();
    let probs = t2
        .cross
        .iter()
        .map(|v| g.attention_probs(*v).map(<[Tensor2]>::to_vec).unwrap_or_default())
        .collect();
    Ok((rows, probs))
}

/// Index of the largest logit (ties: lowest index).
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
