//! Dynamic anchor queries, tracks and momentum-weighted appearance features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, cosine, Graph, ParamStore, Tensor2, Var};
use crate::scenario::FrameObservation;

pub const APP_MLP: &str = "app";
pub const EMG_FEAT: &str = "daq.emg_feat";
pub const DIS_FEAT: &str = "daq.dis_feat";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackStatus {
    Active,
    Disappeared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub ctq_feat: Vec<f64>,
    /// Momentum-weighted appearance feature.
    pub mom_feat: Vec<f64>,
    pub feat_history: Vec<Vec<f64>>,
    pub score: f64,
    pub status: TrackStatus,
    pub born_at: usize,
    pub last_seen: usize,
}

impl Track {
    /// A new track; the momentum feature starts at the first appearance feature.
    pub fn new(id: u32, ctq_feat: Vec<f64>, first_feat: Vec<f64>, score: f64, t: usize) -> Self {
        Self {
            id,
            ctq_feat,
            mom_feat: first_feat.clone(),
            feat_history: vec![first_feat],
            score,
            status: TrackStatus::Active,
            born_at: t,
            last_seen: t,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == TrackStatus::Active
    }
}

/// Blends `f_new` into the track's momentum feature and returns β.
///
/// β = max(0, Σ_h cos(h, f_new) / (|history| + 1)), summed over the stored
/// history. Each output coordinate lies between the old value and `f_new`.
pub fn momentum_update(track: &mut Track, f_new: &[f64]) -> Result<f64> {
    if f_new.len() != track.mom_feat.len() {
        return Err(Error::dim("momentum_update", (1, track.mom_feat.len()), (1, f_new.len())));
    }
    if let Some(i) = f_new.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i, value: f_new[i] });
    }
    let t_len = track.feat_history.len() + 1;
    let sum: f64 = track.feat_history.iter().map(|h| cosine(h, f_new)).sum();
    let beta = (sum / t_len as f64).clamp(0.0, 1.0);
    if beta > 0.0 {
        for (m, &f) in track.mom_feat.iter_mut().zip(f_new) {
            let v = (1.0 - beta) * *m + beta * f;
            *m = v.clamp(m.min(f), m.max(f));
        }
    }
    track.feat_history.push(f_new.to_vec());
    Ok(beta)
}

/// The positional embedding of a continuously tracked query.
pub fn ctq_positional(track: &Track) -> &[f64] {
    &track.mom_feat
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorKind {
    Emergence,
    Disappearance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorSource {
    Candidate(usize),
    Track(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorQuery {
    pub kind: AnchorKind,
    pub feat: Vec<f64>,
    pub pos: Vec<f64>,
    pub source: AnchorSource,
}

/// Where emergence anchors take their candidate feature from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmgSource {
    /// Mask-pooled appearance feature.
    #[default]
    AppF,
    /// The segmenter's query feature.
    SegQ,
}

/// How the candidate feature enters an emergence anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmgUsage {
    /// As the positional embedding.
    #[default]
    Pos,
    /// Added to the shared feature; positional embedding is zero.
    Add,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisFeat {
    /// Closest row of the segmenter's initial-query bank.
    #[default]
    Initial,
    /// One learnable embedding shared by all disappearance anchors.
    Learn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisPos {
    /// Momentum-weighted appearance feature.
    #[default]
    CtqP,
    /// The tracked query feature itself.
    CtqF,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaqVariant {
    pub emg_source: EmgSource,
    pub emg_usage: EmgUsage,
    pub dis_feat: DisFeat,
    pub dis_pos: DisPos,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DaqConfig {
    pub top_k: usize,
    pub num_learnable: usize,
    pub init_query_bank: Tensor2,
    pub variant: DaqVariant,
}

impl DaqConfig {
    pub fn validate(&self) -> Result<()> {
        let n_seg = self.init_query_bank.rows();
        if self.top_k == 0 || self.top_k > n_seg {
            return Err(Error::Config(format!("top_k {} must lie in 1..={n_seg}", self.top_k)));
        }
        if self.num_learnable == 0 || self.top_k % self.num_learnable != 0 {
            return Err(Error::Config(format!(
                "top_k {} must be a positive multiple of num_learnable {}",
                self.top_k, self.num_learnable
            )));
        }
        Ok(())
    }
}

/// Registers the appearance MLP. It is residual with a zero output layer, so
/// it starts as the identity map.
pub fn init_appearance_params(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<()> {
    nn::init_linear(store, &format!("{APP_MLP}.fc1"), dim, dim, rng)?;
    store.insert(format!("{APP_MLP}.fc2.w"), Tensor2::zeros(dim, dim))?;
    store.insert(format!("{APP_MLP}.fc2.b"), Tensor2::zeros(1, dim))
}

/// Registers the shared emergence embeddings and the learnable
/// disappearance feature.
pub fn init_daq_params(
    store: &mut ParamStore,
    dim: usize,
    num_learnable: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_normal(EMG_FEAT, num_learnable, dim, 1.0, rng)?;
    store.insert_normal(DIS_FEAT, 1, dim, 1.0, rng)
}

/// Residual appearance MLP over mask-pooled pixel features, in-graph.
pub fn appearance_vars(g: &mut Graph, store: &ParamStore, features: Var, masks: &Tensor2) -> Result<Var> {
    let m = g.constant(masks.clone());
    let pooled = g.mask_pool(features, m)?;
    let h = nn::mlp(g, store, APP_MLP, pooled)?;
    g.add(pooled, h)
}

/// Appearance feature of one segmenter query: MLP(mask_pool(F, mask)).
pub fn appearance_feature(obs: &FrameObservation, query_index: usize, store: &ParamStore) -> Result<Vec<f64>> {
    if query_index >= obs.n_seg() {
        return Err(Error::Input(format!("query {query_index} out of range {}", obs.n_seg())));
    }
    let mut g = Graph::new();
    let f = g.constant(obs.pixel_features.clone());
    let v = appearance_vars(&mut g, store, f, &obs.masks.row_tensor(query_index))?;
    Ok(g.value(v).data().to_vec())
}

/// Indices of the `top_k` highest-scoring queries (ties: lower index first).
pub fn emergence_candidates(scores: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(top_k);
    idx
}

/// Emergence anchors recorded in `g`: `(feat, pos, candidate indices)`.
pub fn emergence_anchor_vars(
    g: &mut Graph,
    store: &ParamStore,
    obs: &FrameObservation,
    features: Var,
    cfg: &DaqConfig,
) -> Result<(Var, Var, Vec<usize>)> {
    if obs.n_seg() < cfg.top_k {
        return Err(Error::Input(format!(
            "observation has {} queries, need top_k = {}",
            obs.n_seg(),
            cfg.top_k
        )));
    }
    let cand = emergence_candidates(&obs.scores, cfg.top_k);
    let src = match cfg.variant.emg_source {
        EmgSource::AppF => appearance_vars(g, store, features, &obs.masks.select_rows(&cand))?,
        EmgSource::SegQ => g.constant(obs.queries.select_rows(&cand)),
    };
    let slots: Vec<usize> = (0..cand.len()).map(|r| r % cfg.num_learnable).collect();
    let emb = g.param(store, EMG_FEAT)?;
    let shared = g.select_rows(emb, &slots)?;
    let (feat, pos) = match cfg.variant.emg_usage {
        EmgUsage::Pos => (shared, src),
        EmgUsage::Add => {
            let f = g.add(shared, src)?;
            let z = g.constant(Tensor2::zeros(cand.len(), store.get(EMG_FEAT)?.cols()));
            (f, z)
        }
    };
    Ok((feat, pos, cand))
}

/// Index of the bank row most cosine-similar to `v` (ties: lowest index).
pub fn closest_bank_row(bank: &Tensor2, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_sim = f64::NEG_INFINITY;
    for i in 0..bank.rows() {
        let s = cosine(bank.row(i), v);
        if s > best_sim {
            best_sim = s;
            best = i;
        }
    }
    best
}

/// Disappearance anchor `(feat, pos)` rows for `tracks`, in-graph.
pub fn disappearance_anchor_vars(
    g: &mut Graph,
    store: &ParamStore,
    tracks: &[&Track],
    cfg: &DaqConfig,
) -> Result<(Var, Var)> {
    let dim = cfg.init_query_bank.cols();
    let feat = match cfg.variant.dis_feat {
        DisFeat::Initial => {
            let rows: Vec<usize> = tracks
                .iter()
                .map(|t| closest_bank_row(&cfg.init_query_bank, &t.ctq_feat))
                .collect();
            g.constant(cfg.init_query_bank.select_rows(&rows))
        }
        DisFeat::Learn => {
            let p = g.param(store, DIS_FEAT)?;
            g.select_rows(p, &vec![0; tracks.len()])?
        }
    };
    let mut pos = Tensor2::zeros(tracks.len(), dim);
    for (i, t) in tracks.iter().enumerate() {
        let src = match cfg.variant.dis_pos {
            DisPos::CtqP => ctq_positional(t),
            DisPos::CtqF => &t.ctq_feat,
        };
        pos.row_mut(i).copy_from_slice(src);
    }
    let pos = g.constant(pos);
    Ok((feat, pos))
}

/// Emergence anchors for one frame.
pub fn build_emergence_daqs(
    obs: &FrameObservation,
    cfg: &DaqConfig,
    store: &ParamStore,
) -> Result<Vec<AnchorQuery>> {
    let mut g = Graph::new();
    let f = g.constant(obs.pixel_features.clone());
    let (feat, pos, cand) = emergence_anchor_vars(&mut g, store, obs, f, cfg)?;
    Ok(cand
        .iter()
        .enumerate()
        .map(|(r, &c)| AnchorQuery {
            kind: AnchorKind::Emergence,
            feat: g.value(feat).row(r).to_vec(),
            pos: g.value(pos).row(r).to_vec(),
            source: AnchorSource::Candidate(c),
        })
        .collect())
}

/// One disappearance anchor per active track.
pub fn build_disappearance_daqs(
    tracks: &[Track],
    cfg: &DaqConfig,
    store: &ParamStore,
) -> Result<Vec<AnchorQuery>> {
    let active: Vec<&Track> = tracks.iter().collect();
    if let Some(t) = active.iter().find(|t| !t.is_active()) {
        return Err(Error::InternalState(format!("track {} is not active", t.id)));
    }
    let mut g = Graph::new();
    let (feat, pos) = disappearance_anchor_vars(&mut g, store, &active, cfg)?;
    Ok(active
        .iter()
        .enumerate()
        .map(|(r, t)| AnchorQuery {
            kind: AnchorKind::Disappearance,
            feat: g.value(feat).row(r).to_vec(),
            pos: g.value(pos).row(r).to_vec(),
            source: AnchorSource::Track(t.id),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(dim: usize, i: usize) -> Vec<f64> {
        (0..dim).map(|j| (i == j) as u8 as f64).collect()
    }

    #[test]
    fn momentum_by_hand() {
        let v = unit(3, 0);
        let mut tr = Track::new(1, v.clone(), vec![0.2, 0.4, 0.0], 0.9, 1);
        tr.feat_history = vec![v.clone()];
        let beta = momentum_update(&mut tr, &v).unwrap();
        assert_eq!(beta, 0.5);
        assert_eq!(tr.mom_feat, vec![0.6, 0.2, 0.0]);
        assert_eq!(tr.feat_history.len(), 2);
    }

    #[test]
    fn opposed_feature_leaves_momentum_unchanged() {
        let mut tr = Track::new(1, unit(3, 0), unit(3, 0), 0.9, 1);
        let before = tr.mom_feat.clone();
        let beta = momentum_update(&mut tr, &[-1.0, 0.0, 0.0]).unwrap();
        assert_eq!(beta, 0.0);
        assert_eq!(tr.mom_feat, before);
    }

    #[test]
    fn candidates_sorted_by_score_then_index() {
        let s = [0.1, 0.9, 0.5, 0.9, 0.2];
        assert_eq!(emergence_candidates(&s, 3), vec![1, 3, 2]);
    }

    #[test]
    fn bank_match_prefers_self_and_lowest_index() {
        let bank = Tensor2::from_rows(&[unit(3, 1), unit(3, 0), unit(3, 0)]).unwrap();
        assert_eq!(closest_bank_row(&bank, &unit(3, 0)), 1);
        assert_eq!(closest_bank_row(&bank, &[0.0, 2.0, 0.0]), 0);
    }

    #[test]
    fn identity_appearance_mlp_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_appearance_params(&mut store, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let feats = Tensor2::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        let f = g.constant(feats.clone());
        let mask = Tensor2::row_vector(vec![0.0, 1.0, 0.0]).unwrap();
        let v = appearance_vars(&mut g, &store, f, &mask).unwrap();
        assert_eq!(g.value(v).row(0), feats.row(1));
    }
}
