//! Training-time emergence and disappearance simulation at query level.
//!
//! Emergence simulation drops tracked queries so their objects must be
//! re-acquired by emergence anchors. Disappearance simulation replaces an
//! object's segmenter query with a background query for some frames of a clip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor2;
use crate::scenario::{background_logits, foreground_score, FrameObservation};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EsMode {
    /// Drop tracked queries whose last score is below the threshold.
    Threshold,
    /// Drop each tracked query independently with this probability.
    UniformDrop(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DsMode {
    One,
    Continuous,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdsConfig {
    pub es_threshold: f64,
    pub es_mode: EsMode,
    pub ds_mode: DsMode,
    pub ds_rate: f64,
}

impl Default for EdsConfig {
    fn default() -> Self {
        Self {
            es_threshold: 0.1,
            es_mode: EsMode::Threshold,
            ds_mode: DsMode::Random,
            ds_rate: 0.3,
        }
    }
}

impl EdsConfig {
    /// Both simulations switched off.
    pub fn disabled() -> Self {
        Self {
            es_threshold: 0.0,
            es_mode: EsMode::Threshold,
            ds_mode: DsMode::Random,
            ds_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = match self.es_mode {
            EsMode::UniformDrop(p) => p,
            EsMode::Threshold => 0.0,
        };
        for (n, v) in [("es_threshold", self.es_threshold), ("ds_rate", self.ds_rate), ("uniform_drop", p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("eds.{n} must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Splits tracked queries `(id, last score)` into kept and removed ids.
pub fn emergence_sim(ctqs: &[(u32, f64)], cfg: &EdsConfig, rng: &mut impl Rng) -> (Vec<u32>, Vec<u32>) {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for &(id, score) in ctqs {
        let drop = match cfg.es_mode {
            EsMode::Threshold => score < cfg.es_threshold,
            EsMode::UniformDrop(p) => p > 0.0 && rng.random_bool(p),
        };
        if drop {
            removed.push(id);
        } else {
            kept.push(id);
        }
    }
    (kept, removed)
}

/// One replaced segmenter slot with everything needed to undo the edit.
#[derive(Clone, Debug, PartialEq)]
pub struct DsRemoval {
    /// Index of the frame within the clip.
    pub frame: usize,
    pub slot: usize,
    pub gt: u32,
    pub query: Vec<f64>,
    pub mask: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub score: f64,
}

/// Replaces a slot's query with a background query from `bank`.
pub fn suppress_slot(obs: &mut FrameObservation, slot: usize, bank: &Tensor2) {
    let nc = obs.num_classes();
    obs.queries.row_mut(slot).copy_from_slice(bank.row(slot));
    obs.masks.row_mut(slot).iter_mut().for_each(|m| *m = 0.0);
    let l = background_logits(nc);
    obs.class_logits.row_mut(slot).copy_from_slice(&l);
    obs.scores[slot] = foreground_score(&l);
    obs.gt_binding[slot] = None;
}

/// Chooses which of `n` eligible frames to edit.
pub fn ds_frames(mode: DsMode, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    match mode {
        DsMode::One => vec![rng.random_range(0..n)],
        DsMode::Continuous => (rng.random_range(0..n)..n).collect(),
        DsMode::Random => loop {
            let pick: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
            if !pick.is_empty() {
                break pick;
            }
        },
    }
}

/// Edits a clip in place; returns the complete list of replaced slots.
pub fn disappearance_sim(
    clip: &mut [FrameObservation],
    bank: &Tensor2,
    cfg: &EdsConfig,
    rng: &mut impl Rng,
) -> Result<Vec<DsRemoval>> {
    if clip.len() < 2 {
        return Err(Error::Input("disappearance simulation needs a clip of >= 2 frames".into()));
    }
    if cfg.ds_rate <= 0.0 {
        return Ok(Vec::new());
    }
    let mut ids: Vec<u32> = clip.iter().flat_map(|o| o.gt_binding.iter().flatten().copied()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut removals = Vec::new();
    for id in ids {
        if !rng.random_bool(cfg.ds_rate) {
            continue;
        }
        let present: Vec<usize> = (0..clip.len()).filter(|&f| clip[f].slot_of(id).is_some()).collect();
        for k in ds_frames(cfg.ds_mode, present.len(), rng) {
            let f = present[k];
            let obs = &mut clip[f];
            let slot = obs.slot_of(id).expect("present frame binds id");
            removals.push(DsRemoval {
                frame: f,
                slot,
                gt: id,
                query: obs.queries.row(slot).to_vec(),
                mask: obs.masks.row(slot).to_vec(),
                class_logits: obs.class_logits.row(slot).to_vec(),
                score: obs.scores[slot],
            });
            suppress_slot(obs, slot, bank);
        }
    }
    Ok(removals)
}

/// Restores the slots listed in `removals` (inverse of [`disappearance_sim`]).
pub fn undo_disappearance(clip: &mut [FrameObservation], removals: &[DsRemoval]) {
    for r in removals {
        let obs = &mut clip[r.frame];
        obs.queries.row_mut(r.slot).copy_from_slice(&r.query);
        obs.masks.row_mut(r.slot).copy_from_slice(&r.mask);
        obs.class_logits.row_mut(r.slot).copy_from_slice(&r.class_logits);
        obs.scores[r.slot] = r.score;
        obs.gt_binding[r.slot] = Some(r.gt);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EdsConfig {
            es_threshold: 0.1,
            ..Default::default()
        };
        let (kept, removed) = emergence_sim(&[(1, 0.05), (2, 0.5), (3, 0.09)], &cfg, &mut rng);
        assert_eq!(removed, vec![1, 3]);
        assert_eq!(kept, vec![2]);
        let zero = EdsConfig {
            es_threshold: 0.0,
            ..cfg
        };
        assert!(emergence_sim(&[(1, 0.0)], &zero, &mut rng).1.is_empty());
        let one = EdsConfig {
            es_threshold: 1.0,
            ..cfg
        };
        assert_eq!(emergence_sim(&[(1, 0.99), (2, 0.3)], &one, &mut rng).1, vec![1, 2]);
    }

    #[test]
    fn frame_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            assert_eq!(ds_frames(DsMode::One, 5, &mut rng).len(), 1);
            let c = ds_frames(DsMode::Continuous, 5, &mut rng);
            assert_eq!(*c.last().unwrap(), 4);
            assert!(c.windows(2).all(|w| w[1] == w[0] + 1));
            assert!(!ds_frames(DsMode::Random, 5, &mut rng).is_empty());
        }
    }
}
