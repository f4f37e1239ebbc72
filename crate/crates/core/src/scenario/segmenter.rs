//! Synthetic stand-in for a per-frame query segmenter.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{random_unit, Scenario};
use crate::error::{Error, Result};
use crate::nn::Tensor2;

const FG_LOGIT: f64 = 5.0;
const CLUTTER_LOGIT: f64 = 3.0;

/// Corruptions applied by [`synth_segment`]. All zero means a perfect segmenter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Per-coordinate std of gaussian noise on query features.
    pub feature_sigma: f64,
    /// Per-coordinate std of gaussian noise on pixel features.
    pub pixel_sigma: f64,
    /// Blend weight toward a 3×3 box blur of the mask.
    pub mask_jitter: f64,
    pub label_flip: f64,
    pub miss_rate: f64,
    pub clutter_rate: f64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("feature_sigma", self.feature_sigma),
            ("pixel_sigma", self.pixel_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("noise.{n} must be >= 0")));
            }
        }
        for (n, v) in [
            ("mask_jitter", self.mask_jitter),
            ("label_flip", self.label_flip),
            ("miss_rate", self.miss_rate),
            ("clutter_rate", self.clutter_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("noise.{n} must lie in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Fixed properties of the synthetic segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterSpec {
    /// Query slots emitted per frame.
    pub n_seg: usize,
    /// Seed of the segmenter's initial query bank.
    pub bank_seed: u64,
}

impl Default for SegmenterSpec {
    fn default() -> Self {
        Self {
            n_seg: 20,
            bank_seed: 0x5e6_0001,
        }
    }
}

impl SegmenterSpec {
    /// The segmenter's initial queries, `n_seg × dim`, unit-norm rows.
    pub fn init_query_bank(&self, dim: usize) -> Tensor2 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.bank_seed);
        let mut data = Vec::with_capacity(self.n_seg * dim);
        for _ in 0..self.n_seg {
            data.extend(random_unit(&mut rng, dim));
        }
        Tensor2::from_raw(self.n_seg, dim, data)
    }
}

/// Per-frame segmenter output.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameObservation {
    pub t: usize,
    /// `n_seg × C` query features.
    pub queries: Tensor2,
    /// `(H·W) × C` pixel features.
    pub pixel_features: Tensor2,
    /// `n_seg × (H·W)` soft masks in `[0,1]`.
    pub masks: Tensor2,
    /// `n_seg × (num_classes + 1)`; the last column is background.
    pub class_logits: Tensor2,
    /// Max foreground softmax probability per slot.
    pub scores: Vec<f64>,
    /// Ground-truth id each slot was produced from (training only).
    pub gt_binding: Vec<Option<u32>>,
}

impl FrameObservation {
    /// Copy with query and pixel features multiplied by `s`.
    pub fn with_embedding_scale(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.queries.data_mut().iter_mut().for_each(|v| *v *= s);
        out.pixel_features.data_mut().iter_mut().for_each(|v| *v *= s);
        out
    }

    pub fn n_seg(&self) -> usize {
        self.queries.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.cols() - 1
    }

    pub fn slot_of(&self, gt: u32) -> Option<usize> {
        self.gt_binding.iter().position(|b| *b == Some(gt))
    }
}

/// Max foreground probability of a logit row whose last entry is background.
pub fn foreground_score(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    logits[..logits.len() - 1]
        .iter()
        .map(|v| (v - m).exp() / z)
        .fold(0.0, f64::max)
}

pub(crate) fn background_logits(num_classes: usize) -> Vec<f64> {
    let mut l = vec![0.0; num_classes + 1];
    l[num_classes] = FG_LOGIT;
    l
}

/// Background appearance vector of a scenario's pixels.
pub fn background_appearance(scn: &Scenario) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed ^ 0xb6_b6b6_b6b6);
    random_unit(&mut rng, scn.dim())
}

enum Slot {
    Object(usize),
    Clutter,
    Background,
}

/// Emits the observation of frame `t` (1-based).
pub fn synth_segment(
    scn: &Scenario,
    t: usize,
    noise: &NoiseSpec,
    seg: &SegmenterSpec,
    rng: &mut impl Rng,
) -> Result<FrameObservation> {
    if t < 1 || t > scn.frames {
        return Err(Error::Input(format!("frame {t} outside 1..={}", scn.frames)));
    }
    noise.validate()?;
    let dim = scn.dim();
    let npix = scn.pixels();
    let nc = scn.num_classes;
    let bank = seg.init_query_bank(dim);
    let fnoise = Normal::new(0.0, noise.feature_sigma.max(0.0)).expect("valid sigma");
    let pnoise = Normal::new(0.0, noise.pixel_sigma.max(0.0)).expect("valid sigma");

    let mut slots: Vec<Slot> = Vec::with_capacity(seg.n_seg);
    for (k, o) in scn.objects.iter().enumerate() {
        if !o.alive_at(t) || slots.len() == seg.n_seg {
            continue;
        }
        if noise.miss_rate > 0.0 && rng.random_bool(noise.miss_rate) {
            continue;
        }
        slots.push(Slot::Object(k));
    }
    while slots.len() < seg.n_seg {
        if noise.clutter_rate > 0.0 && rng.random_bool(noise.clutter_rate) {
            slots.push(Slot::Clutter);
        } else {
            slots.push(Slot::Background);
        }
    }
    slots.shuffle(rng);

    let mut queries = Tensor2::zeros(seg.n_seg, dim);
    let mut masks = Tensor2::zeros(seg.n_seg, npix);
    let mut logits = Tensor2::zeros(seg.n_seg, nc + 1);
    let mut binding = vec![None; seg.n_seg];
    for (j, slot) in slots.iter().enumerate() {
        let (base, lrow): (Vec<f64>, Vec<f64>) = match *slot {
            Slot::Object(k) => {
                let o = &scn.objects[k];
                binding[j] = Some(o.id);
                let mut cls = o.class_id;
                if noise.label_flip > 0.0 && nc > 1 && rng.random_bool(noise.label_flip) {
                    cls = (cls + rng.random_range(1..nc)) % nc;
                }
                let mut l = vec![0.0; nc + 1];
                l[cls] = FG_LOGIT;
                let gt = o.mask_at(t);
                let soft = jitter_mask(gt, scn.height, scn.width, noise.mask_jitter);
                masks.row_mut(j).copy_from_slice(&soft);
                (o.prototype.clone(), l)
            }
            Slot::Clutter => {
                let mut l = vec![0.0; nc + 1];
                l[rng.random_range(0..nc)] = CLUTTER_LOGIT;
                let r0 = rng.random_range(0..scn.height - 1);
                let c0 = rng.random_range(0..scn.width - 1);
                let row = masks.row_mut(j);
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    row[(r0 + dr) * scn.width + c0 + dc] = 1.0;
                }
                (random_unit(rng, dim), l)
            }
            Slot::Background => (bank.row(j).to_vec(), background_logits(nc)),
        };
        for (q, b) in queries.row_mut(j).iter_mut().zip(&base) {
            *q = b + if noise.feature_sigma > 0.0 { fnoise.sample(rng) } else { 0.0 };
        }
        logits.row_mut(j).copy_from_slice(&lrow);
    }
    let scores = (0..seg.n_seg).map(|j| foreground_score(logits.row(j))).collect();

    let bg = background_appearance(scn);
    let mut pixel_features = Tensor2::zeros(npix, dim);
    let mut owner: Vec<Option<usize>> = vec![None; npix];
    for (k, o) in scn.objects.iter().enumerate() {
        if o.alive_at(t) {
            for (px, &on) in o.mask_at(t).iter().enumerate() {
                if on {
                    owner[px] = Some(k);
                }
            }
        }
    }
    for px in 0..npix {
        let src = owner[px].map_or(&bg, |k| &scn.objects[k].prototype);
        for (f, s) in pixel_features.row_mut(px).iter_mut().zip(src) {
            *f = s + if noise.pixel_sigma > 0.0 { pnoise.sample(rng) } else { 0.0 };
        }
    }

    Ok(FrameObservation {
        t,
        queries,
        pixel_features,
        masks,
        class_logits: logits,
        scores,
        gt_binding: binding,
    })
}

fn jitter_mask(gt: &[bool], h: usize, w: usize, jitter: f64) -> Vec<f64> {
    let hard: Vec<f64> = gt.iter().map(|&b| b as u8 as f64).collect();
    if jitter <= 0.0 {
        return hard;
    }
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    s += hard[rr * w + cc];
                    n += 1.0;
                }
            }
            out[r * w + c] = (1.0 - jitter) * hard[r * w + c] + jitter * s / n;
        }
    }
    out
}
