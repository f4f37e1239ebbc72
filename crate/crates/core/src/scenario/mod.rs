//! Procedural ground-truth video scenarios and the synthetic segmenter that
//! turns them into per-frame query observations.
//!
//! Frames are numbered from 1 everywhere in this module, matching the
//! scenario file format.

mod io;
mod segmenter;

pub use io::{scenario_digest, scenario_from_file, scenario_to_file, Rle};
pub use segmenter::{
    background_appearance, foreground_score, synth_segment, FrameObservation, NoiseSpec, SegmenterSpec,
};
pub(crate) use segmenter::background_logits;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary object mask over a row-major H×W grid.
pub type Mask = Vec<bool>;

/// Axis-aligned box state of an object at one frame (pixel units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxState {
    pub cy: f64,
    pub cx: f64,
    pub half_h: f64,
    pub half_w: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtObject {
    pub id: u32,
    pub class_id: usize,
    pub birth: usize,
    pub death: usize,
    /// One entry per alive frame, `birth..=death`.
    pub trajectory: Vec<BoxState>,
    /// Unit-norm appearance vector.
    pub prototype: Vec<f64>,
    /// One mask per frame `1..=T`; empty outside `[birth, death]`.
    pub masks: Vec<Mask>,
}

impl GtObject {
    pub fn alive_at(&self, t: usize) -> bool {
        self.birth <= t && t <= self.death
    }

    pub fn mask_at(&self, t: usize) -> &Mask {
        &self.masks[t - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub objects: Vec<GtObject>,
}

impl Scenario {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.objects.first().map_or(0, |o| o.prototype.len())
    }

    pub fn alive(&self, t: usize) -> impl Iterator<Item = &GtObject> {
        self.objects.iter().filter(move |o| o.alive_at(t))
    }

    pub fn object(&self, id: u32) -> Option<&GtObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Checks the structural invariants every scenario must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Input(format!("scenario needs T >= 2, got {}", self.frames)));
        }
        if self.objects.is_empty() {
            return Err(Error::Input("scenario has no objects".into()));
        }
        let dim = self.dim();
        let mut ids = std::collections::BTreeSet::new();
        for o in &self.objects {
            let ctx = format!("object {}", o.id);
            if !ids.insert(o.id) {
                return Err(Error::Input(format!("{ctx}: duplicate id")));
            }
            if o.birth < 1 || o.birth > o.death || o.death > self.frames {
                return Err(Error::Input(format!(
                    "{ctx}: need 1 <= birth ({}) <= death ({}) <= T ({})",
                    o.birth, o.death, self.frames
                )));
            }
            if o.class_id >= self.num_classes {
                return Err(Error::Input(format!("{ctx}: class {} out of range", o.class_id)));
            }
            if o.prototype.len() != dim {
                return Err(Error::Input(format!("{ctx}: prototype length mismatch")));
            }
            let norm = o.prototype.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("{ctx}: prototype not unit norm ({norm})")));
            }
            if o.masks.len() != self.frames {
                return Err(Error::Input(format!("{ctx}: expected {} masks", self.frames)));
            }
            if o.trajectory.len() != o.death - o.birth + 1 {
                return Err(Error::Input(format!("{ctx}: trajectory length mismatch")));
            }
            for (i, m) in o.masks.iter().enumerate() {
                let t = i + 1;
                if m.len() != self.pixels() {
                    return Err(Error::Input(format!("{ctx}: frame {t} mask size")));
                }
                let nonempty = m.iter().any(|&b| b);
                if o.alive_at(t) != nonempty {
                    return Err(Error::Input(format!(
                        "{ctx}: frame {t} mask must be {} ",
                        if o.alive_at(t) { "nonempty" } else { "empty" }
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the procedural generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub num_objects: usize,
    pub num_classes: usize,
    pub dim: usize,
    /// Probability that an object is born after frame 1.
    pub emergence_rate: f64,
    /// Probability that an object dies before the last frame.
    pub disappearance_rate: f64,
    /// Allow objects to overlap (front objects occlude back ones).
    pub occlusion: bool,
    /// Probability that a disappeared object re-enters later under a new id.
    pub reentry_rate: f64,
    /// Expected cosine between prototypes of the same class.
    pub class_similarity: f64,
    pub max_speed: f64,
    /// Whether at least one object must span every frame.
    pub keep_anchor_object: bool,
}

impl ScenarioSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let base = ScenarioSpec {
            frames: 16,
            height: 12,
            width: 12,
            num_objects: 6,
            num_classes: 4,
            dim: 64,
            emergence_rate: 0.0,
            disappearance_rate: 0.0,
            occlusion: true,
            reentry_rate: 0.0,
            class_similarity: 0.4,
            max_speed: 0.6,
            keep_anchor_object: false,
        };
        match name {
            "easy" => Ok(ScenarioSpec {
                num_objects: 3,
                keep_anchor_object: true,
                occlusion: false,
                ..base
            }),
            // ~20% of objects carry an emergence or disappearance event
            "sparse-ed" => Ok(ScenarioSpec {
                emergence_rate: 0.1,
                disappearance_rate: 0.1,
                ..base
            }),
            // ~80% of objects carry an event
            "dense-ed" => Ok(ScenarioSpec {
                emergence_rate: 0.55,
                disappearance_rate: 0.55,
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown scenario preset `{other}` (expected easy, sparse-ed, dense-ed)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("emergence_rate", self.emergence_rate),
            ("disappearance_rate", self.disappearance_rate),
            ("reentry_rate", self.reentry_rate),
            ("class_similarity", self.class_similarity),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {r}")));
            }
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "grid must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames < 2 {
            return Err(Error::Config("scenario needs at least 2 frames".into()));
        }
        if self.num_objects == 0 {
            return Err(Error::Config("scenario needs at least one object".into()));
        }
        if self.num_objects > self.height * self.width {
            return Err(Error::Config(format!(
                "{} objects cannot fit in a {}x{} grid",
                self.num_objects, self.height, self.width
            )));
        }
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::Config("num_classes and dim must be positive".into()));
        }
        Ok(())
    }
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

const CLASS_SEED: u64 = 0xc1a5_5000;

/// Class appearance centers, shared by every scenario with the same
/// `(num_classes, dim)`.
pub fn class_centers(num_classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(CLASS_SEED);
    (0..num_classes).map(|_| random_unit(&mut rng, dim)).collect()
}

struct Plan {
    class_id: usize,
    birth: usize,
    death: usize,
    prototype: Vec<f64>,
    trajectory: Vec<BoxState>,
}

/// Deterministically generates a scenario from `(spec, seed)`.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = spec.frames;
    let centers = class_centers(spec.num_classes, spec.dim);
    let s = spec.class_similarity;

    let mut plans: Vec<Plan> = Vec::new();
    for i in 0..spec.num_objects {
        let class_id = rng.random_range(0..spec.num_classes);
        let u = random_unit(&mut rng, spec.dim);
        let prototype = normalize(
            centers[class_id]
                .iter()
                .zip(&u)
                .map(|(c, x)| s.sqrt() * c + (1.0 - s).sqrt() * x)
                .collect(),
        );
        let anchor = spec.keep_anchor_object && i == 0;
        let emerge = !anchor && rng.random_bool(spec.emergence_rate);
        let vanish = !anchor && rng.random_bool(spec.disappearance_rate);
        let birth = if emerge {
            if t_max >= 3 {
                rng.random_range(2..=t_max - 1)
            } else {
                2
            }
        } else {
            1
        };
        let death = if vanish && birth < t_max {
            rng.random_range(birth..=t_max - 1)
        } else {
            t_max
        };
        plans.push(Plan {
            class_id,
            birth,
            death,
            prototype,
            trajectory: Vec::new(),
        });
    }
    // re-entries: same appearance, fresh identity
    let n_primary = plans.len();
    for i in 0..n_primary {
        if plans[i].death + 2 <= t_max && rng.random_bool(spec.reentry_rate) {
            let birth = rng.random_range(plans[i].death + 2..=t_max);
            plans.push(Plan {
                class_id: plans[i].class_id,
                birth,
                death: t_max,
                prototype: plans[i].prototype.clone(),
                trajectory: Vec::new(),
            });
        }
    }

    for k in 0..plans.len() {
        let tries = if spec.occlusion { 1 } else { 30 };
        for attempt in 0..tries {
            let traj = sample_trajectory(spec, plans[k].death - plans[k].birth + 1, &mut rng);
            plans[k].trajectory = traj;
            if attempt + 1 == tries || !overlaps_any(&plans[..k], &plans[k]) {
                break;
            }
        }
    }

    let masks = paint(spec, &plans);
    let objects = plans
        .into_iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (p, masks))| GtObject {
            id: i as u32 + 1,
            class_id: p.class_id,
            birth: p.birth,
            death: p.death,
            trajectory: p.trajectory,
            prototype: p.prototype,
            masks,
        })
        .collect();
    let scn = Scenario {
        frames: t_max,
        height: spec.height,
        width: spec.width,
        num_classes: spec.num_classes,
        seed,
        objects,
    };
    scn.validate()?;
    Ok(scn)
}

fn sample_trajectory(spec: &ScenarioSpec, len: usize, rng: &mut impl Rng) -> Vec<BoxState> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let half_h = rng.random_range(1..=2) as f64;
    let half_w = rng.random_range(1..=2) as f64;
    let mut cy = rng.random_range(half_h..h - 1.0 - half_h);
    let mut cx = rng.random_range(half_w..w - 1.0 - half_w);
    let mut vy = rng.random_range(-spec.max_speed..=spec.max_speed);
    let mut vx = rng.random_range(-spec.max_speed..=spec.max_speed);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(BoxState { cy, cx, half_h, half_w });
        cy += vy;
        cx += vx;
        if cy < half_h || cy > h - 1.0 - half_h {
            vy = -vy;
            cy = cy.clamp(half_h, h - 1.0 - half_h);
        }
        if cx < half_w || cx > w - 1.0 - half_w {
            vx = -vx;
            cx = cx.clamp(half_w, w - 1.0 - half_w);
        }
    }
    out
}

fn box_pixels(b: &BoxState, height: usize, width: usize) -> impl Iterator<Item = usize> {
    let r0 = (b.cy - b.half_h).round().max(0.0) as usize;
    let r1 = ((b.cy + b.half_h).round() as usize).min(height - 1);
    let c0 = (b.cx - b.half_w).round().max(0.0) as usize;
    let c1 = ((b.cx + b.half_w).round() as usize).min(width - 1);
    (r0..=r1).flat_map(move |r| (c0..=c1).map(move |c| r * width + c))
}

fn overlaps_any(placed: &[Plan], p: &Plan) -> bool {
    placed.iter().any(|q| {
        let lo = p.birth.max(q.birth);
        let hi = p.death.min(q.death);
        (lo..=hi).any(|t| {
            let a = &p.trajectory[t - p.birth];
            let b = &q.trajectory[t - q.birth];
            (a.cy - b.cy).abs() <= a.half_h + b.half_h + 0.5
                && (a.cx - b.cx).abs() <= a.half_w + b.half_w + 0.5
        })
    })
}

/// Painter's-order rasterization: later objects occlude earlier ones. Any
/// alive object left fully covered reclaims one pixel of its own box.
fn paint(spec: &ScenarioSpec, plans: &[Plan]) -> Vec<Vec<Mask>> {
    let (h, w) = (spec.height, spec.width);
    let npix = h * w;
    let mut masks = vec![vec![vec![false; npix]; spec.frames]; plans.len()];
    for t in 1..=spec.frames {
        let mut owner: Vec<Option<usize>> = vec![None; npix];
        for (k, p) in plans.iter().enumerate() {
            if t < p.birth || t > p.death {
                continue;
            }
            for px in box_pixels(&p.trajectory[t - p.birth], h, w) {
                owner[px] = Some(k);
            }
        }
        let mut reclaimed = vec![false; npix];
        for (k, p) in plans.iter().enumerate() {
            if t < p.birth || t > p.death || owner.contains(&Some(k)) {
                continue;
            }
            let b = p.trajectory[t - p.birth];
            let center = (b.cy.round() as usize).min(h - 1) * w + (b.cx.round() as usize).min(w - 1);
            let pick = std::iter::once(center)
                .chain(box_pixels(&b, h, w))
                .chain(0..npix)
                .find(|&px| !reclaimed[px])
                .expect("grid has more pixels than objects");
            owner[pick] = Some(k);
            reclaimed[pick] = true;
        }
        for (px, o) in owner.iter().enumerate() {
            if let Some(k) = o {
                masks[*k][t - 1][px] = true;
            }
        }
    }
    masks
}
