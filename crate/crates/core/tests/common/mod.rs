//! Helpers and independent oracles shared by the integration tests and the
//! acceptance suite.

#![allow(dead_code)]

pub mod laws;

use daqtrack::daq::Track;
use daqtrack::matching::CostMatrix;
use daqtrack::nn::{Axis, Graph, Tensor2, Var};
use daqtrack::scenario::{generate_scenario, Scenario, ScenarioSpec};
use daqtrack::tracker::{Engine, EngineConfig, EngineKind};
use daqtrack::train::{clip_loss, run_clip, TrainConfig};
use daqtrack::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = na.max(nb);
    if s < 1e-12 {
        d
    } else {
        d / s
    }
}

/// Checks the reverse pass of `f` against central differences.
///
/// The scalar probed is `Σ f(inputs) ⊙ r` for a random upstream tensor `r`
/// (or the output itself when `f` is scalar). Returns the worst relative
/// error over all inputs.
pub fn check_op<F>(inputs: &[Tensor2], seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars).expect("forward");
    let (r, c) = g.value(out).shape();
    let upstream = if (r, c) == (1, 1) {
        Tensor2::filled(1, 1, 1.0)
    } else {
        normal(&mut rng(seed ^ 0xfeed), r, c, 1.0)
    };
    let grads = g.backward_with(out, upstream.clone()).expect("backward");
    let probe = |xs: &[Tensor2]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .expect("gradient slot")
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(inputs[k].rows(), inputs[k].cols()));
        let mut numeric = Vec::with_capacity(inputs[k].data().len());
        for e in 0..inputs[k].data().len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[e] += FD_STEP;
            let up = probe(&xs);
            xs[k].data_mut()[e] -= 2.0 * FD_STEP;
            let down = probe(&xs);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Runs every differentiable graph op once on random shapes drawn from `seed`.
pub fn kernel_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let n = r.random_range(1..5);
    let m = r.random_range(1..6);
    let heads = r.random_range(1..3);
    let c = heads * r.random_range(1..4);
    let p = r.random_range(2..7);
    let mut out = Vec::new();

    let x = normal(&mut r, n, c, 1.0);
    let w = normal(&mut r, c, m, 0.7);
    let b = normal(&mut r, 1, m, 0.3);
    out.push(("linear", check_op(&[x.clone(), w, b], seed, |g, v| g.linear(v[0], v[1], v[2]))));

    let y = normal(&mut r, m, c, 1.0);
    out.push(("matmul_nt", check_op(&[x.clone(), y], seed, |g, v| g.matmul_nt(v[0], v[1]))));

    let x2 = normal(&mut r, n, c, 1.0);
    out.push(("add", check_op(&[x.clone(), x2], seed, |g, v| g.add(v[0], v[1]))));

    let col = normal(&mut r, n, 1, 1.0);
    out.push(("add_col_bias", check_op(&[x.clone(), col], seed, |g, v| g.add_col_bias(v[0], v[1]))));

    let xl = normal(&mut r, n, c.max(2), 1.0);
    let gamma = uniform(&mut r, 1, c.max(2), 0.5, 1.5);
    let beta = normal(&mut r, 1, c.max(2), 0.3);
    out.push((
        "layer_norm",
        check_op(&[xl, gamma, beta], seed, |g, v| g.layer_norm(v[0], v[1], v[2])),
    ));

    out.push(("gelu", check_op(&[normal(&mut r, n, c, 1.5)], seed, |g, v| Ok(g.gelu(v[0])))));

    for (name, axis) in [("softmax_key", Axis::KeyDim), ("softmax_query", Axis::QueryDim)] {
        let s = normal(&mut r, n, m, 1.5);
        out.push((name, check_op(&[s], seed, move |g, v| Ok(g.softmax(v[0], axis)))));
    }

    for (name, axis) in [("attention_key", Axis::KeyDim), ("attention_query", Axis::QueryDim)] {
        let q = normal(&mut r, n, c, 1.0);
        let k = normal(&mut r, m, c, 1.0);
        let vv = normal(&mut r, m, c, 1.0);
        out.push((
            name,
            check_op(&[q, k, vv], seed, move |g, v| g.attention(v[0], v[1], v[2], heads, axis)),
        ));
    }

    let feats = normal(&mut r, p, c, 1.0);
    let masks = uniform(&mut r, n, p, 0.05, 1.0);
    out.push(("mask_pool", check_op(&[feats, masks], seed, |g, v| g.mask_pool(v[0], v[1]))));

    let a = normal(&mut r, n, c, 1.0);
    let bb = normal(&mut r, m, c, 1.0);
    out.push(("concat", check_op(&[a, bb], seed, move |g, v| g.concat(&[v[0], v[1]], c))));

    let idx: Vec<usize> = (0..r.random_range(1..6)).map(|_| r.random_range(0..n)).collect();
    out.push((
        "select_rows",
        check_op(&[x.clone()], seed, move |g, v| g.select_rows(v[0], &idx)),
    ));

    let s = r.random_range(-2.0..2.0);
    out.push(("scale", check_op(&[x.clone()], seed, move |g, v| Ok(g.scale(v[0], s)))));
    out.push(("sum", check_op(&[x], seed, |g, v| Ok(g.sum(v[0])))));

    let k = m + 1;
    let logits = normal(&mut r, n, k, 1.5);
    let targets: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
    let weights: Vec<f64> = (0..n).map(|_| r.random_range(0.1..1.0)).collect();
    out.push((
        "cross_entropy",
        check_op(&[logits], seed, move |g, v| g.cross_entropy(v[0], &targets, &weights)),
    ));

    let ml = normal(&mut r, n, p, 1.5);
    let mt = Tensor2::from_fn(n, p, |_, _| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    let mt2 = mt.clone();
    out.push(("dice", check_op(&[ml.clone()], seed, move |g, v| g.dice_loss(v[0], &mt))));
    out.push(("bce", check_op(&[ml], seed, move |g, v| g.bce_loss(v[0], &mt2))));
    out
}

/// A small spec shared by the end-to-end checks: dense events at model dim `dim`.
pub fn dense_spec(dim: usize) -> ScenarioSpec {
    ScenarioSpec {
        dim,
        ..ScenarioSpec::preset("dense-ed").unwrap()
    }
}

pub fn tiny_engine(kind: EngineKind, dim: usize, seed: u64) -> Engine {
    Engine::new(EngineConfig::new(kind, dim, 4), seed).unwrap()
}

/// Relative error between the accumulated clip-loss gradient and central
/// differences on a random sample of parameter entries, with the norm of the
/// sampled analytic gradient.
pub fn e2e_check(seed: u64, samples: usize) -> (f64, f64) {
    let kind = if seed % 2 == 0 { EngineKind::Daq } else { EngineKind::Baseline };
    let mut engine = tiny_engine(kind, 8, seed);
    let scn = generate_scenario(&dense_spec(8), seed).unwrap();
    let cfg = TrainConfig::default();
    let mut r = rng(seed ^ 0xe2e);
    let start = r.random_range(1..=scn.frames - cfg.clip_len + 1);
    engine.params.zero_grads();
    let res = run_clip(&mut engine, &scn, start, &cfg, &mut r, true).unwrap();

    let names: Vec<String> = engine.params.names().map(str::to_string).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..samples {
        let name = &names[r.random_range(0..names.len())];
        let len = engine.params.get(name).unwrap().data().len();
        let e = r.random_range(0..len);
        analytic.push(engine.params.grad(name).unwrap().data()[e]);
        let orig = engine.params.get(name).unwrap().data()[e];
        let mut eval_at = |v: f64| {
            engine.params.get_mut(name).unwrap().data_mut()[e] = v;
            clip_loss(&engine, &res.contexts, &cfg).unwrap()
        };
        let up = eval_at(orig + FD_STEP);
        let down = eval_at(orig - FD_STEP);
        eval_at(orig);
        numeric.push((up - down) / (2.0 * FD_STEP));
    }
    let norm = analytic.iter().map(|g| g * g).sum::<f64>().sqrt();
    (rel_err(&analytic, &numeric), norm)
}

/// Minimum assignment cost by exhaustive search over injections of the
/// smaller side into the larger.
pub fn brute_force_cost(cm: &CostMatrix) -> f64 {
    let (rows, cols) = (cm.rows(), cm.cols());
    let transpose = rows > cols;
    let (small, large) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transpose { cm.get(j, i) } else { cm.get(i, j) };
    fn rec(i: usize, small: usize, large: usize, used: &mut Vec<bool>, acc: f64, at: &dyn Fn(usize, usize) -> f64, best: &mut f64) {
        if i == small {
            *best = best.min(acc);
            return;
        }
        for j in 0..large {
            if !used[j] {
                used[j] = true;
                rec(i + 1, small, large, used, acc + at(i, j), at, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, small, large, &mut vec![false; large], 0.0, &at, &mut best);
    if small == 0 {
        0.0
    } else {
        best
    }
}

/// Straight-line momentum rule: β = clamp(Σ cos(h, f) / (|h| + 1), 0, 1) and
/// m ← (1 − β)·m + β·f.
pub fn momentum_oracle(mom: &[f64], history: &[Vec<f64>], f: &[f64]) -> (f64, Vec<f64>) {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            d / (na * nb)
        }
    };
    let s: f64 = history.iter().map(|h| cos(h, f)).sum();
    let beta = (s / (history.len() + 1) as f64).clamp(0.0, 1.0);
    let m = mom.iter().zip(f).map(|(m, f)| (1.0 - beta) * m + beta * f).collect();
    (beta, m)
}

pub fn random_track(r: &mut impl Rng, dim: usize, history: usize) -> Track {
    let v = |r: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(r);
                z
            })
            .collect()
    };
    let first = v(r);
    let mut t = Track::new(1, v(r), first, 0.9, 1);
    for _ in 1..history {
        t.feat_history.push(v(r));
    }
    t.mom_feat = v(r);
    t
}

pub fn dense_pool(first_seed: u64, count: usize) -> Vec<Scenario> {
    let spec = ScenarioSpec::preset("dense-ed").unwrap();
    (0..count as u64).map(|i| generate_scenario(&spec, first_seed + i).unwrap()).collect()
}
