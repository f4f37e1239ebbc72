//! Forward and analytic backward kernels.
//!
//! Every function here is pure: it reads its inputs and returns fresh tensors.
//! The recording [`Graph`](super::Graph) calls into these and keeps whatever
//! forward state the matching backward needs.

use serde::{Deserialize, Serialize};

use super::tensor::{dot, Tensor2};
use crate::error::{Error, Result};

/// Empty-mask guard for [`mask_pool`].
pub const MASK_POOL_EPS: f64 = 1e-8;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Axis a softmax normalizes over.
///
/// For attention score matrices (queries × keys) `KeyDim` is the row-wise
/// softmax of standard attention and `QueryDim` normalizes each key's column
/// across all queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    /// Normalize along columns of a row (each row sums to 1).
    KeyDim,
    /// Normalize along rows of a column (each column sums to 1).
    QueryDim,
}

pub fn linear_forward(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    if x.cols() != w.rows() {
        return Err(Error::dim("linear (x·w)", x.shape(), w.shape()));
    }
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(Error::dim("linear (bias)", b.shape(), (1, w.cols())));
    }
    let mut y = x.matmul(w)?;
    for i in 0..y.rows() {
        for (v, bv) in y.row_mut(i).iter_mut().zip(b.data()) {
            *v += bv;
        }
    }
    Ok(y)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> (Tensor2, Tensor2, Tensor2) {
    let dx = dy.matmul_nt(w).expect("linear_backward dx shape");
    let dw = x.matmul_tn(dy).expect("linear_backward dw shape");
    let mut db = Tensor2::zeros(1, dy.cols());
    for i in 0..dy.rows() {
        for (d, g) in db.data_mut().iter_mut().zip(dy.row(i)) {
            *d += g;
        }
    }
    (dx, dw, db)
}

pub fn softmax(x: &Tensor2, axis: Axis) -> Tensor2 {
    let mut y = x.clone();
    match axis {
        Axis::KeyDim => {
            for i in 0..y.rows() {
                softmax_in_place(y.row_mut(i));
            }
        }
        Axis::QueryDim => {
            let (r, c) = y.shape();
            let mut col = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = y.get(i, j);
                }
                softmax_in_place(&mut col);
                for i in 0..r {
                    y.set(i, j, col[i]);
                }
            }
        }
    }
    y
}

fn softmax_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Gradient of the softmax input given output `y` and output gradient `dy`.
pub fn softmax_backward(y: &Tensor2, dy: &Tensor2, axis: Axis) -> Tensor2 {
    let (r, c) = y.shape();
    let mut dx = Tensor2::zeros(r, c);
    match axis {
        Axis::KeyDim => {
            for i in 0..r {
                let yr = y.row(i);
                let gr = dy.row(i);
                let s = dot(yr, gr);
                for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                    *d = yr[j] * (gr[j] - s);
                }
            }
        }
        Axis::QueryDim => {
            for j in 0..c {
                let s: f64 = (0..r).map(|i| y.get(i, j) * dy.get(i, j)).sum();
                for i in 0..r {
                    dx.set(i, j, y.get(i, j) * (dy.get(i, j) - s));
                }
            }
        }
    }
    dx
}

/// Forward state kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Tensor2,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer normalization with affine `gamma`, `beta` (each 1×C).
pub fn layer_norm(x: &Tensor2, gamma: &Tensor2, beta: &Tensor2) -> Result<(Tensor2, LayerNormCache)> {
    let c = x.cols();
    if gamma.shape() != (1, c) || beta.shape() != (1, c) {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let mut xhat = Tensor2::zeros(x.rows(), c);
    let mut y = Tensor2::zeros(x.rows(), c);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(i);
        for j in 0..c {
            xr[j] = (row[j] - mu) * is;
        }
        let yr = y.row_mut(i);
        for j in 0..c {
            yr[j] = xhat.get(i, j) * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor2,
    dy: &Tensor2,
) -> (Tensor2, Tensor2, Tensor2) {
    let (r, c) = dy.shape();
    let n = c as f64;
    let mut dx = Tensor2::zeros(r, c);
    let mut dg = Tensor2::zeros(1, c);
    let mut db = Tensor2::zeros(1, c);
    let mut dxhat = vec![0.0; c];
    for i in 0..r {
        let xh = cache.xhat.row(i);
        let g = dy.row(i);
        for j in 0..c {
            dxhat[j] = g[j] * gamma.data()[j];
            dg.data_mut()[j] += g[j] * xh[j];
            db.data_mut()[j] += g[j];
        }
        let s1: f64 = dxhat.iter().sum();
        let s2 = dot(&dxhat, xh);
        let is = cache.inv_std[i];
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = is / n * (n * dxhat[j] - s1 - xh[j] * s2);
        }
    }
    (dx, dg, db)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor2) -> Tensor2 {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_A * v * v * v)).tanh()))
        .collect();
    Tensor2::from_raw(x.rows(), x.cols(), data)
}

pub fn gelu_backward(x: &Tensor2, dy: &Tensor2) -> Tensor2 {
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| {
            let u = GELU_K * (v + GELU_A * v * v * v);
            let t = u.tanh();
            let du = GELU_K * (1.0 + 3.0 * GELU_A * v * v);
            g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    Tensor2::from_raw(x.rows(), x.cols(), data)
}

/// Weighted average of pixel features under soft masks.
///
/// `features` is P×C, `masks` is n×P; the result is n×C with row `i` equal to
/// `Σ_p masks[i,p]·features[p] / max(Σ_p masks[i,p], ε)`.
pub fn mask_pool(features: &Tensor2, masks: &Tensor2) -> Result<Tensor2> {
    if masks.cols() != features.rows() {
        return Err(Error::dim("mask_pool", features.shape(), masks.shape()));
    }
    let mut out = masks.matmul(features)?;
    for i in 0..masks.rows() {
        let denom = masks.row(i).iter().sum::<f64>().max(MASK_POOL_EPS);
        for v in out.row_mut(i) {
            *v /= denom;
        }
    }
    Ok(out)
}

/// Returns `(dfeatures, dmasks)`.
pub fn mask_pool_backward(
    features: &Tensor2,
    masks: &Tensor2,
    out: &Tensor2,
    dout: &Tensor2,
) -> (Tensor2, Tensor2) {
    let n = masks.rows();
    let mut scaled = dout.clone();
    let mut active = vec![false; n];
    for i in 0..n {
        let s = masks.row(i).iter().sum::<f64>();
        let denom = s.max(MASK_POOL_EPS);
        active[i] = s > MASK_POOL_EPS;
        for v in scaled.row_mut(i) {
            *v /= denom;
        }
    }
    // d features = Mᵀ · (dout / denom)
    let dfeat = masks.matmul_tn(&scaled).expect("mask_pool_backward dfeat");
    // d masks[i,p] = f_p·g_i − [active] out_i·g_i   with g_i = dout_i / denom_i
    let mut dmask = scaled.matmul_nt(features).expect("mask_pool_backward dmask");
    for i in 0..n {
        if active[i] {
            let corr = dot(out.row(i), scaled.row(i));
            for v in dmask.row_mut(i) {
                *v -= corr;
            }
        }
    }
    (dfeat, dmask)
}

/// Cosine similarity of two equal-length vectors; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn cosine_sim(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    if a.data().len() != b.data().len() {
        return Err(Error::dim("cosine_sim", a.shape(), b.shape()));
    }
    Ok(cosine(a.data(), b.data()))
}

/// Multi-head scaled dot-product attention over already-projected inputs.
///
/// Returns the Nq×C output and the per-head probability matrices (Nq×Nk).
pub fn attention_core(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    heads: usize,
    axis: Axis,
) -> Result<(Tensor2, Vec<Tensor2>)> {
    let c = q.cols();
    if k.cols() != c || v.cols() != c || k.rows() != v.rows() {
        return Err(Error::dim("attention_core", q.shape(), k.shape()));
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("model dim {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (nq, nk) = (q.rows(), k.rows());
    let mut out = Tensor2::zeros(nq, c);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let off = h * d;
        let scores = Tensor2::from_fn(nq, nk, |i, j| {
            scale * dot(&q.row(i)[off..off + d], &k.row(j)[off..off + d])
        });
        let p = softmax(&scores, axis);
        for i in 0..nq {
            let orow = &mut out.row_mut(i)[off..off + d];
            for j in 0..nk {
                let w = p.get(i, j);
                if w == 0.0 {
                    continue;
                }
                for (o, &vv) in orow.iter_mut().zip(&v.row(j)[off..off + d]) {
                    *o += w * vv;
                }
            }
        }
        probs.push(p);
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)`.
pub fn attention_core_backward(
    q: &Tensor2,
    k: &Tensor2,
    v: &Tensor2,
    probs: &[Tensor2],
    axis: Axis,
    dout: &Tensor2,
) -> (Tensor2, Tensor2, Tensor2) {
    let heads = probs.len();
    let c = q.cols();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (nq, nk) = (q.rows(), k.rows());
    let mut dq = Tensor2::zeros(nq, c);
    let mut dk = Tensor2::zeros(nk, c);
    let mut dv = Tensor2::zeros(nk, c);
    for (h, p) in probs.iter().enumerate() {
        let off = h * d;
        let dp = Tensor2::from_fn(nq, nk, |i, j| {
            dot(&dout.row(i)[off..off + d], &v.row(j)[off..off + d])
        });
        for j in 0..nk {
            let dvr = &mut dv.row_mut(j)[off..off + d];
            for i in 0..nq {
                let w = p.get(i, j);
                for (o, &g) in dvr.iter_mut().zip(&dout.row(i)[off..off + d]) {
                    *o += w * g;
                }
            }
        }
        let ds = softmax_backward(p, &dp, axis);
        for i in 0..nq {
            for j in 0..nk {
                let s = ds.get(i, j) * scale;
                if s == 0.0 {
                    continue;
                }
                {
                    let dqr = &mut dq.row_mut(i)[off..off + d];
                    for (o, &kv) in dqr.iter_mut().zip(&k.row(j)[off..off + d]) {
                        *o += s * kv;
                    }
                }
                let dkr = &mut dk.row_mut(j)[off..off + d];
                for (o, &qv) in dkr.iter_mut().zip(&q.row(i)[off..off + d]) {
                    *o += s * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Weighted mean cross-entropy over rows; returns `(loss, dlogits)`.
///
/// Per-row losses are combined as `Σ w_i·CE_i / Σ w_i`.
pub fn cross_entropy(logits: &Tensor2, targets: &[usize], weights: &[f64]) -> Result<(f64, Tensor2)> {
    let (n, k) = logits.shape();
    if targets.len() != n || weights.len() != n {
        return Err(Error::dim("cross_entropy", logits.shape(), (targets.len(), weights.len())));
    }
    let mut grad = Tensor2::zeros(n, k);
    let wsum: f64 = weights.iter().sum();
    if n == 0 || wsum <= 0.0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for i in 0..n {
        let t = targets[i];
        if t >= k {
            return Err(Error::Input(format!("class target {t} out of range {k}")));
        }
        let mut p = logits.row(i).to_vec();
        let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + p.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += weights[i] * (lse - logits.get(i, t));
        softmax_in_place(&mut p);
        let w = weights[i] / wsum;
        let gr = grad.row_mut(i);
        for j in 0..k {
            gr[j] = w * (p[j] - if j == t { 1.0 } else { 0.0 });
        }
    }
    Ok((loss / wsum, grad))
}

/// Mean soft-dice loss over rows with +1 smoothing, on mask logits.
pub fn dice_loss(logits: &Tensor2, targets: &Tensor2) -> Result<(f64, Tensor2)> {
    if logits.shape() != targets.shape() {
        return Err(Error::dim("dice_loss", logits.shape(), targets.shape()));
    }
    let (n, pcount) = logits.shape();
    let mut grad = Tensor2::zeros(n, pcount);
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    let mut prob = vec![0.0; pcount];
    for i in 0..n {
        let g = targets.row(i);
        for (p, &x) in prob.iter_mut().zip(logits.row(i)) {
            *p = sigmoid(x);
        }
        let a = 2.0 * dot(&prob, g) + 1.0;
        let b = prob.iter().sum::<f64>() + g.iter().sum::<f64>() + 1.0;
        loss += 1.0 - a / b;
        let gr = grad.row_mut(i);
        for j in 0..pcount {
            let dp = -(2.0 * g[j] * b - a) / (b * b);
            gr[j] = dp * prob[j] * (1.0 - prob[j]) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Dice loss on probabilities directly (used by matching costs and oracles).
pub fn dice_on_probs(p: &[f64], g: &[f64]) -> f64 {
    let a = 2.0 * dot(p, g) + 1.0;
    let b = p.iter().sum::<f64>() + g.iter().sum::<f64>() + 1.0;
    1.0 - a / b
}

/// Mean binary cross-entropy with logits over all elements.
pub fn bce_loss(logits: &Tensor2, targets: &Tensor2) -> Result<(f64, Tensor2)> {
    if logits.shape() != targets.shape() {
        return Err(Error::dim("bce_loss", logits.shape(), targets.shape()));
    }
    let count = logits.data().len();
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for ((gv, &x), &t) in grad.data_mut().iter_mut().zip(logits.data()).zip(targets.data()) {
        loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
        *gv = (sigmoid(x) - t) * inv;
    }
    Ok((loss * inv, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2 {
        Tensor2::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let y = linear_forward(&t(&[&[1.0, 2.0]]), &t(&[&[1.0, 0.0], &[0.0, 1.0]]), &t(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let w = t(&[&[0.3, -1.2], &[2.0, 0.7]]);
        let y = linear_forward(&t(&[&[0.0, 0.0]]), &w, &t(&[&[3.0, 4.0]])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let e = linear_forward(&Tensor2::zeros(1, 3), &Tensor2::zeros(2, 2), &Tensor2::zeros(1, 2)).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("(1, 3)") && msg.contains("(2, 2)"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax(&t(&[&[0.0, 0.0, 0.0]]), Axis::KeyDim);
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&t(&[&[1000.0, 1000.0]]), Axis::KeyDim);
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_columns() {
        // column [1,3]: e^1/(e^1+e^3) = 1/(1+e^2)
        let y = softmax(&t(&[&[1.0, 2.0], &[3.0, 4.0]]), Axis::QueryDim);
        let expect = 1.0 / (1.0 + 2f64.exp());
        assert!((y.get(0, 0) - expect).abs() < 1e-15);
        assert!((y.get(0, 1) - expect).abs() < 1e-15);
        for j in 0..2 {
            assert!((y.get(0, j) + y.get(1, j) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_pool_delta_uniform_and_empty() {
        let f = Tensor2::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let delta = t(&[&[0.0, 0.0, 1.0, 0.0]]);
        assert_eq!(mask_pool(&f, &delta).unwrap().data(), f.row(2));
        let ones = Tensor2::filled(1, 4, 1.0);
        let mean = mask_pool(&f, &ones).unwrap();
        assert_eq!(mean.data(), &[4.5, 5.5, 6.5]);
        let zero = Tensor2::zeros(1, 4);
        assert_eq!(mask_pool(&f, &zero).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_conventions() {
        let a = [1.0, 2.0, -0.5];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-15);
        assert!((cosine(&a, &neg) + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_k() {
        let logits = Tensor2::zeros(3, 5);
        let (l, _) = cross_entropy(&logits, &[0, 4, 2], &[1.0, 0.1, 1.0]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dice_zero_on_exact_mask() {
        let g = [1.0, 0.0, 1.0, 1.0];
        assert_eq!(dice_on_probs(&g, &g), 0.0);
        assert!(dice_on_probs(&[0.0, 1.0, 0.0, 0.0], &g) > 0.5);
    }
}
