//! Dense kernels with analytic gradients, parameter storage and the small
//! set of composite layers (linear, layer norm, attention, MLP) the trackers use.

mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{cosine, cosine_sim, mask_pool, softmax, Axis};
pub use params::{Param, ParamStore};
pub use tensor::Tensor2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub softmax_axis: Axis,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize, softmax_axis: Axis) -> Result<Self> {
        if num_heads == 0 || model_dim < num_heads || model_dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} must be a positive multiple of num_heads {num_heads}"
            )));
        }
        Ok(Self {
            model_dim,
            num_heads,
            softmax_axis,
        })
    }
}

pub fn init_linear(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_xavier(format!("{name}.w"), fan_in, fan_out, rng)?;
    store.insert(format!("{name}.b"), Tensor2::zeros(1, fan_out))
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor2::filled(1, dim, 1.0))?;
    store.insert(format!("{name}.beta"), Tensor2::zeros(1, dim))
}

/// Query/key/value/output projections under `prefix.{q,k,v,o}`.
pub fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), dim, dim, rng)?;
    }
    Ok(())
}

/// Like [`init_attention`] but every projection starts at the identity plus
/// gaussian noise of std `noise`, so attention initially compares raw inputs.
pub fn init_attention_identity(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let normal = rand_distr::Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    for p in ["q", "k", "v", "o"] {
        let w = Tensor2::from_fn(dim, dim, |i, j| (i == j) as u8 as f64 + rand_distr::Distribution::sample(&normal, rng));
        store.insert(format!("{prefix}.{p}.w"), w)?;
        store.insert(format!("{prefix}.{p}.b"), Tensor2::zeros(1, dim))?;
    }
    Ok(())
}

/// Square two-layer MLP whose layers start at the identity plus noise.
pub fn init_mlp_identity(store: &mut ParamStore, prefix: &str, dim: usize, noise: f64, rng: &mut impl Rng) -> Result<()> {
    let normal = rand_distr::Normal::new(0.0, noise).map_err(|e| Error::Config(e.to_string()))?;
    for p in ["fc1", "fc2"] {
        let w = Tensor2::from_fn(dim, dim, |i, j| (i == j) as u8 as f64 + rand_distr::Distribution::sample(&normal, rng));
        store.insert(format!("{prefix}.{p}.w"), w)?;
        store.insert(format!("{prefix}.{p}.b"), Tensor2::zeros(1, dim))?;
    }
    Ok(())
}

pub fn init_mlp(
    store: &mut ParamStore,
    prefix: &str,
    dims: (usize, usize, usize),
    rng: &mut impl Rng,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.fc1"), dims.0, dims.1, rng)?;
    init_linear(store, &format!("{prefix}.fc2"), dims.1, dims.2, rng)
}

pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

/// Two-layer perceptron with GELU between the layers.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

/// Multi-head attention: projects `q_in`, `k_in`, `v_in`, attends, projects out.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    cfg: &AttentionConfig,
) -> Result<Var> {
    attention_nodes(g, store, prefix, q_in, k_in, v_in, cfg).map(|(out, _)| out)
}

/// Like [`attention`], also returning the raw attention node (see
/// [`Graph::attention_probs`]).
pub fn attention_nodes(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Var)> {
    for v in [q_in, k_in, v_in] {
        let cols = g.value(v).cols();
        if cols != cfg.model_dim {
            return Err(Error::dim("attention input", g.value(v).shape(), (0, cfg.model_dim)));
        }
    }
    let q = linear(g, store, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, store, &format!("{prefix}.k"), k_in)?;
    let v = linear(g, store, &format!("{prefix}.v"), v_in)?;
    let a = g.attention(q, k, v, cfg.num_heads, cfg.softmax_axis)?;
    Ok((linear(g, store, &format!("{prefix}.o"), a)?, a))
}

/// Multi-head cross-attention of queries `q` over key/value rows `kv`.
///
/// Parameters are read from `params` under `prefix.{q,k,v,o}.{w,b}`.
pub fn cross_attention(
    q: &Tensor2,
    kv: &Tensor2,
    cfg: &AttentionConfig,
    params: &ParamStore,
    prefix: &str,
) -> Result<Tensor2> {
    if q.cols() != cfg.model_dim || kv.cols() != cfg.model_dim {
        return Err(Error::dim("cross_attention", q.shape(), kv.shape()));
    }
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let kvv = g.constant(kv.clone());
    let out = attention(&mut g, params, prefix, qv, kvv, kvv, cfg)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_attention(dim: usize) -> ParamStore {
        let mut ps = ParamStore::new();
        for p in ["q", "k", "v", "o"] {
            ps.insert(format!("att.{p}.w"), Tensor2::from_fn(dim, dim, |i, j| (i == j) as u8 as f64))
                .unwrap();
            ps.insert(format!("att.{p}.b"), Tensor2::zeros(1, dim)).unwrap();
        }
        ps
    }

    #[test]
    fn config_validation() {
        assert!(AttentionConfig::new(64, 4, Axis::KeyDim).is_ok());
        assert!(AttentionConfig::new(6, 4, Axis::KeyDim).is_err());
        assert!(AttentionConfig::new(2, 4, Axis::KeyDim).is_err());
        assert!(AttentionConfig::new(4, 0, Axis::KeyDim).is_err());
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let ps = identity_attention(4);
        let cfg = AttentionConfig::new(4, 1, Axis::KeyDim).unwrap();
        let q = Tensor2::from_fn(3, 4, |i, j| (i as f64) * 0.7 - j as f64);
        let kv = Tensor2::row_vector(vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let out = cross_attention(&q, &kv, &cfg, &ps, "att").unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), kv.row(0));
        }
    }

    #[test]
    fn cross_attention_rejects_wrong_dim() {
        let ps = identity_attention(4);
        let cfg = AttentionConfig::new(4, 1, Axis::KeyDim).unwrap();
        let err = cross_attention(&Tensor2::zeros(2, 3), &Tensor2::zeros(1, 4), &cfg, &ps, "att");
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
