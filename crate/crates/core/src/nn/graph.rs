//! Forward recording and reverse-mode gradients over a fixed set of ops.
//!
//! A [`Graph`] is built once per forward pass. Each method evaluates its kernel
//! immediately and records enough state for [`Graph::backward`] to apply the
//! matching analytic gradient. Only the ops the trackers and losses need exist.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{self, Axis, LayerNormCache};
use super::{ParamStore, Tensor2};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: u32,
}

enum Op {
    Leaf,
    Param,
    Linear(Var, Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddColBias(Var, Var),
    LayerNorm(Var, Var, Var, LayerNormCache),
    Gelu(Var),
    Softmax(Var, Axis),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        axis: Axis,
        probs: Vec<Tensor2>,
    },
    MaskPool(Var, Var),
    Concat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Scale(Var, f64),
    Sum(Var),
    /// Scalar loss with its input gradient precomputed for unit upstream gradient.
    Loss(Var, Tensor2),
}

struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, needs_grad });
        Var { graph: self.id, idx }
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.graph, self.id, "var from another graph");
        &self.nodes[v.idx as usize]
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.graph != self.id || v.idx as usize >= self.nodes.len() {
            return Err(Error::Usage(format!("value {v:?} was not recorded in this graph")));
        }
        Ok(())
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.node(v).value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that gradients are reported for.
    pub fn input(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input treated as a constant (no gradient flows into it).
    pub fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records (once per graph) the named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(y, Op::Linear(x, w, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::MatMulNt(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), ng))
    }

    /// Adds the n×1 column `b` to every column of the n×P matrix `x`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.cols() != 1 || bv.rows() != xv.rows() {
            return Err(Error::dim("add_col_bias", xv.shape(), bv.shape()));
        }
        let y = Tensor2::from_fn(xv.rows(), xv.cols(), |i, j| xv.get(i, j) + bv.get(i, 0));
        let ng = self.ng(&[x, b]);
        Ok(self.push(y, Op::AddColBias(x, b), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, cache) = kernels::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(y, Op::LayerNorm(x, gamma, beta, cache), ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let y = kernels::gelu(self.value(x));
        let ng = self.ng(&[x]);
        self.push(y, Op::Gelu(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let y = kernels::softmax(self.value(x), axis);
        let ng = self.ng(&[x]);
        self.push(y, Op::Softmax(x, axis), ng)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, axis: Axis) -> Result<Var> {
        let (y, probs) =
            kernels::attention_core(self.value(q), self.value(k), self.value(v), heads, axis)?;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(y, Op::Attention { q, k, v, axis, probs }, ng))
    }

    /// Attention probability matrices of a recorded attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor2]> {
        match &self.node(v).op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn mask_pool(&mut self, features: Var, masks: Var) -> Result<Var> {
        let y = kernels::mask_pool(self.value(features), self.value(masks))?;
        let ng = self.ng(&[features, masks]);
        Ok(self.push(y, Op::MaskPool(features, masks), ng))
    }

    /// Row-wise concatenation; all parts must share the column count `cols`.
    pub fn concat(&mut self, parts: &[Var], cols: usize) -> Result<Var> {
        let refs: Vec<&Tensor2> = parts.iter().map(|p| self.value(*p)).collect();
        let y = Tensor2::vstack(&refs, cols)?;
        let ng = self.ng(parts);
        Ok(self.push(y, Op::Concat(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::dim("select_rows", xv.shape(), (bad, 0)));
        }
        let y = xv.select_rows(idx);
        let ng = self.ng(&[x]);
        Ok(self.push(y, Op::SelectRows(x, idx.to_vec()), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let y = self.value(x).scale(s);
        let ng = self.ng(&[x]);
        self.push(y, Op::Scale(x, s), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor2::from_raw(1, 1, vec![self.value(x).sum()]);
        let ng = self.ng(&[x]);
        self.push(y, Op::Sum(x), ng)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (l, g) = kernels::cross_entropy(self.value(logits), targets, weights)?;
        Ok(self.push_loss(logits, l, g))
    }

    pub fn dice_loss(&mut self, logits: Var, targets: &Tensor2) -> Result<Var> {
        let (l, g) = kernels::dice_loss(self.value(logits), targets)?;
        Ok(self.push_loss(logits, l, g))
    }

    pub fn bce_loss(&mut self, logits: Var, targets: &Tensor2) -> Result<Var> {
        let (l, g) = kernels::bce_loss(self.value(logits), targets)?;
        Ok(self.push_loss(logits, l, g))
    }

    fn push_loss(&mut self, x: Var, l: f64, g: Tensor2) -> Var {
        let ng = self.ng(&[x]);
        self.push(Tensor2::from_raw(1, 1, vec![l]), Op::Loss(x, g), ng)
    }

    /// Reverse pass from a 1×1 output with unit upstream gradient.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check(out)?;
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(Error::Usage(format!("backward() needs a scalar output, got {shape:?}")));
        }
        self.backward_with(out, Tensor2::filled(1, 1, 1.0))
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, out: Var, out_grad: Tensor2) -> Result<Gradients> {
        self.check(out)?;
        if out_grad.shape() != self.value(out).shape() {
            return Err(Error::dim("backward_with", self.value(out).shape(), out_grad.shape()));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[out.idx as usize] = Some(out_grad);
        for i in (0..=out.idx as usize).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let mut acc = |v: Var, d: Tensor2| {
            if !self.node(v).needs_grad {
                return;
            }
            let slot = &mut grads[v.idx as usize];
            match slot {
                Some(existing) => existing.add_assign(&d),
                None => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear(x, w, _b) => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                acc(*x, dx);
                acc(*w, dw);
                acc(*_b, db);
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ  →  da = g b,  db = gᵀ a
                acc(*a, g.matmul(self.value(*b)).expect("matmul_nt da"));
                acc(*b, g.matmul_tn(self.value(*a)).expect("matmul_nt db"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddColBias(x, b) => {
                acc(*x, g.clone());
                let db = Tensor2::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum());
                acc(*b, db);
            }
            Op::LayerNorm(x, gamma, beta, cache) => {
                let (dx, dg, db) = kernels::layer_norm_backward(cache, self.value(*gamma), g);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Gelu(x) => acc(*x, kernels::gelu_backward(self.value(*x), g)),
            Op::Softmax(x, axis) => {
                acc(*x, kernels::softmax_backward(&node.value, g, *axis));
            }
            Op::Attention { q, k, v, axis, probs } => {
                let (dq, dk, dv) = kernels::attention_core_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    *axis,
                    g,
                );
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::MaskPool(f, m) => {
                let (df, dm) =
                    kernels::mask_pool_backward(self.value(*f), self.value(*m), &node.value, g);
                acc(*f, df);
                acc(*m, dm);
            }
            Op::Concat(parts) => {
                let mut row = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    let idx: Vec<usize> = (row..row + r).collect();
                    acc(*p, g.select_rows(&idx));
                    row += r;
                }
            }
            Op::SelectRows(x, idx) => {
                let xv = self.value(*x);
                let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (d, s) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += s;
                    }
                }
                acc(*x, dx);
            }
            Op::Scale(x, s) => acc(*x, g.scale(*s)),
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor2::filled(xv.rows(), xv.cols(), g.get(0, 0)));
            }
            Op::Loss(x, dl) => acc(*x, dl.scale(g.get(0, 0))),
        }
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient with respect to `v`; `Ok(None)` when no gradient reached it.
    pub fn get(&self, v: Var) -> Result<Option<&Tensor2>> {
        if v.graph != self.graph || v.idx as usize >= self.grads.len() {
            return Err(Error::Usage(format!("no gradient recorded for {v:?}")));
        }
        Ok(self.grads[v.idx as usize].as_ref())
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, graph: &Graph, store: &mut ParamStore) -> Result<()> {
        if graph.id != self.graph {
            return Err(Error::Usage("gradients belong to a different graph".into()));
        }
        let mut named: Vec<(&String, &Var)> = graph.params.iter().collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        for (name, v) in named {
            if let Some(g) = &self.grads[v.idx as usize] {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_chain_passes_output_grad() {
        let mut g = Graph::new();
        let x = g.input(Tensor2::from_fn(2, 3, |i, j| (i + j) as f64));
        let seed = Tensor2::from_fn(2, 3, |i, j| (i * 3 + j) as f64 - 2.0);
        let grads = g.backward_with(x, seed.clone()).unwrap();
        assert_eq!(grads.get(x).unwrap().unwrap(), &seed);
    }

    #[test]
    fn sum_of_linear_gives_ones_bias_grad() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor2::from_fn(3, 2, |i, j| (i as f64) - (j as f64))).unwrap();
        store.insert("b", Tensor2::zeros(1, 2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor2::from_fn(1, 3, |_, j| j as f64 + 1.0));
        let w = g.param(&store, "w").unwrap();
        let b = g.param(&store, "b").unwrap();
        let y = g.linear(x, w, b).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap().unwrap().data(), &[1.0, 1.0]);
        grads.accumulate_into(&g, &mut store).unwrap();
        assert_eq!(store.grad("b").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn foreign_var_is_usage_error() {
        let mut g1 = Graph::new();
        let x1 = g1.input(Tensor2::zeros(1, 1));
        let mut g2 = Graph::new();
        let y2 = g2.input(Tensor2::zeros(1, 1));
        let grads = g2.backward(y2).unwrap();
        assert!(matches!(grads.get(x1), Err(Error::Usage(_))));
        assert!(matches!(g2.backward(x1), Err(Error::Usage(_))));
    }

    #[test]
    fn constant_inputs_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor2::filled(1, 2, 1.0));
        let x = g.input(Tensor2::filled(1, 2, 2.0));
        let y = g.add(c, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(c).unwrap().is_none());
        assert_eq!(grads.get(x).unwrap().unwrap().data(), &[1.0, 1.0]);
    }
}
