//! Named parameters with paired gradient buffers.

use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor2;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor2,
    pub grad: Tensor2,
}

/// Ordered by name so iteration, serialization and optimizer updates are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor2::zeros(value.rows(), value.cols());
        self.params.insert(name, Param { value, grad });
        Ok(())
    }

    /// Xavier-uniform initialized weight matrix.
    pub fn insert_xavier(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let t = Tensor2::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.insert(name, t)
    }

    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        use rand_distr::{Distribution, StandardNormal};
        let t = Tensor2::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.insert(name, t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor2> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor2> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor2> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, g: &Tensor2) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))?;
        if p.grad.shape() != g.shape() {
            return Err(Error::dim("accumulate_grad", p.grad.shape(), g.shape()));
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.data().len()).sum()
    }

    /// Copies every parameter of `other` whose name and shape match.
    pub fn transplant_from(&mut self, other: &ParamStore, prefix: &str) -> usize {
        let mut n = 0;
        for (name, p) in self.params.iter_mut() {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(src) = other.params.get(name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    n += 1;
                }
            }
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_grads_match_shape() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor2::zeros(2, 3)).unwrap();
        assert!(ps.insert("w", Tensor2::zeros(1, 1)).is_err());
        assert_eq!(ps.grad("w").unwrap().shape(), (2, 3));
        assert!(ps.accumulate_grad("w", &Tensor2::zeros(3, 2)).is_err());
        assert!(ps.get("missing").is_err());
    }
}
