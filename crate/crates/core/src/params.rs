//! Named parameter store with per-parameter gradient buffers.
//!
//! Iteration order is deterministic (sorted by name), which fixes the order
//! of gradient clipping, optimizer updates and checkpoint layout.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Input(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape().to_vec());
        self.entries.insert(name, Param { value, grad });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: entry.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    /// Accumulate into the named gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if entry.grad.numel() != grad.len() {
            return Err(Error::InvalidShape {
                op: "accumulate_grad",
                msg: format!(
                    "gradient for `{name}` has {} entries, parameter has {}",
                    grad.len(),
                    entry.grad.numel()
                ),
            });
        }
        for (g, d) in entry.grad.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// L2 norm over all gradients, accumulated in name order.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for p in self.entries.values() {
            for g in p.grad.data() {
                sq += g * g;
            }
        }
        sq.sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in self.entries.values_mut() {
            for g in p.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|p| p.value.numel()).sum()
    }

    /// Overwrite every matrix-shaped (≥2-D) parameter with seeded normal
    /// noise, leaving vectors (norm gains/biases, ffn biases) at their
    /// initialization. Used by gradient checks and sensitivity probes, which
    /// need every linear path active at a healthy scale.
    pub fn randomize_matrices(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.entries.values_mut() {
            if p.value.shape().len() >= 2 {
                for v in p.value.data_mut() {
                    *v = normal(&mut rng) * std;
                }
            }
        }
    }
}

/// Standard normal via Box-Muller; kept local so initialization is stable
/// across dependency upgrades.
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Tensor filled with N(0, std²) noise.
pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| normal(rng) * std).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(vec![2, 2])).is_err());
    }

    #[test]
    fn iteration_sorted_by_name() {
        let mut s = ParamStore::new();
        s.insert("b", Tensor::zeros(vec![1])).unwrap();
        s.insert("a", Tensor::zeros(vec![1])).unwrap();
        s.insert("c", Tensor::zeros(vec![1])).unwrap();
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, vec!["a", "b", "c"]);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(vec![2])).unwrap();
        s.accumulate_grad("w", &[1.0, 2.0]).unwrap();
        s.accumulate_grad("w", &[0.5, 0.5]).unwrap();
        assert_eq!(s.get("w").unwrap().grad.data(), &[1.5, 2.5]);
        s.zero_grads();
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn normal_is_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            assert_eq!(normal(&mut a).to_bits(), normal(&mut b).to_bits());
        }
    }
}
