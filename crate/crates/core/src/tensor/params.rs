use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// Adam hyperparameters. The learning-rate default is `1e-4`; the moment
/// decay rates and epsilon are the usual `0.9 / 0.999 / 1e-8`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    has_grad: bool,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named trainable tensors with their gradients and Adam state.
///
/// Iteration order is insertion order, which fixes the serialized layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter '{name}'")));
        }
        if name.len() > u16::MAX as usize {
            return Err(Error::Contract("parameter name too long".into()));
        }
        let n = value.len();
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value: value.with_grad(),
            grad: vec![0.0; n],
            has_grad: false,
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub(crate) fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.entries[i].value)
    }

    pub fn grad(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name)
            .filter(|&i| self.entries[i].has_grad)
            .map(|i| self.entries[i].grad.as_slice())
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        let e = &mut self.entries[idx];
        if g.len() != e.grad.len() {
            return dim_err(format!(
                "gradient for '{}' has {} entries, expected {}",
                e.name,
                g.len(),
                e.grad.len()
            ));
        }
        for (a, b) in e.grad.iter_mut().zip(g) {
            *a += b;
        }
        e.has_grad = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
            e.has_grad = false;
        }
    }

    /// Copies values (not gradients or optimizer state) from `other`, which
    /// must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return dim_err("copy_values_from: parameter sets differ");
        }
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return dim_err(format!("copy_values_from: '{}' does not match", a.name));
            }
            a.value.data_mut().copy_from_slice(b.value.data());
        }
        Ok(())
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| !e.has_grad) {
            return Err(Error::Contract(format!(
                "adam_step: parameter '{}' has no gradient",
                e.name
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let data = e.value.data_mut();
            for i in 0..data.len() {
                let g = e.grad[i];
                e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g;
                e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g * g;
                let mhat = e.m[i] / bc1;
                let vhat = e.v[i] / bc2;
                data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Glorot/Xavier uniform initialization for a `(fan_in, fan_out)` matrix.
pub fn xavier_init<R: rand::Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    if shape.len() != 2 {
        return dim_err(format!("xavier_init needs a 2-D shape, got {shape:?}"));
    }
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn store_with(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::row(vals.to_vec())).unwrap();
        s
    }

    #[test]
    fn xavier_bounds_and_determinism() {
        let t = xavier_init(&[4, 4], &mut seeded(1)).unwrap();
        let bound = (6.0f64 / 8.0).sqrt();
        assert!((bound - 0.866).abs() < 1e-3);
        assert!(t.data().iter().all(|x| x.abs() <= bound));
        assert_eq!(t, xavier_init(&[4, 4], &mut seeded(1)).unwrap());
        assert!(xavier_init(&[4], &mut seeded(1)).is_err());
    }

    #[test]
    fn xavier_variance_matches_moment() {
        // 10^5 draws; uniform(-b, b) has variance b^2/3 = 2/(fan_in + fan_out)
        let t = xavier_init(&[200, 500], &mut seeded(7)).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / 700.0;
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[1.0, -2.0]);
        s.accumulate_grad(0, &[0.0, 0.0]).unwrap();
        s.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(&[1.0, -2.0, 0.5]);
        s.accumulate_grad(0, &[3.0, -0.01, 100.0]).unwrap();
        let cfg = AdamConfig::default();
        s.adam_step(&cfg).unwrap();
        let after = s.get("p").unwrap().data();
        let delta: Vec<f64> = after.iter().zip([1.0, -2.0, 0.5]).map(|(a, b)| a - b).collect();
        assert!((delta[0] + cfg.lr).abs() < 1e-9);
        assert!((delta[1] - cfg.lr).abs() < 1e-9);
        assert!((delta[2] + cfg.lr).abs() < 1e-9);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut s = store_with(&[1.0]);
        assert!(matches!(
            s.adam_step(&AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = [3.0, -1.5, 0.25, 7.0];
        let mut s = store_with(&[0.0; 4]);
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        for _ in 0..5000 {
            s.zero_grad();
            let g: Vec<f64> = s
                .get("p")
                .unwrap()
                .data()
                .iter()
                .zip(target)
                .map(|(p, t)| p - t)
                .collect();
            s.accumulate_grad(0, &g).unwrap();
            s.adam_step(&cfg).unwrap();
        }
        for (p, t) in s.get("p").unwrap().data().iter().zip(target) {
            assert!((p - t).abs() < 1e-3, "{p} vs {t}");
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(&[1.0]);
        assert!(s.insert("p", Tensor::scalar(0.0)).is_err());
    }
}
