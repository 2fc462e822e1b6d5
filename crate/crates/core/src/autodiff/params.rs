use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// One trainable array with its ADAM moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
}

impl ParamEntry {
    pub fn new(value: Tensor) -> Self {
        let shape = value.shape();
        ParamEntry {
            value,
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
        }
    }
}

/// Named trainable arrays plus the optimizer step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), ParamEntry::new(value));
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Merges another set into this one; names must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (name, entry) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
            }
            self.entries.insert(name, entry);
        }
        Ok(())
    }

    /// Inserts every entry of `other`, replacing entries of the same name.
    pub fn overwrite(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }
}

/// He-uniform initialization: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform(rng: &mut impl Rng, shape: [usize; 3], fan_in: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in.max(1) as f64);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

/// Gradients keyed like a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            grads: params
                .iter()
                .map(|(n, e)| (n.clone(), Tensor::zeros(e.value.shape())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.grads.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            if let Some(slot) = self.grads.get_mut(name) {
                slot.add_assign(g);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads.values().fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(|g| g.data().iter().all(|v| v.is_finite()))
    }

    /// Checks that names and shapes match `params` exactly.
    pub fn check_matches(&self, params: &ParamSet) -> Result<()> {
        if self.grads.len() != params.len() {
            return Err(shape_err(params.len(), self.grads.len()));
        }
        for (name, entry) in params.iter() {
            let g = self.grads.get(name).ok_or_else(|| Error::UnknownParam(name.clone()))?;
            g.check_shape(entry.value.shape())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid ADAM settings {self:?}")));
        }
        Ok(())
    }
}

/// One ADAM update with bias correction; increments the step counter.
pub fn adam_step(params: &mut ParamSet, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    grads.check_matches(params)?;
    params.step += 1;
    let t = params.step as f64;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t);
    for (name, entry) in params.entries.iter_mut() {
        let g = grads.get(name).expect("checked above");
        let ParamEntry {
            value,
            first_moment,
            second_moment,
        } = entry;
        for (((p, m), v), &gv) in value
            .data_mut()
            .iter_mut()
            .zip(first_moment.data_mut())
            .zip(second_moment.data_mut())
            .zip(g.data())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn one_param(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![v, -v]));
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = one_param(1.5);
        let before = p.get("w").unwrap().clone();
        let g = Gradients::zeros_like(&p);
        for _ in 0..10 {
            adam_step(&mut p, &g, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("w").unwrap(), &before);
        assert_eq!(p.step(), 10);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        // With constant g the bias-corrected ratio m_hat / sqrt(v_hat) is
        // exactly sign(g) at every step: m_t = g (1 - b1^t), v_t = g^2 (1 - b2^t).
        let cfg = AdamConfig::default();
        let mut p = one_param(0.0);
        let mut g = Gradients::zeros_like(&p);
        g.get_mut("w").unwrap().data_mut().copy_from_slice(&[0.37, -4.0]);
        let mut last = p.get("w").unwrap().clone();
        for step in 1..=200 {
            adam_step(&mut p, &g, &cfg).unwrap();
            let now = p.get("w").unwrap().clone();
            let d0 = now.data()[0] - last.data()[0];
            let d1 = now.data()[1] - last.data()[1];
            let expect0 = -cfg.lr * 0.37 / (0.37 + cfg.eps);
            let expect1 = cfg.lr * 4.0 / (4.0 + cfg.eps);
            assert!((d0 - expect0).abs() < 1e-12, "step {step}: {d0}");
            assert!((d1 - expect1).abs() < 1e-12, "step {step}: {d1}");
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = one_param(1.0);
        let mut q = ParamSet::new();
        q.insert("w", Tensor::vector(vec![1.0]));
        let g = Gradients::zeros_like(&q);
        assert!(adam_step(&mut p, &g, &AdamConfig::default()).is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
