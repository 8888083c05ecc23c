//! Named parameter storage with gradient and Adam moment buffers.

use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let (r, c) = value.shape();
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of Adam steps taken.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id.0].grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.grad.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm.is_finite() && norm > max_norm {
            let s = (max_norm / norm) as f32;
            for p in &mut self.params {
                p.grad.scale_in_place(s);
            }
        }
        norm
    }

    /// One Adam update with the default betas, then clears the gradients.
    pub fn adam_step(&mut self, lr: f64) -> Result<()> {
        self.adam_step_with(lr, AdamConfig::default())
    }

    pub fn adam_step_with(&mut self, lr: f64, cfg: AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let n = p.value.len();
            let (value, grad, m, v) = (
                p.value.data_mut(),
                p.grad.data_mut(),
                p.m.data_mut(),
                p.v.data_mut(),
            );
            for i in 0..n {
                let g = grad[i] as f64;
                let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
                let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                value[i] = (value[i] as f64 - update) as f32;
                grad[i] = 0.0;
            }
        }
        Ok(())
    }

    /// `(name, value)` pairs in insertion order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    /// Overwrites values from named tensors; names and shapes must match exactly.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            let dst = &mut self.params[id.0].value;
            if dst.len() != t.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has {} values, expected {}",
                    t.len(),
                    dst.len()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

/// Learning rate: starts at 1e-4, multiplied by 0.75 every 15 epochs, floored at 1e-6.
pub fn lr_schedule(epoch: u32) -> f64 {
    LrSchedule::default().at(epoch)
}

/// Step-decay schedule `max(base · factor^⌊epoch/interval⌋, floor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub interval: u32,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            factor: 0.75,
            interval: 15,
            floor: 1e-6,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: u32) -> f64 {
        let k = (epoch / self.interval.max(1)) as i32;
        (self.base * self.factor.powi(k)).max(self.floor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f32]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert("w", Tensor::from_vec(1, values.len(), values.to_vec()))
            .unwrap();
        (s, id)
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(1, 1)).unwrap();
        assert!(s.insert("a", Tensor::zeros(2, 1)).is_err());
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut s, id) = store_with(&[1.0, -2.0, 3.5]);
        s.adam_step(1e-2).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
        let (mut s, id) = store_with(&[0.0, 0.0]);
        s.accumulate_grad(id, &Tensor::from_vec(1, 2, vec![0.37, -4.0]));
        s.adam_step(1e-3).unwrap();
        let v = s.value(id).data();
        assert!((v[0] + 1e-3).abs() < 1e-9, "{v:?}");
        assert!((v[1] - 1e-3).abs() < 1e-9, "{v:?}");
        assert_eq!(s.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let (mut s, id) = store_with(&[0.5]);
        for _ in 0..50 {
            s.accumulate_grad(id, &Tensor::scalar(2.0));
            s.adam_step(1e-2).unwrap();
        }
        assert!(s.value(id).item() < 0.5 - 0.4);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = store_with(&[0.0]);
        s.accumulate_grad(id, &Tensor::scalar(f32::NAN));
        match s.adam_step(1e-3) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let (mut s, id) = store_with(&[0.1, 0.2, 0.3]);
            for k in 0..10 {
                let g = Tensor::from_vec(1, 3, vec![k as f32, -0.5, 0.25 * k as f32]);
                s.accumulate_grad(id, &g);
                s.adam_step(1e-3).unwrap();
            }
            s.value(id).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let (mut s, id) = store_with(&[0.0, 0.0]);
        s.accumulate_grad(id, &Tensor::from_vec(1, 2, vec![30.0, 40.0]));
        assert_eq!(s.clip_grad_norm(10.0), 50.0);
        assert!((s.grad_norm() - 10.0).abs() < 1e-5);
    }

    #[test]
    fn schedule_values() {
        assert_eq!(lr_schedule(0), 1e-4);
        assert_eq!(lr_schedule(14), 1e-4);
        assert!((lr_schedule(15) - 7.5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(10_000), 1e-6);
    }
}
