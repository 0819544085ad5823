//! First-order optimizers over selected parameter tensors and slot vectors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::{DenoiserParams, Grads};
use super::vocab::SlotValues;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum Key {
    Tensor(usize),
    Slot(String),
}

/// The entries an optimizer may touch, each with its own learning rate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trainable {
    pub tensors: Vec<(usize, f64)>,
    pub slots: Vec<(String, f64)>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: HashMap<Key, Vec<f64>>,
    second: HashMap<Key, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, steps: 0, first: HashMap::new(), second: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn update(&mut self, key: Key, value: &mut [f64], grad: &[f64], lr: f64) {
        let t = self.steps as i32;
        match self.kind {
            OptimizerKind::Sgd { momentum } if momentum == 0.0 => {
                value.iter_mut().zip(grad).for_each(|(v, g)| *v -= lr * g);
            }
            OptimizerKind::Sgd { momentum } => {
                let m = self.first.entry(key).or_insert_with(|| vec![0.0; value.len()]);
                for ((v, g), m) in value.iter_mut().zip(grad).zip(m.iter_mut()) {
                    *m = momentum * *m + g;
                    *v -= lr * *m;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let m = self.first.entry(key.clone()).or_insert_with(|| vec![0.0; value.len()]);
                let s = self.second.entry(key).or_insert_with(|| vec![0.0; value.len()]);
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for (((v, g), m), s) in value.iter_mut().zip(grad).zip(m.iter_mut()).zip(s.iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *s = beta2 * *s + (1.0 - beta2) * g * g;
                    *v -= lr * (*m / c1) / ((*s / c2).sqrt() + eps);
                }
            }
        }
    }

    /// Applies one step to exactly the entries listed in `trainable`.
    ///
    /// Every listed entry must have a gradient; nothing else is read or written.
    pub fn step(&mut self, params: &mut DenoiserParams, slots: &mut SlotValues, grads: &Grads, trainable: &Trainable) -> Result<()> {
        self.steps += 1;
        self.apply_tensors(params, grads, trainable)?;
        self.apply_slots(slots, grads, trainable)
    }

    /// Like [`Optimizer::step`] for a trainable set without tensors.
    pub fn step_slots(&mut self, slots: &mut SlotValues, grads: &Grads, trainable: &Trainable) -> Result<()> {
        if !trainable.tensors.is_empty() {
            return Err(Error::Partition("slot-only step given tensors".into()));
        }
        self.steps += 1;
        self.apply_slots(slots, grads, trainable)
    }

    fn apply_tensors(&mut self, params: &mut DenoiserParams, grads: &Grads, trainable: &Trainable) -> Result<()> {
        for &(i, lr) in &trainable.tensors {
            let g = grads
                .params
                .get(i)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::Partition(format!("no gradient for tensor {}", params.tensors[i].name)))?;
            let g = g.as_standard_layout();
            let value = &mut params.tensors[i].value;
            let slice = value.as_slice_mut().expect("parameters are contiguous");
            self.update(Key::Tensor(i), slice, g.as_slice().expect("standard layout"), lr);
        }
        Ok(())
    }

    fn apply_slots(&mut self, slots: &mut SlotValues, grads: &Grads, trainable: &Trainable) -> Result<()> {
        for (name, lr) in &trainable.slots {
            let g = grads.slots.get(name).ok_or_else(|| Error::Partition(format!("no gradient for slot {name}")))?;
            let v = slots.get_mut(name).ok_or_else(|| Error::UnregisteredSlot(name.clone()))?;
            self.update(Key::Slot(name.clone()), v.as_slice_mut().expect("contiguous"), g.as_slice().expect("contiguous"), *lr);
        }
        Ok(())
    }
}

/// Global L2 norm over the trainable entries of `grads`.
pub fn grad_norm(grads: &Grads, trainable: &Trainable) -> f64 {
    let mut s = 0.0;
    for (i, _) in &trainable.tensors {
        if let Some(g) = grads.params.get(*i).and_then(Option::as_ref) {
            s += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    for (n, _) in &trainable.slots {
        if let Some(g) = grads.slots.get(n) {
            s += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    s.sqrt()
}

/// Rescales `grads` so their trainable norm is at most `max_norm`.
pub fn clip_grads(grads: &mut Grads, trainable: &Trainable, max_norm: f64) -> f64 {
    let n = grad_norm(grads, trainable);
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn quad(kind: OptimizerKind, lr: f64, iters: usize) -> f64 {
        let cfg = crate::diffusion::params::DenoiserConfig { width: 4, inner_width: 4, attn_dim: 2, heads: 1, text_dim: 2, seq_len: 2, ..Default::default() };
        let mut p = DenoiserParams::init(cfg, 3, 0).unwrap();
        let mut slots = SlotValues::new();
        slots.insert("<v>".into(), Array1::from(vec![3.0, -2.0]));
        let mut opt = Optimizer::new(kind);
        let tr = Trainable { tensors: vec![], slots: vec![("<v>".into(), lr)] };
        for _ in 0..iters {
            let mut g = Grads::empty(p.tensors.len());
            g.slots.insert("<v>".into(), slots["<v>"].mapv(|v| 2.0 * v));
            opt.step(&mut p, &mut slots, &g, &tr).unwrap();
        }
        slots["<v>"].iter().map(|v| v.abs()).sum()
    }

    #[test]
    fn optimizers_minimize_a_quadratic() {
        assert!(quad(OptimizerKind::sgd(), 0.1, 200) < 1e-6);
        assert!(quad(OptimizerKind::Sgd { momentum: 0.5 }, 0.05, 300) < 1e-6);
        assert!(quad(OptimizerKind::adam(), 0.05, 2000) < 1e-3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let cfg = crate::diffusion::params::DenoiserConfig { width: 4, inner_width: 4, attn_dim: 2, heads: 1, text_dim: 2, seq_len: 2, ..Default::default() };
        let mut p = DenoiserParams::init(cfg, 3, 0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::sgd());
        let tr = Trainable { tensors: vec![(0, 0.1)], slots: vec![] };
        let g = Grads::empty(p.tensors.len());
        assert!(opt.step(&mut p, &mut SlotValues::new(), &g, &tr).is_err());
    }
}
