//! First-order optimizers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub trait Optimizer: Send {
    fn name(&self) -> &'static str;

    /// Applies one update from the accumulated gradients.
    fn step(&mut self, params: &mut ParamStore, lr: f64);

    /// Named state tensors for checkpointing.
    fn state(&self) -> Vec<(String, Tensor)>;

    fn load_state(&mut self, state: Vec<(String, Tensor)>) -> Result<()>;
}

fn slot<'a>(slots: &'a mut Vec<Tensor>, i: usize, shape: &[usize]) -> &'a mut Tensor {
    if slots.len() <= i {
        slots.resize_with(i + 1, || Tensor::zeros(&[0]));
    }
    if slots[i].shape() != shape {
        slots[i] = Tensor::zeros(shape);
    }
    &mut slots[i]
}

fn effective_grad(g: f64, w: f64, decay: f64) -> f64 {
    g + decay * w
}

/// Heavy-ball SGD: `v ← μ v + g`, `w ← w − lr v`.
#[derive(Debug, Default)]
pub struct Sgd {
    pub settings: OptimizerSettings,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self {
            settings,
            velocity: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn step(&mut self, params: &mut ParamStore, lr: f64) {
        let s = self.settings;
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let v = slot(&mut self.velocity, i, p.value.shape());
            for ((w, &g), vel) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
                *vel = s.momentum * *vel + effective_grad(g, *w, s.weight_decay);
                *w -= lr * *vel;
            }
        }
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("velocity.{i}"), v.clone()))
            .collect()
    }

    fn load_state(&mut self, state: Vec<(String, Tensor)>) -> Result<()> {
        self.velocity = indexed(state, "velocity")?;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Default)]
pub struct Adam {
    pub settings: OptimizerSettings,
    steps: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(settings: OptimizerSettings) -> Self {
        Self {
            settings,
            ..Self::default()
        }
    }
}

impl Optimizer for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn step(&mut self, params: &mut ParamStore, lr: f64) {
        let s = self.settings;
        self.steps += 1;
        let c1 = 1.0 - s.beta1.powi(self.steps as i32);
        let c2 = 1.0 - s.beta2.powi(self.steps as i32);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let shape = p.value.shape().to_vec();
            slot(&mut self.m, i, &shape);
            slot(&mut self.v, i, &shape);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = effective_grad(g, *w, s.weight_decay);
                *mi = s.beta1 * *mi + (1.0 - s.beta1) * g;
                *vi = s.beta2 * *vi + (1.0 - s.beta2) * g * g;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + s.eps);
            }
        }
    }

    fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("steps".to_string(), Tensor::scalar(self.steps as f64))];
        out.extend(self.m.iter().enumerate().map(|(i, t)| (format!("m.{i}"), t.clone())));
        out.extend(self.v.iter().enumerate().map(|(i, t)| (format!("v.{i}"), t.clone())));
        out
    }

    fn load_state(&mut self, state: Vec<(String, Tensor)>) -> Result<()> {
        let (steps, rest): (Vec<_>, Vec<_>) = state.into_iter().partition(|(n, _)| n == "steps");
        self.steps = steps.first().map_or(0, |(_, t)| t.item() as u64);
        let (m, v): (Vec<_>, Vec<_>) = rest.into_iter().partition(|(n, _)| n.starts_with("m."));
        self.m = indexed(m, "m")?;
        self.v = indexed(v, "v")?;
        Ok(())
    }
}

fn indexed(state: Vec<(String, Tensor)>, prefix: &str) -> Result<Vec<Tensor>> {
    let mut out: Vec<Option<Tensor>> = vec![None; state.len()];
    for (name, t) in state {
        let i: usize = name
            .strip_prefix(prefix)
            .and_then(|r| r.strip_prefix('.'))
            .and_then(|r| r.parse().ok())
            .filter(|&i| i < out.len())
            .ok_or_else(|| Error::Corrupt(format!("unexpected optimizer state `{name}`")))?;
        out[i] = Some(t);
    }
    out.into_iter()
        .map(|t| t.ok_or_else(|| Error::Corrupt(format!("missing {prefix} optimizer state"))))
        .collect()
}

pub fn optimizers() -> Registry<dyn Optimizer, OptimizerSettings> {
    Registry::<dyn Optimizer, OptimizerSettings>::new("optimizer")
        .with("sgd", |s| Box::new(Sgd::new(*s)))
        .with("adam", |s| Box::new(Adam::new(*s)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_grad(g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::ones(&[2]));
        s.get_mut(id).grad = Tensor::full(&[2], g);
        s
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut s = store_with_grad(1.0);
        let mut o = Sgd::new(OptimizerSettings::default());
        o.step(&mut s, 0.1);
        assert!((s.params()[0].value.data()[0] - 0.9).abs() < 1e-15);
        o.step(&mut s, 0.1);
        // v = 0.9·1 + 1 = 1.9
        assert!((s.params()[0].value.data()[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = store_with_grad(3.0);
        let mut o = Adam::new(OptimizerSettings::default());
        o.step(&mut s, 0.01);
        assert!((s.params()[0].value.data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        for name in ["sgd", "adam"] {
            let mut s = store_with_grad(2.0);
            let mut o = optimizers().create(name, &OptimizerSettings::default()).unwrap();
            o.step(&mut s, 0.0);
            assert_eq!(s.params()[0].value.data(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn state_round_trips() {
        for name in ["sgd", "adam"] {
            let mut s = store_with_grad(2.0);
            let mut a = optimizers().create(name, &OptimizerSettings::default()).unwrap();
            a.step(&mut s, 0.1);
            let mut b = optimizers().create(name, &OptimizerSettings::default()).unwrap();
            b.load_state(a.state()).unwrap();
            let mut s2 = s.clone();
            a.step(&mut s, 0.1);
            b.step(&mut s2, 0.1);
            assert_eq!(s, s2);
        }
    }
}
