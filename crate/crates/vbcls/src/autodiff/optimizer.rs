//! Persistent parameter storage and SGD with momentum, weight decay, and
//! per-group learning-rate multipliers.
//!
//! Update rule per coordinate:
//!   v <- momentum * v + g + weight_decay * theta
//!   theta <- theta - lr * lr_scale * multiplier[group] * v
//!
//! `lr_scale` is a knob for schedules (the training loop drops it late in
//! the run); group multipliers let some networks train faster than others.

use crate::error::{Error, Result};

pub type ParamId = usize;

/// One named parameter array. `grad` is populated by `Tape::backward`.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// Ordered collection of parameters; ids are insertion indices.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    items: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { items: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: usize,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    ) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data length mismatch");
        self.items.push(Param {
            name: name.into(),
            group,
            rows,
            cols,
            data,
            grad: None,
        });
        self.items.len() - 1
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.items[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.items[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.iter()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.items {
            p.grad = None;
        }
    }

    pub(crate) fn set_grad(&mut self, id: ParamId, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.items[id].data.len());
        self.items[id].grad = Some(grad);
    }
}

/// Momentum-SGD state bound to one parameter set layout.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    group_multipliers: Vec<f64>,
    lr_scale: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(
        params: &ParamSet,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        group_multipliers: Vec<f64>,
    ) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate {lr} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(Error::Config(format!(
                "weight decay {weight_decay} must be nonnegative"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            group_multipliers,
            lr_scale: 1.0,
            velocity: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        })
    }

    /// Schedule hook: the effective rate is lr * lr_scale * multiplier.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    fn multiplier(&self, group: usize) -> f64 {
        self.group_multipliers.get(group).copied().unwrap_or(1.0)
    }

    /// One update over every parameter.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_groups(params, |_| true)
    }

    /// One update restricted to groups accepted by `active`. Velocity of
    /// inactive groups is left untouched.
    pub fn step_groups(
        &mut self,
        params: &mut ParamSet,
        active: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::OptimizerState(format!(
                "state built for {} parameters, set has {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for id in 0..params.len() {
            let p = params.get_mut(id);
            if !active(p.group) {
                continue;
            }
            let rate = self.lr * self.lr_scale * self.multiplier(p.group);
            let v = &mut self.velocity[id];
            if v.len() != p.data.len() {
                return Err(Error::OptimizerState(format!(
                    "velocity length {} does not match parameter {} ({} entries)",
                    v.len(),
                    p.name,
                    p.data.len()
                )));
            }
            let Some(grad) = p.grad.as_ref() else {
                return Err(Error::OptimizerState(format!(
                    "parameter {} has no gradient; run backward first",
                    p.name
                )));
            };
            for j in 0..p.data.len() {
                v[j] = self.momentum * v[j] + grad[j] + self.weight_decay * p.data[j];
                p.data[j] -= rate * v[j];
            }
        }
        Ok(())
    }
}
