use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamKind, QuantizedModel};
use crate::quant::STEP_FLOOR;
use crate::tensor::Tensor;

/// `lr0 · ½(1 + cos(π t / T))`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Argument(format!("step {t} of {total}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * t as f64 / total as f64).cos()))
}

/// Multiply by 0.1 every `max(1, round(2·epochs/9))` epochs.
pub fn step_lr(epoch: usize, epochs: usize, lr0: f64) -> f64 {
    let period = ((2 * epochs) as f64 / 9.0).round().max(1.0) as usize;
    lr0 * 0.1f64.powi((epoch / period) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
    Step,
}

impl Schedule {
    /// Learning rate for global step `t` of `total`, inside `epoch` of
    /// `epochs`.
    pub fn lr(self, lr0: f64, t: usize, total: usize, epoch: usize, epochs: usize) -> Result<f64> {
        match self {
            Schedule::Cosine => cosine_lr(t, total, lr0),
            Schedule::Step => Ok(step_lr(epoch, epochs, lr0)),
        }
    }
}

/// One momentum SGD update:
/// `velocity = momentum·velocity + grad + weight_decay·param`,
/// `param -= lr·velocity`.
pub fn sgd_step(
    param: &mut [f64],
    grad: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Dimension(format!(
            "param {} / grad {} / velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if let Some(g) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient value {g}")));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over every parameter of a model. Weight decay applies to
/// weights only; step sizes are clamped to the floor after each update.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    /// `grads` must follow the order of `model.params_mut()`.
    pub fn step(&mut self, model: &mut QuantizedModel, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = model.params_mut();
        if params.len() != grads.len() {
            return Err(Error::Dimension(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.len() != g.numel() {
                return Err(Error::Dimension(format!("gradient shape for {}", p.name)));
            }
            if let Some(v) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {} contains {v}", p.name)));
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = if p.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            sgd_step(p.value, g.data(), v, lr, self.momentum, wd)?;
            if matches!(p.kind, ParamKind::WeightStep | ParamKind::ActStep) {
                p.value.iter_mut().for_each(|s| *s = s.max(STEP_FLOOR));
            }
        }
        Ok(())
    }
}
