use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::Result;
use crate::quant::{quantize, GradScale, QuantSpec, StepOwner, StepSizeParam};
use crate::tensor::{Tensor, Var};

/// Geometry of a matmul-bearing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    /// Weight stored as `[inputs, outputs]`.
    Linear { inputs: usize, outputs: usize },
    /// Weight stored as `[out_ch, in_ch, kernel, kernel]`; `height` and
    /// `width` are the input extents. `pool` appends 2×2 max pooling.
    Conv {
        in_ch: usize,
        out_ch: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        pool: bool,
    },
}

impl LayerKind {
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            LayerKind::Linear { inputs, outputs } => vec![inputs, outputs],
            LayerKind::Conv {
                in_ch, out_ch, kernel, ..
            } => vec![out_ch, in_ch, kernel, kernel],
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Linear { inputs, .. } => inputs,
            LayerKind::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
        }
    }

    pub fn outputs(&self) -> usize {
        match *self {
            LayerKind::Linear { outputs, .. } => outputs,
            LayerKind::Conv { out_ch, .. } => out_ch,
        }
    }

    /// Elements per sample of the layer input.
    pub fn input_features(&self) -> usize {
        match *self {
            LayerKind::Linear { inputs, .. } => inputs,
            LayerKind::Conv {
                in_ch, height, width, ..
            } => in_ch * height * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full([channels], 1.0).expect("positive channel count"),
            beta: Tensor::full([channels], 0.0).expect("positive channel count"),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub norm: Option<BatchNorm>,
    pub relu: bool,
    /// `None` keeps the weights at full precision.
    pub weight_spec: Option<QuantSpec>,
    /// `None` keeps the input at full precision.
    pub act_spec: Option<QuantSpec>,
    pub weight_step: StepSizeParam,
    pub act_step: StepSizeParam,
}

/// Tape handles created by one layer during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars<'t> {
    /// Layer input before quantization.
    pub input: Var<'t>,
    pub weight: Var<'t>,
    /// Weights as used in the product (quantized if the layer is).
    pub weight_used: Var<'t>,
    pub bias: Option<Var<'t>>,
    pub gamma: Option<Var<'t>>,
    pub beta: Option<Var<'t>>,
    pub weight_step: Option<Var<'t>>,
    pub act_step: Option<Var<'t>>,
}

impl<'t> LayerVars<'t> {
    pub fn ordered(&self) -> Vec<Var<'t>> {
        std::iter::once(self.weight)
            .chain(self.bias)
            .chain(self.gamma)
            .chain(self.beta)
            .chain(self.weight_step)
            .chain(self.act_step)
            .collect()
    }
}

impl QuantizedLayer {
    pub fn index(&self) -> usize {
        match self.weight_step.owner {
            StepOwner::Weight(i) | StepOwner::Activation(i) => i,
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.weight_spec.is_some()
    }

    pub(crate) fn init_weight_step(&mut self, scale: GradScale, mult: f64) -> Result<()> {
        if let Some(spec) = &self.weight_spec {
            self.weight_step
                .initialize(&self.weight, spec, self.weight.numel(), scale)?;
            self.weight_step.g *= mult;
        }
        Ok(())
    }

    pub(crate) fn refresh_grad_scales(&mut self, scale: GradScale, mult: f64) -> Result<()> {
        if let Some(spec) = &self.weight_spec {
            self.weight_step.g = scale.factor(self.weight.numel(), spec.q_p())? * mult;
        }
        if let Some(spec) = &self.act_spec {
            self.act_step.g = scale.factor(self.kind.input_features(), spec.q_p())? * mult;
        }
        Ok(())
    }

    pub(crate) fn forward<'t>(
        &mut self,
        h: Var<'t>,
        mode: Mode,
        scale: GradScale,
        mult: f64,
    ) -> Result<(Var<'t>, LayerVars<'t>)> {
        let tape = h.tape();
        let n = h.shape()[0];
        let input = match self.kind {
            LayerKind::Linear { inputs, .. } if h.shape().len() != 2 => h.reshape([n, inputs])?,
            _ => h,
        };

        let (x, act_step) = match &self.act_spec {
            Some(spec) => {
                if !self.act_step.initialized {
                    let features = self.kind.input_features();
                    input.with_value(|v| self.act_step.initialize(v, spec, features, scale))?;
                    self.act_step.g *= mult;
                }
                let s = tape.param(Tensor::scalar(self.act_step.value));
                (quantize(input, s, self.act_step.g, spec)?, Some(s))
            }
            None => (input, None),
        };

        let weight = tape.param(self.weight.clone());
        let (weight_used, weight_step) = match &self.weight_spec {
            Some(spec) => {
                let s = tape.param(Tensor::scalar(self.weight_step.value));
                (quantize(weight, s, self.weight_step.g, spec)?, Some(s))
            }
            None => (weight, None),
        };

        let mut y = match self.kind {
            LayerKind::Linear { .. } => x.matmul(weight_used)?,
            LayerKind::Conv { stride, pad, .. } => x.conv2d(weight_used, stride, pad)?,
        };

        let bias = match &self.bias {
            Some(b) => {
                let b = tape.param(b.clone());
                y = y.add_channel(b)?;
                Some(b)
            }
            None => None,
        };

        let (gamma, beta) = match &mut self.norm {
            Some(norm) => {
                let gamma = tape.param(norm.gamma.clone());
                let beta = tape.param(norm.beta.clone());
                y = match mode {
                    Mode::Train => {
                        let (out, stats) = y.batch_norm_train(gamma, beta, norm.eps)?;
                        let m = norm.momentum;
                        let unbias = if stats.count > 1 {
                            stats.count as f64 / (stats.count - 1) as f64
                        } else {
                            1.0
                        };
                        for c in 0..stats.mean.len() {
                            norm.running_mean[c] = (1.0 - m) * norm.running_mean[c] + m * stats.mean[c];
                            norm.running_var[c] = (1.0 - m) * norm.running_var[c] + m * stats.var[c] * unbias;
                        }
                        out
                    }
                    Mode::Eval => y.batch_norm_eval(gamma, beta, &norm.running_mean, &norm.running_var, norm.eps)?,
                };
                (Some(gamma), Some(beta))
            }
            None => (None, None),
        };

        if self.relu {
            y = y.relu();
        }
        if let LayerKind::Conv { pool: true, .. } = self.kind {
            y = y.max_pool2()?;
        }

        Ok((
            y,
            LayerVars {
                input,
                weight,
                weight_used,
                bias,
                gamma,
                beta,
                weight_step,
                act_step,
            },
        ))
    }
}
