//! Quantized layers, reference architectures and checkpoints.
//!
//! Every matmul-bearing layer quantizes its input with an unsigned
//! activation quantizer and its weights with a signed weight quantizer
//! before the product; normalization and the rectifier stay full
//! precision. The first and last layers always use the boundary precision
//! (8-bit by default); the layers in between use the configured precision.

mod checkpoint;
mod layer;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layer::{BatchNorm, LayerKind, LayerVars, QuantizedLayer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{GradScale, QuantSpec, StepOwner, StepSizeParam};
use crate::tensor::{Tape, Tensor, Var};

/// Bit width meaning "not quantized".
pub const FULL_PRECISION: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Fully connected stack: `input → hidden… → classes`.
    #[default]
    Mlp,
    /// Two 3×3 conv blocks (each with 2×2 max pooling), then linear layers.
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Input extents `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    /// Hidden widths of the fully connected part.
    pub hidden: Vec<usize>,
    /// Output channels of the conv blocks (CNN only).
    pub channels: Vec<usize>,
    /// Precision of interior layers: 2, 3, 4, 8, or 32 for full precision.
    pub precision: u32,
    /// Precision of the first and last layers of a quantized model.
    pub boundary_precision: u32,
    /// Quantize the model input with a signed quantizer (for inputs that can
    /// be negative).
    pub signed_input: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::Mlp,
            input: [1, 28, 28],
            classes: 10,
            hidden: vec![256, 128],
            channels: vec![8, 16],
            precision: FULL_PRECISION,
            boundary_precision: 8,
            signed_input: false,
        }
    }
}

impl ModelConfig {
    /// The reference 784-256-128-10 perceptron.
    pub fn mlp(precision: u32) -> Self {
        ModelConfig {
            precision,
            ..Default::default()
        }
    }

    /// The reference two-conv, two-linear network.
    pub fn cnn(precision: u32) -> Self {
        ModelConfig {
            arch: Arch::Cnn,
            hidden: vec![64],
            precision,
            ..Default::default()
        }
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn is_quantized(&self) -> bool {
        self.precision != FULL_PRECISION
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |b: u32| matches!(b, 2 | 3 | 4 | 8 | FULL_PRECISION);
        if !ok(self.precision) {
            return Err(Error::Config(format!(
                "unsupported precision {} (expected 2, 3, 4, 8 or 32)",
                self.precision
            )));
        }
        if !matches!(self.boundary_precision, 2 | 3 | 4 | 8) {
            return Err(Error::Config(format!(
                "unsupported boundary precision {}",
                self.boundary_precision
            )));
        }
        if self.classes < 2 || self.input.contains(&0) {
            return Err(Error::Config("need at least 2 classes and a non-empty input".into()));
        }
        if self.hidden.contains(&0) || self.channels.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.arch == Arch::Cnn {
            if self.channels.is_empty() {
                return Err(Error::Config("cnn needs at least one conv block".into()));
            }
            let shrink = 1usize << self.channels.len();
            if self.input[1] < shrink || self.input[2] < shrink {
                return Err(Error::Config(format!(
                    "input {:?} too small for {} pooling stages",
                    self.input,
                    self.channels.len()
                )));
            }
        }
        Ok(())
    }

    /// Layer shapes in execution order.
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut kinds = Vec::new();
        let mut features = self.input_len();
        if self.arch == Arch::Cnn {
            let [mut ch, mut h, mut w] = self.input;
            for &out in &self.channels {
                kinds.push(LayerKind::Conv {
                    in_ch: ch,
                    out_ch: out,
                    height: h,
                    width: w,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    pool: true,
                });
                ch = out;
                h /= 2;
                w /= 2;
            }
            features = ch * h * w;
        }
        for &width in &self.hidden {
            kinds.push(LayerKind::Linear {
                inputs: features,
                outputs: width,
            });
            features = width;
        }
        kinds.push(LayerKind::Linear {
            inputs: features,
            outputs: self.classes,
        });
        kinds
    }

    /// Bit width of each layer under the first/last policy.
    pub fn layer_precisions(&self) -> Vec<u32> {
        let n = self.layer_kinds().len();
        (0..n)
            .map(|i| {
                if !self.is_quantized() {
                    FULL_PRECISION
                } else if i == 0 || i + 1 == n {
                    self.boundary_precision
                } else {
                    self.precision
                }
            })
            .collect()
    }
}

/// Batch statistics versus running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which parameter a slot in [`QuantizedModel::params_mut`] refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    NormScale,
    NormShift,
    WeightStep,
    ActStep,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub layer: usize,
    pub kind: ParamKind,
    pub value: &'a mut [f64],
}

/// Result of a forward pass: the logits and, per layer, the tape handles of
/// its parameters.
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    pub layers: Vec<LayerVars<'t>>,
}

impl<'t> ForwardOutput<'t> {
    /// Parameter handles in the order of [`QuantizedModel::params_mut`].
    pub fn param_vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|l| l.ordered()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    config: ModelConfig,
    layers: Vec<QuantizedLayer>,
    grad_scale: GradScale,
    grad_scale_mult: f64,
}

/// He-normal weights, unit norm scale, zero shifts; weight step sizes are
/// initialised from the drawn weights.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<QuantizedModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = cfg.layer_kinds();
    let precisions = cfg.layer_precisions();
    let n = kinds.len();
    let mut layers = Vec::with_capacity(n);
    for (i, (kind, bits)) in kinds.into_iter().zip(precisions).enumerate() {
        let last = i + 1 == n;
        let fan_in = kind.fan_in();
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let shape = kind.weight_shape();
        let count: usize = shape.iter().product();
        let weight = Tensor::new(shape, (0..count).map(|_| normal.sample(&mut rng)).collect())?;
        let outputs = kind.outputs();
        let (weight_spec, act_spec) = if bits == FULL_PRECISION {
            (None, None)
        } else {
            let act = if i == 0 && cfg.signed_input {
                QuantSpec::weights(bits)?
            } else {
                QuantSpec::activations(bits)?
            };
            (Some(QuantSpec::weights(bits)?), Some(act))
        };
        let mut layer = QuantizedLayer {
            kind,
            weight,
            bias: last.then(|| Tensor::zeros([outputs])).transpose()?,
            norm: (!last).then(|| BatchNorm::new(outputs)),
            relu: !last,
            weight_spec,
            act_spec,
            weight_step: StepSizeParam::new(StepOwner::Weight(i)),
            act_step: StepSizeParam::new(StepOwner::Activation(i)),
        };
        layer.init_weight_step(GradScale::default(), 1.0)?;
        layers.push(layer);
    }
    Ok(QuantizedModel {
        config: cfg.clone(),
        layers,
        grad_scale: GradScale::default(),
        grad_scale_mult: 1.0,
    })
}

impl QuantizedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[QuantizedLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [QuantizedLayer] {
        &mut self.layers
    }

    pub fn grad_scale(&self) -> (GradScale, f64) {
        (self.grad_scale, self.grad_scale_mult)
    }

    /// Choose the step size gradient scale (times `mult`) for every
    /// quantizer, including activation quantizers initialised later.
    pub fn set_grad_scale(&mut self, scale: GradScale, mult: f64) -> Result<()> {
        self.grad_scale = scale;
        self.grad_scale_mult = mult;
        for layer in &mut self.layers {
            layer.refresh_grad_scales(scale, mult)?;
        }
        Ok(())
    }

    /// Copy weights and normalization state from a full precision model of
    /// the same architecture, then re-initialise every step size: weight
    /// steps from the copied weights, activation steps lazily from the next
    /// batch.
    pub fn load_full_precision(&mut self, source: &QuantizedModel) -> Result<()> {
        if source.layers.len() != self.layers.len() {
            return Err(Error::Checkpoint(format!(
                "source has {} layers, model has {}",
                source.layers.len(),
                self.layers.len()
            )));
        }
        for (dst, src) in self.layers.iter().zip(&source.layers) {
            if dst.kind != src.kind {
                return Err(Error::Checkpoint(format!(
                    "layer shape mismatch: {:?} vs {:?}",
                    dst.kind, src.kind
                )));
            }
        }
        for (dst, src) in self.layers.iter_mut().zip(&source.layers) {
            dst.weight = src.weight.clone();
            dst.bias = src.bias.clone();
            dst.norm = src.norm.clone();
            dst.act_step = StepSizeParam::new(dst.act_step.owner);
            dst.init_weight_step(self.grad_scale, self.grad_scale_mult)?;
        }
        Ok(())
    }

    /// Run the model on `x: [N, C, H, W]` or `[N, features]`.
    ///
    /// In [`Mode::Train`] normalization uses batch statistics and updates the
    /// running averages. Uninitialised activation step sizes are initialised
    /// from this batch in either mode.
    pub fn forward<'t>(&mut self, tape: &'t Tape, x: &Tensor, mode: Mode) -> Result<ForwardOutput<'t>> {
        let mut h = tape.constant(self.shape_input(x)?);
        let mut vars = Vec::with_capacity(self.layers.len());
        let (scale, mult) = (self.grad_scale, self.grad_scale_mult);
        for layer in &mut self.layers {
            let (out, lv) = layer.forward(h, mode, scale, mult)?;
            h = out;
            vars.push(lv);
        }
        Ok(ForwardOutput { logits: h, layers: vars })
    }

    /// Eval-mode logits without mutating the model. Fails if an activation
    /// step size has not been initialised yet.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if let Some(l) = self.layers.iter().find(|l| l.act_spec.is_some() && !l.act_step.initialized) {
            return Err(Error::Usage(format!(
                "activation step size of layer {} is not initialised",
                l.index()
            )));
        }
        let mut frozen = self.clone();
        let tape = Tape::new();
        Ok(frozen.forward(&tape, x, Mode::Eval)?.logits.value())
    }

    fn shape_input(&self, x: &Tensor) -> Result<Tensor> {
        let per_sample = self.config.input_len();
        let n = x.shape()[0];
        if x.numel() != n * per_sample {
            return Err(Error::Dimension(format!(
                "input {:?} does not match model input {:?}",
                x.shape(),
                self.config.input
            )));
        }
        let [c, h, w] = self.config.input;
        match self.layers[0].kind {
            LayerKind::Conv { .. } => x.clone().reshape([n, c, h, w]),
            LayerKind::Linear { .. } => x.clone().reshape([n, per_sample]),
        }
    }

    /// All trainable values, layer by layer in the order weight, bias, norm
    /// scale, norm shift, weight step, activation step (absent ones skipped).
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let quantized = layer.weight_spec.is_some();
            out.push(ParamRef {
                name: format!("layers.{i}.weight"),
                layer: i,
                kind: ParamKind::Weight,
                value: layer.weight.data_mut(),
            });
            if let Some(b) = &mut layer.bias {
                out.push(ParamRef {
                    name: format!("layers.{i}.bias"),
                    layer: i,
                    kind: ParamKind::Bias,
                    value: b.data_mut(),
                });
            }
            if let Some(norm) = &mut layer.norm {
                out.push(ParamRef {
                    name: format!("layers.{i}.norm.scale"),
                    layer: i,
                    kind: ParamKind::NormScale,
                    value: norm.gamma.data_mut(),
                });
                out.push(ParamRef {
                    name: format!("layers.{i}.norm.shift"),
                    layer: i,
                    kind: ParamKind::NormShift,
                    value: norm.beta.data_mut(),
                });
            }
            if quantized {
                out.push(ParamRef {
                    name: format!("layers.{i}.weight_step"),
                    layer: i,
                    kind: ParamKind::WeightStep,
                    value: std::slice::from_mut(&mut layer.weight_step.value),
                });
            }
            if layer.act_spec.is_some() {
                out.push(ParamRef {
                    name: format!("layers.{i}.act_step"),
                    layer: i,
                    kind: ParamKind::ActStep,
                    value: std::slice::from_mut(&mut layer.act_step.value),
                });
            }
        }
        out
    }

    /// `(layer, kind)` of each entry of [`Self::params_mut`].
    pub fn param_layout(&self) -> Vec<(usize, ParamKind)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((i, ParamKind::Weight));
            if l.bias.is_some() {
                out.push((i, ParamKind::Bias));
            }
            if l.norm.is_some() {
                out.push((i, ParamKind::NormScale));
                out.push((i, ParamKind::NormShift));
            }
            if l.weight_spec.is_some() {
                out.push((i, ParamKind::WeightStep));
            }
            if l.act_spec.is_some() {
                out.push((i, ParamKind::ActStep));
            }
        }
        out
    }

    /// `(weight step, activation step)` per layer; `None` for full precision
    /// layers.
    pub fn step_sizes(&self) -> Vec<Option<(f64, f64)>> {
        self.layers
            .iter()
            .map(|l| l.weight_spec.map(|_| (l.weight_step.value, l.act_step.value)))
            .collect()
    }
}

#[cfg(test)]
mod tests;
