//! Learned step size quantizer.
//!
//! A tensor `v` is mapped to integer codes `v̄ = round(clip(v / s, -Q_N, Q_P))`
//! and back to `v̂ = v̄ · s`. The step size `s` is a learnable parameter whose
//! gradient comes from differentiating this map with the rounding treated
//! as a pass-through:
//!
//! ```text
//! ∂v̂/∂s = -v/s + round(v/s)   if -Q_N < v/s < Q_P
//!       = -Q_N                if v/s <= -Q_N
//!       =  Q_P                if v/s >=  Q_P
//! ∂v̂/∂v = 1 inside (-Q_N, Q_P), 0 elsewhere
//! ```
//!
//! [`quantize`] realises both gradients on the [`Tape`](crate::Tape) using
//! only `detach`-based building blocks ([`gradscale`], [`roundpass`]); the
//! closed forms [`step_size_grad`] and [`data_grad_mask`] exist so the two
//! routes can be checked against each other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{round_half_even, ClipBoundary, IntTensor, Tensor, Var};

/// Smallest step size allowed after an update or a degenerate initialisation.
pub const STEP_FLOOR: f64 = 1e-8;

/// Bit width and signedness of a quantizer, with the derived level counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u32,
    signed: bool,
    q_n: i32,
    q_p: i32,
}

impl QuantSpec {
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        let (q_n, q_p) = quant_levels(bits, signed)?;
        Ok(QuantSpec {
            bits,
            signed,
            q_n,
            q_p,
        })
    }

    /// Signed spec, as used for weights.
    pub fn weights(bits: u32) -> Result<Self> {
        Self::new(bits, true)
    }

    /// Unsigned spec, as used for post-rectifier activations.
    pub fn activations(bits: u32) -> Result<Self> {
        Self::new(bits, false)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn signed(&self) -> bool {
        self.signed
    }

    /// Number of negative levels.
    pub fn q_n(&self) -> i32 {
        self.q_n
    }

    /// Number of positive levels.
    pub fn q_p(&self) -> i32 {
        self.q_p
    }

    /// Size of the code alphabet, `Q_N + Q_P + 1`.
    pub fn levels(&self) -> usize {
        (self.q_n + self.q_p + 1) as usize
    }
}

/// `(Q_N, Q_P)` for a `bits`-wide code.
pub fn quant_levels(bits: u32, signed: bool) -> Result<(i32, i32)> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!(
            "quantizer bit width {bits} outside 2..=16"
        )));
    }
    Ok(if signed {
        (1 << (bits - 1), (1 << (bits - 1)) - 1)
    } else {
        (0, (1 << bits) - 1)
    })
}

/// Which tensor a step size quantizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "layer", rename_all = "snake_case")]
pub enum StepOwner {
    Weight(usize),
    Activation(usize),
}

/// Choice of gradient scale applied to the step size loss gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradScale {
    /// `g = 1`.
    None,
    /// `g = 1/√N`, N being the weight or feature count.
    Count,
    /// `g = 1/√(N·Q_P)`.
    #[default]
    CountLevels,
}

impl GradScale {
    pub fn factor(self, count: usize, q_p: i32) -> Result<f64> {
        match self {
            GradScale::None => Ok(1.0),
            GradScale::Count => grad_scale_factor(count, 1),
            GradScale::CountLevels => grad_scale_factor(count, q_p),
        }
    }

    /// Short label used in reports and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            GradScale::None => "none",
            GradScale::Count => "n",
            GradScale::CountLevels => "nqp",
        }
    }

    pub fn from_label(label: &str) -> Result<Self> {
        match label {
            "none" | "1" => Ok(GradScale::None),
            "n" => Ok(GradScale::Count),
            "nqp" => Ok(GradScale::CountLevels),
            other => Err(Error::Config(format!(
                "unknown gradient scale '{other}' (expected none, n or nqp)"
            ))),
        }
    }
}

/// A learnable step size with its gradient scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSizeParam {
    pub value: f64,
    pub g: f64,
    pub initialized: bool,
    pub owner: StepOwner,
}

impl StepSizeParam {
    pub fn new(owner: StepOwner) -> Self {
        StepSizeParam {
            value: 1.0,
            g: 1.0,
            initialized: false,
            owner,
        }
    }

    /// Set `s = 2⟨|v|⟩/√Q_P` and `g` from `count` (weights or features).
    pub fn initialize(&mut self, v: &Tensor, spec: &QuantSpec, count: usize, scale: GradScale) -> Result<()> {
        self.value = init_step_size(v, spec.q_p())?;
        self.g = scale.factor(count, spec.q_p())?;
        self.initialized = true;
        Ok(())
    }

    pub fn clamp_floor(&mut self) {
        if !(self.value >= STEP_FLOOR) {
            self.value = STEP_FLOOR;
        }
    }
}

fn check_step(s: f64) -> Result<()> {
    if s > 0.0 && s.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("step size must be positive, got {s}")))
    }
}

/// Integer codes `v̄` and their rescaled values `v̂ = v̄ · s`.
pub fn quantize_forward(v: &Tensor, s: f64, spec: &QuantSpec) -> Result<(IntTensor, Tensor)> {
    check_step(s)?;
    let (lo, hi) = (-(spec.q_n() as f64), spec.q_p() as f64);
    let codes: Vec<i32> = v
        .data()
        .iter()
        .map(|&x| round_half_even((x / s).clamp(lo, hi)) as i32)
        .collect();
    let hat = codes.iter().map(|&c| c as f64 * s).collect();
    Ok((
        IntTensor::new(v.shape().to_vec(), codes, spec.q_n(), spec.q_p())?,
        Tensor::new(v.shape().to_vec(), hat)?,
    ))
}

/// `∂v̂/∂s` for a single element.
pub fn step_size_grad(v: f64, s: f64, spec: &QuantSpec) -> Result<f64> {
    check_step(s)?;
    let u = v / s;
    let (q_n, q_p) = (spec.q_n() as f64, spec.q_p() as f64);
    Ok(if u <= -q_n {
        -q_n
    } else if u >= q_p {
        q_p
    } else {
        -u + round_half_even(u)
    })
}

/// `∂v̂/∂v`: 1 strictly inside the clip range, 0 elsewhere.
pub fn data_grad_mask(v: &Tensor, s: f64, spec: &QuantSpec) -> Result<Tensor> {
    check_step(s)?;
    let (q_n, q_p) = (spec.q_n() as f64, spec.q_p() as f64);
    Ok(v.map(|x| {
        let u = x / s;
        if -q_n < u && u < q_p {
            1.0
        } else {
            0.0
        }
    }))
}

/// `1/√(count · Q_P)`.
pub fn grad_scale_factor(count: usize, q_p: i32) -> Result<f64> {
    if count == 0 || q_p < 1 {
        return Err(Error::Argument(format!(
            "gradient scale needs count >= 1 and Q_P >= 1, got {count} and {q_p}"
        )));
    }
    Ok(1.0 / ((count as f64) * (q_p as f64)).sqrt())
}

/// `2⟨|v|⟩/√Q_P`, floored at [`STEP_FLOOR`] when that is zero or not finite.
pub fn init_step_size(v: &Tensor, q_p: i32) -> Result<f64> {
    if q_p < 1 {
        return Err(Error::Argument(format!("Q_P must be positive, got {q_p}")));
    }
    let s = 2.0 * v.mean_abs() / (q_p as f64).sqrt();
    Ok(if s.is_finite() && s > STEP_FLOOR { s } else { STEP_FLOOR })
}

/// Forward: `x`. Backward: gradient multiplied by `scale`.
///
/// Built as `detach(x) + (x·scale − detach(x·scale))` so the forward value
/// is exactly `x`.
pub fn gradscale(x: Var<'_>, scale: f64) -> Result<Var<'_>> {
    let y_grad = x.scale(scale);
    x.detach().add(y_grad.sub(y_grad.detach())?)
}

/// Forward: round to nearest. Backward: pass-through.
///
/// Built as `detach(round(x)) + (x − detach(x))`, exact in the forward pass.
pub fn roundpass(x: Var<'_>) -> Result<Var<'_>> {
    x.round().detach().add(x.sub(x.detach())?)
}

/// Quantize `v` with the step size leaf `s` and gradient scale `g`, returning
/// `v̂` on the tape.
///
/// The clip uses an open pass band so that the gradients at exactly
/// `v/s = -Q_N` or `v/s = Q_P` take the clipped branches.
pub fn quantize<'t>(v: Var<'t>, s: Var<'t>, g: f64, spec: &QuantSpec) -> Result<Var<'t>> {
    check_step(s.item()?)?;
    let s = gradscale(s, g)?;
    let scaled = v.div_scalar(s)?;
    let clipped = scaled.clip_with(-(spec.q_n() as f64), spec.q_p() as f64, ClipBoundary::Exclusive)?;
    let codes = roundpass(clipped)?;
    codes.mul_scalar(s)
}

/// Quantize with a [`StepSizeParam`], returning `v̂` and the step size leaf.
///
/// An uninitialised activation step size is initialised from this batch;
/// an uninitialised weight step size is a usage error.
pub fn quantize_param<'t>(
    v: Var<'t>,
    step: &mut StepSizeParam,
    spec: &QuantSpec,
    count: usize,
    scale: GradScale,
) -> Result<(Var<'t>, Var<'t>)> {
    if !step.initialized {
        match step.owner {
            StepOwner::Activation(_) => v.with_value(|t| step.initialize(t, spec, count, scale))?,
            StepOwner::Weight(layer) => {
                return Err(Error::Usage(format!(
                    "weight step size of layer {layer} used before initialisation"
                )))
            }
        }
    }
    let s = v.tape().param(Tensor::scalar(step.value));
    Ok((quantize(v, s, step.g, spec)?, s))
}
