//! Integer inference.
//!
//! [`export_int`] quantizes each layer's weights once to integer codes
//! `w̄` and folds the rescale `s_w·s_x`, the bias and the normalization into
//! one per-feature affine map. [`int_forward`] then runs each layer as
//!
//! ```text
//! x̄   = round(clip(x / s_x, -Q_N, Q_P))        (integers)
//! acc = x̄ · w̄ᵀ                                 (i32 accumulation)
//! y   = acc · scale + shift,  then rectifier / pooling
//! ```
//!
//! which equals the training-path forward in eval mode because
//! `x̂·ŵ = (x̄·w̄)·s_x·s_w`.
//!
//! # File format
//!
//! A container (see [`crate::fsio`]) with magic `LSQINT\0\0`. The JSON header
//! lists the layers and three payload sections:
//!
//! * `packed`: all weight codes as one little-endian bit stream, `b` bits per
//!   value storing `w̄ + Q_N`; exactly `⌈Σ N_W·b / 8⌉` bytes,
//! * `unpacked`: the same codes as one `i8` per value, for fast loading,
//! * `params`: `f64` values `s_w, s_x, scale[..], shift[..]` per layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::nn::{config_hash, LayerKind, ModelConfig, QuantizedModel};
use crate::quant::{quantize_forward, QuantSpec};
use crate::tensor::kernels::{gemm_i32_nt, im2col, rows_to_nchw, ConvGeom};
use crate::tensor::{IntTensor, Tensor};

pub const EXPORT_MAGIC: &[u8; 8] = b"LSQINT\0\0";
pub const EXPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct IntLayer {
    pub kind: LayerKind,
    pub weight_spec: QuantSpec,
    pub act_spec: QuantSpec,
    pub s_w: f64,
    pub s_x: f64,
    /// Weight codes laid out `[outputs, fan_in]`.
    pub codes: IntTensor,
    /// Per output feature: `s_w·s_x·γ/√(var+ε)` (or `s_w·s_x` without norm).
    pub scale: Vec<f64>,
    /// Per output feature: `β − γ·mean/√(var+ε)` (or the bias).
    pub shift: Vec<f64>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntModel {
    pub config: ModelConfig,
    pub layers: Vec<IntLayer>,
}

impl IntLayer {
    fn fan_in(&self) -> usize {
        self.kind.fan_in()
    }

    fn outputs(&self) -> usize {
        self.kind.outputs()
    }

    /// Largest possible magnitude of one accumulator.
    pub fn accumulator_bound(&self) -> i64 {
        let w = self.codes.data().iter().map(|c| c.unsigned_abs() as i64).max().unwrap_or(0);
        let x = self.act_spec.q_n().max(self.act_spec.q_p()) as i64;
        w * x * self.fan_in() as i64
    }
}

/// Export a trained quantized model. Every layer must be quantized with
/// initialised, finite step sizes.
pub fn export_int(model: &QuantizedModel) -> Result<IntModel> {
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, l) in model.layers().iter().enumerate() {
        let (Some(weight_spec), Some(act_spec)) = (l.weight_spec, l.act_spec) else {
            return Err(Error::Export(format!("layer {i} is not quantized")));
        };
        if !l.weight_step.initialized || !l.act_step.initialized {
            return Err(Error::Export(format!("layer {i} has uninitialised step sizes")));
        }
        let (s_w, s_x) = (l.weight_step.value, l.act_step.value);
        if !(s_w > 0.0 && s_w.is_finite() && s_x > 0.0 && s_x.is_finite()) {
            return Err(Error::Export(format!("layer {i} step sizes {s_w}, {s_x}")));
        }
        let (codes, _) = quantize_forward(&l.weight, s_w, &weight_spec)?;
        let (out, fan_in) = (l.kind.outputs(), l.kind.fan_in());
        let codes = match l.kind {
            LayerKind::Linear { .. } => {
                let c = codes.data();
                let t = (0..out * fan_in).map(|idx| c[(idx % fan_in) * out + idx / fan_in]).collect();
                IntTensor::new([out, fan_in], t, weight_spec.q_n(), weight_spec.q_p())?
            }
            LayerKind::Conv { .. } => {
                IntTensor::new([out, fan_in], codes.data().to_vec(), weight_spec.q_n(), weight_spec.q_p())?
            }
        };
        let rescale = s_w * s_x;
        let (scale, shift) = match (&l.norm, &l.bias) {
            (Some(n), _) => (0..out)
                .map(|c| {
                    let g = n.gamma.data()[c] / (n.running_var[c] + n.eps).sqrt();
                    (rescale * g, n.beta.data()[c] - g * n.running_mean[c])
                })
                .unzip(),
            (None, Some(b)) => (vec![rescale; out], b.data().to_vec()),
            (None, None) => (vec![rescale; out], vec![0.0; out]),
        };
        let layer = IntLayer {
            kind: l.kind,
            weight_spec,
            act_spec,
            s_w,
            s_x,
            codes,
            scale,
            shift,
            relu: l.relu,
        };
        if layer.accumulator_bound() > i32::MAX as i64 {
            return Err(Error::Export(format!(
                "layer {i} accumulator bound {} exceeds 32 bits",
                layer.accumulator_bound()
            )));
        }
        layers.push(layer);
    }
    Ok(IntModel {
        config: model.config().clone(),
        layers,
    })
}

fn quantize_input(x: &[f64], s: f64, spec: &QuantSpec) -> Vec<i32> {
    let (lo, hi) = (-(spec.q_n() as f64), spec.q_p() as f64);
    x.iter()
        .map(|&v| crate::tensor::round_half_even((v / s).clamp(lo, hi)) as i32)
        .collect()
}

fn max_pool2(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x[base + 2 * oy * w + 2 * ox];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = x[base + (2 * oy + dy) * w + 2 * ox + dx];
                    if v > best {
                        best = v;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Logits `[N, classes]` for `x` of `N` samples.
pub fn int_forward(im: &IntModel, x: &Tensor) -> Result<Tensor> {
    let n = x.shape()[0];
    if x.numel() != n * im.config.input_len() {
        return Err(Error::Dimension(format!(
            "input {:?} does not match model input {:?}",
            x.shape(),
            im.config.input
        )));
    }
    let mut h = x.data().to_vec();
    for (i, l) in im.layers.iter().enumerate() {
        let xq = quantize_input(&h, l.s_x, &l.act_spec);
        let out = l.outputs();
        let overflow = || Error::Export(format!("layer {i} accumulator overflow"));
        let (mut y, inner) = match l.kind {
            LayerKind::Linear { inputs, .. } => {
                let acc = gemm_i32_nt(n, inputs, out, &xq, l.codes.data()).ok_or_else(overflow)?;
                (acc.iter().map(|&a| a as f64).collect::<Vec<f64>>(), 1)
            }
            LayerKind::Conv {
                in_ch,
                height,
                width,
                kernel,
                stride,
                pad,
                ..
            } => {
                let g = ConvGeom {
                    batch: n,
                    in_ch,
                    height,
                    width,
                    out_ch: out,
                    kh: kernel,
                    kw: kernel,
                    stride,
                    pad,
                };
                let cols = im2col(&xq, &g);
                let acc = gemm_i32_nt(g.patch_rows(), g.patch_cols(), out, &cols, l.codes.data())
                    .ok_or_else(overflow)?;
                let hw = g.out_h() * g.out_w();
                (rows_to_nchw(&acc, n, out, hw).iter().map(|&a| a as f64).collect(), hw)
            }
        };
        for (idx, v) in y.iter_mut().enumerate() {
            let c = (idx / inner) % out;
            *v = *v * l.scale[c] + l.shift[c];
            if l.relu && *v < 0.0 {
                *v = 0.0;
            }
        }
        if let LayerKind::Conv {
            stride,
            height,
            width,
            kernel,
            pad,
            pool: true,
            ..
        } = l.kind
        {
            let oh = (height + 2 * pad - kernel) / stride + 1;
            let ow = (width + 2 * pad - kernel) / stride + 1;
            y = max_pool2(&y, n * out, oh, ow);
        }
        h = y;
    }
    let classes = h.len() / n;
    Tensor::new([n, classes], h)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub samples: usize,
    /// Largest per-sample `‖a − b‖∞ / ‖b‖∞` between integer logits `a` and
    /// training-path logits `b`.
    pub max_rel_discrepancy: f64,
    pub argmax_agreement: f64,
    pub tol: f64,
    pub pass: bool,
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > row[best] { j } else { best })
}

/// Compare [`int_forward`] against the eval-mode forward of `model` on `x`.
pub fn check_equivalence(model: &QuantizedModel, im: &IntModel, x: &Tensor, tol: f64) -> Result<EquivalenceReport> {
    let a = int_forward(im, x)?;
    let b = model.logits(x)?;
    let k = b.shape()[1];
    let mut max_rel: f64 = 0.0;
    let mut agree = 0;
    for (ra, rb) in a.data().chunks(k).zip(b.data().chunks(k)) {
        let diff = ra.iter().zip(rb).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        let norm = rb.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let rel = if norm > 0.0 {
            diff / norm
        } else if diff > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        max_rel = max_rel.max(rel);
        agree += (argmax(ra) == argmax(rb)) as usize;
    }
    let samples = x.shape()[0];
    let argmax_agreement = agree as f64 / samples as f64;
    Ok(EquivalenceReport {
        samples,
        max_rel_discrepancy: max_rel,
        argmax_agreement,
        tol,
        pass: max_rel <= tol && agree == samples,
    })
}

/// Pack codes as `b`-bit offset values `code + Q_N`, least significant bit
/// first, continuing across calls.
struct BitWriter {
    bytes: Vec<u8>,
    bits: usize,
}

impl BitWriter {
    fn push(&mut self, value: u32, width: u32) {
        for k in 0..width {
            if self.bits.is_multiple_of(8) {
                self.bytes.push(0);
            }
            if (value >> k) & 1 == 1 {
                *self.bytes.last_mut().expect("pushed above") |= 1 << (self.bits % 8);
            }
            self.bits += 1;
        }
    }
}

fn read_bits(bytes: &[u8], start: usize, width: u32) -> u32 {
    (0..width as usize).fold(0, |acc, k| {
        let bit = start + k;
        acc | ((((bytes[bit / 8] >> (bit % 8)) & 1) as u32) << k)
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportHeader {
    config: ModelConfig,
    config_hash: String,
    layers: Vec<LayerHeader>,
    packed_bytes: usize,
    unpacked_bytes: usize,
    params_bytes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerHeader {
    kind: LayerKind,
    weight_bits: u32,
    act_bits: u32,
    act_signed: bool,
    relu: bool,
}

impl IntModel {
    /// Bytes of the bit-packed weight payload, `⌈Σ N_W·b / 8⌉`.
    pub fn packed_weight_bytes(&self) -> usize {
        let bits: usize = self
            .layers
            .iter()
            .map(|l| l.codes.data().len() * l.weight_spec.bits() as usize)
            .sum();
        bits.div_ceil(8)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut packed = BitWriter { bytes: Vec::new(), bits: 0 };
        let mut unpacked = Vec::new();
        let mut params = Vec::new();
        for l in &self.layers {
            let (q_n, bits) = (l.weight_spec.q_n(), l.weight_spec.bits());
            for &c in l.codes.data() {
                packed.push((c + q_n) as u32, bits);
                let byte = i8::try_from(c).map_err(|_| Error::Export(format!("code {c} does not fit in i8")))?;
                unpacked.push(byte as u8);
            }
            fsio::f64s_to_le(&[l.s_w, l.s_x], &mut params);
            fsio::f64s_to_le(&l.scale, &mut params);
            fsio::f64s_to_le(&l.shift, &mut params);
        }
        let header = ExportHeader {
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            layers: self
                .layers
                .iter()
                .map(|l| LayerHeader {
                    kind: l.kind,
                    weight_bits: l.weight_spec.bits(),
                    act_bits: l.act_spec.bits(),
                    act_signed: l.act_spec.signed(),
                    relu: l.relu,
                })
                .collect(),
            packed_bytes: packed.bytes.len(),
            unpacked_bytes: unpacked.len(),
            params_bytes: params.len(),
        };
        let mut payload = packed.bytes;
        payload.extend_from_slice(&unpacked);
        payload.extend_from_slice(&params);
        Ok(fsio::write_container(
            EXPORT_MAGIC,
            EXPORT_VERSION,
            &serde_json::to_vec(&header)?,
            &payload,
        ))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = fsio::read_container(bytes, EXPORT_MAGIC, EXPORT_VERSION, Error::Export)?;
        let h: ExportHeader =
            serde_json::from_slice(header).map_err(|e| Error::Export(format!("bad header: {e}")))?;
        if config_hash(&h.config) != h.config_hash {
            return Err(Error::Export("configuration hash mismatch".into()));
        }
        if h.packed_bytes + h.unpacked_bytes + h.params_bytes != payload.len() {
            return Err(Error::Export("section sizes do not match payload".into()));
        }
        let packed = &payload[..h.packed_bytes];
        let unpacked = &payload[h.packed_bytes..h.packed_bytes + h.unpacked_bytes];
        let params = fsio::le_to_f64s(&payload[h.packed_bytes + h.unpacked_bytes..]);
        let (mut bit, mut at, mut p) = (0usize, 0usize, 0usize);
        let mut layers = Vec::with_capacity(h.layers.len());
        for lh in &h.layers {
            let weight_spec = QuantSpec::weights(lh.weight_bits)?;
            let act_spec = QuantSpec::new(lh.act_bits, lh.act_signed)?;
            let (out, fan_in) = (lh.kind.outputs(), lh.kind.fan_in());
            let count = out * fan_in;
            if at + count > unpacked.len() || (bit + count * lh.weight_bits as usize).div_ceil(8) > packed.len() {
                return Err(Error::Export("weight section truncated".into()));
            }
            let mut codes = Vec::with_capacity(count);
            for &u in &unpacked[at..at + count] {
                let c = u as i8 as i32;
                let from_packed = read_bits(packed, bit, lh.weight_bits) as i32 - weight_spec.q_n();
                if c != from_packed {
                    return Err(Error::Export("packed and unpacked weights disagree".into()));
                }
                codes.push(c);
                bit += lh.weight_bits as usize;
            }
            at += count;
            let need = 2 + 2 * out;
            let vals = params
                .get(p..p + need)
                .ok_or_else(|| Error::Export("parameter section truncated".into()))?;
            p += need;
            layers.push(IntLayer {
                kind: lh.kind,
                weight_spec,
                act_spec,
                s_w: vals[0],
                s_x: vals[1],
                codes: IntTensor::new([out, fan_in], codes, weight_spec.q_n(), weight_spec.q_p())
                    .map_err(|e| Error::Export(e.to_string()))?,
                scale: vals[2..2 + out].to_vec(),
                shift: vals[2 + out..].to_vec(),
                relu: lh.relu,
            });
        }
        if at != unpacked.len() || p != params.len() || bit.div_ceil(8) != packed.len() {
            return Err(Error::Export("unused bytes in payload".into()));
        }
        Ok(IntModel { config: h.config, layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fsio::read(path)?)
    }
}

#[cfg(test)]
mod tests;
