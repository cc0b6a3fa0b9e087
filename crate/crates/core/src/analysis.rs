//! Diagnostics: step size update ratio, quantization error sweeps and model
//! size accounting.
//!
//! # Update ratio
//!
//! For a weight layer with weights `w` and weight step size `s`,
//!
//! ```text
//! R = (|∇_s L| / s) / (‖∇_w L‖ / ‖w‖)
//! ```
//!
//! where `∇_s L` already includes the gradient scale `g`. Because `∇_s L` is
//! linear in `g`, [`measure_r`] trains with the model's own scale and reports
//! `R` for each candidate scale by rescaling the observed step gradient.
//!
//! # Quantization error sweep
//!
//! [`quant_error_sweep`] evaluates every step size of a grid (by default
//! `{0.01ŝ, 0.02ŝ, …, 20.00ŝ}`) under three metrics and returns the argmin
//! of each, ties going to the smaller step size:
//!
//! * MAE `⟨|v̂ − v|⟩` and MSE `⟨(v̂ − v)²⟩`,
//! * a KL surrogate `−⟨log q(v)⟩`. The density `q` is piecewise constant
//!   over the quantizer's cells: atom `j` (code `j`) owns the interval
//!   `[(j − ½)s, (j + ½)s]`, the two end cells extend outward, and every
//!   cell is clipped to the data range `[min v, max v]`. Each cell with
//!   positive width receives mass `(count_j + 1)/(n + cells)`, spread
//!   uniformly. The surrogate is undefined when all values are equal.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{epoch_batches, Dataset};
use crate::error::{Error, Result};
use crate::infer::IntModel;
use crate::nn::{ParamKind, QuantizedModel, FULL_PRECISION};
use crate::quant::{GradScale, QuantSpec};
use crate::report::{fmt_f64, fmt_opt, write_json, Table};
use crate::tensor::round_half_even;
use crate::train::{compute_gradients, Optimizer, RunConfig};

/// Mean update ratio of one weight layer under one gradient scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RRecord {
    pub layer: usize,
    pub bits: u32,
    pub weights: usize,
    pub grad_scale: GradScale,
    /// Mean of `R` over the window.
    pub r: f64,
    /// Mean of `|∇_s L| / s` under this scale.
    pub step_rel: f64,
    /// Mean of `‖∇_w L‖ / ‖w‖`.
    pub weight_rel: f64,
    pub window: usize,
}

/// `(|∇_s L| / s) / (‖∇_w L‖ / ‖w‖)`, or `None` if a weight norm vanishes.
pub fn r_ratio(step_grad: f64, step: f64, weight_grad: &[f64], weights: &[f64]) -> Option<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (gw, w) = (norm(weight_grad), norm(weights));
    if gw == 0.0 || w == 0.0 {
        return None;
    }
    Some((step_grad.abs() / step) / (gw / w))
}

/// Train for `warmup + window` steps with `cfg` at constant learning rate
/// `lr0` and average `R` over the last `window` steps, for each of the
/// `scales`. Layers whose weight or weight gradient norm vanishes are
/// skipped with a warning.
pub fn measure_r(
    model: &mut QuantizedModel,
    data: &Dataset,
    cfg: &RunConfig,
    warmup: usize,
    window: usize,
    scales: &[GradScale],
) -> Result<Vec<RRecord>> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    let resolved = cfg.resolve(model.config().precision)?;
    model.set_grad_scale(cfg.grad_scale, cfg.grad_scale_mult)?;
    let layout = model.param_layout();
    let n_layers = model.layers().len();
    let mut sums = vec![vec![(0.0, 0.0, 0.0, 0usize); scales.len()]; n_layers];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = Optimizer::new(cfg.momentum, resolved.weight_decay);
    let mut batches = Vec::new();
    for step in 0..warmup + window {
        if batches.is_empty() {
            batches = epoch_batches(data.len(), cfg.batch_size, &mut rng);
            batches.reverse();
        }
        let (x, labels) = data.batch(&batches.pop().expect("refilled above"))?;
        let (_, grads) = compute_gradients(model, &x, &labels, None)?;
        if step >= warmup {
            for (li, layer) in model.layers().iter().enumerate() {
                let Some(spec) = layer.weight_spec else { continue };
                let find = |kind| layout.iter().position(|&(l, k)| l == li && k == kind).expect("layer param");
                let gw = grads[find(ParamKind::Weight)].data();
                let gs = grads[find(ParamKind::WeightStep)].data()[0];
                let s = layer.weight_step.value;
                let raw = gs / layer.weight_step.g;
                let Some(r1) = r_ratio(raw, s, gw, layer.weight.data()) else {
                    log::warn!("layer {li}: zero weight or gradient norm, skipped");
                    continue;
                };
                let weight_rel = (raw.abs() / s) / r1;
                for (k, scale) in scales.iter().enumerate() {
                    let f = scale.factor(layer.weight.numel(), spec.q_p())?;
                    let e = &mut sums[li][k];
                    e.0 += r1 * f;
                    e.1 += raw.abs() * f / s;
                    e.2 += weight_rel;
                    e.3 += 1;
                }
            }
        }
        optimizer.step(model, &grads, resolved.lr0)?;
    }
    let mut out = Vec::new();
    for (li, layer) in model.layers().iter().enumerate() {
        let Some(spec) = layer.weight_spec else { continue };
        for (k, &scale) in scales.iter().enumerate() {
            let (r, sr, wr, n) = sums[li][k];
            if n == 0 {
                continue;
            }
            out.push(RRecord {
                layer: li,
                bits: spec.bits(),
                weights: layer.weight.numel(),
                grad_scale: scale,
                r: r / n as f64,
                step_rel: sr / n as f64,
                weight_rel: wr / n as f64,
                window: n,
            });
        }
    }
    Ok(out)
}

/// Argmin of one metric over the sweep grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricMin {
    pub index: usize,
    pub s_star: f64,
    pub error: f64,
    /// `|s* − ŝ| / ŝ · 100`.
    pub pct_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QeSweepResult {
    pub s_hat: f64,
    pub grid_len: usize,
    pub mae: MetricMin,
    pub mse: MetricMin,
    /// `None` when the values are all equal.
    pub kl: Option<MetricMin>,
}

/// `{0.01ŝ, 0.02ŝ, …, 20.00ŝ}`.
pub fn default_grid(s_hat: f64) -> Vec<f64> {
    (1..=2000).map(|k| k as f64 * 0.01 * s_hat).collect()
}

/// `(MAE, MSE, KL surrogate)` of quantizing `values` with step `s`.
pub fn quant_errors(values: &[f64], s: f64, spec: &QuantSpec) -> (f64, f64, Option<f64>) {
    let (q_n, q_p) = (spec.q_n(), spec.q_p());
    let levels = (q_n + q_p + 1) as usize;
    let mut counts = vec![0usize; levels];
    let (mut abs, mut sq) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        let code = round_half_even((v / s).clamp(-(q_n as f64), q_p as f64));
        let e = code * s - v;
        abs += e.abs();
        sq += e * e;
        counts[(code as i32 + q_n) as usize] += 1;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let n = values.len() as f64;
    let kl = (hi > lo).then(|| {
        let widths: Vec<f64> = (0..levels)
            .map(|j| {
                let code = j as i32 - q_n;
                let a = if code == -q_n { f64::NEG_INFINITY } else { (code as f64 - 0.5) * s };
                let b = if code == q_p { f64::INFINITY } else { (code as f64 + 0.5) * s };
                (b.min(hi) - a.max(lo)).max(0.0)
            })
            .collect();
        let cells = widths.iter().filter(|&&w| w > 0.0).count() as f64;
        let mut total = 0.0;
        for (c, w) in counts.iter().zip(&widths) {
            if *c > 0 {
                let mass = (*c as f64 + 1.0) / (n + cells);
                total -= *c as f64 * (mass / w).ln();
            }
        }
        total / n
    });
    (abs / n, sq / n, kl)
}

/// Evaluate every grid point; each metric's argmin is the first minimum.
pub fn quant_error_sweep(values: &[f64], s_hat: f64, spec: &QuantSpec, grid: &[f64]) -> Result<QeSweepResult> {
    if values.is_empty() || grid.is_empty() {
        return Err(Error::Data("sweep needs values and a non-empty grid".into()));
    }
    if let Some(s) = grid.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Argument(format!("grid step size {s}")));
    }
    let mut best: [Option<(usize, f64)>; 3] = [None; 3];
    for (i, &s) in grid.iter().enumerate() {
        let (mae, mse, kl) = quant_errors(values, s, spec);
        for (slot, e) in best.iter_mut().zip([Some(mae), Some(mse), kl]) {
            if let Some(e) = e {
                if slot.is_none_or(|(_, b)| e < b) {
                    *slot = Some((i, e));
                }
            }
        }
    }
    let pick = |b: Option<(usize, f64)>| {
        b.map(|(index, error)| MetricMin {
            index,
            s_star: grid[index],
            error,
            pct_diff: (grid[index] - s_hat).abs() / s_hat * 100.0,
        })
    };
    Ok(QeSweepResult {
        s_hat,
        grid_len: grid.len(),
        mae: pick(best[0]).expect("values non-empty"),
        mse: pick(best[1]).expect("values non-empty"),
        kl: pick(best[2]),
    })
}

/// Which tensor of a layer a sweep refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Weights,
    Activations,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSweep {
    pub layer: usize,
    pub quantity: Quantity,
    pub bits: u32,
    pub result: QeSweepResult,
}

/// Sweep the weights and the eval-mode layer inputs of every quantized layer.
pub fn sweep_model(model: &QuantizedModel, x: &crate::tensor::Tensor) -> Result<Vec<LayerSweep>> {
    let tape = crate::tensor::Tape::new();
    let mut frozen = model.clone();
    let out = frozen.forward(&tape, x, crate::nn::Mode::Eval)?;
    let mut sweeps = Vec::new();
    for ((i, layer), vars) in model.layers().iter().enumerate().zip(&out.layers) {
        let (Some(ws), Some(xs)) = (layer.weight_spec, layer.act_spec) else { continue };
        let s_w = layer.weight_step.value;
        sweeps.push(LayerSweep {
            layer: i,
            quantity: Quantity::Weights,
            bits: ws.bits(),
            result: quant_error_sweep(layer.weight.data(), s_w, &ws, &default_grid(s_w))?,
        });
        let s_x = layer.act_step.value;
        let inputs = vars.input.value();
        sweeps.push(LayerSweep {
            layer: i,
            quantity: Quantity::Activations,
            bits: xs.bits(),
            result: quant_error_sweep(inputs.data(), s_x, &xs, &default_grid(s_x))?,
        });
    }
    Ok(sweeps)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSize {
    pub layer: usize,
    pub weights: usize,
    pub bits: u32,
}

/// Weight payload `⌈Σ N_W·b/8⌉` plus, separately, the 32-bit scalars each
/// quantized layer carries (two step sizes and a per-feature scale and
/// shift). Full precision layers count 32 bits per weight.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub layers: Vec<LayerSize>,
    pub payload_bytes: usize,
    pub overhead_bytes: usize,
}

fn size_of(layers: Vec<LayerSize>, outputs: &[usize], quantized: &[bool]) -> SizeReport {
    let bits: usize = layers.iter().map(|l| l.weights * l.bits as usize).sum();
    let overhead = outputs
        .iter()
        .zip(quantized)
        .map(|(&o, &q)| 4 * (2 * o + if q { 2 } else { 0 }))
        .sum();
    SizeReport {
        layers,
        payload_bytes: bits.div_ceil(8),
        overhead_bytes: overhead,
    }
}

pub fn model_size(model: &QuantizedModel) -> SizeReport {
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerSize {
            layer: i,
            weights: l.weight.numel(),
            bits: l.weight_spec.map_or(FULL_PRECISION, |s| s.bits()),
        })
        .collect();
    let outputs: Vec<usize> = model.layers().iter().map(|l| l.kind.outputs()).collect();
    let quantized: Vec<bool> = model.layers().iter().map(|l| l.is_quantized()).collect();
    size_of(layers, &outputs, &quantized)
}

pub fn int_model_size(im: &IntModel) -> SizeReport {
    let layers = im
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerSize {
            layer: i,
            weights: l.codes.data().len(),
            bits: l.weight_spec.bits(),
        })
        .collect();
    let outputs: Vec<usize> = im.layers.iter().map(|l| l.kind.outputs()).collect();
    size_of(layers, &outputs, &vec![true; outputs.len()])
}

/// Columns: `layer,bits,weights,grad_scale,r,step_rel,weight_rel,window`.
pub fn r_table(records: &[RRecord]) -> Result<Table> {
    let mut t = Table::new(
        "r-ratio",
        &["layer", "bits", "weights", "grad_scale", "r", "step_rel", "weight_rel", "window"],
    );
    for r in records {
        t.push(vec![
            r.layer.to_string(),
            r.bits.to_string(),
            r.weights.to_string(),
            r.grad_scale.label().to_string(),
            fmt_f64(r.r),
            fmt_f64(r.step_rel),
            fmt_f64(r.weight_rel),
            r.window.to_string(),
        ])?;
    }
    Ok(t)
}

/// Columns: `layer,quantity,bits,s_hat,metric,s_star,index,error,pct_diff`;
/// one row per metric, with empty fields where the KL surrogate is absent.
pub fn qe_table(sweeps: &[LayerSweep]) -> Result<Table> {
    let mut t = Table::new(
        "qe-sweep",
        &["layer", "quantity", "bits", "s_hat", "metric", "s_star", "index", "error", "pct_diff"],
    );
    for s in sweeps {
        let quantity = match s.quantity {
            Quantity::Weights => "weights",
            Quantity::Activations => "activations",
        };
        for (name, m) in [("mae", Some(&s.result.mae)), ("mse", Some(&s.result.mse)), ("kl", s.result.kl.as_ref())] {
            t.push(vec![
                s.layer.to_string(),
                quantity.to_string(),
                s.bits.to_string(),
                fmt_f64(s.result.s_hat),
                name.to_string(),
                fmt_opt(m.map(|m| m.s_star)),
                m.map_or_else(String::new, |m| m.index.to_string()),
                fmt_opt(m.map(|m| m.error)),
                fmt_opt(m.map(|m| m.pct_diff)),
            ])?;
        }
    }
    Ok(t)
}

/// One model in an accuracy-versus-size table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRow {
    pub name: String,
    pub precision: u32,
    pub payload_bytes: usize,
    pub overhead_bytes: usize,
    pub top1: f64,
    pub top5: f64,
}

/// Columns: `name,precision,payload_bytes,overhead_bytes,top1,top5`.
pub fn size_table(rows: &[SizeRow]) -> Result<Table> {
    let mut t = Table::new(
        "size-table",
        &["name", "precision", "payload_bytes", "overhead_bytes", "top1", "top5"],
    );
    for r in rows {
        t.push(vec![
            r.name.replace(',', "_"),
            r.precision.to_string(),
            r.payload_bytes.to_string(),
            r.overhead_bytes.to_string(),
            fmt_f64(r.top1),
            fmt_f64(r.top5),
        ])?;
    }
    Ok(t)
}

/// Write `<dir>/<stem>.csv` and `<dir>/<stem>.json`. An empty table is an
/// error and writes neither file.
pub fn emit_report(table: &Table, summary: &impl Serialize, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    table.write(&csv)?;
    write_json(&json, summary)?;
    Ok((csv, json))
}

#[cfg(test)]
mod tests;
