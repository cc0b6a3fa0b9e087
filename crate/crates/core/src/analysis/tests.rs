use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::gaussian_blobs;
use crate::nn::{build_model, ModelConfig};
use crate::tensor::Tensor;

fn half_even(x: f64) -> f64 {
    let f = x.floor();
    match (x - f).partial_cmp(&0.5).unwrap() {
        std::cmp::Ordering::Less => f,
        std::cmp::Ordering::Greater => f + 1.0,
        std::cmp::Ordering::Equal => f + (f % 2.0).abs(),
    }
}

/// Brute-force KL surrogate written against the definition: locate each
/// value's cell by scanning the atoms.
fn kl_oracle(values: &[f64], s: f64, q_n: i32, q_p: i32) -> Option<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return None;
    }
    let mut cells = Vec::new();
    for j in -q_n..=q_p {
        let a = if j == -q_n { lo } else { ((j as f64 - 0.5) * s).max(lo) };
        let b = if j == q_p { hi } else { ((j as f64 + 0.5) * s).min(hi) };
        let count = values
            .iter()
            .filter(|&&v| half_even((v / s).clamp(-q_n as f64, q_p as f64)) as i32 == j)
            .count();
        cells.push((b - a, count));
    }
    let live = cells.iter().filter(|(w, _)| *w > 0.0).count() as f64;
    let n = values.len() as f64;
    let sum: f64 = cells
        .iter()
        .filter(|(_, c)| *c > 0)
        .map(|&(w, c)| c as f64 * ((c as f64 + 1.0) / (n + live) / w).ln())
        .sum();
    Some(-sum / n)
}

#[test]
fn sweep_matches_exhaustive_oracle_on_two_points() {
    let values = [-1.0, 1.0, -1.0, 1.0];
    let spec = QuantSpec::new(2, false).unwrap();
    let grid = default_grid(0.5);
    let res = quant_error_sweep(&values, 0.5, &spec, &grid).unwrap();
    let mut mae = (0, f64::INFINITY);
    let mut mse = (0, f64::INFINITY);
    let mut kl = (0, f64::INFINITY);
    for (i, &s) in grid.iter().enumerate() {
        let q = |v: f64| half_even((v / s).clamp(0.0, 3.0)) * s;
        let a = values.iter().map(|&v| (q(v) - v).abs()).sum::<f64>() / 4.0;
        let m = values.iter().map(|&v| (q(v) - v).powi(2)).sum::<f64>() / 4.0;
        let k = kl_oracle(&values, s, 0, 3).unwrap();
        if a < mae.1 {
            mae = (i, a);
        }
        if m < mse.1 {
            mse = (i, m);
        }
        if k < kl.1 {
            kl = (i, k);
        }
    }
    assert_eq!(res.mae.index, mae.0);
    assert_eq!(res.mse.index, mse.0);
    assert_eq!(res.kl.as_ref().unwrap().index, kl.0);
    // −1 always clips to 0; the first grid step representing 1 exactly is 0.5.
    assert_eq!(res.mae.s_star, grid[99]);
    assert_eq!(res.mae.error, 0.5);
}

#[test]
fn errors_match_direct_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let values: Vec<f64> = (0..500).map(|_| rng.gen_range(-2.0..2.0)).collect();
    for bits in [2, 3, 4, 8] {
        let spec = QuantSpec::weights(bits).unwrap();
        for s in [0.01, 0.1, 0.37, 1.5] {
            let (mae, mse, kl) = quant_errors(&values, s, &spec);
            let (q_n, q_p) = (spec.q_n(), spec.q_p());
            let q: Vec<f64> = values
                .iter()
                .map(|&v| round_half_even((v / s).clamp(-q_n as f64, q_p as f64)) * s)
                .collect();
            let a = values.iter().zip(&q).map(|(v, q)| (q - v).abs()).sum::<f64>() / 500.0;
            let m = values.iter().zip(&q).map(|(v, q)| (q - v).powi(2)).sum::<f64>() / 500.0;
            assert!((mae - a).abs() < 1e-12);
            assert!((mse - m).abs() < 1e-12);
            assert!((kl.unwrap() - kl_oracle(&values, s, q_n, q_p).unwrap()).abs() < 1e-9);
        }
    }
}

#[test]
fn ties_go_to_the_smallest_step() {
    // 1/3, 1/2 and 1 all represent {0, 1} exactly; 1/4 clips 1 to 3/4.
    let values = [0.0, 1.0];
    let spec = QuantSpec::new(2, false).unwrap();
    let grid = [0.25, 1.0 / 3.0, 0.5, 1.0, 2.0];
    let res = quant_error_sweep(&values, 1.0, &spec, &grid).unwrap();
    assert_eq!(res.mae.index, 1);
    assert_eq!(res.mae.error, 0.0);
    assert_eq!(res.mse.index, 1);
}

#[test]
fn constant_values_have_no_kl() {
    let spec = QuantSpec::weights(4).unwrap();
    let res = quant_error_sweep(&[0.3; 10], 0.1, &spec, &default_grid(0.1)).unwrap();
    assert!(res.kl.is_none());
    assert!(res.mae.error < 1e-12);
}

#[test]
fn sweep_rejects_bad_input() {
    let spec = QuantSpec::weights(4).unwrap();
    assert!(matches!(quant_error_sweep(&[], 1.0, &spec, &[1.0]), Err(Error::Data(_))));
    assert!(matches!(quant_error_sweep(&[1.0], 1.0, &spec, &[]), Err(Error::Data(_))));
    assert!(matches!(quant_error_sweep(&[1.0], 1.0, &spec, &[0.0]), Err(Error::Argument(_))));
}

#[test]
fn replicated_sample_moves_kl_argmin_by_at_most_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
    let values: Vec<f64> = (0..400).map(|_| rng.sample(normal)).collect();
    let big: Vec<f64> = values.iter().cycle().take(4000).cloned().collect();
    let spec = QuantSpec::weights(3).unwrap();
    let grid = default_grid(0.5);
    let a = quant_error_sweep(&values, 0.5, &spec, &grid).unwrap().kl.unwrap();
    let b = quant_error_sweep(&big, 0.5, &spec, &grid).unwrap().kl.unwrap();
    assert!(a.index.abs_diff(b.index) <= 1, "{} vs {}", a.index, b.index);
}

#[test]
fn r_ratio_examples() {
    assert_eq!(r_ratio(0.2, 0.5, &[3.0, 4.0], &[0.0, 10.0]), Some((0.2 / 0.5) / 0.5));
    assert_eq!(r_ratio(-0.2, 0.5, &[3.0, 4.0], &[0.0, 10.0]), Some(0.8));
    assert_eq!(r_ratio(1.0, 1.0, &[0.0], &[1.0]), None);
    assert_eq!(r_ratio(1.0, 1.0, &[1.0], &[0.0]), None);
}

fn blob_setup(precision: u32) -> (QuantizedModel, Dataset) {
    let data = gaussian_blobs(256, 8, 4, 3.0, 1).unwrap();
    let cfg = ModelConfig {
        input: [1, 1, 8],
        classes: 4,
        hidden: vec![16, 16],
        precision,
        signed_input: true,
        ..Default::default()
    };
    (build_model(&cfg, 2).unwrap(), data)
}

#[test]
fn measured_r_scales_with_the_factor_of_each_setting() {
    let (mut model, data) = blob_setup(4);
    let cfg = RunConfig { batch_size: 32, ..Default::default() };
    let scales = [GradScale::None, GradScale::Count, GradScale::CountLevels];
    let recs = measure_r(&mut model, &data, &cfg, 3, 5, &scales).unwrap();
    assert_eq!(recs.len(), 3 * 3);
    for chunk in recs.chunks(3) {
        let (n, q_p) = (chunk[0].weights, QuantSpec::weights(chunk[0].bits).unwrap().q_p());
        assert_eq!(chunk[0].window, 5);
        assert!(chunk[0].r > 0.0);
        let ratio = chunk[2].r / chunk[0].r;
        assert!((ratio - 1.0 / ((n * q_p as usize) as f64).sqrt()).abs() < 1e-12 * ratio);
        assert!((chunk[1].r / chunk[0].r - 1.0 / (n as f64).sqrt()).abs() < 1e-12);
        assert_eq!(chunk[0].weight_rel, chunk[2].weight_rel);
    }
    assert!(matches!(measure_r(&mut model, &data, &cfg, 0, 0, &scales), Err(Error::Config(_))));
}

#[test]
fn step_gradient_is_linear_in_the_scale() {
    let (model, data) = blob_setup(2);
    let (x, labels) = data.batch(&(0..64).collect::<Vec<_>>()).unwrap();
    let layout = model.param_layout();
    let steps: Vec<usize> = (0..layout.len()).filter(|&i| layout[i].1 == ParamKind::WeightStep).collect();
    let grads = |mult: f64| {
        let mut m = model.clone();
        m.set_grad_scale(GradScale::None, mult).unwrap();
        let (_, g) = compute_gradients(&mut m, &x, &labels, None).unwrap();
        steps.iter().map(|&i| g[i].data()[0]).collect::<Vec<_>>()
    };
    let (one, three) = (grads(1.0), grads(3.0));
    for (a, b) in one.iter().zip(&three) {
        assert!((b - 3.0 * a).abs() <= 1e-12 * a.abs().max(1e-300), "{a} {b}");
    }
}

#[test]
fn zero_weights_are_skipped() {
    let (mut model, data) = blob_setup(4);
    model.layers_mut()[1].weight = Tensor::zeros([16, 16]).unwrap();
    model.layers_mut()[1].weight_step.value = 0.1;
    let cfg = RunConfig { batch_size: 32, lr0: Some(0.0), ..Default::default() };
    let recs = measure_r(&mut model, &data, &cfg, 0, 2, &[GradScale::None]).unwrap();
    // A zeroed layer also blocks every other layer's weight gradient.
    assert!(recs.is_empty());
}

#[test]
fn size_accounting() {
    let cfg = ModelConfig::mlp(2);
    let model = build_model(&cfg, 0).unwrap();
    let size = model_size(&model);
    let bits = 784 * 256 * 8 + 256 * 128 * 2 + 128 * 10 * 8;
    assert_eq!(size.payload_bytes, bits / 8);
    assert_eq!(size.overhead_bytes, 4 * ((2 * 256 + 2) + (2 * 128 + 2) + (2 * 10 + 2)));

    let fp = model_size(&build_model(&ModelConfig::mlp(32), 0).unwrap());
    assert_eq!(fp.payload_bytes, (784 * 256 + 256 * 128 + 128 * 10) * 4);

    let (mut small, data) = blob_setup(3);
    let (x, _) = data.batch(&[0, 1, 2, 3]).unwrap();
    let tape = crate::tensor::Tape::new();
    small.forward(&tape, &x, crate::nn::Mode::Train).unwrap();
    let im = crate::infer::export_int(&small).unwrap();
    let from_int = int_model_size(&im);
    assert_eq!(from_int, model_size(&small));
    assert_eq!(from_int.payload_bytes, im.packed_weight_bytes());
}

#[test]
fn model_sweep_covers_weights_and_inputs() {
    let (mut model, data) = blob_setup(2);
    let cfg = RunConfig { batch_size: 32, epochs: Some(1), ..Default::default() };
    crate::train::train(&mut model, &data, &data, &cfg, None).unwrap();
    let (x, _) = data.batch(&(0..64).collect::<Vec<_>>()).unwrap();
    let sweeps = sweep_model(&model, &x).unwrap();
    assert_eq!(sweeps.len(), 6);
    assert_eq!(sweeps[1].quantity, Quantity::Activations);
    assert_eq!(sweeps[2].bits, 2);
    for s in &sweeps {
        assert_eq!(s.result.grid_len, 2000);
    }
    let t = qe_table(&sweeps).unwrap();
    assert_eq!(t.rows.len(), 18);
}

#[test]
fn reports_are_written_and_empty_ones_refused() {
    let dir = tempfile::tempdir().unwrap();
    let rec = RRecord {
        layer: 0,
        bits: 2,
        weights: 4,
        grad_scale: GradScale::None,
        r: 12.5,
        step_rel: 0.5,
        weight_rel: 0.04,
        window: 3,
    };
    let t = r_table(std::slice::from_ref(&rec)).unwrap();
    let (csv, json) = emit_report(&t, &[rec], dir.path(), "r").unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(
        text,
        "# lsq-report/1 kind=r-ratio\nlayer,bits,weights,grad_scale,r,step_rel,weight_rel,window\n0,2,4,none,12.5,0.5,0.04,3\n"
    );
    assert!(std::fs::read_to_string(json).unwrap().contains("\"grad_scale\": \"none\""));

    let empty = r_table(&[]).unwrap();
    assert!(emit_report(&empty, &(), dir.path(), "e").is_err());
    assert!(!dir.path().join("e.csv").exists());
    assert!(!dir.path().join("e.json").exists());
}

proptest! {
    #[test]
    fn sweep_minimum_is_a_true_minimum(
        values in prop::collection::vec(-3.0f64..3.0, 2..40),
        bits in prop::sample::select(vec![2u32, 3, 4]),
    ) {
        let spec = QuantSpec::weights(bits).unwrap();
        let grid: Vec<f64> = (1..=60).map(|k| k as f64 * 0.05).collect();
        let res = quant_error_sweep(&values, 1.0, &spec, &grid).unwrap();
        for (i, &s) in grid.iter().enumerate() {
            let (mae, mse, _) = quant_errors(&values, s, &spec);
            prop_assert!(mae >= res.mae.error);
            prop_assert!(mse >= res.mse.error);
            if i < res.mae.index {
                prop_assert!(mae > res.mae.error);
            }
        }
    }
}
