use proptest::prelude::*;

use super::*;
use crate::quant::{init_step_size, quantize_forward};
use crate::tensor::round_half_even;

fn single_layer(inputs: usize, classes: usize, precision: u32) -> ModelConfig {
    ModelConfig {
        input: [1, 1, inputs],
        classes,
        hidden: vec![],
        precision,
        ..Default::default()
    }
}

fn sample_input(n: usize, features: usize, seed: u64) -> Tensor {
    let mut state = seed;
    let data = (0..n * features)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    Tensor::new([n, features], data).unwrap()
}

#[test]
fn identity_weights_on_grid_are_exact() {
    let mut model = build_model(&single_layer(3, 3, 8), 1).unwrap();
    let layer = &mut model.layers_mut()[0];
    layer.weight = Tensor::new([3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    layer.weight_step.value = 1.0 / 64.0;
    layer.act_step.value = 1.0 / 16.0;
    layer.act_step.initialized = true;
    let x = Tensor::from_rows(&[&[0.0, 3.0 / 16.0, 255.0 / 16.0], &[1.0, 0.5, 2.0]]).unwrap();
    let y = model.logits(&x).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn zero_weights_give_zero_preactivation() {
    let mut model = build_model(&single_layer(4, 2, 4), 1).unwrap();
    let layer = &mut model.layers_mut()[0];
    layer.weight = Tensor::zeros([4, 2]).unwrap();
    layer.init_weight_step(GradScale::default(), 1.0).unwrap();
    let x = sample_input(3, 4, 7);
    let tape = Tape::new();
    let out = model.forward(&tape, &x, Mode::Train).unwrap();
    assert!(out.logits.value().data().iter().all(|&v| v == 0.0));
}

fn quantize_values(v: &[f64], s: f64, spec: &QuantSpec) -> Vec<f64> {
    v.iter()
        .map(|&x| round_half_even((x / s).clamp(-(spec.q_n() as f64), spec.q_p() as f64)) * s)
        .collect()
}

fn matmul(x: &[f64], w: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|p| x[i * k + p] * w[p * m + j]).sum();
        }
    }
    out
}

#[test]
fn forward_matches_manual_composition() {
    let cfg = ModelConfig {
        input: [1, 2, 3],
        classes: 4,
        hidden: vec![5],
        precision: 3,
        ..Default::default()
    };
    let mut model = build_model(&cfg, 11).unwrap();
    let x = sample_input(6, 6, 3);
    // First call initialises the activation step sizes.
    let tape = Tape::new();
    model.forward(&tape, &x, Mode::Eval).unwrap();
    for (i, l) in model.layers_mut().iter_mut().enumerate() {
        if let Some(n) = &mut l.norm {
            n.running_mean = (0..5).map(|c| 0.1 * c as f64 - i as f64).collect();
            n.running_var = (0..5).map(|c| 0.5 + c as f64).collect();
            n.gamma = Tensor::new([5], vec![1.0, 0.5, 2.0, -1.0, 0.7]).unwrap();
            n.beta = Tensor::new([5], vec![0.1, 0.0, -0.2, 0.3, 0.05]).unwrap();
        }
    }
    let got = model.logits(&x).unwrap();

    let mut h = x.data().to_vec();
    let mut k = 6;
    for l in model.layers() {
        let m = l.kind.outputs();
        let xq = quantize_values(&h, l.act_step.value, l.act_spec.as_ref().unwrap());
        let wq = quantize_values(l.weight.data(), l.weight_step.value, l.weight_spec.as_ref().unwrap());
        let mut y = matmul(&xq, &wq, 6, k, m);
        if let Some(b) = &l.bias {
            for (i, v) in y.iter_mut().enumerate() {
                *v += b.data()[i % m];
            }
        }
        if let Some(n) = &l.norm {
            for (i, v) in y.iter_mut().enumerate() {
                let c = i % m;
                *v = (*v - n.running_mean[c]) / (n.running_var[c] + n.eps).sqrt() * n.gamma.data()[c] + n.beta.data()[c];
            }
        }
        if l.relu {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = y;
        k = m;
    }
    assert_eq!(got.shape(), &[6, 4]);
    for (a, b) in got.data().iter().zip(&h) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn quantize_forward_agrees_with_layer_weights() {
    let model = build_model(&ModelConfig::mlp(2), 5).unwrap();
    let l = &model.layers()[1];
    let spec = l.weight_spec.unwrap();
    let (codes, vhat) = quantize_forward(&l.weight, l.weight_step.value, &spec).unwrap();
    assert!(codes.data().iter().all(|&c| (-2..=1).contains(&c)));
    assert_eq!(vhat.data(), quantize_values(l.weight.data(), l.weight_step.value, &spec).as_slice());
}

#[test]
fn precision_policy_examples() {
    assert_eq!(ModelConfig::mlp(2).layer_precisions(), vec![8, 2, 8]);
    assert_eq!(single_layer(4, 3, 2).layer_precisions(), vec![8]);
    assert_eq!(ModelConfig::mlp(8).layer_precisions(), vec![8, 8, 8]);
    assert_eq!(ModelConfig::cnn(3).layer_precisions(), vec![8, 3, 3, 8]);
    assert_eq!(ModelConfig::mlp(FULL_PRECISION).layer_precisions(), vec![32, 32, 32]);

    let model = build_model(&ModelConfig::mlp(2), 0).unwrap();
    let bits: Vec<_> = model.layers().iter().map(|l| l.weight_spec.unwrap().bits()).collect();
    assert_eq!(bits, vec![8, 2, 8]);
    for l in model.layers() {
        assert!(l.weight_spec.unwrap().signed());
        assert!(!l.act_spec.unwrap().signed());
        assert!(l.weight_step.initialized);
        assert!(!l.act_step.initialized);
    }
}

#[test]
fn unsupported_precision_is_config_error() {
    for b in [0, 1, 5, 16] {
        let err = build_model(&ModelConfig::mlp(b), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{b}: {err}");
    }
}

proptest! {
    #[test]
    fn only_boundary_layers_are_eight_bit(
        hidden in prop::collection::vec(1usize..20, 0..5),
        b in prop::sample::select(vec![2u32, 3, 4]),
        cnn in any::<bool>(),
    ) {
        let cfg = ModelConfig {
            arch: if cnn { Arch::Cnn } else { Arch::Mlp },
            input: [1, 8, 8],
            hidden,
            precision: b,
            ..Default::default()
        };
        let model = build_model(&cfg, 0).unwrap();
        let n = model.layers().len();
        for (i, l) in model.layers().iter().enumerate() {
            let bits = l.weight_spec.unwrap().bits();
            let boundary = i == 0 || i + 1 == n;
            prop_assert_eq!(bits == 8, boundary);
            prop_assert_eq!(l.act_spec.unwrap().bits(), bits);
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut model = build_model(&ModelConfig::cnn(4), 3).unwrap();
    let x = sample_input(4, 784, 9);
    let tape = Tape::new();
    model.forward(&tape, &x, Mode::Train).unwrap();
    let a = model.logits(&x).unwrap();
    let b = model.logits(&x).unwrap();
    assert_eq!(a.shape(), &[4, 10]);
    assert_eq!(a, b);
    let again = build_model(&ModelConfig::cnn(4), 3).unwrap();
    assert_eq!(again.layers()[0].weight, model.layers()[0].weight);
}

#[test]
fn wrong_input_size_is_dimension_error() {
    let mut model = build_model(&ModelConfig::mlp(4), 0).unwrap();
    let tape = Tape::new();
    let err = model.forward(&tape, &sample_input(2, 100, 0), Mode::Train).err().unwrap();
    assert!(matches!(err, Error::Dimension(_)));
}

#[test]
fn logits_require_initialised_activation_steps() {
    let model = build_model(&ModelConfig::mlp(4), 0).unwrap();
    assert!(matches!(model.logits(&sample_input(1, 784, 0)), Err(Error::Usage(_))));
}

#[test]
fn training_forward_updates_running_statistics() {
    let mut model = build_model(&ModelConfig::mlp(FULL_PRECISION), 0).unwrap();
    let tape = Tape::new();
    model.forward(&tape, &sample_input(8, 784, 1), Mode::Train).unwrap();
    let norm = model.layers()[0].norm.as_ref().unwrap();
    assert!(norm.running_mean.iter().any(|&m| m != 0.0));
    let before = model.clone();
    let tape = Tape::new();
    model.forward(&tape, &sample_input(8, 784, 1), Mode::Eval).unwrap();
    assert_eq!(before, model);
}

#[test]
fn param_vars_line_up_with_params() {
    for cfg in [ModelConfig::mlp(2), ModelConfig::cnn(FULL_PRECISION)] {
        let mut model = build_model(&cfg, 0).unwrap();
        let tape = Tape::new();
        let out = model.forward(&tape, &sample_input(2, 784, 0), Mode::Train).unwrap();
        let vars = out.param_vars();
        let layout = model.param_layout();
        let params = model.params_mut();
        assert_eq!(vars.len(), params.len());
        assert_eq!(layout, params.iter().map(|p| (p.layer, p.kind)).collect::<Vec<_>>());
        for (v, p) in vars.iter().zip(&params) {
            assert_eq!(v.shape().iter().product::<usize>(), p.value.len(), "{}", p.name);
        }
    }
}

#[test]
fn set_grad_scale_updates_factors() {
    let mut model = build_model(&ModelConfig::mlp(2), 0).unwrap();
    model.set_grad_scale(GradScale::None, 10.0).unwrap();
    assert!(model.layers().iter().all(|l| l.weight_step.g == 10.0));
    model.set_grad_scale(GradScale::CountLevels, 1.0).unwrap();
    let l = &model.layers()[1];
    assert_eq!(l.weight_step.g, 1.0 / ((256 * 128) as f64).sqrt());
    let tape = Tape::new();
    model.forward(&tape, &sample_input(2, 784, 0), Mode::Train).unwrap();
    assert_eq!(model.layers()[1].act_step.g, 1.0 / ((256 * 3) as f64).sqrt());
}

#[test]
fn load_full_precision_reinitialises_steps() {
    let mut fp = build_model(&ModelConfig::mlp(FULL_PRECISION), 4).unwrap();
    let x = sample_input(16, 784, 2);
    let tape = Tape::new();
    fp.forward(&tape, &x, Mode::Train).unwrap();
    let mut q = build_model(&ModelConfig::mlp(8), 99).unwrap();
    q.load_full_precision(&fp).unwrap();
    for (lq, lf) in q.layers().iter().zip(fp.layers()) {
        assert_eq!(lq.weight, lf.weight);
        assert_eq!(lq.norm, lf.norm);
        let q_p = lq.weight_spec.unwrap().q_p();
        assert_eq!(lq.weight_step.value, init_step_size(&lf.weight, q_p).unwrap());
        let mean_abs = lf.weight.mean_abs();
        assert!((lq.weight_step.value - 2.0 * mean_abs / (q_p as f64).sqrt()).abs() < 1e-15);
        assert!(!lq.act_step.initialized);
    }
    let tape = Tape::new();
    q.forward(&tape, &x, Mode::Eval).unwrap();
    let a = q.logits(&x).unwrap();
    let b = fp.logits(&x).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
    assert!(diff > 0.0 && diff < 0.1 * b.l2_norm(), "diff {diff}");

    let mut other = build_model(&ModelConfig::cnn(8), 0).unwrap();
    assert!(matches!(other.load_full_precision(&fp), Err(Error::Checkpoint(_))));
    let mut narrow = build_model(&ModelConfig { hidden: vec![256, 64], ..ModelConfig::mlp(8) }, 0).unwrap();
    assert!(matches!(narrow.load_full_precision(&fp), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = build_model(&ModelConfig::cnn(3), 8).unwrap();
    let x = sample_input(5, 784, 4);
    let tape = Tape::new();
    model.forward(&tape, &x, Mode::Train).unwrap();
    model.set_grad_scale(GradScale::Count, 0.1).unwrap();
    let mut ck = Checkpoint::new(model);
    ck.epoch = 7;
    ck.extra.insert("velocity.0".into(), vec![0.1, -2.5e-300, f64::MIN_POSITIVE]);
    ck.meta = serde_json::json!({"dataset": "digits"});
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.model.logits(&x).unwrap().data(), ck.model.logits(&x).unwrap().data());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub/model.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = build_model(&ModelConfig::mlp(4), 0).unwrap();
    let bytes = Checkpoint::new(model).to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    let truncated = &bytes[..bytes.len() - 8];
    let mut trailing = bytes.clone();
    trailing.push(0);
    for b in [&bad_magic[..], &bad_version[..], truncated, &trailing[..], &bytes[..10]] {
        assert!(matches!(Checkpoint::from_bytes(b), Err(Error::Checkpoint(_))));
    }
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
}

#[test]
fn config_hash_tracks_config() {
    assert_eq!(config_hash(&ModelConfig::mlp(2)), config_hash(&ModelConfig::mlp(2)));
    assert_ne!(config_hash(&ModelConfig::mlp(2)), config_hash(&ModelConfig::mlp(3)));
    assert_eq!(config_hash(&ModelConfig::mlp(2)).len(), 16);
}
