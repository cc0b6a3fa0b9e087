use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{build_model, Mode, ModelConfig};
use crate::tensor::Tape;

fn random_input(n: usize, features: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new([n, features], (0..n * features).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// A model with initialised activation steps and non-trivial norm state.
fn prepared(cfg: &ModelConfig, seed: u64) -> QuantizedModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_model(cfg, seed).unwrap();
    let tape = Tape::new();
    model.forward(&tape, &random_input(16, cfg.input_len(), &mut rng), Mode::Train).unwrap();
    for l in model.layers_mut() {
        if let Some(n) = &mut l.norm {
            n.gamma.data_mut().iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
            n.beta.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
        if let Some(b) = &mut l.bias {
            b.data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.3..0.3));
        }
    }
    model
}

fn small_mlp(bits: u32) -> ModelConfig {
    ModelConfig {
        input: [1, 4, 4],
        classes: 5,
        hidden: vec![12, 8],
        precision: bits,
        ..Default::default()
    }
}

fn small_cnn(bits: u32) -> ModelConfig {
    ModelConfig {
        arch: crate::nn::Arch::Cnn,
        input: [2, 8, 8],
        classes: 4,
        hidden: vec![10],
        channels: vec![3, 5],
        precision: bits,
        ..Default::default()
    }
}

#[test]
fn scalar_layer() {
    let layer = IntLayer {
        kind: LayerKind::Linear { inputs: 1, outputs: 1 },
        weight_spec: QuantSpec::weights(8).unwrap(),
        act_spec: QuantSpec::activations(8).unwrap(),
        s_w: 0.5,
        s_x: 1.0,
        codes: IntTensor::new([1, 1], vec![2], 128, 127).unwrap(),
        scale: vec![0.5],
        shift: vec![0.0],
        relu: false,
    };
    let im = IntModel {
        config: ModelConfig {
            input: [1, 1, 1],
            classes: 1,
            hidden: vec![],
            precision: 8,
            ..Default::default()
        },
        layers: vec![layer],
    };
    let y = int_forward(&im, &Tensor::new([1, 1], vec![3.0]).unwrap()).unwrap();
    assert_eq!(y.data(), &[3.0]);
}

#[test]
fn zero_input_gives_shift_only() {
    let cfg = ModelConfig {
        input: [1, 1, 6],
        classes: 3,
        hidden: vec![],
        precision: 4,
        ..Default::default()
    };
    let model = prepared(&cfg, 3);
    let im = export_int(&model).unwrap();
    let y = int_forward(&im, &Tensor::zeros([2, 6]).unwrap()).unwrap();
    let bias = model.layers()[0].bias.as_ref().unwrap().data();
    assert_eq!(&y.data()[..3], bias);
    assert_eq!(&y.data()[3..], bias);
}

#[test]
fn matches_training_path_on_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seed in 0..6 {
        for cfg in [small_mlp([2, 3, 4, 8][seed % 4]), small_cnn([2, 3, 4, 8][(seed + 1) % 4])] {
            let model = prepared(&cfg, seed as u64);
            let im = export_int(&model).unwrap();
            let x = random_input(64, cfg.input_len(), &mut rng);
            let report = check_equivalence(&model, &im, &x, 1e-5).unwrap();
            assert!(report.pass, "{cfg:?}: {report:?}");
            assert!(report.max_rel_discrepancy < 1e-12);
        }
    }
}

#[test]
fn grid_weights_export_exactly() {
    let mut model = prepared(&small_mlp(4), 1);
    let l = &mut model.layers_mut()[1];
    let s = 0.125;
    l.weight_step.value = s;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    l.weight.data_mut().iter_mut().for_each(|w| *w = rng.gen_range(-8i32..=7) as f64 * s);
    let im = export_int(&model).unwrap();
    let w = model.layers()[1].weight.data();
    let (fan_in, out) = (12, 8);
    for o in 0..out {
        for i in 0..fan_in {
            assert_eq!(im.layers[1].codes.data()[o * fan_in + i] as f64, w[i * out + o] / s);
        }
    }
}

#[test]
fn export_is_deterministic_and_within_bounds() {
    let model = prepared(&small_cnn(2), 4);
    let a = export_int(&model).unwrap().to_bytes().unwrap();
    let b = export_int(&model).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
    let im = export_int(&model).unwrap();
    for l in &im.layers {
        let bound = l.weight_spec.q_n().max(l.weight_spec.q_p());
        assert!(l.codes.data().iter().all(|c| c.abs() <= bound));
        assert!(l.accumulator_bound() <= i32::MAX as i64);
    }
    assert_eq!(im.layers.iter().map(|l| l.weight_spec.bits()).collect::<Vec<_>>(), vec![8, 2, 2, 8]);
}

#[test]
fn file_round_trip_and_packed_size() {
    for cfg in [small_mlp(3), small_cnn(2)] {
        let im = export_int(&prepared(&cfg, 5)).unwrap();
        let bytes = im.to_bytes().unwrap();
        let back = IntModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, im);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let bits: usize = im.layers.iter().map(|l| l.codes.data().len() * l.weight_spec.bits() as usize).sum();
        assert_eq!(im.packed_weight_bytes(), bits.div_ceil(8));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.lsqint");
        im.save(&p).unwrap();
        assert_eq!(IntModel::load(&p).unwrap(), im);
    }
}

#[test]
fn corrupt_exports_are_rejected() {
    let im = export_int(&prepared(&small_mlp(2), 6)).unwrap();
    let bytes = im.to_bytes().unwrap();
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let mut flipped = bytes.clone();
    flipped[20 + header_len] ^= 0b11;
    assert!(matches!(IntModel::from_bytes(&flipped), Err(Error::Export(_))));
    assert!(matches!(IntModel::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Export(_))));
    let mut magic = bytes.clone();
    magic[3] = 0;
    assert!(matches!(IntModel::from_bytes(&magic), Err(Error::Export(_))));
}

#[test]
fn perturbed_weight_is_detected() {
    let cfg = ModelConfig {
        input: [1, 1, 2],
        classes: 2,
        hidden: vec![],
        precision: 8,
        ..Default::default()
    };
    let mut model = build_model(&cfg, 0).unwrap();
    {
        let l = &mut model.layers_mut()[0];
        l.weight = Tensor::new([2, 2], vec![0.5, 0.5, 0.25, 0.25]).unwrap();
        l.weight_step.value = 1.0 / 64.0;
        l.act_step.value = 1.0 / 32.0;
        l.act_step.initialized = true;
        // Class 1 wins by a margin smaller than one weight code step.
        l.bias = Some(Tensor::new([2], vec![0.0, 1e-4]).unwrap());
    }
    let x = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let mut im = export_int(&model).unwrap();
    assert!(check_equivalence(&model, &im, &x, 1e-5).unwrap().pass);
    im.layers[0].codes = IntTensor::new([2, 2], {
        let mut c = im.layers[0].codes.data().to_vec();
        c[0] += 1;
        c
    }, 128, 127)
    .unwrap();
    let report = check_equivalence(&model, &im, &x, 1e-5).unwrap();
    assert!(!report.pass);
    assert_eq!(report.argmax_agreement, 0.0);
}

#[test]
fn zero_tolerance_flags_any_roundoff() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = prepared(&small_mlp(4), 7);
    let im = export_int(&model).unwrap();
    let x = random_input(128, 16, &mut rng);
    let r = check_equivalence(&model, &im, &x, 0.0).unwrap();
    // Float rescale differs from the float path by roundoff only, so a zero
    // tolerance passes exactly when no roundoff occurred at all.
    assert_eq!(r.pass, r.max_rel_discrepancy == 0.0);
    assert!(r.max_rel_discrepancy < 1e-12);
    assert_eq!(r.argmax_agreement, 1.0);
}

#[test]
fn export_errors() {
    let fp = build_model(&ModelConfig::mlp(32), 0).unwrap();
    assert!(matches!(export_int(&fp), Err(Error::Export(_))));
    let fresh = build_model(&ModelConfig::mlp(2), 0).unwrap();
    assert!(matches!(export_int(&fresh), Err(Error::Export(_))));
    let im = export_int(&prepared(&small_mlp(2), 0)).unwrap();
    assert!(matches!(int_forward(&im, &Tensor::zeros([1, 5]).unwrap()), Err(Error::Dimension(_))));
}

#[test]
fn wide_codes_overflow_is_reported() {
    let w = QuantSpec::weights(16).unwrap();
    let a = QuantSpec::activations(16).unwrap();
    let layer = IntLayer {
        kind: LayerKind::Linear { inputs: 2, outputs: 1 },
        weight_spec: w,
        act_spec: a,
        s_w: 1.0,
        s_x: 1.0,
        codes: IntTensor::new([1, 2], vec![w.q_p(), w.q_p()], w.q_n(), w.q_p()).unwrap(),
        scale: vec![1.0],
        shift: vec![0.0],
        relu: false,
    };
    assert!(layer.accumulator_bound() > i32::MAX as i64);
    let im = IntModel {
        config: ModelConfig {
            input: [1, 1, 2],
            classes: 1,
            hidden: vec![],
            precision: 8,
            ..Default::default()
        },
        layers: vec![layer],
    };
    let x = Tensor::new([1, 2], vec![65535.0, 65535.0]).unwrap();
    assert!(matches!(int_forward(&im, &x), Err(Error::Export(_))));
}

proptest! {
    #[test]
    fn integer_product_identity(
        seed in any::<u64>(),
        bits in prop::sample::select(vec![2u32, 3, 4, 8]),
        k in 1usize..40,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, n) = (3, 4);
        let w = Tensor::new([n, k], (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let x = Tensor::new([m, k], (0..m * k).map(|_| rng.gen_range(0.0..2.0)).collect()).unwrap();
        let (s_w, s_x) = (rng.gen_range(0.01..0.5), rng.gen_range(0.01..0.5));
        let (wbar, what) = quantize_forward(&w, s_w, &QuantSpec::weights(bits).unwrap()).unwrap();
        let (xbar, xhat) = quantize_forward(&x, s_x, &QuantSpec::activations(bits).unwrap()).unwrap();
        let acc = gemm_i32_nt(m, k, n, xbar.data(), wbar.data()).unwrap();
        for i in 0..m {
            for j in 0..n {
                let float: f64 = (0..k).map(|p| xhat.data()[i * k + p] * what.data()[j * k + p]).sum();
                let int = acc[i * n + j] as f64 * s_w * s_x;
                prop_assert!((int - float).abs() <= 1e-6 * float.abs().max(1e-12) + 1e-15);
            }
        }
    }
}
