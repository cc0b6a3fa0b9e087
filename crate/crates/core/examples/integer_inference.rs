// Export a quantized CNN to integer form, run it with integer matrix
// products and compare against the training-path forward pass.

use lsq::data::synthetic_digits;
use lsq::infer::{check_equivalence, export_int, int_forward, IntModel};
use lsq::train::{train, RunConfig};
use lsq::{build_model, ModelConfig};

fn main() -> lsq::Result<()> {
    let data = synthetic_digits(600, 1)?;
    let (train_set, test_set) = data.split(500)?;
    let cfg = ModelConfig {
        channels: vec![4, 8],
        hidden: vec![32],
        ..ModelConfig::cnn(3)
    };
    let mut model = build_model(&cfg, 0)?;
    train(&mut model, &train_set, &test_set, &RunConfig { epochs: Some(1), ..Default::default() }, None)?;

    let im = export_int(&model)?;
    for (i, l) in im.layers.iter().enumerate() {
        println!(
            "layer {i}: {}-bit weights, {}-bit inputs, s_w {:.4}, s_x {:.4}, worst-case |acc| {}",
            l.weight_spec.bits(),
            l.act_spec.bits(),
            l.s_w,
            l.s_x,
            l.accumulator_bound()
        );
    }
    let bytes = im.to_bytes()?;
    let back = IntModel::from_bytes(&bytes)?;
    println!("file {} bytes, packed weights {} bytes", bytes.len(), back.packed_weight_bytes());

    let (x, labels) = test_set.batch(&(0..100).collect::<Vec<_>>())?;
    let logits = int_forward(&back, &x)?;
    println!("first logits row: {:?}", &logits.data()[..10]);
    println!("first label: {}", labels[0]);
    let report = check_equivalence(&model, &back, &x, 1e-5)?;
    println!(
        "max relative discrepancy {:.2e}, argmax agreement {:.3}, pass {}",
        report.max_rel_discrepancy, report.argmax_agreement, report.pass
    );
    Ok(())
}
