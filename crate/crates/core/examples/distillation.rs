// Fine-tune a 2-bit student with soft targets from its full precision
// teacher and compare with plain fine-tuning.

use lsq::data::DataConfig;
use lsq::train::{train, RunConfig};
use lsq::{build_model, ModelConfig};

fn main() -> lsq::Result<()> {
    let (train_set, test_set) = DataConfig {
        train_size: 1500,
        test_size: 500,
        ..Default::default()
    }
    .load()?;
    let arch = |precision| ModelConfig {
        hidden: vec![64, 32],
        ..ModelConfig::mlp(precision)
    };
    let mut teacher = build_model(&arch(32), 0)?;
    let out = train(&mut teacher, &train_set, &test_set, &RunConfig { epochs: Some(3), ..Default::default() }, None)?;
    println!("teacher top1 {:.4}", out.metrics.last().unwrap().top1);

    for distill in [false, true] {
        let mut student = build_model(&arch(2), 0)?;
        student.load_full_precision(&teacher)?;
        let cfg = RunConfig {
            epochs: Some(2),
            distill,
            distill_weight: 0.5,
            temperature: 2.0,
            ..Default::default()
        };
        let out = train(&mut student, &train_set, &test_set, &cfg, Some(&teacher))?;
        println!("2-bit distill={distill} top1 {:.4}", out.metrics.last().unwrap().top1);
    }
    Ok(())
}
