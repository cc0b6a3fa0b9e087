// Train a full precision MLP on synthetic digits, then fine-tune 4-bit and
// 2-bit copies initialised from it. Checkpoints round-trip through a file.

use lsq::data::DataConfig;
use lsq::nn::Checkpoint;
use lsq::train::{evaluate, train, RunConfig};
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

    let mut fp = build_model(&arch(32), 0)?;
    let out = train(&mut fp, &train_set, &test_set, &RunConfig { epochs: Some(3), ..Default::default() }, None)?;
    println!("fp   top1 {:.4}", out.metrics.last().unwrap().top1);

    let dir = std::env::temp_dir().join(format!("lsq-train-example-{}", std::process::id()));
    let path = dir.join("fp.ckpt");
    Checkpoint::new(fp).save(&path)?;
    let teacher = Checkpoint::load(&path)?.model;

    for bits in [4, 2] {
        let mut q = build_model(&arch(bits), 0)?;
        q.load_full_precision(&teacher)?;
        let cfg = RunConfig { epochs: Some(2), ..Default::default() };
        let out = train(&mut q, &train_set, &test_set, &cfg, None)?;
        let steps: Vec<String> = q
            .step_sizes()
            .iter()
            .flatten()
            .map(|(w, x)| format!("({w:.3}, {x:.3})"))
            .collect();
        println!(
            "{bits}-bit top1 {:.4}  step sizes (weight, activation) per layer: {}",
            evaluate(&q, &test_set)?.0,
            steps.join(" ")
        );
        println!("{}", out.metrics.table().to_csv().lines().nth(1).unwrap());
    }
    std::fs::remove_dir_all(dir).ok();
    Ok(())
}
