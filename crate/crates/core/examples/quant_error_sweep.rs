// Compare a learned step size with the step sizes minimizing three
// quantization error metrics.

use lsq::analysis::{default_grid, quant_error_sweep, sweep_model};
use lsq::data::DataConfig;
use lsq::train::{train, RunConfig};
use lsq::{build_model, ModelConfig, QuantSpec};

fn main() -> lsq::Result<()> {
    // Evenly spread values with a hand-picked step size.
    let values: Vec<f64> = (0..2000).map(|i| ((i as f64 + 0.5) / 2000.0 - 0.5) * 4.0).collect();
    let spec = QuantSpec::weights(3)?;
    let res = quant_error_sweep(&values, 0.5, &spec, &default_grid(0.5))?;
    println!("uniform on [-2, 2], 3-bit, s_hat 0.5:");
    println!("  mae s* {:.3}  mse s* {:.3}  kl s* {:.3}", res.mae.s_star, res.mse.s_star, res.kl.unwrap().s_star);

    // Every layer of a briefly trained 2-bit model.
    let (train_set, test_set) = DataConfig {
        train_size: 1000,
        test_size: 200,
        ..Default::default()
    }
    .load()?;
    let cfg = ModelConfig {
        hidden: vec![32, 32],
        ..ModelConfig::mlp(2)
    };
    let mut model = build_model(&cfg, 0)?;
    train(&mut model, &train_set, &test_set, &RunConfig { epochs: Some(1), ..Default::default() }, None)?;
    let (x, _) = test_set.batch(&(0..100).collect::<Vec<_>>())?;
    for s in sweep_model(&model, &x)? {
        println!(
            "layer {} {:?} ({}-bit): s_hat {:.4}, percent difference mae {:.0}, mse {:.0}, kl {}",
            s.layer,
            s.quantity,
            s.bits,
            s.result.s_hat,
            s.result.mae.pct_diff,
            s.result.mse.pct_diff,
            s.result.kl.map_or("-".into(), |k| format!("{:.0}", k.pct_diff))
        );
    }
    Ok(())
}
