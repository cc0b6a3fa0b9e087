// Relative update size of each weight step size versus its weights, with
// and without the step size gradient scale.

use lsq::analysis::{measure_r, r_table};
use lsq::data::DataConfig;
use lsq::train::{train, RunConfig};
use lsq::{build_model, GradScale, ModelConfig};

fn main() -> lsq::Result<()> {
    let (train_set, test_set) = DataConfig {
        train_size: 1500,
        test_size: 300,
        ..Default::default()
    }
    .load()?;
    let small = |precision| ModelConfig {
        channels: vec![4, 8],
        hidden: vec![32],
        ..ModelConfig::cnn(precision)
    };
    let mut fp = build_model(&small(32), 0)?;
    train(&mut fp, &train_set, &test_set, &RunConfig { epochs: Some(1), ..Default::default() }, None)?;

    for bits in [2, 8] {
        let mut q = build_model(&small(bits), 0)?;
        q.load_full_precision(&fp)?;
        let scales = [GradScale::None, GradScale::Count, GradScale::CountLevels];
        let records = measure_r(&mut q, &train_set, &RunConfig::default(), 10, 20, &scales)?;
        println!("{bits}-bit network");
        print!("{}", r_table(&records)?.to_csv());
    }
    Ok(())
}
