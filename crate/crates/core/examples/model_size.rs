// Weight storage of the reference models at each precision.

use lsq::analysis::model_size;
use lsq::{build_model, ModelConfig};

fn main() -> lsq::Result<()> {
    for (name, make) in [("mlp", ModelConfig::mlp as fn(u32) -> ModelConfig), ("cnn", ModelConfig::cnn)] {
        for bits in [32, 8, 4, 3, 2] {
            let size = model_size(&build_model(&make(bits), 0)?);
            let per_layer: Vec<String> = size.layers.iter().map(|l| format!("{}x{}b", l.weights, l.bits)).collect();
            println!(
                "{name} {bits:>2}-bit: {:>7} payload bytes + {:>5} overhead  [{}]",
                size.payload_bytes,
                size.overhead_bytes,
                per_layer.join(", ")
            );
        }
    }
    Ok(())
}
