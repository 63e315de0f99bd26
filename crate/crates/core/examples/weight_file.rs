//! Write, inspect and reload a weight file.

use emoe::model::{preset, tensor_specs, ModelConfig, ModelWeights};

fn main() -> emoe::Result<()> {
    let cfg = ModelConfig { n_blocks: 2, ..preset("m3vit")? };
    let weights = ModelWeights::random(&cfg, 7)?;
    let path = std::env::temp_dir().join("emoe-example.weights");
    weights.save(&path)?;
    let size = std::fs::metadata(&path)?.len();
    println!("{} tensors, {} parameters, {size} bytes at {}", weights.len(), weights.parameter_count(), path.display());

    for spec in tensor_specs(&cfg).iter().take(8) {
        let t = weights.get(&spec.name)?;
        println!("  {:<28} {:?} {}", spec.name, spec.shape, t.fmt());
    }
    let reloaded = ModelWeights::load(&path)?;
    println!("reloaded identical: {}", reloaded == weights);
    std::fs::remove_file(&path)?;
    Ok(())
}
