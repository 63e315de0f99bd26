//! One kernel for dense, sparse, GELU and weighted-accumulate layers.

use emoe::fixedpoint::{quantize, FormatCatalog, FxTensor, RunContext};
use emoe::unified_linear::{flatten_indices, pack_blocked_weights, unified_linear, unified_linear_into, BiasSource, LinearConfig, DEFAULT_BLOCK_SIZE};

fn main() -> emoe::Result<()> {
    let cat = FormatCatalog::default();
    let mut ctx = RunContext::new();
    println!("flattened 2×3: {:?}", flatten_indices(2, 3).collect::<Vec<_>>());

    let (n, d, h) = (4, 6, 5);
    let w: Vec<f64> = (0..h * d).map(|i| ((i % 7) as f64 - 3.0) / 8.0).collect();
    let b: Vec<f64> = (0..h).map(|i| i as f64 / 16.0).collect();
    let weights = pack_blocked_weights(
        &FxTensor::from_f64(&[h, d], cat.weight_format_for(0.375)?, &w, &mut ctx)?,
        &FxTensor::from_f64(&[h], cat.bias_mlp, &b, &mut ctx)?,
        BiasSource::Mlp5,
        cat.bias_widened,
        DEFAULT_BLOCK_SIZE,
        &mut ctx,
    )?;
    let xs: Vec<f64> = (0..n * d).map(|i| (i as f64 - 12.0) / 6.0).collect();
    let x = FxTensor::from_f64(&[n, d], cat.activation, &xs, &mut ctx)?;

    let (dense, stats) = unified_linear(&x, &weights, &LinearConfig::dense(d, h, BiasSource::Mlp5).with_gelu(), &mut ctx)?;
    println!("dense + GELU: {stats:?}");
    for t in 0..n {
        println!("  {:?}", &dense.to_f64_vec()[t * h..(t + 1) * h]);
    }

    let scales = vec![quantize(0.25, cat.activation, &mut ctx), quantize(0.75, cat.activation, &mut ctx)];
    let cfg = LinearConfig::dense(d, h, BiasSource::Mlp5).sparse(vec![1, 3]).accumulate(scales);
    let mut out = FxTensor::zeros(&[n, h], cat.activation);
    let stats = unified_linear_into(&x, &weights, &cfg, &mut out, &mut ctx)?;
    println!("sparse rows 1 and 3, weighted accumulate: {stats:?}");
    for t in 0..n {
        println!("  {:?}", &out.to_f64_vec()[t * h..(t + 1) * h]);
    }
    Ok(())
}
