//! Latency-proxy breakdown of a smaller model across parallelism factors.

use emoe::costmodel::breakdown;
use emoe::fixedpoint::RunContext;
use emoe::model::{forward, preset, Image, Model, ModelConfig, ModelWeights, StageKind};

fn main() -> emoe::Result<()> {
    let cfg = ModelConfig { n_blocks: 4, ..preset("m3vit")? };
    let model = Model::from_weights(&ModelWeights::random(&cfg, 3)?)?;
    let image = Image::synthetic(3, cfg.image_h, cfg.image_w);
    for p in [1, 4, 16] {
        let (_, report) = forward(&model, &image, 0, p, &mut RunContext::new())?;
        let b = breakdown(&report)?;
        println!(
            "p = {p:>2}: {} iterations, QK+MV {:.2}%",
            b.total_iterations,
            100.0 * (b.share_of(StageKind::Qk) + b.share_of(StageKind::Mv))
        );
        if p == 4 {
            print!("{}", b.to_text(40));
        }
    }
    Ok(())
}
