//! Run the M³ViT-sized backbone on a synthetic image for both tasks.

use emoe::costmodel::breakdown;
use emoe::fixedpoint::RunContext;
use emoe::model::{forward, preset, Image, Model, ModelWeights};

fn main() -> emoe::Result<()> {
    let cfg = preset("m3vit")?;
    let weights = ModelWeights::random(&cfg, 0)?;
    let model = Model::from_weights(&weights)?;
    let image = Image::synthetic(1, cfg.image_h, cfg.image_w);
    println!("{}: {} parameters, {} tokens", cfg.name, weights.parameter_count(), cfg.n_tokens());

    let mut ctx = RunContext::new();
    for task in 0..cfg.n_tasks {
        let (features, report) = forward(&model, &image, task, 4, &mut ctx)?;
        let loads: Vec<u64> = report.stages.iter().filter(|s| s.expert_loads > 0).map(|s| s.expert_loads).collect();
        println!(
            "task {task}: features {:?}, latency proxy {} iterations, expert loads per MoE block {loads:?}, overflow events {}",
            features.shape(),
            report.totals.iterations,
            report.totals.overflow_events
        );
        if task == 0 {
            print!("{}", breakdown(&report)?.to_text(40));
        }
    }
    Ok(())
}
