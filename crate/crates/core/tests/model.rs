//! Forward pass on small configurations against the double-precision reference.

mod common;

use emoe::fixedpoint::RunContext;
use emoe::model::{forward, preset, Image, Model, ModelConfig, ModelWeights, StageKind};
use emoe::Error;

fn small(n_blocks: usize, use_moe: bool) -> ModelConfig {
    ModelConfig {
        n_blocks,
        d: 24,
        mlp_dim: 48,
        n_heads: 3,
        use_moe,
        m_experts: 6,
        h_moe: 32,
        image_h: 48,
        image_w: 80,
        ..preset("m3vit").unwrap()
    }
}

#[test]
fn tracks_reference_and_ignores_parallelism() {
    for use_moe in [true, false] {
        let cfg = small(4, use_moe);
        let weights = ModelWeights::random(&cfg, 21).unwrap();
        let model = Model::from_weights(&weights).unwrap();
        let image = Image::synthetic(4, cfg.image_h, cfg.image_w);
        let task = 1;
        let reference = common::reference_forward(&weights, &image, task);
        let (base, report) = forward(&model, &image, task, 1, &mut RunContext::new()).unwrap();
        let mad = common::mean_abs_deviation(&base.to_f64_vec(), &reference.data);
        assert!(mad < 1e-3, "use_moe {use_moe}: deviation {mad}");
        assert_eq!(report.totals.overflow_events, 0);
        assert_eq!(report.stages_of(StageKind::Moe).count(), if use_moe { 2 } else { 0 });
        // 15 tokens, so p = 2, 4 and 7 leave a partial last batch.
        for p in [2, 3, 4, 7, 15] {
            let (x, r) = forward(&model, &image, task, p, &mut RunContext::new()).unwrap();
            assert_eq!(x, base, "p = {p}");
            let n = cfg.n_tokens() as u64;
            let (p64, heads) = (p as u64, cfg.n_heads as u64);
            let per_product = (n - 1) / p64 * n + (n - 1) % p64 + n;
            let qk: u64 = r.stages_of(StageKind::Qk).map(|s| s.iterations).sum();
            assert_eq!(qk, cfg.n_blocks as u64 * heads * per_product, "p = {p}");
        }
    }
}

#[test]
fn weight_file_round_trip_preserves_features() {
    let cfg = small(2, true);
    let weights = ModelWeights::random(&cfg, 8).unwrap();
    let mut bytes = Vec::new();
    weights.write_to(&mut bytes).unwrap();
    let reloaded = ModelWeights::read_from(bytes.as_slice()).unwrap();
    let image = Image::synthetic(0, cfg.image_h, cfg.image_w);
    let run = |w: &ModelWeights| forward(&Model::from_weights(w).unwrap(), &image, 0, 4, &mut RunContext::new()).unwrap().0;
    assert_eq!(run(&weights), run(&reloaded));
}

#[test]
fn rejects_bad_inputs() {
    let cfg = small(2, true);
    let model = Model::from_weights(&ModelWeights::random(&cfg, 0).unwrap()).unwrap();
    let image = Image::synthetic(0, cfg.image_h, cfg.image_w);
    let mut ctx = RunContext::new();
    assert!(matches!(forward(&model, &image, 2, 4, &mut ctx), Err(Error::UnknownTask { task: 2, n_tasks: 2 })));
    let wrong = Image::synthetic(0, 16, 16);
    assert!(matches!(forward(&model, &wrong, 0, 4, &mut ctx), Err(Error::Image(_))));
    assert!(forward(&model, &image, 0, 0, &mut ctx).is_err());
}
