use serde::{Deserialize, Serialize};

use super::config::{BlockKind, ModelConfig};
use super::weights::ModelWeights;
use crate::attention::{self_attention, AttentionParams, AttentionStats};
use crate::costmodel::moe_load_overlap;
use crate::error::{Error, Result};
use crate::fixedpoint::{fx_add, quantize, FxTensor, FxValue, RunContext};
use crate::moe::{build_queues, gate_scores, moe_forward, Expert, ExpertParams};
use crate::unified_linear::{pack_blocked_weights, unified_linear, BiasSource, BlockedWeights, LinearConfig, LinearStats};

/// LayerNorm epsilon, 2^-20.
pub const LN_EPS: f64 = 1.0 / 1048576.0;

/// A grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Image(format!("{} pixels for a {height}×{width} image", pixels.len())));
        }
        Ok(Self { height, width, pixels })
    }

    /// Uniform noise in `[0, 1)`, reproducible from the seed.
    pub fn synthetic(seed: u64, height: usize, width: usize) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..height * width).map(|_| rng.gen::<f64>()).collect();
        Self { height, width, pixels }
    }

    /// Raw 8-bit grayscale, row-major, mapped to `[0, 1]`.
    pub fn from_u8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        if bytes.len() != height * width {
            return Err(Error::Image(format!(
                "expected {} bytes for a {height}×{width} image, got {}",
                height * width,
                bytes.len()
            )));
        }
        Self::new(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: FxTensor,
    pub beta: FxTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeedForward {
    Vit { fc1: BlockedWeights, fc2: BlockedWeights },
    Moe { experts: ExpertParams, gates: Vec<BlockedWeights>, top_k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: usize,
    pub norm1: LayerNormParams,
    pub attn: AttentionParams,
    pub norm2: LayerNormParams,
    pub ffn: FeedForward,
}

impl Block {
    pub fn kind(&self) -> BlockKind {
        match self.ffn {
            FeedForward::Vit { .. } => BlockKind::Vit,
            FeedForward::Moe { .. } => BlockKind::Moe,
        }
    }
}

/// Weights packed for execution: blocked layouts and widened biases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Model {
    pub config: ModelConfig,
    pub patch_embed: BlockedWeights,
    pub pos_embed: FxTensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
}

impl Model {
    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        let cfg = w.config().clone();
        let mut ctx = RunContext::new();
        let f = cfg.formats;
        let mut linear = |prefix: &str, bias: BiasSource| -> Result<BlockedWeights> {
            pack_blocked_weights(
                w.get(&format!("{prefix}.weight"))?,
                w.get(&format!("{prefix}.bias"))?,
                bias,
                f.bias_widened,
                cfg.block_size,
                &mut ctx,
            )
        };
        let norm = |prefix: &str| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gamma: w.get(&format!("{prefix}.gamma"))?.clone(),
                beta: w.get(&format!("{prefix}.beta"))?.clone(),
            })
        };
        let patch_embed = linear("patch_embed", BiasSource::Attention7)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let attn = AttentionParams {
                n_heads: cfg.n_heads,
                wq: linear(&format!("blocks.{b}.attn.q"), BiasSource::Attention7)?,
                wk: linear(&format!("blocks.{b}.attn.k"), BiasSource::Attention7)?,
                wv: linear(&format!("blocks.{b}.attn.v"), BiasSource::Attention7)?,
                wo: linear(&format!("blocks.{b}.attn.o"), BiasSource::Attention7)?,
                scale_scores: cfg.scale_scores,
            };
            let ffn = match cfg.block_kind(b) {
                BlockKind::Vit => FeedForward::Vit {
                    fc1: linear(&format!("blocks.{b}.mlp.fc1"), BiasSource::Mlp5)?,
                    fc2: linear(&format!("blocks.{b}.mlp.fc2"), BiasSource::Mlp5)?,
                },
                BlockKind::Moe => FeedForward::Moe {
                    gates: (0..cfg.n_tasks)
                        .map(|t| linear(&format!("blocks.{b}.gates.{t}"), BiasSource::Attention7))
                        .collect::<Result<_>>()?,
                    experts: ExpertParams::new(
                        (0..cfg.m_experts)
                            .map(|e| {
                                Ok(Expert {
                                    fc1: linear(&format!("blocks.{b}.experts.{e}.fc1"), BiasSource::Mlp5)?,
                                    fc2: linear(&format!("blocks.{b}.experts.{e}.fc2"), BiasSource::Mlp5)?,
                                })
                            })
                            .collect::<Result<_>>()?,
                    )?,
                    top_k: cfg.top_k,
                },
            };
            blocks.push(Block {
                index: b,
                norm1: norm(&format!("blocks.{b}.norm1"))?,
                attn,
                norm2: norm(&format!("blocks.{b}.norm2"))?,
                ffn,
            });
        }
        let pos = w.get("pos_embed")?;
        let pos_embed = pos.requantize(f.activation, &mut ctx);
        if ctx.overflow_events() != 0 {
            return Err(Error::WeightFile(format!("{} values overflowed while packing", ctx.overflow_events())));
        }
        Ok(Self { config: cfg, patch_embed, pos_embed, blocks, norm: norm("norm")? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    PatchEmbed,
    AttentionLinear,
    Qk,
    Mv,
    VitMlp,
    Moe,
    Gating,
    Layernorm,
}

impl StageKind {
    pub const ALL: [StageKind; 8] = [
        StageKind::PatchEmbed,
        StageKind::AttentionLinear,
        StageKind::Qk,
        StageKind::Mv,
        StageKind::VitMlp,
        StageKind::Moe,
        StageKind::Gating,
        StageKind::Layernorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::PatchEmbed => "patch_embed",
            StageKind::AttentionLinear => "attention_linear",
            StageKind::Qk => "qk",
            StageKind::Mv => "mv",
            StageKind::VitMlp => "vit_mlp",
            StageKind::Moe => "moe",
            StageKind::Gating => "gating",
            StageKind::Layernorm => "layernorm",
        }
    }
}

/// Counters of one stage. `blocks_loaded` counts weight blocks for linear
/// stages and token blocks for the attention products.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub block: Option<usize>,
    pub kind: StageKind,
    pub mac_count: u64,
    pub blocks_loaded: u64,
    pub iterations: u64,
    pub expert_loads: u64,
    pub overflow_events: u64,
    pub gate_reads: u64,
    /// Task whose gate was read, for gating stages.
    pub gate_task: Option<usize>,
}

impl StageRecord {
    fn new(block: Option<usize>, kind: StageKind) -> Self {
        Self {
            block,
            kind,
            mac_count: 0,
            blocks_loaded: 0,
            iterations: 0,
            expert_loads: 0,
            overflow_events: 0,
            gate_reads: 0,
            gate_task: None,
        }
    }

    fn linear(block: Option<usize>, kind: StageKind, s: LinearStats, overflows: u64) -> Self {
        Self {
            mac_count: s.macs,
            blocks_loaded: s.weight_blocks,
            iterations: s.iterations,
            overflow_events: overflows,
            ..Self::new(block, kind)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub mac_count: u64,
    pub blocks_loaded: u64,
    /// Latency proxy: one block multiply per iteration.
    pub iterations: u64,
    pub expert_loads: u64,
    pub overflow_events: u64,
    pub gate_reads: u64,
}

/// Tokens routed to each expert in one MoE block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSelection {
    pub block: usize,
    pub tokens_per_expert: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub task: usize,
    pub parallelism: usize,
    pub n_tokens: usize,
    pub stages: Vec<StageRecord>,
    pub totals: Totals,
    pub selections: Vec<BlockSelection>,
    pub saturation_events: u64,
    pub wrap_events: u64,
}

impl RunReport {
    pub fn stages_of(&self, kind: StageKind) -> impl Iterator<Item = &StageRecord> {
        self.stages.iter().filter(move |s| s.kind == kind)
    }

    pub fn compute_totals(stages: &[StageRecord]) -> Totals {
        stages.iter().fold(Totals::default(), |mut t, s| {
            t.mac_count += s.mac_count;
            t.blocks_loaded += s.blocks_loaded;
            t.iterations += s.iterations;
            t.expert_loads += s.expert_loads;
            t.overflow_events += s.overflow_events;
            t.gate_reads += s.gate_reads;
            t
        })
    }
}

/// Flatten 16×16 (or `patch_size`²) patches in raster order, project them
/// and add the positional embedding.
pub fn patch_embed(image: &Image, model: &Model, ctx: &mut RunContext) -> Result<(FxTensor, LinearStats)> {
    let cfg = &model.config;
    if image.height != cfg.image_h || image.width != cfg.image_w {
        return Err(Error::Image(format!(
            "image is {}×{}, model expects {}×{}",
            image.height, image.width, cfg.image_h, cfg.image_w
        )));
    }
    let ps = cfg.patch_size;
    let act = cfg.formats.activation;
    let (rows, cols) = (image.height / ps, image.width / ps);
    let mut patches = Vec::with_capacity(image.pixels.len());
    for pr in 0..rows {
        for pc in 0..cols {
            for y in 0..ps {
                let start = (pr * ps + y) * image.width + pc * ps;
                patches.extend_from_slice(&image.pixels[start..start + ps]);
            }
        }
    }
    let patches = FxTensor::from_f64(&[rows * cols, ps * ps], act, &patches, ctx)?;
    let lcfg = LinearConfig::dense(ps * ps, cfg.d, BiasSource::Attention7);
    let (mut x, stats) = unified_linear(&patches, &model.patch_embed, &lcfg, ctx)?;
    x = add(&x, &model.pos_embed, ctx)?;
    Ok((x, stats))
}

fn add(a: &FxTensor, b: &FxTensor, ctx: &mut RunContext) -> Result<FxTensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("residual {:?} + {:?}", a.shape(), b.shape())));
    }
    let fmt = a.fmt();
    let data = a
        .raw()
        .iter()
        .zip(b.raw())
        .map(|(&x, &y)| {
            let y = FxValue::from_raw(y, b.fmt())?;
            Ok(fx_add(FxValue::from_raw(x, fmt)?, y, fmt, ctx).raw())
        })
        .collect::<Result<Vec<_>>>()?;
    FxTensor::from_raw(a.shape(), fmt, data)
}

/// Per-token `(x - mean) / sqrt(var + ε) · γ + β`, evaluated in double
/// precision from the raw values and rounded once into the input format.
pub fn layer_norm(x: &FxTensor, params: &LayerNormParams, ctx: &mut RunContext) -> Result<FxTensor> {
    let d = x.cols();
    if params.gamma.len() != d || params.beta.len() != d {
        return Err(Error::Shape(format!("LayerNorm params for {} features, input has {d}", params.gamma.len())));
    }
    let fmt = x.fmt();
    let ulp = fmt.ulp();
    let gamma = params.gamma.to_f64_vec();
    let beta = params.beta.to_f64_vec();
    let mut out = Vec::with_capacity(x.len());
    for t in 0..x.rows() {
        let v: Vec<f64> = x.row(t).iter().map(|&r| r as f64 * ulp).collect();
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(v.iter().enumerate().map(|(c, a)| quantize((a - mean) * inv * gamma[c] + beta[c], fmt, ctx).raw()));
    }
    FxTensor::from_raw(x.shape(), fmt, out)
}

fn norm_stage(block: Option<usize>, x: &FxTensor, params: &LayerNormParams, bs: usize, ctx: &mut RunContext) -> Result<(FxTensor, StageRecord)> {
    let before = ctx.overflow_events();
    let y = layer_norm(x, params, ctx)?;
    let (n, d) = (x.rows() as u64, x.cols() as u64);
    let per_token = d.div_ceil(bs as u64);
    let rec = StageRecord {
        mac_count: n * d,
        blocks_loaded: (2 * d).div_ceil(bs as u64),
        iterations: n * per_token,
        overflow_events: ctx.overflow_events() - before,
        ..StageRecord::new(block, StageKind::Layernorm)
    };
    Ok((y, rec))
}

fn attention_stages(block: usize, s: &AttentionStats) -> [StageRecord; 3] {
    let b = Some(block);
    [
        StageRecord::linear(b, StageKind::AttentionLinear, s.projections, s.projection_overflows),
        StageRecord {
            mac_count: s.qk_macs,
            blocks_loaded: s.qk.blocks_loaded,
            iterations: s.qk.latency_iters,
            overflow_events: s.qk_overflows,
            ..StageRecord::new(b, StageKind::Qk)
        },
        StageRecord {
            mac_count: s.mv_macs,
            blocks_loaded: s.mv.blocks_loaded,
            iterations: s.mv.latency_iters,
            overflow_events: s.mv_overflows,
            ..StageRecord::new(b, StageKind::Mv)
        },
    ]
}

/// Output of one block: new tokens, stage records and, for MoE blocks, the routing.
#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub tokens: FxTensor,
    pub stages: Vec<StageRecord>,
    pub selection: Option<BlockSelection>,
}

fn attention_half(x: &FxTensor, block: &Block, p: usize, bs: usize, ctx: &mut RunContext) -> Result<(FxTensor, FxTensor, Vec<StageRecord>)> {
    let b = Some(block.index);
    let (h, ln1) = norm_stage(b, x, &block.norm1, bs, ctx)?;
    let (a, stats) = self_attention(&h, &block.attn, p, ctx)?;
    let before = ctx.overflow_events();
    let x = add(x, &a, ctx)?;
    let mut stages = vec![ln1];
    stages.extend(attention_stages(block.index, &stats));
    stages.last_mut().expect("three attention stages").overflow_events += ctx.overflow_events() - before;
    let (h2, ln2) = norm_stage(b, &x, &block.norm2, bs, ctx)?;
    stages.push(ln2);
    Ok((x, h2, stages))
}

/// `x + attn(ln(x))`, then `x + mlp(ln(x))` with a GELU between the two layers.
pub fn vit_block(x: &FxTensor, block: &Block, p: usize, block_size: usize, ctx: &mut RunContext) -> Result<BlockOutput> {
    let FeedForward::Vit { fc1, fc2 } = &block.ffn else {
        return Err(Error::InvalidArgument(format!("block {} is not a ViT block", block.index)));
    };
    let (x, h, mut stages) = attention_half(x, block, p, block_size, ctx)?;
    let before = ctx.overflow_events();
    let (m, s1) = unified_linear(&h, fc1, &LinearConfig::dense(fc1.in_dim(), fc1.out_dim(), BiasSource::Mlp5).with_gelu(), ctx)?;
    let (m, s2) = unified_linear(&m, fc2, &LinearConfig::dense(fc2.in_dim(), fc2.out_dim(), BiasSource::Mlp5), ctx)?;
    let x = add(&x, &m, ctx)?;
    let mut s = s1;
    s += s2;
    stages.push(StageRecord::linear(Some(block.index), StageKind::VitMlp, s, ctx.overflow_events() - before));
    Ok(BlockOutput { tokens: x, stages, selection: None })
}

/// Attention as in a ViT block, then task-gated expert MLPs on the normalized tokens.
pub fn moe_block(x: &FxTensor, block: &Block, task: usize, p: usize, block_size: usize, ctx: &mut RunContext) -> Result<BlockOutput> {
    let FeedForward::Moe { experts, gates, top_k } = &block.ffn else {
        return Err(Error::InvalidArgument(format!("block {} is not an MoE block", block.index)));
    };
    if task >= gates.len() {
        return Err(Error::UnknownTask { task, n_tasks: gates.len() });
    }
    let b = Some(block.index);
    let (x, h, mut stages) = attention_half(x, block, p, block_size, ctx)?;

    let before = ctx.overflow_events();
    let (g, gs) = gate_scores(&h, gates, task, *top_k, ctx)?;
    stages.push(StageRecord {
        gate_reads: 1,
        gate_task: Some(task),
        ..StageRecord::linear(b, StageKind::Gating, gs, ctx.overflow_events() - before)
    });

    let before = ctx.overflow_events();
    let mq = build_queues(&g, experts.len())?;
    let (y, loads) = moe_forward(&h, experts, &mq, &g, ctx)?;
    let x = add(&x, &y, ctx)?;
    let e0 = &experts.experts[0];
    let per_expert = (e0.fc1.blocks().len() + e0.fc2.blocks().len()) as u64;
    let per_token = (e0.fc1.weight_count().div_ceil(e0.fc1.block_size()) + e0.fc2.weight_count().div_ceil(e0.fc2.block_size())) as u64;
    stages.push(StageRecord {
        mac_count: loads.linear.macs,
        blocks_loaded: loads.expert_loads * per_expert,
        iterations: loads.linear.iterations + moe_load_overlap(&mq, per_expert, per_token),
        expert_loads: loads.expert_loads,
        overflow_events: ctx.overflow_events() - before,
        ..StageRecord::new(b, StageKind::Moe)
    });
    let selection = BlockSelection { block: block.index, tokens_per_expert: mq.queues.iter().map(Vec::len).collect() };
    Ok(BlockOutput { tokens: x, stages, selection: Some(selection) })
}

/// Backbone features for one image and task, with the per-stage report.
pub fn forward(model: &Model, image: &Image, task: usize, p: usize, ctx: &mut RunContext) -> Result<(FxTensor, RunReport)> {
    let cfg = &model.config;
    if task >= cfg.n_tasks {
        return Err(Error::UnknownTask { task, n_tasks: cfg.n_tasks });
    }
    let start = ctx.clone();
    let bs = cfg.block_size;
    let mut stages = Vec::new();
    let mut selections = Vec::new();

    let before = ctx.overflow_events();
    let (mut x, s) = patch_embed(image, model, ctx)?;
    stages.push(StageRecord::linear(None, StageKind::PatchEmbed, s, ctx.overflow_events() - before));
    for block in &model.blocks {
        let out = match block.kind() {
            BlockKind::Vit => vit_block(&x, block, p, bs, ctx)?,
            BlockKind::Moe => moe_block(&x, block, task, p, bs, ctx)?,
        };
        x = out.tokens;
        stages.extend(out.stages);
        selections.extend(out.selection);
    }
    let (x, ln) = norm_stage(None, &x, &model.norm, bs, ctx)?;
    stages.push(ln);

    let report = RunReport {
        model: cfg.name.clone(),
        task,
        parallelism: p,
        n_tokens: x.rows(),
        totals: RunReport::compute_totals(&stages),
        stages,
        selections,
        saturation_events: ctx.saturation_events() - start.saturation_events(),
        wrap_events: ctx.wrap_events() - start.wrap_events(),
    };
    Ok((x, report))
}
