//! Task-conditioned gating and expert-by-expert mixture-of-experts execution.
//!
//! Tokens are first routed into per-expert queues; each expert that received
//! at least one token is then loaded once and applied to its whole queue.
//! [`moe_forward_oracle`] evaluates the same layer token by token with a
//! single-expert weight buffer, which is the load pattern the queues avoid.

use serde::Serialize;

use crate::approx::softmax_single_pass;
use crate::error::{Error, Result};
use crate::fixedpoint::{FxTensor, FxValue, RunContext};
use crate::unified_linear::{unified_linear, unified_linear_into, BiasSource, BlockedWeights, LinearConfig, LinearStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Selection {
    pub expert: usize,
    pub weight: FxValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatingResult {
    pub logits: FxTensor,
    /// Per token, `k` selections in descending logit order.
    pub selections: Vec<Vec<Selection>>,
    pub task: usize,
}

impl GatingResult {
    pub fn n_tokens(&self) -> usize {
        self.selections.len()
    }

    pub fn weight_of(&self, token: usize, expert: usize) -> Option<FxValue> {
        self.selections[token].iter().find(|s| s.expert == expert).map(|s| s.weight)
    }
}

/// The `k` largest logits, ties toward the lower expert id, weighted by a
/// softmax over the selected logits.
pub fn select_topk(logits: &[FxValue], k: usize, ctx: &mut RunContext) -> Result<Vec<Selection>> {
    if k == 0 || k > logits.len() {
        return Err(Error::InvalidArgument(format!("top-k with k = {k} over {} experts", logits.len())));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].raw().cmp(&logits[a].raw()).then(a.cmp(&b)));
    order.truncate(k);
    let chosen: Vec<FxValue> = order.iter().map(|&e| logits[e]).collect();
    let (_, weights) = softmax_single_pass(&chosen, ctx)?;
    Ok(order.into_iter().zip(weights).map(|(expert, weight)| Selection { expert, weight }).collect())
}

/// Score tokens with the gate of `task` and select `k` experts per token.
/// Switching tasks only changes which gate is read.
pub fn gate_scores(
    tokens: &FxTensor,
    gates: &[BlockedWeights],
    task: usize,
    k: usize,
    ctx: &mut RunContext,
) -> Result<(GatingResult, LinearStats)> {
    let gate = gates.get(task).ok_or(Error::UnknownTask { task, n_tasks: gates.len() })?;
    let cfg = LinearConfig::dense(gate.in_dim(), gate.out_dim(), gate.bias_source());
    let (logits, stats) = unified_linear(tokens, gate, &cfg, ctx)?;
    let m = logits.cols();
    let selections = (0..logits.rows())
        .map(|t| {
            let row: Vec<FxValue> = (0..m).map(|e| logits.at(t, e)).collect();
            select_topk(&row, k, ctx)
        })
        .collect::<Result<_>>()?;
    Ok((GatingResult { logits, selections, task }, stats))
}

/// Per-expert token queues plus the ascending list of nonempty experts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MetaQueue {
    pub queues: Vec<Vec<usize>>,
    pub order: Vec<usize>,
}

impl MetaQueue {
    pub fn total_assignments(&self) -> usize {
        self.queues.iter().map(Vec::len).sum()
    }
}

pub fn build_queues(gr: &GatingResult, m: usize) -> Result<MetaQueue> {
    let mut queues = vec![Vec::new(); m];
    for (t, sels) in gr.selections.iter().enumerate() {
        for s in sels {
            let q = queues.get_mut(s.expert).ok_or(Error::IndexOutOfRange { index: s.expert, len: m })?;
            q.push(t);
        }
    }
    let order = (0..m).filter(|&e| !queues[e].is_empty()).collect();
    Ok(MetaQueue { queues, order })
}

/// Two-layer expert MLP, `d → h → d` with GELU in between.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Expert {
    pub fc1: BlockedWeights,
    pub fc2: BlockedWeights,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertParams {
    pub experts: Vec<Expert>,
}

impl ExpertParams {
    pub fn new(experts: Vec<Expert>) -> Result<Self> {
        let first = experts.first().ok_or(Error::Empty("expert list"))?;
        let (d, h) = (first.fc1.in_dim(), first.fc1.out_dim());
        for e in &experts {
            let dims = (e.fc1.in_dim(), e.fc1.out_dim(), e.fc2.in_dim(), e.fc2.out_dim());
            if dims != (d, h, h, d) {
                return Err(Error::Shape(format!("expert dims {dims:?}, expected ({d}, {h}, {h}, {d})")));
            }
        }
        Ok(Self { experts })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.experts[0].fc1.in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.experts[0].fc1.out_dim()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadStats {
    pub expert_loads: u64,
    pub tokens_computed: u64,
    pub linear: LinearStats,
    /// Tokens each expert was applied to, in processing order.
    #[serde(skip)]
    pub computed_tokens: Vec<Vec<usize>>,
}

fn check_inputs(tokens: &FxTensor, experts: &ExpertParams, gr: &GatingResult) -> Result<()> {
    if tokens.shape().len() != 2 || tokens.cols() != experts.dim() {
        return Err(Error::Shape(format!("tokens {:?} for expert dim {}", tokens.shape(), experts.dim())));
    }
    if gr.n_tokens() != tokens.rows() {
        return Err(Error::Shape(format!("{} gated tokens, {} given", gr.n_tokens(), tokens.rows())));
    }
    Ok(())
}

struct ExpertRunner<'a> {
    tokens: &'a FxTensor,
    hidden: FxTensor,
    out: FxTensor,
    stats: LoadStats,
}

impl<'a> ExpertRunner<'a> {
    fn new(tokens: &'a FxTensor, experts: &ExpertParams) -> Self {
        let n = tokens.rows();
        Self {
            tokens,
            hidden: FxTensor::zeros(&[n, experts.hidden_dim()], tokens.fmt()),
            out: FxTensor::zeros(&[n, experts.dim()], tokens.fmt()),
            stats: LoadStats { computed_tokens: vec![Vec::new(); experts.len()], ..Default::default() },
        }
    }

    fn apply(&mut self, id: usize, e: &Expert, idx: Vec<usize>, scales: Vec<FxValue>, ctx: &mut RunContext) -> Result<()> {
        let fc1 = LinearConfig::dense(e.fc1.in_dim(), e.fc1.out_dim(), BiasSource::Mlp5).sparse(idx.clone()).with_gelu();
        let fc2 = LinearConfig::dense(e.fc2.in_dim(), e.fc2.out_dim(), BiasSource::Mlp5).sparse(idx.clone()).accumulate(scales);
        self.stats.linear += unified_linear_into(self.tokens, &e.fc1, &fc1, &mut self.hidden, ctx)?;
        self.stats.linear += unified_linear_into(&self.hidden, &e.fc2, &fc2, &mut self.out, ctx)?;
        self.stats.tokens_computed += idx.len() as u64;
        self.stats.computed_tokens[id].extend(idx);
        Ok(())
    }
}

/// Expert-by-expert evaluation: one weight load per expert in the metaqueue.
pub fn moe_forward(
    tokens: &FxTensor,
    experts: &ExpertParams,
    mq: &MetaQueue,
    gr: &GatingResult,
    ctx: &mut RunContext,
) -> Result<(FxTensor, LoadStats)> {
    check_inputs(tokens, experts, gr)?;
    let mut run = ExpertRunner::new(tokens, experts);
    for &e in &mq.order {
        let expert = experts.experts.get(e).ok_or(Error::IndexOutOfRange { index: e, len: experts.len() })?;
        run.stats.expert_loads += 1;
        let idx = mq.queues[e].clone();
        let scales = idx
            .iter()
            .map(|&t| gr.weight_of(t, e).ok_or_else(|| Error::InvalidArgument(format!("token {t} not routed to expert {e}"))))
            .collect::<Result<_>>()?;
        run.apply(e, expert, idx, scales, ctx)?;
    }
    Ok((run.out, run.stats))
}

/// Token-by-token evaluation with a single buffered expert. Each token's
/// experts are applied in ascending id so sums match [`moe_forward`].
pub fn moe_forward_oracle(
    tokens: &FxTensor,
    experts: &ExpertParams,
    gr: &GatingResult,
    ctx: &mut RunContext,
) -> Result<(FxTensor, LoadStats)> {
    check_inputs(tokens, experts, gr)?;
    let mut run = ExpertRunner::new(tokens, experts);
    let mut buffered = None;
    for (t, sels) in gr.selections.iter().enumerate() {
        let mut sels = sels.clone();
        sels.sort_by_key(|s| s.expert);
        for s in sels {
            let expert = experts.experts.get(s.expert).ok_or(Error::IndexOutOfRange { index: s.expert, len: experts.len() })?;
            if buffered != Some(s.expert) {
                run.stats.expert_loads += 1;
                buffered = Some(s.expert);
            }
            run.apply(s.expert, expert, vec![t], vec![s.weight], ctx)?;
        }
    }
    Ok((run.out, run.stats))
}

/// Both execution strategies on one random routing instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MoeReport {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    pub distinct_experts: usize,
    pub reordered: LoadStats,
    pub oracle: LoadStats,
    pub outputs_identical: bool,
}

/// Random tokens, random experts (`d → h → d`) and a random gate, routed
/// and evaluated by both [`moe_forward`] and [`moe_forward_oracle`].
pub fn moe_report(n: usize, m: usize, k: usize, d: usize, h: usize, seed: u64) -> Result<MoeReport> {
    use crate::fixedpoint::FormatCatalog;
    use crate::unified_linear::pack_blocked_weights;
    use rand::{Rng, SeedableRng};

    if n == 0 || d == 0 || h == 0 {
        return Err(Error::InvalidArgument("n, d and h must be ≥ 1".into()));
    }
    if k == 0 || k > m {
        return Err(Error::InvalidArgument(format!("need 1 ≤ k ≤ m, got k = {k}, m = {m}")));
    }
    let cat = FormatCatalog::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = RunContext::new();
    let mut layer = |rng: &mut rand_chacha::ChaCha8Rng, out: usize, inp: usize, bias: BiasSource| -> Result<BlockedWeights> {
        let r = 1.0 / (inp as f64).sqrt();
        let w: Vec<f64> = (0..out * inp).map(|_| rng.gen_range(-r..r)).collect();
        let b: Vec<f64> = (0..out).map(|_| rng.gen_range(-0.02..0.02)).collect();
        let bias_fmt = match bias {
            BiasSource::Attention7 => cat.bias_attention,
            BiasSource::Mlp5 => cat.bias_mlp,
        };
        pack_blocked_weights(
            &FxTensor::from_f64(&[out, inp], cat.weight_format_for(r)?, &w, &mut ctx)?,
            &FxTensor::from_f64(&[out], bias_fmt, &b, &mut ctx)?,
            bias,
            cat.bias_widened,
            crate::unified_linear::DEFAULT_BLOCK_SIZE,
            &mut ctx,
        )
    };
    let experts = ExpertParams::new(
        (0..m)
            .map(|_| Ok(Expert { fc1: layer(&mut rng, h, d, BiasSource::Mlp5)?, fc2: layer(&mut rng, d, h, BiasSource::Mlp5)? }))
            .collect::<Result<_>>()?,
    )?;
    let gate = layer(&mut rng, m, d, BiasSource::Attention7)?;
    let values: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let tokens = FxTensor::from_f64(&[n, d], cat.activation, &values, &mut ctx)?;

    let (gr, _) = gate_scores(&tokens, std::slice::from_ref(&gate), 0, k, &mut ctx)?;
    let mq = build_queues(&gr, m)?;
    let (a, reordered) = moe_forward(&tokens, &experts, &mq, &gr, &mut ctx)?;
    let (b, oracle) = moe_forward_oracle(&tokens, &experts, &gr, &mut ctx)?;
    Ok(MoeReport { n, m, k, seed, distinct_experts: mq.order.len(), reordered, oracle, outputs_identical: a == b })
}
