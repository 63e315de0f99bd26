//! Multi-head self-attention driven by an explicit memory/compute schedule.
//!
//! The reordered schedule keeps a batch of `p` query tokens in lanes and
//! streams one key block per iteration. Lane `r` of batch `B` enters at
//! iteration `B·N + r` and stays for `N` iterations, so it sees every key
//! once, starting wherever the stream happens to be. The value phase runs
//! the same pattern with output caches in the lanes, written back when a
//! lane retires.
//!
//! Values never depend on the schedule: dot products and value sums are
//! accumulated exactly and rounded once, and each score row commits to its
//! softmax state in ascending key order through a small reorder buffer.

use serde::Serialize;

use crate::approx::{softmax_finalize, SoftmaxState};
use crate::error::{Error, Result};
use crate::fixedpoint::{quantize, rescale, FxTensor, FxValue, RunContext};
use crate::unified_linear::{unified_linear, BiasSource, BlockedWeights, LinearConfig, LinearStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Qk,
    Mv,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qk" => Ok(Phase::Qk),
            "mv" => Ok(Phase::Mv),
            _ => Err(Error::InvalidArgument(format!("unknown phase {s:?} (qk|mv)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    LoadQBatch,
    LoadK,
    LoadV,
    Compute,
    WriteBack,
}

/// One schedule event. For loads and write-backs `row` is the token moved
/// and `col` repeats it; for computes `(row, col)` is the score position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Event {
    pub iter: usize,
    pub kind: EventKind,
    pub lane: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSchedule {
    n_tokens: usize,
    parallelism: usize,
    phase: Phase,
    reordered: bool,
    iterations: usize,
    events: Vec<Event>,
}

impl AttentionSchedule {
    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn reordered(&self) -> bool {
        self.reordered
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn computes(&self) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(|e| e.kind == EventKind::Compute)
    }

    /// Check that every `(i, j)` pair is computed exactly once.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens;
        let mut seen = vec![false; n * n];
        for e in self.computes() {
            let k = e.row * n + e.col;
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidArgument(format!("pair ({}, {}) computed twice", e.row, e.col)));
            }
        }
        match seen.iter().position(|s| !s) {
            Some(k) => Err(Error::InvalidArgument(format!("pair ({}, {}) never computed", k / n, k % n))),
            None => Ok(()),
        }
    }
}

pub fn make_schedule(n: usize, p: usize, reordered: bool, phase: Phase) -> Result<AttentionSchedule> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument(format!("need n ≥ 1 and p ≥ 1, got n = {n}, p = {p}")));
    }
    if p > n {
        return Err(Error::InvalidArgument(format!("parallelism {p} exceeds token count {n}")));
    }
    let (events, iterations) = if reordered {
        reordered_events(n, p, phase)
    } else {
        naive_events(n, p, phase)
    };
    Ok(AttentionSchedule { n_tokens: n, parallelism: p, phase, reordered, iterations, events })
}

fn stream_kind(phase: Phase) -> EventKind {
    match phase {
        Phase::Qk => EventKind::LoadK,
        Phase::Mv => EventKind::LoadV,
    }
}

fn reordered_events(n: usize, p: usize, phase: Phase) -> (Vec<Event>, usize) {
    let last = n - 1;
    let iterations = (last / p) * n + last % p + n;
    let mut events = Vec::with_capacity(n * n + 2 * iterations);
    for t in 0..iterations {
        let j = t % n;
        events.push(Event { iter: t, kind: stream_kind(phase), lane: 0, row: j, col: j });
        let first = events.len();
        for lane in 0..p.min(t + 1) {
            let since = t - lane;
            let token = (since / n) * p + lane;
            if token >= n {
                continue;
            }
            let offset = since % n;
            if offset == 0 && phase == Phase::Qk {
                events.insert(first, Event { iter: t, kind: EventKind::LoadQBatch, lane, row: token, col: token });
            }
            events.push(Event { iter: t, kind: EventKind::Compute, lane, row: token, col: j });
            if offset == n - 1 && phase == Phase::Mv {
                events.push(Event { iter: t, kind: EventKind::WriteBack, lane, row: token, col: token });
            }
        }
    }
    (events, iterations)
}

fn naive_events(n: usize, p: usize, phase: Phase) -> (Vec<Event>, usize) {
    let chunks = n.div_ceil(p);
    let mut events = Vec::with_capacity(2 * n * n + n);
    for i in 0..n {
        for c in 0..chunks {
            let t = i * chunks + c;
            if c == 0 && phase == Phase::Qk {
                events.push(Event { iter: t, kind: EventKind::LoadQBatch, lane: 0, row: i, col: i });
            }
            let cols = c * p..((c + 1) * p).min(n);
            for j in cols.clone() {
                events.push(Event { iter: t, kind: stream_kind(phase), lane: 0, row: j, col: j });
            }
            for j in cols {
                events.push(Event { iter: t, kind: EventKind::Compute, lane: 0, row: i, col: j });
            }
            if c == chunks - 1 && phase == Phase::Mv {
                events.push(Event { iter: t, kind: EventKind::WriteBack, lane: 0, row: i, col: i });
            }
        }
    }
    (events, n * chunks)
}

/// Event-counted traffic of one schedule. A block is one token vector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrafficStats {
    /// All token-block transfers between backing store and buffers.
    pub blocks_loaded: u64,
    pub blocks_read: u64,
    pub blocks_written: u64,
    pub latency_iters: u64,
    /// Most streamed K or V blocks in one iteration.
    pub peak_bandwidth_blocks_per_iter: u64,
    /// Most transfers of any kind in one iteration.
    pub peak_transfers_per_iter: u64,
    pub live_buffers: u64,
    pub compute_events: u64,
    /// Score elements read by the value phase.
    pub score_elements_loaded: u64,
}

impl TrafficStats {
    /// Sequential composition: counts add, peaks take the maximum.
    pub fn then(mut self, o: TrafficStats) -> TrafficStats {
        self.blocks_loaded += o.blocks_loaded;
        self.blocks_read += o.blocks_read;
        self.blocks_written += o.blocks_written;
        self.latency_iters += o.latency_iters;
        self.compute_events += o.compute_events;
        self.score_elements_loaded += o.score_elements_loaded;
        self.peak_bandwidth_blocks_per_iter = self.peak_bandwidth_blocks_per_iter.max(o.peak_bandwidth_blocks_per_iter);
        self.peak_transfers_per_iter = self.peak_transfers_per_iter.max(o.peak_transfers_per_iter);
        self.live_buffers = self.live_buffers.max(o.live_buffers);
        self
    }
}

pub fn measure_traffic(schedule: &AttentionSchedule) -> TrafficStats {
    let mut stats = TrafficStats { latency_iters: schedule.iterations as u64, ..Default::default() };
    let mut events = schedule.events.iter().peekable();
    while let Some(&first) = events.peek() {
        let t = first.iter;
        let (mut stream, mut transfers, mut lanes) = (0u64, 0u64, 0u64);
        while let Some(e) = events.next_if(|e| e.iter == t) {
            match e.kind {
                EventKind::LoadK | EventKind::LoadV => {
                    stream += 1;
                    transfers += 1;
                    stats.blocks_read += 1;
                }
                EventKind::LoadQBatch => {
                    transfers += 1;
                    stats.blocks_read += 1;
                }
                EventKind::WriteBack => {
                    transfers += 1;
                    stats.blocks_written += 1;
                }
                EventKind::Compute => {
                    lanes += 1;
                    stats.compute_events += 1;
                }
            }
        }
        // every live lane computes once per iteration; naive lanes hold one token
        let held = if schedule.reordered { lanes } else { lanes.min(1) };
        stats.peak_bandwidth_blocks_per_iter = stats.peak_bandwidth_blocks_per_iter.max(stream);
        stats.peak_transfers_per_iter = stats.peak_transfers_per_iter.max(transfers);
        stats.live_buffers = stats.live_buffers.max(held + stream);
    }
    stats.blocks_loaded = stats.blocks_read + stats.blocks_written;
    if schedule.phase == Phase::Mv {
        stats.score_elements_loaded = stats.compute_events;
    }
    stats
}

/// Raw pre-softmax scores of one query row with the row's softmax state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreRow {
    scores: Vec<FxValue>,
    state: SoftmaxState,
}

impl ScoreRow {
    pub fn scores(&self) -> &[FxValue] {
        &self.scores
    }

    pub fn state(&self) -> &SoftmaxState {
        &self.state
    }

    pub fn probabilities(&self, ctx: &mut RunContext) -> Result<Vec<FxValue>> {
        self.scores.iter().map(|&x| softmax_finalize(x, &self.state, ctx)).collect()
    }
}

fn check_pair(a: &FxTensor, b: &FxTensor, what: &str) -> Result<()> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Empty("attention operand"));
    }
    Ok(())
}

/// Score rows `Q·Kᵀ` with their softmax states, under the reordered schedule.
pub fn run_qk(q: &FxTensor, k: &FxTensor, p: usize, ctx: &mut RunContext) -> Result<(Vec<ScoreRow>, TrafficStats)> {
    check_pair(q, k, "Q and K")?;
    let n = q.rows();
    let schedule = make_schedule(n, p, true, Phase::Qk)?;
    let fmt = q.fmt();
    let frac = q.fmt().frac_bits() + k.fmt().frac_bits();
    let mut scores: Vec<Option<FxValue>> = vec![None; n * n];
    let mut committed = vec![0usize; n];
    let mut states = vec![SoftmaxState::new(fmt); n];
    for e in schedule.computes() {
        let dot: i128 = q.row(e.row).iter().zip(k.row(e.col)).map(|(&a, &b)| a as i128 * b as i128).sum();
        let row = &mut scores[e.row * n..(e.row + 1) * n];
        row[e.col] = Some(FxValue::from_raw(rescale(dot, frac, fmt, ctx), fmt)?);
        let next = &mut committed[e.row];
        while let Some(Some(x)) = row.get(*next) {
            states[e.row] = states[e.row].update(*x, ctx);
            *next += 1;
        }
    }
    let rows = scores
        .chunks(n)
        .zip(states)
        .map(|(row, state)| ScoreRow { scores: row.iter().map(|x| x.expect("validated schedule")).collect(), state })
        .collect();
    Ok((rows, measure_traffic(&schedule)))
}

/// `out[i] = Σ_j softmax(i, j)·V[j]`, with output caches written back as lanes retire.
pub fn run_mv(rows: &[ScoreRow], v: &FxTensor, p: usize, ctx: &mut RunContext) -> Result<(FxTensor, TrafficStats)> {
    let n = rows.len();
    if v.shape().len() != 2 || v.rows() != n {
        return Err(Error::Shape(format!("V {:?} for {n} score rows", v.shape())));
    }
    if let Some(bad) = rows.iter().find(|r| r.scores.len() != n) {
        return Err(Error::Shape(format!("score row of length {} for {n} tokens", bad.scores.len())));
    }
    let schedule = make_schedule(n, p, true, Phase::Mv)?;
    let dh = v.cols();
    let fmt = v.fmt();
    let mut acc = vec![0i128; n * dh];
    let mut out = FxTensor::zeros(&[n, dh], fmt);
    let mut frac = None;
    for e in &schedule.events {
        match e.kind {
            EventKind::Compute => {
                let row = &rows[e.row];
                let w = softmax_finalize(row.scores[e.col], &row.state, ctx)?;
                frac = Some(w.fmt().frac_bits() + fmt.frac_bits());
                let cache = &mut acc[e.row * dh..(e.row + 1) * dh];
                for (a, &x) in cache.iter_mut().zip(v.row(e.col)) {
                    *a += w.raw() as i128 * x as i128;
                }
            }
            EventKind::WriteBack => {
                let from = frac.expect("write-back follows a compute");
                for c in 0..dh {
                    let y = rescale(acc[e.row * dh + c], from, fmt, ctx);
                    out.row_mut(e.row)[c] = y;
                }
            }
            _ => {}
        }
    }
    Ok((out, measure_traffic(&schedule)))
}

/// Projection weights of one attention layer. All projections are `d → d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub wq: BlockedWeights,
    pub wk: BlockedWeights,
    pub wv: BlockedWeights,
    pub wo: BlockedWeights,
    /// Multiply queries by `1/√d_h` before the score product. Off by default.
    pub scale_scores: bool,
}

impl AttentionParams {
    pub fn dim(&self) -> usize {
        self.wq.in_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.n_heads
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Shape(format!("d = {d} not divisible into {} heads", self.n_heads)));
        }
        for w in [&self.wq, &self.wk, &self.wv, &self.wo] {
            if w.in_dim() != d || w.out_dim() != d {
                return Err(Error::Shape(format!("projection {}→{} in a d = {d} layer", w.in_dim(), w.out_dim())));
            }
        }
        Ok(())
    }
}

/// Counters for one attention layer, summed over heads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AttentionStats {
    pub projections: LinearStats,
    pub qk: TrafficStats,
    pub mv: TrafficStats,
    pub qk_macs: u64,
    pub mv_macs: u64,
    pub projection_overflows: u64,
    pub qk_overflows: u64,
    pub mv_overflows: u64,
}

pub fn self_attention(
    x: &FxTensor,
    params: &AttentionParams,
    p: usize,
    ctx: &mut RunContext,
) -> Result<(FxTensor, AttentionStats)> {
    params.validate()?;
    let d = params.dim();
    if x.shape().len() != 2 || x.cols() != d {
        return Err(Error::Shape(format!("input {:?} for d = {d}", x.shape())));
    }
    let n = x.rows();
    let dh = params.head_dim();
    let cfg = LinearConfig::dense(d, d, BiasSource::Attention7);
    let mut stats = AttentionStats::default();
    let mut project = |w: &BlockedWeights, ctx: &mut RunContext| -> Result<FxTensor> {
        let before = ctx.overflow_events();
        let (y, s) = unified_linear(x, w, &cfg, ctx)?;
        stats.projections += s;
        stats.projection_overflows += ctx.overflow_events() - before;
        Ok(y)
    };
    let q = project(&params.wq, ctx)?;
    let k = project(&params.wk, ctx)?;
    let v = project(&params.wv, ctx)?;

    let fmt = x.fmt();
    let scale = params.scale_scores.then(|| quantize(1.0 / (dh as f64).sqrt(), fmt, ctx));
    let mut concat = FxTensor::zeros(&[n, d], fmt);
    for h in 0..params.n_heads {
        let mut qh = q.column_slice(h * dh, dh);
        if let Some(s) = scale {
            let scaled: Vec<i64> = qh
                .raw()
                .iter()
                .map(|&r| rescale(r as i128 * s.raw() as i128, 2 * fmt.frac_bits(), fmt, ctx))
                .collect();
            qh = FxTensor::from_raw(&[n, dh], fmt, scaled)?;
        }
        let before = ctx.overflow_events();
        let (rows, qk) = run_qk(&qh, &k.column_slice(h * dh, dh), p, ctx)?;
        let mid = ctx.overflow_events();
        let (yh, mv) = run_mv(&rows, &v.column_slice(h * dh, dh), p, ctx)?;
        stats.qk_overflows += mid - before;
        stats.mv_overflows += ctx.overflow_events() - mid;
        stats.qk = stats.qk.then(qk);
        stats.mv = stats.mv.then(mv);
        stats.qk_macs += (n * n * dh) as u64;
        stats.mv_macs += (n * n * dh) as u64;
        for i in 0..n {
            concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(yh.row(i));
        }
    }
    let before = ctx.overflow_events();
    let (y, s) = unified_linear(&concat, &params.wo, &cfg, ctx)?;
    stats.projections += s;
    stats.projection_overflows += ctx.overflow_events() - before;
    Ok((y, stats))
}
