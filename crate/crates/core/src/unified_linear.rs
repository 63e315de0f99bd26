//! One configurable linear-layer kernel for every layer shape in the model.
//!
//! The kernel walks a single flattened `(output, input)` index stream, reads
//! weights from a blocked layout through a cursor, accumulates in a 64-bit
//! integer accumulator with the widened bias pre-aligned, and rounds once per
//! output into the activation format. The reader can take every token or an
//! ascending index list; the writer can apply GELU and can accumulate a
//! scaled result onto the existing output instead of overwriting it.

use serde::Serialize;

use crate::approx::{gelu, GeluTable};
use crate::error::{Error, Result};
use crate::fixedpoint::{fx_add, fx_mul, rescale, FxTensor, FxValue, QFormat, RunContext};

/// Default number of weights per block.
pub const DEFAULT_BLOCK_SIZE: usize = 8;

/// Lexicographic `(i, j)` pairs for `i < out_dim`, `j < in_dim`, produced
/// with increment/compare register updates only.
#[derive(Debug, Clone)]
pub struct FlatIndices {
    next_i: usize,
    next_j: usize,
    remaining: usize,
    in_dim: usize,
}

pub fn flatten_indices(out_dim: usize, in_dim: usize) -> FlatIndices {
    FlatIndices { next_i: 0, next_j: 0, remaining: out_dim * in_dim, in_dim }
}

impl Iterator for FlatIndices {
    type Item = (usize, usize);

    fn next(&mut self) -> Option<(usize, usize)> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let (i, j) = (self.next_i, self.next_j);
        let last_col = j == self.in_dim - 1;
        self.next_i = if last_col { self.next_i + 1 } else { self.next_i };
        self.next_j = if last_col { 0 } else { self.next_j + 1 };
        Some((i, j))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for FlatIndices {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputMode {
    Dense,
    /// Strictly ascending token indices; only these rows are read and written.
    Sparse(Vec<usize>),
}

/// Which bias format the layer was trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BiasSource {
    /// Attention projections: 7 integer bits.
    Attention7,
    /// ViT and expert MLPs: 5 integer bits.
    Mlp5,
}

impl BiasSource {
    pub fn int_bits(self) -> u8 {
        match self {
            BiasSource::Attention7 => 7,
            BiasSource::Mlp5 => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub input_mode: InputMode,
    pub apply_gelu: bool,
    /// When set, `out[t] += scale[t] · y[t]`, one scale per selected token.
    pub accumulate: Option<Vec<FxValue>>,
    pub bias_source: BiasSource,
}

impl LinearConfig {
    pub fn dense(in_dim: usize, out_dim: usize, bias_source: BiasSource) -> Self {
        Self {
            in_dim,
            out_dim,
            input_mode: InputMode::Dense,
            apply_gelu: false,
            accumulate: None,
            bias_source,
        }
    }

    pub fn sparse(mut self, indices: Vec<usize>) -> Self {
        self.input_mode = InputMode::Sparse(indices);
        self
    }

    pub fn with_gelu(mut self) -> Self {
        self.apply_gelu = true;
        self
    }

    pub fn accumulate(mut self, scales: Vec<FxValue>) -> Self {
        self.accumulate = Some(scales);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Shape(format!("linear dims {}→{} must be ≥ 1", self.in_dim, self.out_dim)));
        }
        if let InputMode::Sparse(idx) = &self.input_mode {
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument("sparse indices must be strictly ascending".into()));
            }
        }
        Ok(())
    }
}

/// Weights grouped so one block holds one compute step's operands, plus
/// biases converted to the widened bias format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockedWeights {
    in_dim: usize,
    out_dim: usize,
    block_size: usize,
    weight_fmt: QFormat,
    blocks: Vec<Vec<i64>>,
    bias_fmt: QFormat,
    bias: Vec<i64>,
    bias_source: BiasSource,
}

impl BlockedWeights {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn weight_fmt(&self) -> QFormat {
        self.weight_fmt
    }

    pub fn bias_fmt(&self) -> QFormat {
        self.bias_fmt
    }

    pub fn bias_source(&self) -> BiasSource {
        self.bias_source
    }

    pub fn blocks(&self) -> &[Vec<i64>] {
        &self.blocks
    }

    pub fn bias(&self) -> &[i64] {
        &self.bias
    }

    /// The original row-major `[out_dim × in_dim]` weight sequence.
    pub fn unpack(&self) -> Vec<i64> {
        self.blocks.iter().flatten().copied().collect()
    }

    pub fn weight_count(&self) -> usize {
        self.in_dim * self.out_dim
    }
}

/// Block a row-major `[out × in]` weight tensor and widen its `[out]` biases.
pub fn pack_blocked_weights(
    weights: &FxTensor,
    biases: &FxTensor,
    bias_source: BiasSource,
    bias_widened: QFormat,
    block_size: usize,
    ctx: &mut RunContext,
) -> Result<BlockedWeights> {
    let (out_dim, in_dim) = match weights.shape() {
        [o, i] => (*o, *i),
        s => return Err(Error::Shape(format!("weights must be 2-D, got {s:?}"))),
    };
    if out_dim == 0 || in_dim == 0 {
        return Err(Error::Shape("weights must be non-empty".into()));
    }
    if biases.len() != out_dim {
        return Err(Error::Shape(format!("{} biases for {out_dim} outputs", biases.len())));
    }
    if block_size == 0 {
        return Err(Error::InvalidArgument("block size must be ≥ 1".into()));
    }
    let bias_in = biases.fmt();
    if bias_in.int_bits != bias_source.int_bits() {
        return Err(Error::InvalidFormat(format!(
            "{bias_source:?} bias expects {} integer bits, got {bias_in}",
            bias_source.int_bits()
        )));
    }
    if bias_widened.int_bits < bias_in.int_bits || bias_widened.frac_bits() < bias_in.frac_bits() {
        return Err(Error::InvalidFormat(format!("{bias_widened} does not cover {bias_in}")));
    }
    let blocks = weights.raw().chunks(block_size).map(<[i64]>::to_vec).collect();
    let bias = biases
        .raw()
        .iter()
        .map(|&r| rescale(r as i128, bias_in.frac_bits(), bias_widened, ctx))
        .collect();
    Ok(BlockedWeights {
        in_dim,
        out_dim,
        block_size,
        weight_fmt: weights.fmt(),
        blocks,
        bias_fmt: bias_widened,
        bias,
        bias_source,
    })
}

/// Work done by one kernel invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinearStats {
    pub macs: u64,
    /// Weight blocks streamed from the backing store (once per invocation).
    pub weight_blocks: u64,
    pub tokens: u64,
    /// One block of weights multiplied per iteration.
    pub iterations: u64,
}

impl std::ops::AddAssign for LinearStats {
    fn add_assign(&mut self, o: Self) {
        self.macs += o.macs;
        self.weight_blocks += o.weight_blocks;
        self.tokens += o.tokens;
        self.iterations += o.iterations;
    }
}

/// Run the kernel, allocating a zeroed `[tokens × out_dim]` output in the
/// input's format.
pub fn unified_linear(
    input: &FxTensor,
    w: &BlockedWeights,
    cfg: &LinearConfig,
    ctx: &mut RunContext,
) -> Result<(FxTensor, LinearStats)> {
    let mut out = FxTensor::zeros(&[input.rows(), cfg.out_dim], input.fmt());
    let stats = unified_linear_into(input, w, cfg, &mut out, ctx)?;
    Ok((out, stats))
}

/// Run the kernel into an existing output buffer. Rows that are not selected
/// are left untouched.
pub fn unified_linear_into(
    input: &FxTensor,
    w: &BlockedWeights,
    cfg: &LinearConfig,
    out: &mut FxTensor,
    ctx: &mut RunContext,
) -> Result<LinearStats> {
    cfg.validate()?;
    if w.in_dim != cfg.in_dim || w.out_dim != cfg.out_dim {
        return Err(Error::Shape(format!(
            "weights are {}→{}, config is {}→{}",
            w.in_dim, w.out_dim, cfg.in_dim, cfg.out_dim
        )));
    }
    if input.shape().len() != 2 || input.cols() != cfg.in_dim {
        return Err(Error::Shape(format!("input {:?} for in_dim {}", input.shape(), cfg.in_dim)));
    }
    if out.shape() != [input.rows(), cfg.out_dim] {
        return Err(Error::Shape(format!(
            "output {:?}, expected [{}, {}]",
            out.shape(),
            input.rows(),
            cfg.out_dim
        )));
    }
    let n_tokens = input.rows();
    let tokens: Vec<usize> = match &cfg.input_mode {
        InputMode::Dense => (0..n_tokens).collect(),
        InputMode::Sparse(idx) => {
            if let Some(&bad) = idx.iter().find(|&&t| t >= n_tokens) {
                return Err(Error::IndexOutOfRange { index: bad, len: n_tokens });
            }
            idx.clone()
        }
    };
    if let Some(scales) = &cfg.accumulate {
        if scales.len() != tokens.len() {
            return Err(Error::Shape(format!("{} scales for {} tokens", scales.len(), tokens.len())));
        }
    }

    let act = out.fmt();
    let product_frac = w.weight_fmt.frac_bits() + input.fmt().frac_bits();
    let acc_frac = product_frac.max(w.bias_fmt.frac_bits());
    let product_shift = acc_frac - product_frac;
    let bias_shift = acc_frac - w.bias_fmt.frac_bits();
    let bias: Vec<i64> = w.bias.iter().map(|&b| b << bias_shift).collect();
    let table = GeluTable::shared();

    let mut acc = vec![0i64; cfg.out_dim];
    for (slot, &t) in tokens.iter().enumerate() {
        let x = input.row(t);
        acc.copy_from_slice(&bias);
        let mut block = 0;
        let mut offset = 0;
        for (i, j) in flatten_indices(cfg.out_dim, cfg.in_dim) {
            let weight = w.blocks[block][offset];
            offset += 1;
            if offset == w.block_size {
                offset = 0;
                block += 1;
            }
            acc[i] += (weight * x[j]) << product_shift;
        }
        let row = out.row_mut(t);
        for (i, &a) in acc.iter().enumerate() {
            let mut y = FxValue::from_raw_unchecked(rescale(a as i128, acc_frac, act, ctx), act);
            if cfg.apply_gelu {
                y = gelu(y, table, ctx);
            }
            row[i] = match &cfg.accumulate {
                None => y.raw(),
                Some(scales) => {
                    let scaled = fx_mul(scales[slot], y, act, ctx);
                    fx_add(FxValue::from_raw_unchecked(row[i], act), scaled, act, ctx).raw()
                }
            };
        }
    }

    let per_token_blocks = w.weight_count().div_ceil(w.block_size) as u64;
    Ok(LinearStats {
        macs: (tokens.len() * w.weight_count()) as u64,
        weight_blocks: w.blocks.len() as u64,
        tokens: tokens.len() as u64,
        iterations: tokens.len() as u64 * per_token_blocks,
    })
}
