//! Hardware-friendly nonlinear kernels: fixed-point exponential, the
//! dynamic-bias single-pass softmax, and the ReLU-minus-table GELU.
//!
//! Every exponential evaluated inside the softmax paths has a non-positive
//! argument, so its result lies in `(0, 1]` and cannot overflow the
//! activation format no matter how large the scores are.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixedpoint::{
    dequantize, fx_add, fx_div, fx_mul, fx_sub, ldexp, quantize, rescale, FormatCatalog, FxValue,
    QFormat, RunContext,
};

/// `quantize(e^x)` in the format of `x`.
pub fn fx_exp(x: FxValue, ctx: &mut RunContext) -> FxValue {
    fx_exp_into(x, x.fmt(), ctx)
}

/// `quantize(e^x, out)`. The exponential is evaluated in double precision on
/// the exact real value of `x`.
pub fn fx_exp_into(x: FxValue, out: QFormat, ctx: &mut RunContext) -> FxValue {
    quantize(dequantize(x).exp(), out, ctx)
}

/// Exact `a - b` in a format one bit wider than `a`'s.
fn exact_diff(a: FxValue, b: FxValue, ctx: &mut RunContext) -> FxValue {
    fx_sub(a, b, a.fmt().widened_by_one(), ctx)
}

/// Running bias (maximum) and denominator of the online softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoftmaxState {
    b: FxValue,
    s: FxValue,
}

impl SoftmaxState {
    /// `b = -∞` (the format minimum), `s = 0`.
    pub fn new(fmt: QFormat) -> Self {
        Self { b: FxValue::min(fmt), s: FxValue::zero(fmt) }
    }

    pub fn bias(&self) -> FxValue {
        self.b
    }

    pub fn denominator(&self) -> FxValue {
        self.s
    }

    pub fn fmt(&self) -> QFormat {
        self.b.fmt()
    }

    pub fn update(self, x: FxValue, ctx: &mut RunContext) -> Self {
        softmax_stream_update(self, x, ctx)
    }
}

fn one(fmt: QFormat, ctx: &mut RunContext) -> FxValue {
    quantize(1.0, fmt, ctx)
}

/// One step of the online bias/denominator recurrence.
///
/// A new maximum rescales the running sum by `exp(b - x)` and adds one;
/// otherwise `exp(x - b)` is added. Both exponent arguments are `<= 0`.
pub fn softmax_stream_update(state: SoftmaxState, x: FxValue, ctx: &mut RunContext) -> SoftmaxState {
    let fmt = state.fmt();
    debug_assert_eq!(x.fmt(), fmt);
    if x.raw() > state.b.raw() {
        let decay = fx_exp_into(exact_diff(state.b, x, ctx), fmt, ctx);
        let scaled = fx_mul(state.s, decay, fmt, ctx);
        let s = fx_add(scaled, one(fmt, ctx), fmt, ctx);
        SoftmaxState { b: x, s }
    } else {
        let term = fx_exp_into(exact_diff(x, state.b, ctx), fmt, ctx);
        SoftmaxState { b: state.b, s: fx_add(state.s, term, fmt, ctx) }
    }
}

/// `exp(x - b) / s` for one element of a completed row.
pub fn softmax_finalize(x: FxValue, state: &SoftmaxState, ctx: &mut RunContext) -> Result<FxValue> {
    if state.s.raw() == 0 {
        return Err(Error::ZeroDenominator);
    }
    let fmt = state.fmt();
    let num = fx_exp_into(exact_diff(x, state.b, ctx), fmt, ctx);
    Ok(fx_div(num, state.s, fmt, ctx))
}

/// Fold a whole vector through [`softmax_stream_update`].
pub fn softmax_state(x: &[FxValue], ctx: &mut RunContext) -> Result<SoftmaxState> {
    let first = x.first().ok_or(Error::Empty("softmax input"))?;
    Ok(x.iter().fold(SoftmaxState::new(first.fmt()), |st, &v| st.update(v, ctx)))
}

/// Single-pass softmax: streaming state, then finalize each stored score.
pub fn softmax_single_pass(x: &[FxValue], ctx: &mut RunContext) -> Result<(SoftmaxState, Vec<FxValue>)> {
    let state = softmax_state(x, ctx)?;
    let out = x.iter().map(|&v| softmax_finalize(v, &state, ctx)).collect::<Result<_>>()?;
    Ok((state, out))
}

/// Result of the three-pass softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreePass {
    pub state: SoftmaxState,
    pub outputs: Vec<FxValue>,
}

/// Three separate passes: the maximum (and the running-maximum trace), the
/// denominator, then each output.
///
/// The denominator pass consumes the trace from the first pass instead of
/// comparing against a live bias; it applies the same fixed-point operations
/// in the same order as the streaming recurrence, so the two agree bitwise
/// when the streaming state machine is correct. [`direct_denominator`] gives
/// the plain `Σ exp(x_j - b)` for comparison.
pub fn softmax_three_pass(x: &[FxValue], ctx: &mut RunContext) -> Result<ThreePass> {
    let first = x.first().ok_or(Error::Empty("softmax input"))?;
    let fmt = first.fmt();

    // Pass 1
    let mut running = Vec::with_capacity(x.len());
    let mut b = FxValue::min(fmt);
    for &v in x {
        running.push(b);
        if v.raw() > b.raw() {
            b = v;
        }
    }

    // Pass 2
    let mut s = FxValue::zero(fmt);
    for (&v, &prev) in x.iter().zip(&running) {
        s = if v.raw() > prev.raw() {
            let decay = fx_exp_into(exact_diff(prev, v, ctx), fmt, ctx);
            let scaled = fx_mul(s, decay, fmt, ctx);
            fx_add(scaled, one(fmt, ctx), fmt, ctx)
        } else {
            let term = fx_exp_into(exact_diff(v, prev, ctx), fmt, ctx);
            fx_add(s, term, fmt, ctx)
        };
    }

    // Pass 3
    let state = SoftmaxState { b, s };
    let outputs = x.iter().map(|&v| softmax_finalize(v, &state, ctx)).collect::<Result<_>>()?;
    Ok(ThreePass { state, outputs })
}

/// `Σ_j exp(x_j - b)` with a fixed bias. Fixed-point addition is exact, so
/// this is independent of element order.
pub fn direct_denominator(x: &[FxValue], b: FxValue, ctx: &mut RunContext) -> FxValue {
    let fmt = b.fmt();
    let mut s = FxValue::zero(fmt);
    for &v in x {
        let term = fx_exp_into(exact_diff(v, b, ctx), fmt, ctx);
        s = fx_add(s, term, fmt, ctx);
    }
    s
}

/// `GELU(x) = x · Φ(x)` using the exact error function.
pub fn gelu_reference(x: f64) -> f64 {
    0.5 * x * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// The tanh approximation of GELU.
pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// The sigmoid approximation `x · σ(1.702 x)`.
pub fn gelu_sigmoid(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

/// `δ(x) = ReLU(x) - GELU(x)`, even and in `[0, 1)`.
///
/// Written via `erfc` so the tail keeps full relative precision.
pub fn gelu_delta(x: f64) -> f64 {
    let a = x.abs();
    0.5 * a * libm::erfc(a / std::f64::consts::SQRT_2)
}

/// Location of the maximum of δ on `x >= 0`, where `1 - Φ(x) = x φ(x)`.
const DELTA_ARGMAX: f64 = 0.751_791_524_693_564_4;

/// Uniformly sampled `δ(i · step)` stored as unsigned pure-fraction entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeluTable {
    step_log2: u32,
    entry_fmt: QFormat,
    entries: Vec<i64>,
}

impl GeluTable {
    /// The shared table with the default step `2^-10` and the catalog's
    /// entry format.
    pub fn shared() -> &'static GeluTable {
        static TABLE: OnceLock<GeluTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            build_gelu_table(ldexp(1.0, -10), FormatCatalog::default().gelu_lut_entry)
                .expect("default GELU table parameters are valid")
        })
    }

    pub fn step(&self) -> f64 {
        ldexp(1.0, -(self.step_log2 as i32))
    }

    /// `k` where `step = 2^-k`.
    pub fn step_log2(&self) -> u32 {
        self.step_log2
    }

    /// Largest tabulated `|x|`.
    pub fn cutoff(&self) -> f64 {
        (self.entries.len() - 1) as f64 * self.step()
    }

    pub fn entry_fmt(&self) -> QFormat {
        self.entry_fmt
    }

    pub fn entries(&self) -> &[i64] {
        &self.entries
    }

    pub fn entry_value(&self, i: usize) -> f64 {
        ldexp(self.entries[i] as f64, -(self.entry_fmt.frac_bits() as i32))
    }
}

/// Tabulate δ from 0 up to the first sample past the peak where δ drops
/// below half an entry ulp (so GELU rounds to ReLU in the entry format).
pub fn build_gelu_table(step: f64, entry_fmt: QFormat) -> Result<GeluTable> {
    let step_log2 = power_of_two_exponent(step)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("GELU step {step} is not a negative power of two")))?;
    if entry_fmt.signed || entry_fmt.int_bits != 0 {
        return Err(Error::InvalidArgument(format!(
            "GELU entries need an unsigned pure-fraction format, got {entry_fmt}"
        )));
    }
    if step_log2 > 40 {
        return Err(Error::InvalidArgument(format!("GELU step 2^-{step_log2} is too fine")));
    }
    let threshold = entry_fmt.ulp() / 2.0;
    let mut ctx = RunContext::new();
    let mut entries = Vec::new();
    for i in 0u64.. {
        let x = i as f64 * step;
        let d = gelu_delta(x);
        entries.push(quantize(d, entry_fmt, &mut ctx).raw());
        if x > DELTA_ARGMAX && d < threshold {
            break;
        }
    }
    debug_assert_eq!(ctx.overflow_events(), 0);
    Ok(GeluTable { step_log2, entry_fmt, entries })
}

/// `k` such that `x == 2^-k`, if any.
pub fn power_of_two_exponent(x: f64) -> Option<u32> {
    if !(x > 0.0 && x < 1.0) {
        return None;
    }
    let k = (-x.log2()).round();
    (ldexp(1.0, -(k as i32)) == x).then_some(k as u32)
}

/// `ReLU(x) - table[round(|x| / step)]` inside the table, `ReLU(x)` beyond.
/// The index is a rounding right shift of `|raw|`.
pub fn gelu(x: FxValue, table: &GeluTable, ctx: &mut RunContext) -> FxValue {
    let fmt = x.fmt();
    let frac = fmt.frac_bits();
    let mag = (x.raw() as i128).abs();
    let relu = x.raw().max(0);

    let k = table.step_log2;
    let index = if frac >= k {
        let shift = frac - k;
        if shift == 0 {
            mag
        } else {
            (mag + (1 << (shift - 1))) >> shift
        }
    } else {
        mag << (k - frac)
    };
    let last = (table.entries.len() - 1) as i128;
    // |x| <= cutoff  ⟺  |x| / step <= last
    let within = if frac >= k { mag <= last << (frac - k) } else { index <= last };
    if !within {
        return FxValue::from_raw_unchecked(relu, fmt);
    }
    let entry = table.entries[index as usize] as i128;
    let efrac = table.entry_fmt.frac_bits();
    let wide_frac = frac.max(efrac);
    let wide = ((relu as i128) << (wide_frac - frac)) - (entry << (wide_frac - efrac));
    FxValue::from_raw_unchecked(rescale(wide, wide_frac, fmt, ctx), fmt)
}

/// Error summary for the CLI approximation reports.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ErrorStats {
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub samples: usize,
}

impl ErrorStats {
    fn from_errors(errors: impl IntoIterator<Item = f64>) -> Self {
        let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
        for e in errors {
            max = max.max(e);
            sum += e;
            n += 1;
        }
        Self { max_abs_error: max, mean_abs_error: if n > 0 { sum / n as f64 } else { 0.0 }, samples: n }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GeluReport {
    pub step: f64,
    pub cutoff: f64,
    pub table_entries: usize,
    pub grid_points: usize,
    pub lut: ErrorStats,
    pub tanh: ErrorStats,
    pub sigmoid: ErrorStats,
    pub relu_beyond_cutoff: bool,
    pub overflow_events: u64,
}

/// Compare the table GELU and the tanh/sigmoid forms against the exact GELU
/// on `grid` evenly spaced points of `[-8, 8]`.
pub fn gelu_error_report(step: f64, grid: usize) -> Result<GeluReport> {
    if grid < 2 {
        return Err(Error::InvalidArgument("GELU grid needs at least 2 points".into()));
    }
    let catalog = FormatCatalog::default();
    let table = build_gelu_table(step, catalog.gelu_lut_entry)?;
    let fmt = catalog.activation;
    let mut ctx = RunContext::new();
    let mut relu_beyond = true;
    let mut lut = Vec::with_capacity(grid);
    let mut tanh = Vec::with_capacity(grid);
    let mut sigmoid = Vec::with_capacity(grid);
    for i in 0..grid {
        let x = -8.0 + 16.0 * i as f64 / (grid - 1) as f64;
        let q = quantize(x, fmt, &mut ctx);
        let xq = dequantize(q);
        let exact = gelu_reference(xq);
        let approx = gelu(q, &table, &mut ctx);
        if xq.abs() > table.cutoff() && approx.raw() != q.raw().max(0) {
            relu_beyond = false;
        }
        lut.push((dequantize(approx) - exact).abs());
        tanh.push((gelu_tanh(xq) - exact).abs());
        sigmoid.push((gelu_sigmoid(xq) - exact).abs());
    }
    Ok(GeluReport {
        step,
        cutoff: table.cutoff(),
        table_entries: table.entries.len(),
        grid_points: grid,
        lut: ErrorStats::from_errors(lut),
        tanh: ErrorStats::from_errors(tanh),
        sigmoid: ErrorStats::from_errors(sigmoid),
        relu_beyond_cutoff: relu_beyond,
        overflow_events: ctx.overflow_events(),
    })
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SoftmaxReport {
    pub len: usize,
    pub trials: usize,
    pub seed: u64,
    /// Single-pass outputs against a double-precision softmax.
    pub output: ErrorStats,
    /// `|Σ outputs - 1|` per trial.
    pub sum_deviation: ErrorStats,
    /// Trials where streaming and three-pass `(b, s)` differ in any bit.
    pub three_pass_mismatches: usize,
    pub overflow_events: u64,
}

/// Run `trials` random score vectors of length `len` through the single-pass
/// softmax. Scores are uniform over the activation range scaled by 1/64 so
/// that the rows are not all one-hot.
pub fn softmax_error_report(len: usize, trials: usize, seed: u64) -> Result<SoftmaxReport> {
    if len == 0 {
        return Err(Error::Empty("softmax length"));
    }
    let fmt = FormatCatalog::default().activation;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = RunContext::new();
    let (mut out_err, mut sum_err) = (Vec::new(), Vec::new());
    let mut mismatches = 0;
    let span = fmt.max_value() / 64.0;
    for _ in 0..trials {
        let x: Vec<FxValue> = (0..len).map(|_| quantize(rng.gen_range(-span..span), fmt, &mut ctx)).collect();
        let (state, out) = softmax_single_pass(&x, &mut ctx)?;
        let three = softmax_three_pass(&x, &mut ctx)?;
        if three.state != state {
            mismatches += 1;
        }
        let xf: Vec<f64> = x.iter().map(|v| v.to_f64()).collect();
        let m = xf.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = xf.iter().map(|v| (v - m).exp()).sum();
        let mut total = 0.0;
        for (v, o) in xf.iter().zip(&out) {
            out_err.push((o.to_f64() - (v - m).exp() / denom).abs());
            total += o.to_f64();
        }
        sum_err.push((total - 1.0).abs());
    }
    Ok(SoftmaxReport {
        len,
        trials,
        seed,
        output: ErrorStats::from_errors(out_err),
        sum_deviation: ErrorStats::from_errors(sum_err),
        three_pass_mismatches: mismatches,
        overflow_events: ctx.overflow_events(),
    })
}
