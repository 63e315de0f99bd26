//! Fixed-point formats and exact, deterministic arithmetic.
//!
//! A value is a two's-complement raw integer interpreted as
//! `raw × 2^-frac_bits`. Every operation is an exact integer computation on
//! raws followed by one conversion into the declared result format, where the
//! format's rounding and overflow policies apply. Overflow events (saturation
//! or wraparound) are counted on an explicit [`RunContext`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported total width. Raws live in `i64`, intermediates in `i128`.
pub const MAX_WIDTH: u8 = 62;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Overflow {
    #[default]
    Wrap,
    Saturate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Rounding {
    #[default]
    TruncateTowardNegInf,
    RoundNearestEven,
}

/// A fixed-point number format.
///
/// `int_bits` excludes the sign bit, so a signed format has
/// `frac_bits = width_bits - int_bits - 1` and covers
/// `[-2^int_bits, 2^int_bits - 2^-frac_bits]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QFormat {
    pub width_bits: u8,
    pub int_bits: u8,
    pub signed: bool,
    #[serde(default)]
    pub overflow: Overflow,
    #[serde(default)]
    pub rounding: Rounding,
}

impl QFormat {
    pub fn new(width_bits: u8, int_bits: u8, signed: bool) -> Result<Self> {
        let sign = u8::from(signed);
        if width_bits == 0 || width_bits > MAX_WIDTH {
            return Err(Error::InvalidFormat(format!(
                "width {width_bits} outside 1..={MAX_WIDTH}"
            )));
        }
        if u16::from(int_bits) + u16::from(sign) > u16::from(width_bits) {
            return Err(Error::InvalidFormat(format!(
                "{int_bits} integer bits (+{sign} sign) exceed width {width_bits}"
            )));
        }
        Ok(Self {
            width_bits,
            int_bits,
            signed,
            overflow: Overflow::default(),
            rounding: Rounding::default(),
        })
    }

    /// Const constructor for formats known to be valid.
    pub const fn signed(width_bits: u8, int_bits: u8) -> Self {
        assert!(width_bits > 0 && width_bits <= MAX_WIDTH && int_bits < width_bits);
        Self {
            width_bits,
            int_bits,
            signed: true,
            overflow: Overflow::Wrap,
            rounding: Rounding::TruncateTowardNegInf,
        }
    }

    pub const fn unsigned(width_bits: u8, int_bits: u8) -> Self {
        assert!(width_bits > 0 && width_bits <= MAX_WIDTH && int_bits <= width_bits);
        Self {
            width_bits,
            int_bits,
            signed: false,
            overflow: Overflow::Wrap,
            rounding: Rounding::TruncateTowardNegInf,
        }
    }

    pub const fn with_overflow(mut self, overflow: Overflow) -> Self {
        self.overflow = overflow;
        self
    }

    pub const fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub const fn frac_bits(&self) -> u32 {
        (self.width_bits - self.int_bits - self.signed as u8) as u32
    }

    pub const fn min_raw(&self) -> i64 {
        if self.signed {
            -(1i64 << (self.width_bits - 1))
        } else {
            0
        }
    }

    pub const fn max_raw(&self) -> i64 {
        if self.signed {
            (1i64 << (self.width_bits - 1)) - 1
        } else {
            (1i64 << self.width_bits) - 1
        }
    }

    /// Real value of one unit in the last place.
    pub fn ulp(&self) -> f64 {
        ldexp(1.0, -(self.frac_bits() as i32))
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.ulp()
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.ulp()
    }

    pub fn contains_raw(&self, raw: i64) -> bool {
        (self.min_raw()..=self.max_raw()).contains(&raw)
    }

    /// Same precision, one more integer bit. Differences of two values in
    /// `self` are exact in the widened format.
    pub fn widened_by_one(&self) -> Self {
        let mut f = *self;
        f.width_bits += 1;
        f.int_bits += 1;
        f.signed = true;
        f
    }

    /// Packed `flags` byte of the weight-file format descriptor.
    pub fn flags(&self) -> u8 {
        let mut flags = 0;
        if self.signed {
            flags |= 0b001;
        }
        if self.overflow == Overflow::Saturate {
            flags |= 0b010;
        }
        if self.rounding == Rounding::RoundNearestEven {
            flags |= 0b100;
        }
        flags
    }

    pub fn from_descriptor(width_bits: u8, int_bits: u8, flags: u8) -> Result<Self> {
        if flags & !0b111 != 0 {
            return Err(Error::InvalidFormat(format!("unknown flag bits {flags:#010b}")));
        }
        let mut f = Self::new(width_bits, int_bits, flags & 0b001 != 0)?;
        if flags & 0b010 != 0 {
            f.overflow = Overflow::Saturate;
        }
        if flags & 0b100 != 0 {
            f.rounding = Rounding::RoundNearestEven;
        }
        Ok(f)
    }

    /// Smallest signed format of `width_bits` whose range covers `max_abs`
    /// under truncation, i.e. `max_abs < 2^int_bits`.
    pub fn covering(width_bits: u8, max_abs: f64) -> Result<Self> {
        for int_bits in 0..width_bits {
            if max_abs < ldexp(1.0, int_bits as i32) {
                return Self::new(width_bits, int_bits, true);
            }
        }
        Err(Error::InvalidFormat(format!(
            "no {width_bits}-bit format covers magnitude {max_abs}"
        )))
    }
}

impl std::fmt::Display for QFormat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}.{}",
            if self.signed { "s" } else { "u" },
            self.int_bits,
            self.frac_bits()
        )
    }
}

#[inline]
pub(crate) fn ldexp(x: f64, exp: i32) -> f64 {
    libm::ldexp(x, exp)
}

/// Overflow event counters for one logical run. Not shared between threads;
/// concurrent runs use separate contexts and [`RunContext::merge`] them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunContext {
    saturations: u64,
    wraps: u64,
}

impl RunContext {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn saturation_events(&self) -> u64 {
        self.saturations
    }

    pub fn wrap_events(&self) -> u64 {
        self.wraps
    }

    pub fn overflow_events(&self) -> u64 {
        self.saturations + self.wraps
    }

    pub fn merge(&mut self, other: &RunContext) {
        self.saturations += other.saturations;
        self.wraps += other.wraps;
    }

    fn record(&mut self, policy: Overflow) {
        match policy {
            Overflow::Saturate => self.saturations += 1,
            Overflow::Wrap => self.wraps += 1,
        }
    }
}

/// Arithmetic shift right by `shift` with the given rounding.
pub(crate) fn shift_right_rounded(raw: i128, shift: u32, rounding: Rounding) -> i128 {
    if shift == 0 {
        return raw;
    }
    if shift >= 127 {
        return if raw < 0 && rounding == Rounding::TruncateTowardNegInf { -1 } else { 0 };
    }
    let floor = raw >> shift;
    match rounding {
        Rounding::TruncateTowardNegInf => floor,
        Rounding::RoundNearestEven => {
            let rem = raw - (floor << shift);
            let half = 1i128 << (shift - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        }
    }
}

/// Apply `fmt`'s overflow policy to an already-rounded raw.
pub(crate) fn fit(raw: i128, fmt: QFormat, ctx: &mut RunContext) -> i64 {
    let (lo, hi) = (fmt.min_raw() as i128, fmt.max_raw() as i128);
    if (lo..=hi).contains(&raw) {
        return raw as i64;
    }
    ctx.record(fmt.overflow);
    match fmt.overflow {
        Overflow::Saturate => raw.clamp(lo, hi) as i64,
        Overflow::Wrap => wrap_raw(raw, fmt) as i64,
    }
}

fn wrap_raw(raw: i128, fmt: QFormat) -> i128 {
    let modulus = 1i128 << fmt.width_bits;
    let r = raw.rem_euclid(modulus);
    if fmt.signed && r > fmt.max_raw() as i128 {
        r - modulus
    } else {
        r
    }
}

/// Convert a wide raw with `from_frac` fractional bits into `to`.
pub fn rescale(raw: i128, from_frac: u32, to: QFormat, ctx: &mut RunContext) -> i64 {
    let to_frac = to.frac_bits();
    let aligned = if to_frac >= from_frac {
        raw << (to_frac - from_frac)
    } else {
        shift_right_rounded(raw, from_frac - to_frac, to.rounding)
    };
    fit(aligned, to, ctx)
}

/// A fixed-point value: `raw × 2^-fmt.frac_bits()`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FxValue {
    raw: i64,
    fmt: QFormat,
}

impl FxValue {
    pub fn from_raw(raw: i64, fmt: QFormat) -> Result<Self> {
        if !fmt.contains_raw(raw) {
            return Err(Error::RawOutOfRange { raw, width: fmt.width_bits });
        }
        Ok(Self { raw, fmt })
    }

    pub(crate) fn from_raw_unchecked(raw: i64, fmt: QFormat) -> Self {
        debug_assert!(fmt.contains_raw(raw), "raw {raw} outside {fmt}");
        Self { raw, fmt }
    }

    pub fn zero(fmt: QFormat) -> Self {
        Self { raw: 0, fmt }
    }

    pub fn min(fmt: QFormat) -> Self {
        Self { raw: fmt.min_raw(), fmt }
    }

    pub fn max(fmt: QFormat) -> Self {
        Self { raw: fmt.max_raw(), fmt }
    }

    pub fn raw(&self) -> i64 {
        self.raw
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn to_f64(&self) -> f64 {
        dequantize(*self)
    }
}

/// Round `x` into `fmt`. Out-of-range values follow the overflow policy and
/// record one event; NaN maps to zero and infinities to the range ends, each
/// also counted as an event.
pub fn quantize(x: f64, fmt: QFormat, ctx: &mut RunContext) -> FxValue {
    if !x.is_finite() {
        ctx.record(fmt.overflow);
        let raw = if x.is_nan() {
            0
        } else if x > 0.0 {
            fmt.max_raw()
        } else {
            fmt.min_raw()
        };
        return FxValue { raw, fmt };
    }
    let scaled = ldexp(x, fmt.frac_bits() as i32);
    let rounded = match fmt.rounding {
        Rounding::TruncateTowardNegInf => scaled.floor(),
        Rounding::RoundNearestEven => scaled.round_ties_even(),
    };
    let (lo, hi) = (fmt.min_raw() as f64, fmt.max_raw() as f64);
    if rounded >= lo && rounded <= hi {
        return FxValue { raw: rounded as i64, fmt };
    }
    ctx.record(fmt.overflow);
    let raw = match fmt.overflow {
        Overflow::Saturate => {
            if rounded > hi {
                fmt.max_raw()
            } else {
                fmt.min_raw()
            }
        }
        Overflow::Wrap => {
            // fmod by a power of two is exact for integral doubles.
            let modulus = ldexp(1.0, fmt.width_bits as i32);
            let r = rounded.rem_euclid(modulus) as i128;
            wrap_raw(r, fmt) as i64
        }
    };
    FxValue { raw, fmt }
}

pub fn dequantize(v: FxValue) -> f64 {
    ldexp(v.raw as f64, -(v.fmt.frac_bits() as i32))
}

pub fn requantize(v: FxValue, target: QFormat, ctx: &mut RunContext) -> FxValue {
    let raw = rescale(v.raw as i128, v.fmt.frac_bits(), target, ctx);
    FxValue { raw, fmt: target }
}

fn aligned_pair(a: FxValue, b: FxValue) -> (i128, i128, u32) {
    let frac = a.fmt.frac_bits().max(b.fmt.frac_bits());
    (
        (a.raw as i128) << (frac - a.fmt.frac_bits()),
        (b.raw as i128) << (frac - b.fmt.frac_bits()),
        frac,
    )
}

pub fn fx_add(a: FxValue, b: FxValue, out: QFormat, ctx: &mut RunContext) -> FxValue {
    let (x, y, frac) = aligned_pair(a, b);
    FxValue { raw: rescale(x + y, frac, out, ctx), fmt: out }
}

pub fn fx_sub(a: FxValue, b: FxValue, out: QFormat, ctx: &mut RunContext) -> FxValue {
    let (x, y, frac) = aligned_pair(a, b);
    FxValue { raw: rescale(x - y, frac, out, ctx), fmt: out }
}

pub fn fx_mul(a: FxValue, b: FxValue, out: QFormat, ctx: &mut RunContext) -> FxValue {
    let product = a.raw as i128 * b.raw as i128;
    let frac = a.fmt.frac_bits() + b.fmt.frac_bits();
    FxValue { raw: rescale(product, frac, out, ctx), fmt: out }
}

/// `a / b` rounded per `out`. Division by zero is the caller's bug.
pub(crate) fn fx_div(a: FxValue, b: FxValue, out: QFormat, ctx: &mut RunContext) -> FxValue {
    debug_assert!(b.raw != 0);
    // a/b = (ra / rb) × 2^(fb - fa); scale the numerator so the quotient
    // carries out.frac_bits() fractional bits.
    let shift = out.frac_bits() as i64 + b.fmt.frac_bits() as i64 - a.fmt.frac_bits() as i64;
    let (num, den) = if shift >= 0 {
        ((a.raw as i128) << shift, b.raw as i128)
    } else {
        (a.raw as i128, (b.raw as i128) << (-shift))
    };
    let (num, den) = if den < 0 { (-num, -den) } else { (num, den) };
    // Euclidean division by a positive divisor is floor division.
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    let q = match out.rounding {
        Rounding::TruncateTowardNegInf => q,
        Rounding::RoundNearestEven => {
            let twice = 2 * r;
            if twice > den || (twice == den && q & 1 == 1) {
                q + 1
            } else {
                q
            }
        }
    };
    FxValue { raw: fit(q, out, ctx), fmt: out }
}

/// Serializes as the represented real value.
impl Serialize for FxValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.to_f64())
    }
}

/// A row-major array of raws sharing one format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FxTensor {
    shape: Vec<usize>,
    fmt: QFormat,
    data: Vec<i64>,
}

impl FxTensor {
    pub fn zeros(shape: &[usize], fmt: QFormat) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), fmt, data: vec![0; len] }
    }

    pub fn from_raw(shape: &[usize], fmt: QFormat, data: Vec<i64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "{} raws for shape {shape:?} (expected {len})",
                data.len()
            )));
        }
        if let Some(&raw) = data.iter().find(|&&r| !fmt.contains_raw(r)) {
            return Err(Error::RawOutOfRange { raw, width: fmt.width_bits });
        }
        Ok(Self { shape: shape.to_vec(), fmt, data })
    }

    pub fn from_f64(shape: &[usize], fmt: QFormat, values: &[f64], ctx: &mut RunContext) -> Result<Self> {
        let data = values.iter().map(|&x| quantize(x, fmt, ctx).raw).collect();
        Self::from_raw(shape, fmt, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn fmt(&self) -> QFormat {
        self.fmt
    }

    pub fn raw(&self) -> &[i64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[i64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [i64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, flat: usize) -> FxValue {
        FxValue::from_raw_unchecked(self.data[flat], self.fmt)
    }

    pub fn at(&self, row: usize, col: usize) -> FxValue {
        self.get(row * self.cols() + col)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        let ulp = self.fmt.ulp();
        self.data.iter().map(|&r| r as f64 * ulp).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|&r| (r as f64).abs()).fold(0.0, f64::max) * self.fmt.ulp()
    }

    pub fn requantize(&self, target: QFormat, ctx: &mut RunContext) -> FxTensor {
        let from = self.fmt.frac_bits();
        let data = self.data.iter().map(|&r| rescale(r as i128, from, target, ctx)).collect();
        FxTensor { shape: self.shape.clone(), fmt: target, data }
    }

    /// Columns `[start, start + width)` of a 2-D tensor.
    pub fn column_slice(&self, start: usize, width: usize) -> FxTensor {
        let mut data = Vec::with_capacity(self.rows() * width);
        for i in 0..self.rows() {
            data.extend_from_slice(&self.row(i)[start..start + width]);
        }
        FxTensor { shape: vec![self.rows(), width], fmt: self.fmt, data }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// The formats used across the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatCatalog {
    pub activation: QFormat,
    /// Template for weights; the integer bits are chosen per tensor at load.
    pub weight: QFormat,
    pub bias_attention: QFormat,
    pub bias_mlp: QFormat,
    pub bias_widened: QFormat,
    pub gelu_lut_entry: QFormat,
}

impl Default for FormatCatalog {
    fn default() -> Self {
        let bias_attention = QFormat::signed(16, 7);
        let bias_mlp = QFormat::signed(16, 5);
        Self {
            activation: QFormat::signed(32, 10),
            weight: QFormat::signed(16, 0),
            bias_attention,
            bias_mlp,
            bias_widened: QFormat::signed(19, 7),
            gelu_lut_entry: QFormat::unsigned(22, 0),
        }
    }
}

impl FormatCatalog {
    /// 16-bit weight format for a tensor with the given largest magnitude.
    pub fn weight_format_for(&self, max_abs: f64) -> Result<QFormat> {
        let f = QFormat::covering(self.weight.width_bits, max_abs)?;
        Ok(f.with_overflow(self.weight.overflow).with_rounding(self.weight.rounding))
    }
}

/// Smallest signed format with the larger integer range and the finer
/// precision of two signed formats. Both convert into it losslessly.
pub fn widened_bias(a: QFormat, b: QFormat) -> QFormat {
    let int_bits = a.int_bits.max(b.int_bits);
    let frac = a.frac_bits().max(b.frac_bits()) as u8;
    QFormat::signed(1 + int_bits + frac, int_bits)
        .with_overflow(a.overflow)
        .with_rounding(a.rounding)
}
