//! Round-clamp quantizers: asymmetric (min/max with learnable clipping),
//! symmetric 2^b-level, and the balanced 2^b+1-level variant, plus the
//! weight/activation scale balancing that preserves the exact product.

use std::fmt;
use std::str::FromStr;

use crate::error::{AbqError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Largest bit width the engine accepts for a quantized operand.
pub const MAX_BITS: u8 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// `clamp(round(x/Δ) + z, 0, 2^b − 1)` with Δ, z from the clipped min/max.
    Asymmetric,
    /// 2^b levels `{−2^(b−1), …, 2^(b−1) − 1}` around a fixed zero point.
    Symmetric,
    /// 2^b + 1 levels `{−2^(b−1), …, 2^(b−1)}`; the level set is closed under negation.
    Balanced,
}

impl Scheme {
    pub fn id(self) -> u8 {
        match self {
            Scheme::Asymmetric => 0,
            Scheme::Symmetric => 1,
            Scheme::Balanced => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Scheme::Asymmetric),
            1 => Ok(Scheme::Symmetric),
            2 => Ok(Scheme::Balanced),
            other => Err(AbqError::Format(format!("unknown scheme id {other}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Asymmetric => "asymmetric",
            Scheme::Symmetric => "symmetric",
            Scheme::Balanced => "balanced",
        })
    }
}

impl FromStr for Scheme {
    type Err = AbqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "asymmetric" | "asym" => Ok(Scheme::Asymmetric),
            "symmetric" | "sym" => Ok(Scheme::Symmetric),
            "balanced" | "bal" => Ok(Scheme::Balanced),
            other => Err(AbqError::InvalidSpec(format!("unknown scheme {other:?}"))),
        }
    }
}

/// Which axis carries its own scale. Per-channel and per-token both mean
/// "one scale per row": weights are stored (out, in), activations (tokens, in).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Granularity {
    PerTensor,
    PerChannel,
    PerToken,
}

impl Granularity {
    pub fn id(self) -> u8 {
        match self {
            Granularity::PerTensor => 0,
            Granularity::PerChannel => 1,
            Granularity::PerToken => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Granularity::PerTensor),
            1 => Ok(Granularity::PerChannel),
            2 => Ok(Granularity::PerToken),
            other => Err(AbqError::Format(format!("unknown granularity id {other}"))),
        }
    }

    /// Number of scale groups for a `rows × cols` operand.
    pub fn groups(self, rows: usize) -> usize {
        match self {
            Granularity::PerTensor => 1,
            Granularity::PerChannel | Granularity::PerToken => rows,
        }
    }

    #[inline]
    pub fn group_of(self, row: usize) -> usize {
        match self {
            Granularity::PerTensor => 0,
            _ => row,
        }
    }
}

/// Bit width, level layout and clip factors of one quantized operand.
///
/// `alpha`/`beta` scale the max/min of each group before Δ and z are derived.
/// A length-1 vector broadcasts to every group.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSpec<T> {
    pub bits: u8,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> QuantSpec<T> {
    pub fn new(bits: u8, scheme: Scheme, granularity: Granularity) -> Self {
        Self {
            bits,
            scheme,
            granularity,
            alpha: vec![T::one()],
            beta: vec![T::one()],
        }
    }

    pub fn asymmetric(bits: u8, granularity: Granularity) -> Self {
        Self::new(bits, Scheme::Asymmetric, granularity)
    }

    pub fn balanced(bits: u8, granularity: Granularity) -> Self {
        Self::new(bits, Scheme::Balanced, granularity)
    }

    pub fn with_clip(mut self, alpha: Vec<T>, beta: Vec<T>) -> Self {
        self.alpha = alpha;
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(AbqError::InvalidSpec(format!(
                "bits {} outside [1, {MAX_BITS}]",
                self.bits
            )));
        }
        if self.scheme == Scheme::Balanced && self.bits >= MAX_BITS {
            return Err(AbqError::InvalidSpec(format!(
                "balanced {}-bit needs {} code planes; at most {MAX_BITS} are supported",
                self.bits,
                self.bits + 1
            )));
        }
        for (name, v) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            if v.is_empty() {
                return Err(AbqError::InvalidSpec(format!("{name} is empty")));
            }
            if let Some(bad) = v.iter().find(|&&c| !(c > T::zero() && c <= T::one())) {
                return Err(AbqError::InvalidSpec(format!(
                    "{name} factor {bad} outside (0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn check_clip_len(&self, groups: usize) -> Result<()> {
        for (name, v) in [("alpha", &self.alpha), ("beta", &self.beta)] {
            if v.len() != 1 && v.len() != groups {
                return Err(AbqError::InvalidSpec(format!(
                    "{name} has {} entries for {groups} groups",
                    v.len()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn alpha_at(&self, group: usize) -> T {
        self.alpha[if self.alpha.len() == 1 { 0 } else { group }]
    }

    #[inline]
    pub fn beta_at(&self, group: usize) -> T {
        self.beta[if self.beta.len() == 1 { 0 } else { group }]
    }

    /// Largest unsigned code.
    pub fn max_code(&self) -> u32 {
        max_code(self.bits, self.scheme)
    }

    /// Bit planes the engine needs to hold every code.
    pub fn planes(&self) -> u32 {
        planes_for(self.max_code())
    }
}

pub fn max_code(bits: u8, scheme: Scheme) -> u32 {
    match scheme {
        Scheme::Asymmetric | Scheme::Symmetric => (1u32 << bits) - 1,
        Scheme::Balanced => 1u32 << bits,
    }
}

/// `ceil(log2(max_code + 1))`, at least 1.
pub fn planes_for(max_code: u32) -> u32 {
    (32 - max_code.leading_zeros()).max(1)
}

/// Signed level set `code − z` for the fixed-zero-point schemes.
pub fn signed_levels(bits: u8, scheme: Scheme) -> Vec<i32> {
    let half = 1i32 << (bits - 1);
    match scheme {
        Scheme::Balanced => (-half..=half).collect(),
        Scheme::Symmetric => (-half..half).collect(),
        Scheme::Asymmetric => (0..=max_code(bits, scheme) as i32).collect(),
    }
}

/// Step size and zero point of one group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepZero<T> {
    pub step: T,
    pub zero: i32,
}

/// Derive Δ and z from the clipped extremes `hi = α·max`, `lo = β·min`.
///
/// A collapsed range falls back to Δ = 1, z = 0 so zero tensors stay exact.
pub fn step_and_zero<T: Scalar>(hi: T, lo: T, bits: u8, scheme: Scheme) -> StepZero<T> {
    let degenerate = StepZero {
        step: T::one(),
        zero: 0,
    };
    match scheme {
        Scheme::Asymmetric => {
            if !(hi > lo) {
                return degenerate;
            }
            let step = (hi - lo) / T::of(f64::from(max_code(bits, scheme)));
            let zero = (-lo / step).round_half_away();
            StepZero {
                step,
                zero: zero.to_i32().unwrap_or(0),
            }
        }
        Scheme::Symmetric | Scheme::Balanced => {
            let amax = hi.abs().max(lo.abs());
            if !(amax > T::zero()) {
                return degenerate;
            }
            let half = f64::from(1u32 << (bits - 1));
            let step = match scheme {
                Scheme::Symmetric => amax * T::of(2.0 / f64::from(max_code(bits, scheme))),
                _ => amax / T::of(half),
            };
            StepZero {
                step,
                zero: 1 << (bits - 1),
            }
        }
    }
}

/// Per-group `(max, min)` of `x` under the given granularity.
pub fn group_extremes<T: Scalar>(x: &Matrix<T>, granularity: Granularity) -> Vec<(T, T)> {
    let groups = granularity.groups(x.rows());
    let mut ext = vec![(T::neg_infinity(), T::infinity()); groups];
    for i in 0..x.rows() {
        let g = granularity.group_of(i);
        for &v in x.row(i) {
            ext[g].0 = ext[g].0.max(v);
            ext[g].1 = ext[g].1.min(v);
        }
    }
    for e in &mut ext {
        if e.0 < e.1 {
            // empty group (zero columns)
            *e = (T::zero(), T::zero());
        }
    }
    ext
}

/// Scales and zero points for every group of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantParams<T> {
    pub scales: Vec<T>,
    pub zero_points: Vec<i32>,
}

impl<T: Scalar> QuantParams<T> {
    pub fn compute(x: &Matrix<T>, spec: &QuantSpec<T>) -> Result<Self> {
        let groups = spec.granularity.groups(x.rows());
        spec.check_clip_len(groups)?;
        let (scales, zero_points) = group_extremes(x, spec.granularity)
            .into_iter()
            .enumerate()
            .map(|(g, (mx, mn))| {
                let sz = step_and_zero(
                    spec.alpha_at(g) * mx,
                    spec.beta_at(g) * mn,
                    spec.bits,
                    spec.scheme,
                );
                (sz.step, sz.zero)
            })
            .unzip();
        Ok(Self {
            scales,
            zero_points,
        })
    }
}

/// Distribution compensation pair: the quantizer sees `x + a·bᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Compensation<T> {
    /// One entry per row.
    pub a: Vec<T>,
    /// One entry per column.
    pub b: Vec<T>,
}

impl<T: Scalar> Compensation<T> {
    /// `a = 1`, `b = 0`, so the correction starts at exactly zero.
    pub fn identity(rows: usize, cols: usize) -> Self {
        Self {
            a: vec![T::one(); rows],
            b: vec![T::zero(); cols],
        }
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if self.a.len() != x.rows() || self.b.len() != x.cols() {
            return Err(AbqError::Shape(format!(
                "compensation ({}, {}) for a {}x{} matrix",
                self.a.len(),
                self.b.len(),
                x.rows(),
                x.cols()
            )));
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            x[(i, j)] + self.a[i] * self.b[j]
        }))
    }
}

/// Integer codes with the per-group scales and zero points that map them back to reals.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor<T> {
    pub codes: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub scales: Vec<T>,
    pub zero_points: Vec<i32>,
    pub spec: QuantSpec<T>,
}

impl<T: Scalar> QuantizedTensor<T> {
    #[inline]
    pub fn code(&self, i: usize, j: usize) -> u8 {
        self.codes[i * self.cols + j]
    }

    #[inline]
    pub fn scale_of_row(&self, i: usize) -> T {
        self.scales[self.spec.granularity.group_of(i)]
    }

    #[inline]
    pub fn zero_of_row(&self, i: usize) -> i32 {
        self.zero_points[self.spec.granularity.group_of(i)]
    }

    /// Code-range and scale-count invariants.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.codes.len() != self.rows * self.cols {
            return Err(AbqError::Shape(format!(
                "{} codes for a {}x{} tensor",
                self.codes.len(),
                self.rows,
                self.cols
            )));
        }
        let groups = self.spec.granularity.groups(self.rows);
        if self.scales.len() != groups || self.zero_points.len() != groups {
            return Err(AbqError::Shape(format!(
                "{} scales / {} zero points for {groups} groups",
                self.scales.len(),
                self.zero_points.len()
            )));
        }
        if let Some(s) = self
            .scales
            .iter()
            .find(|s| !(**s > T::zero()) || !s.is_finite())
        {
            return Err(AbqError::InvalidSpec(format!("non-positive scale {s}")));
        }
        let max = self.spec.max_code();
        if let Some(p) = self.codes.iter().position(|&c| u32::from(c) > max) {
            return Err(AbqError::CodeOutOfRange {
                row: p / self.cols,
                col: p % self.cols,
                code: u32::from(self.codes[p]),
                planes: self.spec.planes(),
            });
        }
        Ok(())
    }

    /// Row sums of the codes, used by zero-point correction.
    pub fn code_row_sums(&self) -> Vec<i64> {
        self.codes
            .chunks(self.cols.max(1))
            .take(self.rows)
            .map(|r| r.iter().map(|&c| i64::from(c)).sum())
            .collect()
    }
}

fn check_finite<T: Scalar>(x: &Matrix<T>) -> Result<()> {
    match x.find_non_finite() {
        Some((row, col)) => Err(AbqError::NonFinite { row, col }),
        None => Ok(()),
    }
}

/// Quantize with explicitly supplied scales and zero points.
pub fn quantize_with_params<T: Scalar>(
    x: &Matrix<T>,
    spec: &QuantSpec<T>,
    params: QuantParams<T>,
) -> Result<QuantizedTensor<T>> {
    spec.validate()?;
    check_finite(x)?;
    let groups = spec.granularity.groups(x.rows());
    if params.scales.len() != groups || params.zero_points.len() != groups {
        return Err(AbqError::Shape(format!(
            "{} scales for {groups} groups",
            params.scales.len()
        )));
    }
    let max = f64::from(spec.max_code());
    let mut codes = Vec::with_capacity(x.rows() * x.cols());
    for i in 0..x.rows() {
        let g = spec.granularity.group_of(i);
        let step = params.scales[g];
        let zero = T::of(f64::from(params.zero_points[g]));
        for &v in x.row(i) {
            let c = ((v / step).round_half_away() + zero)
                .as_f64()
                .clamp(0.0, max);
            codes.push(c as u8);
        }
    }
    Ok(QuantizedTensor {
        codes,
        rows: x.rows(),
        cols: x.cols(),
        scales: params.scales,
        zero_points: params.zero_points,
        spec: spec.clone(),
    })
}

/// `clamp(round((x + γ·a·bᵀ)/Δ) + z, 0, max_code)` with Δ, z from the clipped
/// extremes of each group. Passing `comp` means γ = 1.
pub fn quantize<T: Scalar>(
    x: &Matrix<T>,
    spec: &QuantSpec<T>,
    comp: Option<&Compensation<T>>,
) -> Result<QuantizedTensor<T>> {
    spec.validate()?;
    check_finite(x)?;
    let compensated;
    let x = match comp {
        Some(c) => {
            compensated = c.apply(x)?;
            &compensated
        }
        None => x,
    };
    let params = QuantParams::compute(x, spec)?;
    quantize_with_params(x, spec, params)
}

/// 2^bits + 1 symmetric levels with Δ = max|x| / 2^(bits−1) per group.
pub fn quantize_balanced<T: Scalar>(
    x: &Matrix<T>,
    bits: u8,
    granularity: Granularity,
) -> Result<QuantizedTensor<T>> {
    quantize(x, &QuantSpec::balanced(bits, granularity), None)
}

/// `(code − z)·Δ` elementwise.
pub fn dequantize<T: Scalar>(q: &QuantizedTensor<T>) -> Matrix<T> {
    Matrix::from_fn(q.rows, q.cols, |i, j| {
        let c = i64::from(q.code(i, j)) - i64::from(q.zero_of_row(i));
        T::of(c as f64) * q.scale_of_row(i)
    })
}

/// `(W·diag(s), diag(s)⁻¹·X)` for `W` of shape (out, k) and `X` of shape (k, n).
pub fn apply_balance<T: Scalar>(
    w: &Matrix<T>,
    x: &Matrix<T>,
    s: &[T],
) -> Result<(Matrix<T>, Matrix<T>)> {
    if w.cols() != s.len() || x.rows() != s.len() {
        return Err(AbqError::Shape(format!(
            "balance vector of {} for W {}x{} and X {}x{}",
            s.len(),
            w.rows(),
            w.cols(),
            x.rows(),
            x.cols()
        )));
    }
    check_positive(s)?;
    let w_s = Matrix::from_fn(w.rows(), w.cols(), |i, k| w[(i, k)] * s[k]);
    let x_s = Matrix::from_fn(x.rows(), x.cols(), |k, j| x[(k, j)] / s[k]);
    Ok((w_s, x_s))
}

/// Multiply (or divide) every column `k` of a token-major matrix by `s[k]`.
pub fn scale_columns<T: Scalar>(x: &Matrix<T>, s: &[T], divide: bool) -> Result<Matrix<T>> {
    if x.cols() != s.len() {
        return Err(AbqError::Shape(format!(
            "{} scales for {} columns",
            s.len(),
            x.cols()
        )));
    }
    check_positive(s)?;
    Ok(Matrix::from_fn(x.rows(), x.cols(), |i, k| {
        if divide {
            x[(i, k)] / s[k]
        } else {
            x[(i, k)] * s[k]
        }
    }))
}

fn check_positive<T: Scalar>(s: &[T]) -> Result<()> {
    match s.iter().position(|&v| !(v > T::zero()) || !v.is_finite()) {
        Some(k) => Err(AbqError::InvalidSpec(format!(
            "balance entry s[{k}] = {} is not strictly positive",
            s[k]
        ))),
        None => Ok(()),
    }
}
