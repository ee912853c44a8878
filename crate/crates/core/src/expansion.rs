//! Deterministic dynamics of the Renyi-type map.
//!
//! For a fixed integer `N >= 2` the map is `x -> N/(1-x) mod 1` on `[0, 1]`,
//! with `1 -> 0`. Its inverse branches `u_i(x) = 1 - N/(x+i)`, `i >= N`, are
//! increasing contractions, so finite digit blocks index half-open cylinder
//! intervals and folding branches gives both the value of a finite expansion
//! and the state of the past-state chain.

use serde::{Deserialize, Serialize};

use crate::error::{check_unit, Error, Result};

/// Iterates closer than this to 1 terminate a digit expansion.
pub const TERMINAL_TOL: f64 = 1e-14;

/// The Renyi parameter `N` together with the digit alphabet `{N, N+1, ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct ExpansionParams {
    n: u32,
}

impl TryFrom<u32> for ExpansionParams {
    type Error = Error;
    fn try_from(n: u32) -> Result<Self> {
        ExpansionParams::new(n)
    }
}

impl From<ExpansionParams> for u32 {
    fn from(p: ExpansionParams) -> u32 {
        p.n
    }
}

impl ExpansionParams {
    pub fn new(n: u32) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(n as u64));
        }
        Ok(ExpansionParams { n })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// `N` as a float.
    #[inline]
    pub fn nf(&self) -> f64 {
        self.n as f64
    }

    /// Smallest admissible digit.
    #[inline]
    pub fn min_digit(&self) -> u64 {
        self.n as u64
    }

    /// `log(N/(N-1))`, the normaliser of the invariant density.
    pub fn log_ratio(&self) -> f64 {
        (1.0 / (self.nf() - 1.0)).ln_1p()
    }

    pub fn check_digit(&self, digit: u64) -> Result<u64> {
        if digit < self.min_digit() {
            Err(Error::InadmissibleDigit { digit, n: self.n })
        } else {
            Ok(digit)
        }
    }

    /// Digit and fractional part of `N/(1-x)` for `x` in `[0, 1)`.
    ///
    /// Quotients within a few rounding errors of an integer are snapped to it,
    /// so points computed as exact cylinder endpoints (for instance `u_i(0)`)
    /// land in the cylinder they bound from the left.
    fn split(&self, x: f64) -> (u64, f64) {
        let v = self.nf() / (1.0 - x);
        let r = v.round();
        let tol = 4.0 * f64::EPSILON * (v + v * v / self.nf());
        if (v - r).abs() <= tol {
            (r as u64, 0.0)
        } else {
            let f = v.floor();
            (f as u64, v - f)
        }
    }

    /// The Renyi-type map `R_N`.
    pub fn renyi_map(&self, x: f64) -> Result<f64> {
        check_unit("x", x)?;
        if x == 1.0 {
            return Ok(0.0);
        }
        Ok(self.split(x).1)
    }

    /// `a_1(x) = floor(N/(1-x))`.
    pub fn first_digit(&self, x: f64) -> Result<u64> {
        check_unit("x", x)?;
        if x == 1.0 {
            return Err(Error::InfiniteDigit);
        }
        Ok(self.split(x).0)
    }

    /// First `count` digits of `x`.
    ///
    /// The expansion stops early, with `truncated` set, when an iterate comes
    /// within [`TERMINAL_TOL`] of 1 (the orbit of a rational endpoint).
    pub fn digits_of(&self, x: f64, count: usize) -> Result<Expansion> {
        if !(x.is_finite() && (0.0..1.0).contains(&x)) {
            return Err(Error::Domain {
                what: "x",
                value: x,
                expected: "[0, 1)",
            });
        }
        if count == 0 {
            return Err(Error::Config("digit count must be positive".into()));
        }
        let mut digits = Vec::with_capacity(count);
        let mut y = x;
        let mut truncated = false;
        for _ in 0..count {
            if 1.0 - y <= TERMINAL_TOL {
                truncated = true;
                break;
            }
            let (d, rest) = self.split(y);
            digits.push(d);
            y = rest;
        }
        Ok(Expansion {
            block: DigitBlock {
                params: *self,
                digits,
            },
            remainder: y,
            truncated,
        })
    }

    /// The inverse branch `u_{N,i}(x) = 1 - N/(x+i)`.
    pub fn inverse_branch(&self, i: u64, x: f64) -> Result<f64> {
        self.check_digit(i)?;
        check_unit("x", x)?;
        Ok(self.branch(i, x))
    }

    #[inline]
    pub(crate) fn branch(&self, i: u64, x: f64) -> f64 {
        1.0 - self.nf() / (x + i as f64)
    }

    /// One step of the natural extension: `(R_N(x), u_{N,a_1(x)}(y))`.
    pub fn extension_step(&self, p: SquarePoint) -> Result<SquarePoint> {
        check_unit("x", p.x)?;
        check_unit("y", p.y)?;
        if p.x == 1.0 {
            return Err(Error::InfiniteDigit);
        }
        let (d, rx) = self.split(p.x);
        Ok(SquarePoint {
            x: rx,
            y: self.branch(d, p.y),
        })
    }

    /// Inverse of [`extension_step`](Self::extension_step): `(u_{N,a_1(y)}(x), R_N(y))`.
    pub fn extension_inverse(&self, p: SquarePoint) -> Result<SquarePoint> {
        check_unit("x", p.x)?;
        check_unit("y", p.y)?;
        if p.y == 1.0 {
            return Err(Error::InfiniteDigit);
        }
        let (d, ry) = self.split(p.y);
        Ok(SquarePoint {
            x: self.branch(d, p.x),
            y: ry,
        })
    }
}

/// Result of [`ExpansionParams::digits_of`].
#[derive(Debug, Clone, PartialEq)]
pub struct Expansion {
    pub block: DigitBlock,
    /// `R_N^k(x)` after the `k` emitted digits.
    pub remainder: f64,
    /// The orbit reached 1 before `count` digits were produced.
    pub truncated: bool,
}

/// A finite admissible digit word `(i_1, ..., i_n)`, each `i_k >= N`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DigitBlock {
    params: ExpansionParams,
    digits: Vec<u64>,
}

impl DigitBlock {
    pub fn new(params: ExpansionParams, digits: Vec<u64>) -> Result<Self> {
        for &d in &digits {
            params.check_digit(d)?;
        }
        Ok(DigitBlock { params, digits })
    }

    /// The empty block, whose cylinder is all of `[0, 1)`.
    pub fn empty(params: ExpansionParams) -> Self {
        DigitBlock {
            params,
            digits: Vec::new(),
        }
    }

    pub fn params(&self) -> ExpansionParams {
        self.params
    }

    pub fn digits(&self) -> &[u64] {
        &self.digits
    }

    pub fn len(&self) -> usize {
        self.digits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn push(&mut self, digit: u64) -> Result<()> {
        self.params.check_digit(digit)?;
        self.digits.push(digit);
        Ok(())
    }

    /// This block followed by `digit`.
    pub fn extended(&self, digit: u64) -> Result<Self> {
        let mut b = self.clone();
        b.push(digit)?;
        Ok(b)
    }

    /// `u_{a_1}(u_{a_2}(... u_{a_n}(seed)))`: the finite expansion with tail state `seed`.
    pub fn eval_forward(&self, seed: f64) -> f64 {
        self.digits
            .iter()
            .rev()
            .fold(seed, |s, &d| self.params.branch(d, s))
    }

    /// `u_{a_n}(... u_{a_2}(u_{a_1}(seed)))`: the past-state chain after reading the block.
    pub fn eval_backward(&self, seed: f64) -> f64 {
        self.digits
            .iter()
            .fold(seed, |s, &d| self.params.branch(d, s))
    }

    /// The cylinder `I(i_1, ..., i_n) = [eval_forward(0), eval_forward(1))`.
    pub fn cylinder_interval(&self) -> Interval {
        if self.digits.is_empty() {
            return Interval::UNIT;
        }
        Interval {
            lo: self.eval_forward(0.0),
            hi: self.eval_forward(1.0),
        }
    }

    /// The composed branch map as a Moebius transformation.
    pub fn mobius(&self) -> BranchComposition {
        let mut m = BranchComposition::identity(self.params);
        for &d in &self.digits {
            m.push(d);
        }
        m
    }
}

/// Composition `u_{i_1} o ... o u_{i_k}` kept as `x -> (p x + q)/(r x + s)`.
///
/// Every entry is nonnegative, so cylinder endpoints and lengths come out
/// with full relative accuracy even when the cylinder is tiny.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchComposition {
    params: ExpansionParams,
    p: f64,
    q: f64,
    r: f64,
    s: f64,
    det: f64,
}

impl BranchComposition {
    pub fn identity(params: ExpansionParams) -> Self {
        BranchComposition {
            params,
            p: 1.0,
            q: 0.0,
            r: 0.0,
            s: 1.0,
            det: 1.0,
        }
    }

    /// Compose on the right with `u_digit` (the digit is read next).
    pub fn push(&mut self, digit: u64) {
        // u_i has matrix [[1, i - N], [1, i]] with determinant N.
        let i = digit as f64;
        let off = (digit - self.params.min_digit()) as f64;
        let (p, q, r, s) = (self.p, self.q, self.r, self.s);
        self.p = p + q;
        self.q = p * off + q * i;
        self.r = r + s;
        self.s = r * off + s * i;
        self.det *= self.params.nf();
        if self.s > 1e150 {
            let k = 1.0 / self.s;
            self.p *= k;
            self.q *= k;
            self.r *= k;
            self.s = 1.0;
            self.det *= k * k;
        }
    }

    pub fn then(mut self, digit: u64) -> Self {
        self.push(digit);
        self
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.p * x + self.q) / (self.r * x + self.s)
    }

    /// `M(y) - M(x)` without cancellation.
    pub fn span(&self, x: f64, y: f64) -> f64 {
        self.det * (y - x) / ((self.r * x + self.s) * (self.r * y + self.s))
    }

    /// Left endpoint and length of the image of `[0, 1]`.
    pub fn image(&self) -> (f64, f64) {
        (self.q / self.s, self.span(0.0, 1.0))
    }

    /// `(M(x) - M(0)) / (M(1) - M(0))`, the relative position of `M(x)` in the cylinder.
    pub fn relative_position(&self, x: f64) -> f64 {
        x * (self.r + self.s) / (self.r * x + self.s)
    }
}

/// A half-open subinterval `[lo, hi)` of `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        check_unit("lo", lo)?;
        check_unit("hi", hi)?;
        if lo > hi {
            return Err(Error::Domain {
                what: "lo",
                value: lo,
                expected: "lo <= hi",
            });
        }
        Ok(Interval { lo, hi })
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x < self.hi
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }
}

/// A point `(x, y)` of the unit square, the natural-extension state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SquarePoint {
    pub x: f64,
    pub y: f64,
}

impl SquarePoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        check_unit("x", x)?;
        check_unit("y", y)?;
        Ok(SquarePoint { x, y })
    }
}
