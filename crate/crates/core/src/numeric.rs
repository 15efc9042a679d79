//! Small numerical building blocks shared by the engine, the limit evaluators
//! and the quadrature checks: compensated arithmetic, log-gamma helpers and an
//! adaptive Gauss-Kronrod integrator.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

pub use statrs::function::gamma::{gamma, ln_gamma};

/// Environment variable selecting the accumulation mode of the series kernels.
pub const PRECISION_ENV: &str = "GWLAB_PRECISION";

/// Accumulation mode for inner products inside the series kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// Plain left-to-right f64 sums.
    Standard,
    /// Neumaier-compensated f64 sums.
    #[default]
    Compensated,
    /// Exact products (fma) accumulated in double-double.
    DoubleDouble,
}

impl Precision {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" | "f64" => Some(Self::Standard),
            "compensated" => Some(Self::Compensated),
            "double_double" | "double-double" | "dd" => Some(Self::DoubleDouble),
            _ => None,
        }
    }

    /// Reads `GWLAB_PRECISION`; unknown or missing values give the default.
    pub fn from_env() -> Self {
        std::env::var(PRECISION_ENV)
            .ok()
            .and_then(|v| Self::parse(&v))
            .unwrap_or_default()
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Standard => "standard",
            Self::Compensated => "compensated",
            Self::DoubleDouble => "double_double",
        };
        f.write_str(s)
    }
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Unevaluated sum `hi + lo` carrying roughly 106 bits.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TwoFloat {
    hi: f64,
    lo: f64,
}

impl TwoFloat {
    pub fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn hi(self) -> f64 {
        self.hi
    }

    pub fn lo(self) -> f64 {
        self.lo
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }

    pub fn add_f64(self, x: f64) -> Self {
        let (s, e) = two_sum(self.hi, x);
        let lo = self.lo + e;
        let (hi, lo) = two_sum(s, lo);
        Self { hi, lo }
    }

    pub fn sub_f64(self, x: f64) -> Self {
        self.add_f64(-x)
    }

    /// Adds the exact product `a * b`.
    pub fn add_prod(self, a: f64, b: f64) -> Self {
        let (p, e) = two_prod(a, b);
        let (s, e2) = two_sum(self.hi, p);
        let lo = self.lo + e + e2;
        let (hi, lo) = two_sum(s, lo);
        Self { hi, lo }
    }
}

impl std::ops::Add for TwoFloat {
    type Output = Self;

    fn add(self, other: TwoFloat) -> Self {
        let (s, e) = two_sum(self.hi, other.hi);
        let lo = e + self.lo + other.lo;
        let (hi, lo) = two_sum(s, lo);
        Self { hi, lo }
    }
}

/// Neumaier's improved Kahan summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = NeumaierSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Sum of `a[i] * b[i]` under the requested accumulation mode.
pub fn dot(prec: Precision, a: impl Iterator<Item = (f64, f64)>) -> f64 {
    match prec {
        Precision::Standard => a.map(|(x, y)| x * y).sum(),
        Precision::Compensated => a.map(|(x, y)| x * y).collect::<NeumaierSum>().value(),
        Precision::DoubleDouble => a
            .fold(TwoFloat::default(), |acc, (x, y)| acc.add_prod(x, y))
            .value(),
    }
}

/// Compensated sum of a slice.
pub fn sum_compensated(xs: &[f64]) -> f64 {
    xs.iter().copied().collect::<NeumaierSum>().value()
}

/// `ln(Γ(b + d) / Γ(b))`, accurate when `b` is large, where the plain
/// difference of log-gammas cancels badly. The shift `d` is passed
/// separately so that `b + d` is never rounded before use.
pub fn ln_gamma_ratio(b: f64, d: f64) -> f64 {
    let a = b + d;
    if a.min(b) < 30.0 {
        return ln_gamma(a) - ln_gamma(b);
    }
    // Stirling series: lnΓ(z) = (z-1/2)ln z - z + ln(2π)/2 + Σ B_{2k}/(2k(2k-1) z^{2k-1})
    let main = (b + d - 0.5) * (d / b).ln_1p() + d * b.ln() - d;
    let corr = |z: f64| {
        let z2 = z * z;
        (1.0 / 12.0 - (1.0 / 360.0 - (1.0 / 1260.0 - 1.0 / (1680.0 * z2)) / z2) / z2) / z
    };
    main + corr(a) - corr(b)
}

/// Stable `1 - (1 + x)^p` for `x >= 0`.
pub fn one_minus_pow1p(x: f64, p: f64) -> f64 {
    -(p * x.ln_1p()).exp_m1()
}

/// `⌈v⌉`, except that values within `1e-9·v` of an integer count as that
/// integer: `(2^20)^0.3` evaluates to `63.99999999999999`.
pub fn ceil_guarded(v: f64) -> usize {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * v.abs().max(1.0) {
        r as usize
    } else {
        v.ceil() as usize
    }
}

/// `⌊v⌋` with the same tolerance as [`ceil_guarded`].
pub fn floor_guarded(v: f64) -> usize {
    let r = v.round();
    if (v - r).abs() <= 1e-9 * v.abs().max(1.0) {
        r as usize
    } else {
        v.floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("quadrature did not converge: estimate {estimate:e}, error bound {error:e} after {intervals} subintervals")]
pub struct QuadratureNonConverged {
    pub estimate: f64,
    pub error: f64,
    pub intervals: usize,
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        k += WGK[i] * s;
        if i % 2 == 1 {
            g += WG[i / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Globally adaptive 15-point Gauss-Kronrod integration on `[a, b]`.
///
/// Stops once the summed error estimate is below `max(abs_tol, rel_tol*|I|)`.
pub fn integrate<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Quadrature, QuadratureNonConverged> {
    const MAX_PIECES: usize = 4000;
    let (v, e) = gk15(&mut f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Piece {
        a,
        b,
        value: v,
        error: e,
    });
    let mut evaluations = 15;
    loop {
        let total: f64 = heap
            .iter()
            .map(|p| p.value)
            .collect::<NeumaierSum>()
            .value();
        let err: f64 = heap.iter().map(|p| p.error).sum();
        if !total.is_finite() || !err.is_finite() {
            return Err(QuadratureNonConverged {
                estimate: total,
                error: err,
                intervals: heap.len(),
            });
        }
        if err <= abs_tol.max(rel_tol * total.abs()) {
            return Ok(Quadrature {
                value: total,
                error: err,
                evaluations,
            });
        }
        if heap.len() >= MAX_PIECES {
            return Err(QuadratureNonConverged {
                estimate: total,
                error: err,
                intervals: heap.len(),
            });
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval cannot be split further in f64
            return Err(QuadratureNonConverged {
                estimate: total,
                error: err,
                intervals: heap.len() + 1,
            });
        }
        let (v1, e1) = gk15(&mut f, worst.a, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.b);
        evaluations += 30;
        heap.push(Piece {
            a: worst.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Piece {
            a: mid,
            b: worst.b,
            value: v2,
            error: e2,
        });
    }
}

/// Integral over `[a, ∞)` through the substitution `y = a + t/(1-t)`.
pub fn integrate_to_infinity<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Quadrature, QuadratureNonConverged> {
    integrate(
        |t| {
            let s = 1.0 - t;
            let v = f(a + t / s);
            if v == 0.0 {
                0.0
            } else {
                v / (s * s)
            }
        },
        0.0,
        1.0,
        abs_tol,
        rel_tol,
    )
}

/// Integral over `[a, ∞)` split at the given breakpoints, each finite piece
/// integrated directly and the last one through the infinite map.
pub fn integrate_split<F: FnMut(f64) -> f64>(
    mut f: F,
    points: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Result<Quadrature, QuadratureNonConverged> {
    assert!(!points.is_empty());
    let mut value = NeumaierSum::new();
    let mut error = 0.0;
    let mut evaluations = 0;
    for w in points.windows(2) {
        let q = integrate(&mut f, w[0], w[1], abs_tol, rel_tol)?;
        value.add(q.value);
        error += q.error;
        evaluations += q.evaluations;
    }
    let q = integrate_to_infinity(&mut f, *points.last().unwrap(), abs_tol, rel_tol)?;
    value.add(q.value);
    Ok(Quadrature {
        value: value.value(),
        error: error + q.error,
        evaluations: evaluations + q.evaluations,
    })
}
