//! Offspring laws with mean exactly one.
//!
//! Three families are supported: `StableFrac` with pgf `s + c(1-s)^{1+α}`,
//! the fair `Geometric` law with pgf `1/(2-s)`, and a finite custom pmf.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::{ln_gamma, ln_gamma_ratio, NeumaierSum};

/// Number of pmf/tail values precomputed by product recurrences.
const TABLE_LEN: usize = 1 << 14;
/// Size of the inverse-CDF fast path of the sampler.
const FAST_TABLE: usize = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LawError {
    #[error("parameter {param} out of range: requires {constraint} (got {value})")]
    ParameterOutOfRange {
        param: &'static str,
        constraint: &'static str,
        value: f64,
    },
    #[error("offspring mean is {mean}, not 1")]
    NotCritical { mean: f64 },
    #[error("probabilities sum to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("{0}")]
    Domain(String),
}

/// A scalar parameter: a plain float or an exact ratio `num/den`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    Ratio { num: i64, den: i64 },
    Float(f64),
}

impl Param {
    pub fn value(self) -> f64 {
        match self {
            Param::Ratio { num, den } => num as f64 / den as f64,
            Param::Float(x) => x,
        }
    }

    fn check_den(self, param: &'static str) -> Result<(), LawError> {
        match self {
            Param::Ratio { den, .. } if den <= 0 => Err(LawError::ParameterOutOfRange {
                param,
                constraint: "positive denominator",
                value: den as f64,
            }),
            _ => Ok(()),
        }
    }
}

impl From<f64> for Param {
    fn from(x: f64) -> Self {
        Param::Float(x)
    }
}

/// Serializable description of an offspring law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LawSpec {
    StableFrac {
        alpha: Param,
        c: Param,
    },
    Geometric,
    CustomPmf {
        probabilities: Vec<f64>,
        alpha: Param,
    },
}

impl LawSpec {
    pub fn stable_frac(alpha: impl Into<Param>, c: impl Into<Param>) -> Self {
        LawSpec::StableFrac {
            alpha: alpha.into(),
            c: c.into(),
        }
    }

    pub fn build(&self) -> Result<OffspringLaw, LawError> {
        OffspringLaw::new(self.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variance {
    Finite(f64),
    Infinite,
}

impl Variance {
    pub fn finite(self) -> Option<f64> {
        match self {
            Variance::Finite(v) => Some(v),
            Variance::Infinite => None,
        }
    }
}

/// Evaluation-ready parameters of the family.
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    StableFrac { alpha: f64, c: f64 },
    Geometric,
    Custom { pmf: Vec<f64> },
}

#[derive(Debug)]
struct Tables {
    pmf: Vec<f64>,
    /// `tail[j] = P(ξ ≥ j)`, `tail[0] = 1`.
    tail: Vec<f64>,
    /// Coefficients `b_k`, k ≥ 2, of `f(1-u) - (1-u) = Σ b_k u^k` (custom laws only).
    excess: Vec<f64>,
}

/// An immutable, validated offspring law.
#[derive(Debug, Clone)]
pub struct OffspringLaw {
    spec: LawSpec,
    family: Family,
    alpha: f64,
    sigma2: Variance,
    j0: usize,
    tables: Arc<Tables>,
}

fn out_of_range(param: &'static str, constraint: &'static str, value: f64) -> LawError {
    LawError::ParameterOutOfRange {
        param,
        constraint,
        value,
    }
}

fn binom(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl OffspringLaw {
    pub fn new(spec: LawSpec) -> Result<Self, LawError> {
        match &spec {
            LawSpec::StableFrac { alpha, c } => {
                alpha.check_den("alpha")?;
                c.check_den("c")?;
                let a = alpha.value();
                let cv = c.value();
                if !(a > 0.0 && a <= 1.0) {
                    return Err(out_of_range("alpha", "0 < alpha <= 1", a));
                }
                if !(cv > 0.0) {
                    return Err(out_of_range("c", "c > 0", cv));
                }
                let p1 = exact_p1(*alpha, *c)?;
                Ok(Self::stable(spec.clone(), a, cv, p1))
            }
            LawSpec::Geometric => Ok(Self::geometric()),
            LawSpec::CustomPmf {
                probabilities,
                alpha,
            } => {
                alpha.check_den("alpha")?;
                let a = alpha.value();
                if !(a > 0.0 && a <= 1.0) {
                    return Err(out_of_range("alpha", "0 < alpha <= 1", a));
                }
                Self::custom(spec.clone(), probabilities.clone(), a)
            }
        }
    }

    pub fn stable_frac(alpha: f64, c: f64) -> Result<Self, LawError> {
        Self::new(LawSpec::stable_frac(alpha, c))
    }

    fn stable(spec: LawSpec, alpha: f64, c: f64, p1: f64) -> Self {
        let mut tail = vec![0.0; TABLE_LEN + 1];
        let mut pmf = vec![0.0; TABLE_LEN];
        tail[0] = 1.0;
        tail[1] = 1.0 - c;
        tail[2] = c * alpha;
        pmf[0] = c;
        pmf[1] = p1;
        for j in 2..TABLE_LEN {
            tail[j + 1] = tail[j] * ((j as f64 - 1.0 - alpha) / j as f64).max(0.0);
            pmf[j] = tail[j] * (1.0 + alpha) / j as f64;
        }
        let sigma2 = if alpha < 1.0 {
            Variance::Infinite
        } else {
            Variance::Finite(2.0 * c)
        };
        let j0 = if p1 > 0.0 { 1 } else { 2 };
        Self {
            spec,
            family: Family::StableFrac { alpha, c },
            alpha,
            sigma2,
            j0,
            tables: Arc::new(Tables {
                pmf,
                tail,
                excess: Vec::new(),
            }),
        }
    }

    pub fn geometric() -> Self {
        // 2^-j underflows past 1074; the table stops well before.
        let len = 1100;
        let pmf: Vec<f64> = (0..len).map(|j| 0.5f64.powi(j + 1)).collect();
        let tail: Vec<f64> = (0..=len).map(|j| 0.5f64.powi(j)).collect();
        Self {
            spec: LawSpec::Geometric,
            family: Family::Geometric,
            alpha: 1.0,
            sigma2: Variance::Finite(2.0),
            j0: 1,
            tables: Arc::new(Tables {
                pmf,
                tail,
                excess: Vec::new(),
            }),
        }
    }

    fn custom(spec: LawSpec, pmf: Vec<f64>, alpha: f64) -> Result<Self, LawError> {
        if pmf.len() < 2 {
            return Err(LawError::Domain(
                "custom pmf needs at least two entries".into(),
            ));
        }
        if let Some(&bad) = pmf.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
            return Err(out_of_range("probabilities", "finite and nonnegative", bad));
        }
        let sum = pmf.iter().copied().collect::<NeumaierSum>().value();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(LawError::NotNormalized { sum });
        }
        let mean = pmf
            .iter()
            .enumerate()
            .map(|(j, p)| j as f64 * p)
            .collect::<NeumaierSum>()
            .value();
        if (mean - 1.0).abs() > 1e-10 {
            return Err(LawError::NotCritical { mean });
        }
        let j0 = (1..pmf.len())
            .find(|&j| pmf[j] > 0.0)
            .ok_or(LawError::NotCritical { mean })?;
        let mut tail = vec![0.0; pmf.len() + 1];
        let mut acc = NeumaierSum::new();
        for j in (0..pmf.len()).rev() {
            acc.add(pmf[j]);
            tail[j] = acc.value();
        }
        tail[0] = 1.0;
        let f2: f64 = pmf
            .iter()
            .enumerate()
            .map(|(j, p)| (j * j.saturating_sub(1)) as f64 * p)
            .sum();
        let max_k = pmf.len() - 1;
        let mut excess = vec![0.0; max_k + 1];
        for (k, e) in excess.iter_mut().enumerate().skip(2) {
            let s: NeumaierSum = pmf
                .iter()
                .enumerate()
                .map(|(j, p)| p * binom(j, k))
                .collect();
            *e = if k % 2 == 0 { s.value() } else { -s.value() };
        }
        Ok(Self {
            spec,
            family: Family::Custom { pmf: pmf.clone() },
            alpha,
            sigma2: Variance::Finite(f2),
            j0,
            tables: Arc::new(Tables { pmf, tail, excess }),
        })
    }

    pub fn spec(&self) -> &LawSpec {
        &self.spec
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma2(&self) -> Variance {
        self.sigma2
    }

    pub fn j0(&self) -> usize {
        self.j0
    }

    /// Constant of the slowly varying factor when it is asymptotically
    /// constant: `c` for StableFrac, `σ²/2` for finite-variance laws.
    pub fn tail_constant(&self) -> f64 {
        match (&self.family, self.sigma2) {
            (Family::StableFrac { c, .. }, _) => *c,
            (_, Variance::Finite(v)) => v / 2.0,
            (_, Variance::Infinite) => f64::NAN,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("law spec serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, LawError> {
        let spec: LawSpec = serde_json::from_str(s).map_err(|e| LawError::Domain(e.to_string()))?;
        Self::new(spec)
    }

    /// `P(ξ = j)`.
    pub fn pmf(&self, j: u64) -> f64 {
        let t = &self.tables;
        if (j as usize) < t.pmf.len() {
            return t.pmf[j as usize];
        }
        match self.family {
            Family::StableFrac { alpha, .. } => self.tail(j) * (1.0 + alpha) / j as f64,
            Family::Geometric => 0.5f64.powf(j as f64 + 1.0),
            Family::Custom { .. } => 0.0,
        }
    }

    /// `P(ξ ≥ j)`.
    pub fn tail(&self, j: u64) -> f64 {
        let t = &self.tables;
        if (j as usize) < t.tail.len() {
            return t.tail[j as usize];
        }
        match self.family {
            Family::StableFrac { alpha, c } => {
                if alpha >= 1.0 {
                    return 0.0;
                }
                let j = j as f64;
                let ln = (c * alpha).ln() + ln_gamma_ratio(j, -1.0 - alpha) - ln_gamma(1.0 - alpha);
                ln.exp()
            }
            Family::Geometric => 0.5f64.powf(j as f64),
            Family::Custom { .. } => 0.0,
        }
    }

    /// Continuous extension of `j^{1+α}·P(ξ ≥ j)` evaluated at `y = 1/z`;
    /// the slowly varying factor of the tail representation.
    pub fn tail_slowly_varying(&self, z: f64) -> f64 {
        let y = 1.0 / z;
        match self.family {
            Family::StableFrac { alpha, c } if alpha < 1.0 && y >= 2.0 => {
                let ln = (c * alpha).ln() + ln_gamma_ratio(y, -1.0 - alpha) - ln_gamma(1.0 - alpha);
                y.powf(1.0 + self.alpha) * ln.exp()
            }
            _ => y.powf(1.0 + self.alpha) * self.tail(y.ceil() as u64),
        }
    }

    fn check_unit(s: f64) -> Result<(), LawError> {
        if (0.0..=1.0).contains(&s) {
            Ok(())
        } else {
            Err(LawError::Domain(format!("argument {s} outside [0, 1]")))
        }
    }

    /// The pgf `f(s)`.
    pub fn pgf(&self, s: f64) -> Result<f64, LawError> {
        Self::check_unit(s)?;
        Ok(match &self.family {
            Family::StableFrac { alpha, c } => {
                if s == 1.0 {
                    1.0
                } else {
                    s + c * (1.0 - s).powf(1.0 + alpha)
                }
            }
            Family::Geometric => 1.0 / (2.0 - s),
            Family::Custom { pmf } => pmf.iter().rev().fold(0.0, |acc, p| acc * s + p),
        })
    }

    /// `f(1-u) - (1-u)`, evaluated without forming `1-u` where possible.
    pub fn excess(&self, u: f64) -> f64 {
        match &self.family {
            Family::StableFrac { alpha, c } => c * u.powf(1.0 + alpha),
            Family::Geometric => u * u / (1.0 + u),
            Family::Custom { pmf } => {
                if u < 0.5 {
                    let b = &self.tables.excess;
                    let mut acc = 0.0;
                    for k in (2..b.len()).rev() {
                        acc = acc * u + b[k];
                    }
                    acc * u * u
                } else {
                    let s = 1.0 - u;
                    pmf.iter().rev().fold(0.0, |acc, p| acc * s + p) - s
                }
            }
        }
    }

    /// Coefficients `b_k` (index k, zero below 2) of `f(1-u) - (1-u)` for a
    /// custom law.
    pub(crate) fn custom_excess_coefficients(&self) -> &[f64] {
        &self.tables.excess
    }

    /// `f^{(k)}(s)`.
    pub fn derivative(&self, k: u32, s: f64) -> Result<f64, LawError> {
        Self::check_unit(s)?;
        self.derivative_impl(k, s, 1.0 - s)
    }

    /// `f^{(k)}(1-q)` with the complement supplied exactly.
    pub fn derivative_at_complement(&self, k: u32, q: f64) -> Result<f64, LawError> {
        Self::check_unit(q)?;
        self.derivative_impl(k, 1.0 - q, q)
    }

    fn derivative_impl(&self, k: u32, s: f64, q: f64) -> Result<f64, LawError> {
        if k == 0 {
            return Ok(match &self.family {
                Family::StableFrac { .. } | Family::Geometric => s + self.excess(q),
                Family::Custom { .. } => self.pgf(s)?,
            });
        }
        match &self.family {
            Family::StableFrac { alpha, c } => {
                if k == 1 {
                    return Ok(1.0 - c * (1.0 + alpha) * q.powf(*alpha));
                }
                let pk = self.pmf(k as u64);
                if pk == 0.0 {
                    return Ok(0.0);
                }
                let expo = 1.0 + alpha - k as f64;
                if q == 0.0 {
                    if expo < 0.0 {
                        return Err(LawError::Domain(format!(
                            "derivative of order {k} diverges at s = 1"
                        )));
                    }
                    return Ok(if expo == 0.0 { factorial(k) * pk } else { 0.0 });
                }
                Ok((ln_factorial(k) + pk.ln() + expo * q.ln()).exp())
            }
            Family::Geometric => {
                let base = 1.0 + q;
                Ok((ln_factorial(k) - (k as f64 + 1.0) * base.ln()).exp())
            }
            Family::Custom { pmf } => {
                let k = k as usize;
                let mut acc = NeumaierSum::new();
                for (j, p) in pmf.iter().enumerate().skip(k) {
                    let falling: f64 = ((j - k + 1)..=j).map(|i| i as f64).product();
                    acc.add(p * falling * s.powi((j - k) as i32));
                }
                Ok(acc.value())
            }
        }
    }

    /// `q^k f^{(k)}(1-q) / k!`: probability that a particle has exactly `k`
    /// children with a descendant line of the survival probability `q`.
    pub fn scaled_derivative(&self, k: u32, q: f64) -> f64 {
        match &self.family {
            Family::StableFrac { alpha, c } => match k {
                0 => 1.0 - q + self.excess(q),
                1 => q * (1.0 - c * (1.0 + alpha) * q.powf(*alpha)),
                _ => self.pmf(k as u64) * q.powf(1.0 + alpha),
            },
            Family::Geometric => q.powi(k as i32) / (1.0 + q).powi(k as i32 + 1),
            Family::Custom { pmf } => {
                let k = k as usize;
                pmf.iter()
                    .enumerate()
                    .skip(k)
                    .map(|(j, p)| {
                        p * binom(j, k) * q.powi(k as i32) * (1.0 - q).powi((j - k) as i32)
                    })
                    .sum()
            }
        }
    }

    /// `Σ_{k≥2} q^k f^{(k)}(1-q)/k!`, computed without cancellation.
    pub fn branching_mass(&self, q: f64) -> f64 {
        match &self.family {
            Family::StableFrac { alpha, c } => c * alpha * q.powf(1.0 + alpha),
            Family::Geometric => (q / (1.0 + q)).powi(2),
            Family::Custom { pmf } => (2..pmf.len())
                .map(|k| self.scaled_derivative(k as u32, q))
                .sum(),
        }
    }

    /// Smallest `j` with `P(ξ ≥ j+1) < v`, for `v` in `(0, 1]`.
    pub fn inverse_tail(&self, v: f64) -> u64 {
        let tail = &self.tables.tail;
        let fast = FAST_TABLE.min(tail.len() - 1);
        // tail is nonincreasing; count entries j ≥ 1 with tail[j] ≥ v
        if tail[fast] < v {
            return tail[1..=fast].partition_point(|&t| t >= v) as u64;
        }
        let last = tail.len() - 1;
        if tail[last] < v {
            return tail[1..=last].partition_point(|&t| t >= v) as u64;
        }
        match self.family {
            Family::Geometric => {
                let mut j = (-v.log2()).floor() as u64;
                while self.tail(j + 1) >= v {
                    j += 1;
                }
                while j > 0 && self.tail(j) < v {
                    j -= 1;
                }
                j
            }
            Family::Custom { .. } => (last - 1) as u64,
            Family::StableFrac { .. } => {
                // tail(lo + 1) ≥ v > tail(hi + 1)
                let mut lo = last as u64 - 1;
                let mut hi = lo * 2;
                while self.tail(hi + 1) >= v {
                    lo = hi;
                    hi = hi.saturating_mul(2);
                    if hi == u64::MAX {
                        return hi;
                    }
                }
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if self.tail(mid + 1) < v {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                hi
            }
        }
    }

    /// One offspring draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        self.inverse_tail(1.0 - u)
    }

    /// A draw conditioned on `ξ ≥ 2`.
    pub fn sample_at_least_two<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        self.inverse_tail(self.tail(2) * (1.0 - u)).max(2)
    }
}

impl OffspringLaw {
    /// Number `K ≥ 2` of children with a surviving line, given that at least
    /// two survive, when each child line survives with probability `q`.
    /// `P(K = k) ∝ q^k f^{(k)}(1-q)/k!`.
    pub fn sample_branching_children<R: Rng + ?Sized>(&self, q: f64, rng: &mut R) -> u64 {
        match &self.family {
            // q^{1+α} p_k: the offspring law itself restricted to k ≥ 2
            Family::StableFrac { .. } => self.sample_at_least_two(rng),
            Family::Geometric => {
                let rho = q / (1.0 + q);
                let u: f64 = rng.random();
                2 + ((1.0 - u).ln() / rho.ln()).floor() as u64
            }
            Family::Custom { pmf } => {
                let total = self.branching_mass(q);
                let target = total * rng.random::<f64>();
                let mut acc = 0.0;
                for k in 2..pmf.len() {
                    acc += self.scaled_derivative(k as u32, q);
                    if acc > target {
                        return k as u64;
                    }
                }
                (pmf.len() - 1) as u64
            }
        }
    }
}

impl fmt::Display for OffspringLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.family {
            Family::StableFrac { alpha, c } => write!(f, "stable_frac(alpha={alpha}, c={c:.6})"),
            Family::Geometric => write!(f, "geometric"),
            Family::Custom { pmf } => {
                write!(f, "custom_pmf(len={}, alpha={})", pmf.len(), self.alpha)
            }
        }
    }
}

fn exact_p1(alpha: Param, c: Param) -> Result<f64, LawError> {
    if let (Param::Ratio { num: an, den: ad }, Param::Ratio { num: cn, den: cd }) = (alpha, c) {
        let (an, ad, cn, cd) = (an as i128, ad as i128, cn as i128, cd as i128);
        let num = cd * ad - cn * (ad + an);
        let den = cd * ad;
        if num < 0 {
            return Err(out_of_range("c", "c <= 1/(1+alpha)", c.value()));
        }
        return Ok(num as f64 / den as f64);
    }
    let p1 = 1.0 - c.value() * (1.0 + alpha.value());
    if p1 < -1e-12 {
        return Err(out_of_range("c", "c <= 1/(1+alpha)", c.value()));
    }
    // 1/(1+α) given as a float rarely multiplies back to exactly one
    Ok(if p1.abs() <= 1e-14 { 0.0 } else { p1 })
}

pub(crate) fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

pub(crate) fn ln_factorial(k: u32) -> f64 {
    if k < 30 {
        factorial(k).ln()
    } else {
        ln_gamma(k as f64 + 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half() -> OffspringLaw {
        OffspringLaw::new(LawSpec::StableFrac {
            alpha: Param::Ratio { num: 1, den: 2 },
            c: Param::Ratio { num: 2, den: 3 },
        })
        .unwrap()
    }

    #[test]
    fn stable_half_basics() {
        let law = half();
        assert_eq!(law.j0(), 2);
        assert!((law.pmf(0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(law.pmf(1), 0.0);
        assert!((law.pmf(2) - 0.25).abs() < 1e-15);
        assert!((law.pmf(3) - 1.0 / 24.0).abs() < 1e-15);
        assert!((law.tail(2) - 1.0 / 3.0).abs() < 1e-15);
        assert!((law.tail(3) - 1.0 / 12.0).abs() < 1e-15);
        assert!((law.pgf(0.5).unwrap() - 0.735_702_260_395_515_8).abs() < 1e-12);
        assert_eq!(law.pgf(1.0).unwrap(), 1.0);
        assert_eq!(law.derivative(1, 0.0).unwrap(), 0.0);
        assert!((law.derivative(2, 0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(law.sigma2(), Variance::Infinite);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(
            OffspringLaw::stable_frac(0.5, 0.8),
            Err(LawError::ParameterOutOfRange { param: "c", .. })
        ));
        assert!(matches!(
            OffspringLaw::stable_frac(1.2, 0.3),
            Err(LawError::ParameterOutOfRange { param: "alpha", .. })
        ));
        let spec = LawSpec::CustomPmf {
            probabilities: vec![0.3, 0.3, 0.4],
            alpha: Param::Float(1.0),
        };
        assert!(matches!(spec.build(), Err(LawError::NotCritical { .. })));
    }

    #[test]
    fn boundary_c_with_float_params_has_zero_p1() {
        let law = OffspringLaw::stable_frac(0.8, 1.0 / 1.8).unwrap();
        assert_eq!(law.pmf(1), 0.0);
        assert_eq!(law.j0(), 2);
    }

    #[test]
    fn geometric_basics() {
        let law = OffspringLaw::geometric();
        assert_eq!(law.pmf(0), 0.5);
        assert_eq!(law.sigma2(), Variance::Finite(2.0));
        assert_eq!(law.j0(), 1);
        for k in 1..10 {
            let expect = factorial(k) / 2f64.powi(k as i32 + 1);
            assert!((law.derivative(k, 0.0).unwrap() - expect).abs() < 1e-12 * expect);
        }
    }

    #[test]
    fn derivative_diverges_at_one() {
        assert!(half().derivative(2, 1.0).is_err());
        let law = OffspringLaw::stable_frac(1.0, 0.5).unwrap();
        assert_eq!(law.derivative(2, 1.0).unwrap(), 1.0);
        assert!(half().pgf(1.5).is_err());
    }

    #[test]
    fn tail_identity_against_cumulative_sums() {
        for law in [half(), OffspringLaw::stable_frac(0.8, 1.0 / 1.8).unwrap()] {
            let Family::StableFrac { alpha, c } = *law.family() else {
                unreachable!()
            };
            let mut cum = NeumaierSum::new();
            for j in 0..1000u64 {
                cum.add(law.pmf(j));
                let closed = if j + 1 >= 2 {
                    // c·(−1)^{j+1}·binom(α, j)
                    let mut b = 1.0;
                    for i in 0..j {
                        b *= (alpha - i as f64) / (i + 1) as f64;
                    }
                    c * if (j + 1) % 2 == 0 { b } else { -b }
                } else {
                    1.0 - c
                };
                assert!((1.0 - cum.value() - closed).abs() < 1e-13, "j = {j}");
            }
        }
    }

    #[test]
    fn closed_form_tail_beyond_table_continues_recurrence() {
        let law = OffspringLaw::stable_frac(0.8, 1.0 / 1.8).unwrap();
        let n = TABLE_LEN as u64;
        let rec = law.tail(n) * ((n as f64 - 1.0 - 0.8) / n as f64);
        let rel = (law.tail(n + 1) / rec - 1.0).abs();
        assert!(rel < 1e-12, "{rel:e}");
    }

    #[test]
    fn json_round_trip_is_exact() {
        let spec = LawSpec::StableFrac {
            alpha: Param::Ratio { num: 4, den: 5 },
            c: Param::Ratio { num: 5, den: 9 },
        };
        let s = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            s,
            r#"{"family":"stable_frac","alpha":{"num":4,"den":5},"c":{"num":5,"den":9}}"#
        );
        let back: LawSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, spec);
        let law =
            OffspringLaw::from_json(r#"{"family":"stable_frac","alpha":0.5,"c":0.6666}"#).unwrap();
        assert_eq!(
            *law.family(),
            Family::StableFrac {
                alpha: 0.5,
                c: 0.6666
            }
        );
        let g = OffspringLaw::from_json(r#"{"family":"geometric"}"#).unwrap();
        assert_eq!(g.j0(), 1);
    }

    #[test]
    fn sampler_is_reproducible() {
        let law = OffspringLaw::geometric();
        let a: Vec<u64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..100).map(|_| law.sample(&mut rng)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b: Vec<u64> = (0..100).map(|_| law.sample(&mut rng)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn inverse_tail_brackets() {
        let law = OffspringLaw::stable_frac(0.5, 2.0 / 3.0).unwrap();
        for &v in &[0.9, 0.4, 0.2, 1e-3, 1e-6, 1e-9, 1e-12] {
            let j = law.inverse_tail(v);
            assert!(
                law.tail(j + 1) < v && (j == 0 || law.tail(j) >= v),
                "v = {v}, j = {j}"
            );
        }
    }

    #[test]
    fn custom_law_excess_matches_pgf() {
        let law = LawSpec::CustomPmf {
            probabilities: vec![0.25, 0.5, 0.25],
            alpha: Param::Float(1.0),
        }
        .build()
        .unwrap();
        for &u in &[0.01, 0.3, 0.7] {
            let direct = law.pgf(1.0 - u).unwrap() - (1.0 - u);
            assert!((law.excess(u) - direct).abs() < 1e-15);
        }
        assert_eq!(law.sigma2(), Variance::Finite(0.5));
    }

    #[test]
    fn branching_mass_matches_sum() {
        for law in [half(), OffspringLaw::geometric()] {
            for &q in &[0.3f64, 0.01] {
                // remainder of the k-sum past 2000, exact for both families
                let rest = match law.family() {
                    Family::StableFrac { alpha, .. } => law.tail(2000) * q.powf(1.0 + alpha),
                    _ => 0.0,
                };
                let direct: f64 =
                    (2..2000).map(|k| law.scaled_derivative(k, q)).sum::<f64>() + rest;
                assert!(
                    (law.branching_mass(q) / direct - 1.0).abs() < 1e-12,
                    "{law} {q}"
                );
                let total: f64 = (0..2000).map(|k| law.scaled_derivative(k, q)).sum::<f64>() + rest;
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}
