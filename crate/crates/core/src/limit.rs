//! Limit objects: the Yaglom law `M` and its convolution powers, evaluated by
//! numerical Laplace inversion, and the closed-form predictions built on them.

use std::collections::HashMap;
use std::sync::RwLock;

use astro_float::{BigFloat, Consts, RoundingMode, Sign};
use num_complex::Complex64;

use crate::numeric::{
    gamma, integrate, integrate_to_infinity, ln_gamma, one_minus_pow1p, QuadratureNonConverged,
};
use crate::offspring::OffspringLaw;
use crate::series::ExtinctionSequence;

const RM: RoundingMode = RoundingMode::ToEven;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LimitError {
    #[error("{0}")]
    Domain(String),
    #[error("inversion unstable at j={j}, x={x:e}: Gaver-Stehfest {gaver} vs Talbot {talbot}")]
    InversionUnstable {
        j: u32,
        x: f64,
        gaver: f64,
        talbot: f64,
    },
    #[error(transparent)]
    Quadrature(#[from] QuadratureNonConverged),
}

/// `(1 - (1 + λ^{-α})^{-1/α})^j`.
pub fn yaglom_transform(alpha: f64, j: u32, lambda: f64) -> Result<f64, LimitError> {
    if !(lambda > 0.0) {
        return Err(LimitError::Domain(format!(
            "transform argument {lambda} must be positive"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(LimitError::Domain(format!(
            "alpha = {alpha} outside (0, 1]"
        )));
    }
    let ln_w = -alpha * lambda.ln();
    let phi = if ln_w > 700.0 {
        // (1+w)^{-1/α} = w^{-1/α}(1+1/w)^{-1/α}
        let rest = (-(1.0 / alpha) * ln_w).exp() * (-(1.0 / alpha) * (-ln_w).exp().ln_1p()).exp();
        1.0 - rest
    } else {
        one_minus_pow1p(ln_w.exp(), -1.0 / alpha)
    };
    Ok(phi.powi(j as i32))
}

/// `x^{αj} / (α^j Γ(1+αj))`, the small-argument behaviour of `M^{*j}`.
pub fn smallx_asymptotic(alpha: f64, j: u32, x: f64) -> f64 {
    let aj = alpha * j as f64;
    (aj * x.ln() - j as f64 * alpha.ln() - ln_gamma(1.0 + aj)).exp()
}

/// Small-deviation prediction `(Q(n)/(αn))·φ/Γ(1+α)` for `P(H(n))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmallDeviationPrediction {
    pub value: f64,
    pub survival: f64,
    /// Set when `φ/n > 0.1`, outside the intended regime.
    pub regime_warning: bool,
}

pub fn thm1_prediction(law: &OffspringLaw, n: usize, phi: usize) -> SmallDeviationPrediction {
    let q = ExtinctionSequence::new(law, n).survival(n);
    thm1_prediction_from_survival(law.alpha(), n, phi, q)
}

pub fn thm1_prediction_from_survival(
    alpha: f64,
    n: usize,
    phi: usize,
    q: f64,
) -> SmallDeviationPrediction {
    let value = q / (alpha * n as f64) * phi as f64 / gamma(1.0 + alpha);
    SmallDeviationPrediction {
        value,
        survival: q,
        regime_warning: phi as f64 / n as f64 > 0.1,
    }
}

/// Tauberian prediction `T^α / (α Γ(1+α) c)` for `Σ_{j≤T} μ_j`.
pub fn mu_partial_sum_prediction(alpha: f64, c: f64, t: usize) -> f64 {
    (t as f64).powf(alpha) / (alpha * gamma(1.0 + alpha) * c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversionConfig {
    /// Gaver-Stehfest term count (even).
    pub terms: usize,
    /// Working precision of the Gaver-Stehfest sum, in bits.
    pub precision_bits: usize,
    /// Node count of the fixed Talbot contour.
    pub contour_nodes: usize,
    /// Largest tolerated disagreement between the two methods.
    pub tolerance: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            terms: 24,
            precision_bits: 256,
            contour_nodes: 32,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Saturation {
    None,
    /// Argument below the representable range; value pinned to 0.
    Zero,
    /// Argument above the representable range; value pinned to 1.
    One,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfValue {
    pub value: f64,
    pub gaver: f64,
    pub talbot: f64,
    pub disagreement: f64,
    pub saturation: Saturation,
}

/// Evaluator of `M^{*j}(x)`.
#[derive(Debug)]
pub struct YaglomLaw {
    alpha: f64,
    config: InversionConfig,
    stehfest: Vec<BigFloat>,
    ln2: BigFloat,
    cache: RwLock<HashMap<(u32, u64), CdfValue>>,
}

fn big_to_f64(x: &BigFloat) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    match x.as_raw_parts() {
        None => f64::NAN,
        Some((m, _, s, e, _)) => {
            let Some(&top) = m.last() else { return 0.0 };
            let next = if m.len() > 1 { m[m.len() - 2] } else { 0 };
            let v = (top as f64) * 2f64.powi(-64) + (next as f64) * 2f64.powi(-128);
            let v = v * 2f64.powi(e);
            if s == Sign::Neg {
                -v
            } else {
                v
            }
        }
    }
}

impl YaglomLaw {
    pub fn new(alpha: f64) -> Result<Self, LimitError> {
        Self::with_config(alpha, InversionConfig::default())
    }

    pub fn with_config(alpha: f64, config: InversionConfig) -> Result<Self, LimitError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(LimitError::Domain(format!(
                "alpha = {alpha} outside (0, 1]"
            )));
        }
        if config.terms < 2 || !config.terms.is_multiple_of(2) {
            return Err(LimitError::Domain(
                "Gaver-Stehfest needs an even term count".into(),
            ));
        }
        let p = config.precision_bits;
        let mut cc = Consts::new().expect("astro-float constants");
        let ln2 = cc.ln_2(p, RM);
        Ok(Self {
            alpha,
            config,
            stehfest: stehfest_weights(config.terms, p),
            ln2,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn config(&self) -> &InversionConfig {
        &self.config
    }

    /// `M^{*j}(x)` with both inversion results.
    pub fn evaluate(&self, j: u32, x: f64) -> Result<CdfValue, LimitError> {
        if !(x > 0.0) {
            return Err(LimitError::Domain(format!(
                "CDF argument {x} must be positive"
            )));
        }
        if j == 0 {
            return Err(LimitError::Domain(
                "convolution power must be at least 1".into(),
            ));
        }
        let key = (j, x.to_bits());
        if let Some(v) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = if !x.is_finite() || x > 1e250 {
            CdfValue {
                value: 1.0,
                gaver: 1.0,
                talbot: 1.0,
                disagreement: 0.0,
                saturation: Saturation::One,
            }
        } else if x < 1e-250 {
            CdfValue {
                value: 0.0,
                gaver: 0.0,
                talbot: 0.0,
                disagreement: 0.0,
                saturation: Saturation::Zero,
            }
        } else {
            let gaver = self.gaver_stehfest(j, x);
            let talbot = self.talbot(j, x);
            CdfValue {
                value: gaver,
                gaver,
                talbot,
                disagreement: (gaver - talbot).abs(),
                saturation: Saturation::None,
            }
        };
        self.cache.write().expect("cache lock").insert(key, v);
        Ok(v)
    }

    /// `M^{*j}(x)`; fails when the two inversion methods disagree.
    pub fn cdf(&self, j: u32, x: f64) -> Result<f64, LimitError> {
        let v = self.evaluate(j, x)?;
        if v.disagreement > self.config.tolerance || !v.value.is_finite() {
            return Err(LimitError::InversionUnstable {
                j,
                x,
                gaver: v.gaver,
                talbot: v.talbot,
            });
        }
        Ok(v.value)
    }

    fn gaver_stehfest(&self, j: u32, x: f64) -> f64 {
        let p = self.config.precision_bits;
        let mut cc = Consts::new().expect("astro-float constants");
        let t = BigFloat::from_f64(x, p);
        let step = self.ln2.div(&t, p, RM);
        let alpha = BigFloat::from_f64(self.alpha, p);
        let inv_alpha = BigFloat::from_u64(1, p).div(&alpha, p, RM);
        let one = BigFloat::from_u64(1, p);
        let mut acc = BigFloat::from_u64(0, p);
        for (k, v) in self.stehfest.iter().enumerate() {
            let lambda = step.mul(&BigFloat::from_u64(k as u64 + 1, p), p, RM);
            // Φ(λ) = 1 - exp(-ln(1 + λ^{-α})/α)
            let ln_l = lambda.ln(p, RM, &mut cc);
            let w = ln_l.mul(&alpha, p, RM).neg().exp(p, RM, &mut cc);
            let l1 = one.add(&w, p, RM).ln(p, RM, &mut cc);
            let phi = one.sub(&l1.mul(&inv_alpha, p, RM).neg().exp(p, RM, &mut cc), p, RM);
            let mut phij = phi.clone();
            for _ in 1..j {
                phij = phij.mul(&phi, p, RM);
            }
            let f = phij.div(&lambda, p, RM);
            acc = acc.add(&v.mul(&f, p, RM), p, RM);
        }
        big_to_f64(&acc.mul(&step, p, RM))
    }

    fn transform_complex(&self, j: u32, lambda: Complex64) -> Complex64 {
        let a = self.alpha;
        let w = (-a * lambda.ln()).exp();
        let l1 = ln1p_c(w);
        let phi = -expm1_c(-l1 / a);
        phi.powu(j) / lambda
    }

    fn talbot(&self, j: u32, x: f64) -> f64 {
        let m = self.config.contour_nodes;
        let r = 2.0 * m as f64 / (5.0 * x);
        let mut sum = 0.5 * (self.transform_complex(j, Complex64::new(r, 0.0)) * (r * x).exp()).re;
        for k in 1..m {
            let th = k as f64 * std::f64::consts::PI / m as f64;
            let cot = th.cos() / th.sin();
            let s = Complex64::new(r * th * cot, r * th);
            let sigma = th + (th * cot - 1.0) * cot;
            let term = (s * x).exp() * self.transform_complex(j, s) * Complex64::new(1.0, sigma);
            sum += term.re;
        }
        r / m as f64 * sum
    }

    /// Limit of `P(Z(n - ⌈xφ⌉, n) = j | H(n))`: `(αΓ(j+α)/j!)·x·M^{*j}(x^{-1/α})`.
    pub fn thm2_limit_pmf(&self, j: u32, x: f64) -> Result<f64, LimitError> {
        if !(x > 0.0) {
            return Err(LimitError::Domain(format!("argument {x} must be positive")));
        }
        let a = self.alpha;
        let arg = (-(x.ln()) / a).exp();
        let coef = (a.ln() + ln_gamma(j as f64 + a) - ln_gamma(j as f64 + 1.0)).exp();
        Ok(coef * x * self.cdf(j, arg)?)
    }

    /// Limit CDF of `d(n)/φ(n)` given `H(n)`: `αΓ(1+α)·x·M(x^{-1/α})`.
    pub fn mrca_limit_cdf(&self, x: f64) -> Result<f64, LimitError> {
        self.thm2_limit_pmf(1, x)
    }

    /// `∫_0^x M(x-y) dM(y)` by a Stieltjes sum on a grid graded toward the
    /// singular end `y = 0`.
    pub fn self_convolution(&self, x: f64, nodes: usize) -> Result<f64, LimitError> {
        let grid: Vec<f64> = (0..=nodes)
            .map(|i| x * (i as f64 / nodes as f64).powi(3))
            .collect();
        let mut m_at = Vec::with_capacity(grid.len());
        for &y in &grid {
            m_at.push(if y == 0.0 { 0.0 } else { self.cdf(1, y)? });
        }
        let mut s = 0.0;
        for i in 0..nodes {
            let mid = 0.5 * (grid[i] + grid[i + 1]);
            let dm = m_at[i + 1] - m_at[i];
            s += self.cdf(1, x - mid)? * dm;
        }
        Ok(s)
    }

    /// `λ ∫_0^∞ e^{-λx} M^{*j}(x) dx`, which must reproduce the transform.
    pub fn retransform(&self, j: u32, lambda: f64, tol: f64) -> Result<f64, LimitError> {
        let mut err = None;
        let mut f = |x: f64| {
            if x <= 0.0 {
                return 0.0;
            }
            match self.cdf(j, x) {
                Ok(v) => lambda * (-lambda * x).exp() * v,
                Err(e) => {
                    err.get_or_insert(e);
                    0.0
                }
            }
        };
        let q1 = integrate(&mut f, 0.0, 1.0 / lambda, tol, tol)?;
        let q2 = integrate_to_infinity(&mut f, 1.0 / lambda, tol, tol)?;
        if let Some(e) = err {
            return Err(e);
        }
        Ok(q1.value + q2.value)
    }
}

/// Stehfest weights `V_k`, `k = 1..=N`.
fn stehfest_weights(n: usize, p: usize) -> Vec<BigFloat> {
    let half = n / 2;
    let fact = |m: usize| -> BigFloat {
        (1..=m as u64).fold(BigFloat::from_u64(1, p), |acc, i| {
            acc.mul(&BigFloat::from_u64(i, p), p, RM)
        })
    };
    (1..=n)
        .map(|k| {
            let mut s = BigFloat::from_u64(0, p);
            for i in k.div_ceil(2)..=k.min(half) {
                let mut num = BigFloat::from_u64(1, p);
                for _ in 0..half {
                    num = num.mul(&BigFloat::from_u64(i as u64, p), p, RM);
                }
                num = num.mul(&fact(2 * i), p, RM);
                let den = fact(half - i)
                    .mul(&fact(i), p, RM)
                    .mul(&fact(i - 1), p, RM)
                    .mul(&fact(k - i), p, RM)
                    .mul(&fact(2 * i - k), p, RM);
                s = s.add(&num.div(&den, p, RM), p, RM);
            }
            if (k + half) % 2 == 1 {
                s.neg()
            } else {
                s
            }
        })
        .collect()
}

fn ln1p_c(w: Complex64) -> Complex64 {
    if w.norm() < 1e-4 {
        w * (Complex64::new(1.0, 0.0) - w * (0.5 - w / 3.0 + w * w / 4.0))
    } else {
        (Complex64::new(1.0, 0.0) + w).ln()
    }
}

fn expm1_c(z: Complex64) -> Complex64 {
    if z.norm() < 1e-4 {
        z * (Complex64::new(1.0, 0.0) + z * (0.5 + z / 6.0 + z * z / 24.0))
    } else {
        z.exp() - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transform_examples() {
        for &l in &[0.1, 1.0, 7.5] {
            assert!((yaglom_transform(1.0, 1, l).unwrap() - 1.0 / (1.0 + l)).abs() < 1e-15);
        }
        assert!((yaglom_transform(0.5, 1, 1e-12).unwrap() - 1.0).abs() < 1e-5);
        // (1-(1+w)^{-2})^2 with w = λ^{-1/2}; the leading-order ratio
        // 4w^2 is still 8.9% off at λ = 1e3 and within 1% from λ = 1e7
        let w = 1e3f64.powf(-0.5);
        let exact = (1.0 - (1.0 + w).powi(-2)).powi(2);
        assert!((yaglom_transform(0.5, 2, 1e3).unwrap() - exact).abs() < 1e-16);
        assert!((exact / (4.0 * w * w) - 0.911_05).abs() < 1e-4);
        let v = yaglom_transform(0.5, 2, 1e7).unwrap();
        assert!((v / (1e-7 / 0.25) - 1.0).abs() < 0.01);
        assert!(yaglom_transform(0.5, 1, 0.0).is_err());
    }

    #[test]
    fn smallx_examples() {
        assert!((smallx_asymptotic(1.0, 1, 0.3) - 0.3).abs() < 1e-15);
        assert!((smallx_asymptotic(0.5, 2, 1e-2) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn exponential_and_erlang() {
        let m = YaglomLaw::new(1.0).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((m.cdf(1, 1.0).unwrap() - (1.0 - e1)).abs() < 1e-6);
        assert!((m.cdf(2, 1.0).unwrap() - (1.0 - 2.0 * e1)).abs() < 1e-6);
        assert!((m.mrca_limit_cdf(1.0).unwrap() - (1.0 - e1)).abs() < 1e-6);
    }

    #[test]
    fn stehfest_weights_sum_to_zero() {
        let w = stehfest_weights(16, 256);
        let s: f64 = w.iter().map(big_to_f64).sum();
        assert!(s.abs() < 1e-6, "{s}");
        // V_1 for N=16 is -2!/7! = -1/2520
        assert!((big_to_f64(&w[0]) + 1.0 / 2520.0).abs() < 1e-15);
    }

    #[test]
    fn big_to_f64_values() {
        let p = 128;
        for &x in &[0.3, -1.2345e-7, 1.0, 7e100, 0.0] {
            assert_eq!(big_to_f64(&BigFloat::from_f64(x, p)), x);
        }
    }

    #[test]
    fn domain_errors() {
        let m = YaglomLaw::new(0.5).unwrap();
        assert!(m.cdf(1, 0.0).is_err());
        assert!(m.cdf(1, -1.0).is_err());
        assert_eq!(m.evaluate(1, 1e300).unwrap().saturation, Saturation::One);
        assert!(YaglomLaw::new(1.5).is_err());
    }
}
