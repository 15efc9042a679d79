//! Partial Bell polynomials, Stirling numbers of the second kind and the
//! Faà di Bruno derivative recursion.

use std::io::Write;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, Zero};

use crate::numeric::{ln_gamma, NeumaierSum};
use crate::offspring::{factorial, OffspringLaw};
use crate::series::ExtinctionSequence;

/// Largest `J` accepted by the exact Stirling routines.
pub const STIRLING_MAX: usize = 300;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BellError {
    #[error("indices (J={j}, k={k}) outside 1 <= k <= J <= {max}")]
    Range { j: usize, k: usize, max: usize },
}

fn binom_big(n: usize, k: usize) -> BigUint {
    let mut r = BigUint::one();
    for i in 0..k {
        r = r * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    r
}

/// `S(J,k) = (1/k!) Σ_i (-1)^{k-i} C(k,i) i^J`.
pub fn stirling2_alternating(j: usize, k: usize) -> BigUint {
    let mut acc = BigInt::zero();
    for i in 0..=k {
        let term =
            BigInt::from_biguint(Sign::Plus, binom_big(k, i) * BigUint::from(i).pow(j as u32));
        if (k - i).is_multiple_of(2) {
            acc += term;
        } else {
            acc -= term;
        }
    }
    let kf: BigUint = (1..=k).map(BigUint::from).product();
    let (sign, mag) = acc.into_parts();
    debug_assert!(sign != Sign::Minus);
    mag / kf
}

/// Rows `0..=j_max` of `S(J,k) = k S(J-1,k) + S(J-1,k-1)`.
pub fn stirling2_triangle(j_max: usize) -> Vec<Vec<BigUint>> {
    let mut rows: Vec<Vec<BigUint>> = vec![vec![BigUint::one()]];
    for j in 1..=j_max {
        let prev = &rows[j - 1];
        let mut row = vec![BigUint::zero(); j + 1];
        for k in 1..=j {
            let a = if k < j {
                prev[k].clone() * BigUint::from(k)
            } else {
                BigUint::zero()
            };
            row[k] = a + prev[k - 1].clone();
        }
        rows.push(row);
    }
    rows
}

/// `S(J,k)` computed by both formulas, which must agree.
pub fn stirling2(j: usize, k: usize) -> Result<BigUint, BellError> {
    if k == 0 || k > j || j > STIRLING_MAX {
        return Err(BellError::Range {
            j,
            k,
            max: STIRLING_MAX,
        });
    }
    let a = stirling2_alternating(j, k);
    let b = stirling2_triangle(j).swap_remove(j).swap_remove(k);
    assert_eq!(a, b, "Stirling formulas disagree at ({j}, {k})");
    Ok(a)
}

/// Triangular array of partial Bell polynomial values.
///
/// With `normalized`, entries are `B_{J,k}/J!` computed from `a_r = x_r/r!`,
/// which keeps them representable for large `J`.
#[derive(Debug, Clone, PartialEq)]
pub struct BellTable {
    /// `inputs[r]`, `r = 1..=j_max`; index 0 unused.
    pub inputs: Vec<f64>,
    pub normalized: bool,
    values: Vec<Vec<f64>>,
}

impl BellTable {
    /// Raw `B_{J,k}(x_1, x_2, ...)` from `inputs = [x_1, x_2, ...]`.
    pub fn new(inputs: &[f64], j_max: usize) -> Self {
        assert!(j_max >= 1 && inputs.len() >= j_max, "need x_1..x_Jmax");
        let x: Vec<f64> = std::iter::once(0.0)
            .chain(inputs[..j_max].iter().copied())
            .collect();
        // C(J-1, r-1) rows
        let mut values = vec![vec![0.0; 1]; j_max + 1];
        values[0][0] = 1.0;
        let mut pascal = vec![1.0];
        for j in 1..=j_max {
            let mut row = vec![0.0; j + 1];
            for k in 1..=j {
                let mut s = NeumaierSum::new();
                for r in 1..=(j - k + 1) {
                    let prev = &values[j - r];
                    if k - 1 < prev.len() {
                        s.add(pascal[r - 1] * x[r] * prev[k - 1]);
                    }
                }
                row[k] = s.value();
            }
            values[j] = row;
            // advance pascal to row j
            let mut next = vec![1.0; j + 1];
            for i in 1..j {
                next[i] = pascal[i - 1] + pascal[i];
            }
            pascal = next;
        }
        Self {
            inputs: x,
            normalized: false,
            values,
        }
    }

    /// `B_{J,k}/J!` from `a = [a_1, a_2, ...]` with `a_r = x_r/r!`, via
    /// `J b_{J,k} = Σ_r r a_r b_{J-r,k-1}`.
    pub fn normalized(a: &[f64], j_max: usize) -> Self {
        assert!(j_max >= 1 && a.len() >= j_max, "need a_1..a_Jmax");
        let a: Vec<f64> = std::iter::once(0.0)
            .chain(a[..j_max].iter().copied())
            .collect();
        let mut values = vec![vec![0.0; 1]; j_max + 1];
        values[0][0] = 1.0;
        for j in 1..=j_max {
            let mut row = vec![0.0; j + 1];
            for k in 1..=j {
                let mut s = NeumaierSum::new();
                for r in 1..=(j - k + 1) {
                    let prev = &values[j - r];
                    if k - 1 < prev.len() {
                        s.add(r as f64 * a[r] * prev[k - 1]);
                    }
                }
                row[k] = s.value() / j as f64;
            }
            values[j] = row;
        }
        Self {
            inputs: a,
            normalized: true,
            values,
        }
    }

    pub fn j_max(&self) -> usize {
        self.values.len() - 1
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        if k > j || j > self.j_max() {
            return 0.0;
        }
        self.values[j][k]
    }

    /// CSV `J,k,value` for `1 ≤ k ≤ J`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["J", "k", "value"])?;
        for j in 1..=self.j_max() {
            for k in 1..=j {
                wr.write_record([
                    j.to_string(),
                    k.to_string(),
                    format!("{:.16e}", self.values[j][k]),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// `B_{J,k}` by direct summation over multiplicity vectors
/// `(i_1, ..., i_J)` with `Σ i_r = k`, `Σ r i_r = J`.
pub fn bell_by_partitions(j: usize, k: usize, x: &[f64]) -> f64 {
    fn rec(r: usize, rem_j: usize, rem_k: usize, jmax: usize, x: &[f64], coef: f64, out: &mut f64) {
        if rem_j == 0 && rem_k == 0 {
            *out += coef;
            return;
        }
        if r > jmax || rem_k == 0 || rem_j < r {
            return;
        }
        let mut i = 0;
        let mut c = coef;
        while i * r <= rem_j && i <= rem_k {
            rec(r + 1, rem_j - i * r, rem_k - i, jmax, x, c, out);
            i += 1;
            // multiply by x_r / (r! · i)
            c *= x[r - 1] / (factorial(r as u32) * i as f64);
        }
    }
    let mut out = 0.0;
    rec(1, j, k, j, x, factorial(j as u32), &mut out);
    out
}

/// `ln Σ_{J=k}^{T} B_{J,k}(x)/J!` with `x_r = r! μ_r`, i.e. the sum of the
/// coefficients of `(Σ_r μ_r s^r)^k / k!` up to `s^T`. Accumulated with a
/// running log scale so large `k` cannot overflow.
pub fn bell_weighted_sum_ln(mu: &[f64], k: usize, t: usize) -> f64 {
    assert!(
        k >= 1 && k <= t && mu.len() > t,
        "need mu_1..mu_T and 1 <= k <= T"
    );
    let a: Vec<f64> = std::iter::once(0.0)
        .chain(mu[1..=t].iter().copied())
        .collect();
    let mut p = a.clone();
    let mut log_scale = 0.0;
    let mut next = vec![0.0; t + 1];
    for i in 2..=k {
        for n in 0..=t {
            let mut s = NeumaierSum::new();
            // p has no terms below s^{i-1}, a none below s^1
            for r in 1..n.saturating_sub(i - 2) {
                s.add(a[r] * p[n - r]);
            }
            next[n] = s.value() / i as f64;
        }
        std::mem::swap(&mut p, &mut next);
        let m = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m > 0.0 {
            p.iter_mut().for_each(|v| *v /= m);
            log_scale += m.ln();
        }
    }
    let s: f64 = p[k..=t].iter().copied().collect::<NeumaierSum>().value();
    s.ln() + log_scale
}

pub fn bell_weighted_sum(mu: &[f64], k: usize, t: usize) -> f64 {
    bell_weighted_sum_ln(mu, k, t).exp()
}

/// `out[k][T] = ln Σ_{J=k}^{T} B_{J,k}(x)/J!` for all `1 ≤ k ≤ k_max`,
/// `k ≤ T ≤ t_max` in one pass over the powers of `Σ_r μ_r s^r`;
/// entries with `T < k` are `-∞`.
pub fn bell_partial_sums_ln(mu: &[f64], k_max: usize, t_max: usize) -> Vec<Vec<f64>> {
    assert!(
        k_max >= 1 && mu.len() > t_max,
        "need mu_1..mu_T and k_max >= 1"
    );
    let a: Vec<f64> = std::iter::once(0.0)
        .chain(mu[1..=t_max].iter().copied())
        .collect();
    let mut out = vec![vec![f64::NEG_INFINITY; t_max + 1]; k_max + 1];
    let mut p = a.clone();
    let mut log_scale = 0.0;
    let mut next = vec![0.0; t_max + 1];
    for k in 1..=k_max {
        if k > 1 {
            for n in 0..=t_max {
                let mut s = NeumaierSum::new();
                for r in 1..n.saturating_sub(k - 2) {
                    s.add(a[r] * p[n - r]);
                }
                next[n] = s.value() / k as f64;
            }
            std::mem::swap(&mut p, &mut next);
            let m = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if m > 0.0 {
                p.iter_mut().for_each(|v| *v /= m);
                log_scale += m.ln();
            }
        }
        let mut acc = NeumaierSum::new();
        for t in k..=t_max {
            acc.add(p[t]);
            out[k][t] = acc.value().ln() + log_scale;
        }
    }
    out
}

/// Log of the Tauberian prediction `(T^α/(αc))^k / (k! Γ(αk+1))` for the
/// weighted Bell sum.
pub fn bell_sum_prediction_ln(alpha: f64, c: f64, k: usize, t: usize) -> f64 {
    let kf = k as f64;
    kf * ((t as f64).powf(alpha) / (alpha * c)).ln()
        - ln_gamma(kf + 1.0)
        - ln_gamma(alpha * kf + 1.0)
}

/// Derivatives `f_n^{(j)}(0)`, `j = 0..=j_max`, by iterating Faà di Bruno's
/// formula `f_{m+1}^{(J)}(0) = Σ_k f^{(k)}(f_m(0)) B_{J,k}(f_m'(0), ...)`.
pub fn faa_di_bruno_derivatives(law: &OffspringLaw, n: usize, j_max: usize) -> Vec<f64> {
    let ext = ExtinctionSequence::new(law, n);
    let mut d = vec![0.0; j_max + 1];
    if j_max >= 1 {
        d[1] = 1.0;
    }
    for m in 0..n {
        let q = ext.survival(m);
        let fk: Vec<f64> = (0..=j_max)
            .map(|k| {
                law.derivative_at_complement(k as u32, q)
                    .expect("q lies in [0, 1]")
            })
            .collect();
        let mut next = vec![0.0; j_max + 1];
        next[0] = ext.extinction(m + 1);
        if j_max >= 1 {
            let table = BellTable::new(&d[1..], j_max);
            for (j, slot) in next.iter_mut().enumerate().skip(1) {
                let mut s = NeumaierSum::new();
                for (k, f) in fk.iter().enumerate().take(j + 1).skip(1) {
                    s.add(f * table.get(j, k));
                }
                *slot = s.value();
            }
        }
        d = next;
    }
    d
}

/// `f_{n+1}^{(J0)}(0)` through the product `J0! p_{J0} Π_{i=1}^{n} f'(f_i(0))`.
pub fn j0_chain_product(law: &OffspringLaw, n: usize) -> f64 {
    let j0 = law.j0() as u32;
    let ext = ExtinctionSequence::new(law, n);
    let ln: f64 = (1..=n)
        .map(|i| {
            law.derivative_at_complement(1, ext.survival(i))
                .unwrap()
                .ln()
        })
        .collect::<NeumaierSum>()
        .value();
    factorial(j0) * law.pmf(j0 as u64) * ln.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_sums_match_single_sums() {
        let mu: Vec<f64> = (0..=60)
            .map(|r| {
                if r == 0 {
                    0.0
                } else {
                    1.0 / (r as f64).powf(0.3)
                }
            })
            .collect();
        let all = bell_partial_sums_ln(&mu, 6, 60);
        for k in 2..=6 {
            for t in [k, 20, 60] {
                let one = bell_weighted_sum_ln(&mu, k, t);
                assert!((all[k][t] - one).abs() < 1e-12, "k={k} t={t}");
            }
        }
        assert_eq!(all[5][4], f64::NEG_INFINITY);
    }

    #[test]
    fn stirling_values() {
        assert_eq!(stirling2(4, 2).unwrap(), BigUint::from(7u32));
        assert_eq!(stirling2(5, 3).unwrap(), BigUint::from(25u32));
        assert_eq!(stirling2(6, 3).unwrap(), BigUint::from(90u32));
        for j in 1..20 {
            assert_eq!(stirling2(j, 1).unwrap(), BigUint::one());
            assert_eq!(stirling2(j, j).unwrap(), BigUint::one());
        }
        assert!(stirling2(301, 2).is_err());
        assert!(stirling2(4, 5).is_err());
    }

    #[test]
    fn bell_small_cases() {
        let x = [1.5, 2.5, 0.7];
        let t = BellTable::new(&x, 3);
        assert!((t.get(3, 2) - 3.0 * 1.5 * 2.5).abs() < 1e-14);
        assert_eq!(t.get(3, 1), 0.7);
        assert!((t.get(3, 3) - 1.5f64.powi(3)).abs() < 1e-14);
        let ones = vec![1.0; 6];
        assert_eq!(BellTable::new(&ones, 6).get(6, 3), 90.0);
    }

    #[test]
    fn normalized_matches_raw() {
        let x: Vec<f64> = (1..=15).map(|r| 1.0 / r as f64 + 0.3).collect();
        let a: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| v / factorial(i as u32 + 1))
            .collect();
        let raw = BellTable::new(&x, 15);
        let nor = BellTable::normalized(&a, 15);
        for j in 1..=15 {
            for k in 1..=j {
                let expect = raw.get(j, k) / factorial(j as u32);
                assert!(
                    (nor.get(j, k) - expect).abs() <= 1e-13 * expect,
                    "({j},{k})"
                );
            }
        }
    }

    #[test]
    fn weighted_sum_single_term() {
        let mu = vec![0.0, 0.4, 0.3, 0.2, 0.1];
        let s = bell_weighted_sum(&mu, 4, 4);
        // B_{T,T}/T! = x_1^T/T! with x_1 = μ_1
        assert!((s - 0.4f64.powi(4) / 24.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_sum_matches_table() {
        let mu: Vec<f64> = (0..=30)
            .map(|r| if r == 0 { 0.0 } else { 1.0 / (r as f64).sqrt() })
            .collect();
        let table = BellTable::normalized(&mu[1..], 30);
        for k in [2usize, 3, 7] {
            let direct: f64 = (k..=30).map(|j| table.get(j, k)).sum();
            let s = bell_weighted_sum(&mu, k, 30);
            assert!((s / direct - 1.0).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn j0_chain_on_geometric() {
        // f_n(0) derivative data: P(Z(n+1)=1) = n... closed form (n+1)^0/(n+2)^2
        let law = OffspringLaw::geometric();
        let n = 10;
        let v = j0_chain_product(&law, n);
        let expect = 1.0 / ((n + 2) as f64).powi(2);
        assert!((v - expect).abs() < 1e-15);
    }
}
