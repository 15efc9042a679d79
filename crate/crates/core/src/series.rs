//! Exact finite-generation laws by iterating the offspring pgf on truncated
//! power series.
//!
//! The engine never stores `f_k` itself. It iterates the complement
//! `U_k = 1 - f_k`, which satisfies `U_{k+1} = U_k - E(U_k)` with
//! `E(u) = f(1-u) - (1-u)`. For series about zero the coefficients of `U_k`
//! are `Q(k)` followed by `-P(Z(k) = j)`, so no probability is ever formed
//! as a difference of numbers close to one. The constant term is carried
//! separately in double-double arithmetic.

use std::io::Write;

use crate::numeric::{dot, NeumaierSum, Precision, TwoFloat};
use crate::offspring::{ln_factorial, Family, LawError, OffspringLaw};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SeriesError {
    #[error("truncation order {order} exceeds the configured budget {budget}")]
    TruncationOverflow { order: usize, budget: usize },
    #[error("{0}")]
    Domain(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error(transparent)]
    Law(#[from] LawError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub precision: Precision,
    /// Largest admissible truncation order.
    pub max_order: usize,
    /// Relative change above which a μ estimate is flagged as not converged.
    pub mu_threshold: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            precision: Precision::from_env(),
            max_order: 1 << 15,
            mu_threshold: 1e-2,
        }
    }
}

/// A truncated power series in `s - expansion_point`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSeries {
    pub expansion_point: f64,
    pub coefficients: Vec<f64>,
}

impl PowerSeries {
    pub fn new(expansion_point: f64, coefficients: Vec<f64>) -> Self {
        assert!(
            !coefficients.is_empty(),
            "a series needs at least one coefficient"
        );
        Self {
            expansion_point,
            coefficients,
        }
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn eval(&self, s: f64) -> f64 {
        let t = s - self.expansion_point;
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, c| acc * t + c)
    }

    pub fn mul(&self, other: &PowerSeries, prec: Precision) -> PowerSeries {
        let n = self.coefficients.len().min(other.coefficients.len());
        let mut out = vec![0.0; n];
        mul_into(
            &self.coefficients[..n],
            &other.coefficients[..n],
            &mut out,
            prec,
        );
        PowerSeries::new(self.expansion_point, out)
    }

    /// `self^beta`; the constant coefficient must be positive.
    pub fn powf(&self, beta: f64, prec: Precision) -> PowerSeries {
        assert!(
            self.coefficients[0] > 0.0,
            "fractional power needs a positive constant term"
        );
        let mut out = vec![0.0; self.coefficients.len()];
        powf_into(&self.coefficients, beta, &mut out, prec);
        PowerSeries::new(self.expansion_point, out)
    }

    /// `self / other`; the constant coefficient of `other` must be nonzero.
    pub fn div(&self, other: &PowerSeries, prec: Precision) -> PowerSeries {
        let n = self.coefficients.len().min(other.coefficients.len());
        let mut out = vec![0.0; n];
        div_into(
            &self.coefficients[..n],
            &other.coefficients[..n],
            &mut out,
            prec,
        );
        PowerSeries::new(self.expansion_point, out)
    }
}

pub(crate) fn mul_into(a: &[f64], b: &[f64], out: &mut [f64], prec: Precision) {
    for n in 0..out.len() {
        out[n] = dot(prec, (0..=n).map(|k| (a[k], b[n - k])));
    }
}

/// `v = u^beta` through `v' u = beta u' v`.
pub(crate) fn powf_into(u: &[f64], beta: f64, out: &mut [f64], prec: Precision) {
    let u0 = u[0];
    out[0] = u0.powf(beta);
    let b1 = beta + 1.0;
    for n in 1..out.len() {
        let nf = n as f64;
        let s = dot(
            prec,
            (1..=n).map(|k| ((b1 * k as f64 - nf) * u[k], out[n - k])),
        );
        out[n] = s / (nf * u0);
    }
}

pub(crate) fn div_into(num: &[f64], den: &[f64], out: &mut [f64], prec: Precision) {
    let d0 = den[0];
    for n in 0..out.len() {
        let s = dot(prec, (1..=n).map(|k| (den[k], out[n - k])));
        out[n] = (num[n] - s) / d0;
    }
}

/// Series of `E(U) = f(1-U) - (1-U)`.
fn excess_series(
    law: &OffspringLaw,
    u: &[f64],
    out: &mut [f64],
    scratch: &mut Vec<f64>,
    prec: Precision,
) {
    match law.family() {
        Family::StableFrac { alpha, c } => {
            powf_into(u, 1.0 + alpha, out, prec);
            out.iter_mut().for_each(|x| *x *= c);
        }
        Family::Geometric => {
            scratch.resize(u.len(), 0.0);
            mul_into(u, u, scratch, prec);
            let mut den = u.to_vec();
            den[0] += 1.0;
            div_into(scratch, &den, out, prec);
        }
        Family::Custom { .. } => {
            let b = law.custom_excess_coefficients();
            let n = u.len();
            scratch.resize(n, 0.0);
            // Horner: R = b_K; R = b_k + U R down to k = 2; E = U^2 R
            let mut r = vec![0.0; n];
            r[0] = *b.last().unwrap_or(&0.0);
            for k in (2..b.len().saturating_sub(1)).rev() {
                mul_into(u, &r, scratch, prec);
                r.copy_from_slice(scratch);
                r[0] += b[k];
            }
            mul_into(u, u, scratch, prec);
            mul_into(scratch, &r, out, prec);
        }
    }
}

/// State of the complement iteration `U_{k+1} = U_k - E(U_k)`.
#[derive(Debug, Clone)]
pub struct ComplementIteration<'a> {
    law: &'a OffspringLaw,
    prec: Precision,
    u: Vec<f64>,
    u0: TwoFloat,
    steps: usize,
    excess: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> ComplementIteration<'a> {
    /// Starts from `U_0 = u`, whose constant term is replaced by `u0`.
    pub fn new(law: &'a OffspringLaw, mut u: Vec<f64>, u0: TwoFloat, prec: Precision) -> Self {
        u[0] = u0.value();
        let n = u.len();
        Self {
            law,
            prec,
            u,
            u0,
            steps: 0,
            excess: vec![0.0; n],
            scratch: Vec::with_capacity(n),
        }
    }

    pub fn step(&mut self) {
        excess_series(
            self.law,
            &self.u,
            &mut self.excess,
            &mut self.scratch,
            self.prec,
        );
        for (x, e) in self.u.iter_mut().zip(&self.excess).skip(1) {
            *x -= e;
        }
        self.u0 = self.u0.sub_f64(self.law.excess(self.u0.value()));
        self.u[0] = self.u0.value();
        self.steps += 1;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn complement(&self) -> &[f64] {
        &self.u
    }

    pub fn constant(&self) -> TwoFloat {
        self.u0
    }
}

/// `Q(k) = 1 - f_k(0)` for `k = 0..=n_max`, carried in double-double.
#[derive(Debug, Clone)]
pub struct ExtinctionSequence {
    q: Vec<TwoFloat>,
}

impl ExtinctionSequence {
    pub fn new(law: &OffspringLaw, n_max: usize) -> Self {
        let mut q = Vec::with_capacity(n_max + 1);
        let mut u = TwoFloat::new(1.0);
        q.push(u);
        for _ in 0..n_max {
            u = u.sub_f64(law.excess(u.value()));
            q.push(u);
        }
        Self { q }
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    /// Survival probability `Q(k)`.
    pub fn survival(&self, k: usize) -> f64 {
        self.q[k].value()
    }

    pub fn survival_extended(&self, k: usize) -> TwoFloat {
        self.q[k]
    }

    /// Extinction probability `f_k(0)`.
    pub fn extinction(&self, k: usize) -> f64 {
        (-self.q[k].hi() + 1.0) - self.q[k].lo()
    }

    /// `f_k(0)` for every k.
    pub fn values(&self) -> Vec<f64> {
        (0..self.q.len()).map(|k| self.extinction(k)).collect()
    }
}

/// Exact truncated law of `Z(n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTable {
    pub n: usize,
    pub law: String,
    pub j0: usize,
    /// `P(Z(n) = j)`, `j = 0..=T`.
    pub coefficients: Vec<f64>,
    /// `P(Z(n) > T)`.
    pub tail_mass: f64,
    pub extinction_prob: f64,
    /// `Q(n) = 1 - f_n(0)`.
    pub survival: f64,
}

impl GenerationTable {
    fn from_complement(n: usize, law: &OffspringLaw, u: &[f64], u0: TwoFloat) -> Self {
        let mut coefficients = Vec::with_capacity(u.len());
        coefficients.push((-u0.hi() + 1.0) - u0.lo());
        coefficients.extend(u[1..].iter().map(|x| -x));
        let mut tail = NeumaierSum::new();
        tail.add(u0.hi());
        tail.add(u0.lo());
        u[1..].iter().for_each(|&x| tail.add(x));
        Self {
            n,
            law: law.to_string(),
            j0: law.j0(),
            extinction_prob: coefficients[0],
            coefficients,
            tail_mass: tail.value(),
            survival: u0.value(),
        }
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn prob(&self, j: usize) -> f64 {
        self.coefficients[j]
    }

    /// `q_n(J) = P(Z(n)=J) / P(Z(n)=J0)`.
    pub fn ratio_to_j0(&self, j: usize) -> f64 {
        self.coefficients[j] / self.coefficients[self.j0]
    }

    /// `P(0 < Z(n) ≤ t)` for `t ≤ T`.
    pub fn positive_mass_up_to(&self, t: usize) -> f64 {
        self.coefficients[1..=t]
            .iter()
            .copied()
            .collect::<NeumaierSum>()
            .value()
    }

    /// CSV with header `n,j,prob,tail_mass`, rows ordered by `j`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["n", "j", "prob", "tail_mass"])?;
        for (j, p) in self.coefficients.iter().enumerate() {
            wr.write_record([
                self.n.to_string(),
                j.to_string(),
                format!("{p:.16e}"),
                format!("{:.16e}", self.tail_mass),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// `(T, P(0 < Z(n) ≤ T))` with `T = ⌊1/Q(φ)⌋`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmallDeviation {
    pub n: usize,
    pub phi: usize,
    pub t: usize,
    pub probability: f64,
    pub table: GenerationTable,
}

/// Normalized μ estimates along a schedule of generations.
#[derive(Debug, Clone, PartialEq)]
pub struct MuEstimates {
    pub alpha: f64,
    pub schedule: Vec<usize>,
    /// `rows[i][j] = α n_i P(Z(n_i)=j) / Q(n_i)`, `j = 0..=j_max` (`j = 0` unused).
    pub rows: Vec<Vec<f64>>,
    /// Relative change of each estimate over the last doubling of `n`.
    pub relative_change: Vec<f64>,
    pub threshold: f64,
}

impl MuEstimates {
    pub fn estimate(&self) -> &[f64] {
        self.rows.last().expect("schedule is nonempty")
    }

    pub fn mu(&self, j: usize) -> f64 {
        self.estimate()[j]
    }

    pub fn non_converged(&self) -> bool {
        self.relative_change
            .iter()
            .skip(1)
            .any(|&r| r > self.threshold)
    }

    /// `Σ_{j=1}^{t} μ̂_j`.
    pub fn partial_sum(&self, t: usize) -> f64 {
        self.estimate()[1..=t]
            .iter()
            .copied()
            .collect::<NeumaierSum>()
            .value()
    }
}

/// Exact law of the reduced process at generation `m` for horizon `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedJoint {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    /// `P(Z(m,n)=j)`, `j = 0..=T`.
    pub pmf_reduced: Vec<f64>,
    /// `P(S*_j ≤ T)`, `j = 0..=T`.
    pub cond_h_given_j: Vec<f64>,
    /// `P(Z(m,n)=j | H(n))`, `j = 0..=T`.
    pub cond_j_given_h: Vec<f64>,
    /// `P(H(n))` by total probability.
    pub p_h: f64,
    /// Mass of `Z(n-m) | Z(n-m)>0` above `T`; does not enter `cond_h_given_j`.
    pub discarded_mass: f64,
}

/// Iterates the pgf of one offspring law on truncated series.
#[derive(Debug, Clone)]
pub struct Engine {
    law: OffspringLaw,
    config: EngineConfig,
}

impl Engine {
    pub fn new(law: &OffspringLaw) -> Self {
        Self::with_config(law, EngineConfig::default())
    }

    pub fn with_config(law: &OffspringLaw, config: EngineConfig) -> Self {
        Self {
            law: law.clone(),
            config,
        }
    }

    pub fn law(&self) -> &OffspringLaw {
        &self.law
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn check_order(&self, order: usize) -> Result<(), SeriesError> {
        if order == 0 {
            return Err(SeriesError::Domain(
                "truncation order must be at least 1".into(),
            ));
        }
        if order > self.config.max_order {
            return Err(SeriesError::TruncationOverflow {
                order,
                budget: self.config.max_order,
            });
        }
        Ok(())
    }

    pub fn extinction_sequence(&self, n_max: usize) -> ExtinctionSequence {
        ExtinctionSequence::new(&self.law, n_max)
    }

    /// Iteration whose k-th state holds the complement series of `f_k` about 0.
    pub fn generation_iter(&self, order: usize) -> Result<ComplementIteration<'_>, SeriesError> {
        self.check_order(order)?;
        let mut u = vec![0.0; order + 1];
        u[1] = -1.0;
        Ok(ComplementIteration::new(
            &self.law,
            u,
            TwoFloat::new(1.0),
            self.config.precision,
        ))
    }

    pub fn table_of(&self, it: &ComplementIteration<'_>) -> GenerationTable {
        GenerationTable::from_complement(it.steps(), &self.law, it.complement(), it.constant())
    }

    pub fn generation_table(&self, n: usize, order: usize) -> Result<GenerationTable, SeriesError> {
        let mut it = self.generation_iter(order)?;
        for _ in 0..n {
            it.step();
        }
        Ok(self.table_of(&it))
    }

    /// Derivatives `f_m^{(k)}(s0)`, `k = 0..=order`.
    pub fn taylor_at_point(
        &self,
        m: usize,
        s0: f64,
        order: usize,
    ) -> Result<Vec<f64>, SeriesError> {
        if !(0.0..1.0).contains(&s0) {
            return Err(SeriesError::Domain(format!(
                "expansion point {s0} outside [0, 1)"
            )));
        }
        self.check_order(order)?;
        let q = 1.0 - s0;
        let mut u = vec![0.0; order + 1];
        u[1] = -1.0;
        let mut it =
            ComplementIteration::new(&self.law, u, TwoFloat::new(q), self.config.precision);
        for _ in 0..m {
            it.step();
        }
        let u = it.complement();
        let u0 = it.constant();
        let mut out = Vec::with_capacity(order + 1);
        out.push((-u0.hi() + 1.0) - u0.lo());
        for (k, &x) in u.iter().enumerate().skip(1) {
            out.push(-x * ln_factorial(k as u32).exp());
        }
        Ok(out)
    }

    /// Coefficients of `τ ↦ 1 - f_m(1 - q + qτ)`, with `q` given in
    /// double-double. Index `j ≥ 1` holds `-q^j f_m^{(j)}(1-q)/j!`.
    pub fn scaled_complement(
        &self,
        m: usize,
        q: TwoFloat,
        order: usize,
    ) -> Result<Vec<f64>, SeriesError> {
        self.check_order(order)?;
        let mut u = vec![0.0; order + 1];
        u[1] = -q.value();
        let mut it = ComplementIteration::new(&self.law, u, q, self.config.precision);
        for _ in 0..m {
            it.step();
        }
        Ok(it.complement().to_vec())
    }

    pub fn small_deviation_prob(
        &self,
        n: usize,
        phi: usize,
    ) -> Result<SmallDeviation, SeriesError> {
        if phi == 0 || phi > n {
            return Err(SeriesError::Domain(format!(
                "phi = {phi} must lie in [1, n = {n}]"
            )));
        }
        let ext = self.extinction_sequence(phi);
        let t = threshold_from_survival(ext.survival(phi));
        let table = self.generation_table(n, t)?;
        Ok(SmallDeviation {
            n,
            phi,
            t,
            probability: table.positive_mass_up_to(t),
            table,
        })
    }

    pub fn mu_sequence(
        &self,
        j_max: usize,
        schedule: &[usize],
    ) -> Result<MuEstimates, SeriesError> {
        validate_schedule(schedule)?;
        let mut it = self.generation_iter(j_max)?;
        let alpha = self.law.alpha();
        let mut rows = Vec::with_capacity(schedule.len());
        for &n in schedule {
            while it.steps() < n {
                it.step();
            }
            let table = self.table_of(&it);
            let scale = alpha * n as f64 / table.survival;
            let mut row: Vec<f64> = table.coefficients.iter().map(|p| p * scale).collect();
            row[0] = 0.0;
            rows.push(row);
        }
        let last_n = *schedule.last().unwrap();
        let half = schedule
            .iter()
            .enumerate()
            .rev()
            .skip(1)
            .min_by(|a, b| {
                let da = (*a.1 as f64 / last_n as f64 - 0.5).abs();
                let db = (*b.1 as f64 / last_n as f64 - 0.5).abs();
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
            .unwrap();
        let last = rows.last().unwrap();
        let prev = &rows[half];
        let relative_change = last
            .iter()
            .zip(prev)
            .map(|(a, b)| if *a == 0.0 { 0.0 } else { ((a - b) / a).abs() })
            .collect();
        Ok(MuEstimates {
            alpha,
            schedule: schedule.to_vec(),
            rows,
            relative_change,
            threshold: self.config.mu_threshold,
        })
    }

    /// Law of `Z(m,n)` and its interplay with `H(n) = {0 < Z(n) ≤ T}`.
    pub fn reduced_joint(&self, n: usize, m: usize, t: usize) -> Result<ReducedJoint, SeriesError> {
        if m >= n {
            return Err(SeriesError::Domain(format!(
                "reduced generation m = {m} must be below n = {n}"
            )));
        }
        self.check_order(t)?;
        let r = n - m;
        let ext = self.extinction_sequence(r);
        let q_r = ext.survival_extended(r);
        let u = self.scaled_complement(m, q_r, t)?;
        let mut pmf_reduced: Vec<f64> = u.iter().map(|x| -x).collect();
        pmf_reduced[0] = 1.0 - u[0];

        // Z(r) conditioned positive, truncated at T
        let sub = self.generation_table(r, t)?;
        let g: Vec<f64> = sub.coefficients.iter().map(|p| p / sub.survival).collect();
        let discarded_mass = sub.tail_mass / sub.survival;
        let mut cond_h_given_j = vec![0.0; t + 1];
        let mut conv = vec![0.0; t + 1];
        conv[0] = 1.0;
        let mut next = vec![0.0; t + 1];
        for j in 1..=t {
            let mut g0 = g.clone();
            g0[0] = 0.0;
            mul_into(&conv, &g0, &mut next, self.config.precision);
            std::mem::swap(&mut conv, &mut next);
            cond_h_given_j[j] = conv[1..].iter().copied().collect::<NeumaierSum>().value();
        }
        let p_h = (1..=t)
            .map(|j| pmf_reduced[j] * cond_h_given_j[j])
            .collect::<NeumaierSum>()
            .value();
        let mut cond_j_given_h: Vec<f64> = (0..=t)
            .map(|j| pmf_reduced[j] * cond_h_given_j[j] / p_h)
            .collect();
        cond_j_given_h[0] = 0.0;
        Ok(ReducedJoint {
            n,
            m,
            t,
            pmf_reduced,
            cond_h_given_j,
            cond_j_given_h,
            p_h,
            discarded_mass,
        })
    }

    /// `P(Z(n-r, n) = 1)` for `r = 0..=n`; `P(d(n) ≤ r | Z(n) > 0)` is this
    /// divided by `Q(n)`.
    pub fn single_ancestor_probs(&self, n: usize) -> Vec<f64> {
        let ext = self.extinction_sequence(n);
        // suffix[r] = Σ_{r ≤ i < n} ln f'(f_i(0)); built from the top so a
        // vanishing f'(0) cannot produce -∞ - (-∞)
        let mut suffix = vec![0.0; n + 1];
        let mut acc = NeumaierSum::new();
        for i in (0..n).rev() {
            let d = self
                .law
                .derivative_at_complement(1, ext.survival(i))
                .expect("complement in [0,1]");
            acc.add(d.ln());
            suffix[i] = acc.value();
        }
        (0..=n)
            .map(|r| {
                if r == 0 {
                    // Z(n,n) = 1
                    return ext_prob_one(self, n);
                }
                ext.survival(r) * suffix[r].exp()
            })
            .collect()
    }

    /// Exact `P(d(n) ≤ r | Z(n) > 0)` for `r = 0..=n`.
    pub fn mrca_distance_cdf(&self, n: usize) -> Vec<f64> {
        let q = self.extinction_sequence(n).survival(n);
        let mut v: Vec<f64> = self
            .single_ancestor_probs(n)
            .iter()
            .map(|p| p / q)
            .collect();
        // d(n) ≥ 1 always
        v[0] = 0.0;
        v
    }
}

fn ext_prob_one(engine: &Engine, n: usize) -> f64 {
    engine
        .generation_table(n, 1)
        .map(|t| t.coefficients[1])
        .unwrap_or(f64::NAN)
}

/// `⌊1/q⌋` as a truncation order.
pub fn threshold_from_survival(q: f64) -> usize {
    (1.0 / q).floor() as usize
}

fn validate_schedule(schedule: &[usize]) -> Result<(), SeriesError> {
    if schedule.len() < 2 {
        return Err(SeriesError::InvalidSchedule(
            "needs at least two generations".into(),
        ));
    }
    if schedule.windows(2).any(|w| w[0] >= w[1]) || schedule[0] == 0 {
        return Err(SeriesError::InvalidSchedule(
            "must be positive and strictly increasing".into(),
        ));
    }
    let span = *schedule.last().unwrap() as f64 / schedule[0] as f64;
    if span < 16.0 {
        return Err(SeriesError::InvalidSchedule(format!(
            "spans a factor {span}, needs at least 16"
        )));
    }
    Ok(())
}

/// Residuals of the stationarity system `μ_j = Σ_l μ_l P(l, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stationarity {
    /// `|Σ_l μ̂_l P(l,j) - μ̂_j| / μ̂_j` for `j = 1..=j_max` (index 0 unused).
    pub residuals: Vec<f64>,
    /// `Σ_{l ≤ L} μ̂_l p_0^l` plus the geometric estimate of the omitted terms.
    pub normalization: f64,
    /// Estimate of the omitted terms `l > L`.
    pub truncation_correction: f64,
}

/// `P(l, j)` is the j-th coefficient of `f(s)^l`; rows `l = 1..=L`.
pub fn stationarity_residuals(
    law: &OffspringLaw,
    mu: &[f64],
    j_max: usize,
    prec: Precision,
) -> Stationarity {
    let l_max = mu.len() - 1;
    let order = j_max.max(1);
    let base: Vec<f64> = (0..=order).map(|j| law.pmf(j as u64)).collect();
    let mut power = base.clone();
    let mut next = vec![0.0; order + 1];
    let mut sums = vec![NeumaierSum::new(); order + 1];
    for l in 1..=l_max {
        if l > 1 {
            mul_into(&power, &base, &mut next, prec);
            std::mem::swap(&mut power, &mut next);
        }
        for j in 0..=order {
            sums[j].add(mu[l] * power[j]);
        }
    }
    let mut residuals = vec![0.0; j_max + 1];
    for j in 1..=j_max {
        residuals[j] = if mu[j] == 0.0 {
            sums[j].value().abs()
        } else {
            ((sums[j].value() - mu[j]) / mu[j]).abs()
        };
    }
    let p0 = law.pmf(0);
    let truncation_correction = mu[l_max] * p0.powi(l_max as i32 + 1) / (1.0 - p0);
    Stationarity {
        residuals,
        normalization: sums[0].value() + truncation_correction,
        truncation_correction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::LawSpec;

    fn half() -> OffspringLaw {
        OffspringLaw::stable_frac(0.5, 2.0 / 3.0).unwrap()
    }

    #[test]
    fn generation_zero_and_one() {
        let e = Engine::new(&half());
        let t0 = e.generation_table(0, 8).unwrap();
        assert_eq!(t0.coefficients[1], 1.0);
        assert!(t0
            .coefficients
            .iter()
            .enumerate()
            .all(|(j, &p)| j == 1 || p == 0.0));
        let t1 = e.generation_table(1, 40).unwrap();
        for j in 0..=40 {
            assert!(
                (t1.coefficients[j] - half().pmf(j as u64)).abs() < 1e-15,
                "j = {j}"
            );
        }
    }

    #[test]
    fn geometric_second_generation() {
        let e = Engine::new(&OffspringLaw::geometric());
        let t = e.generation_table(2, 6).unwrap();
        assert!((t.coefficients[1] - 1.0 / 9.0).abs() < 1e-15);
        assert!((t.coefficients[2] - 2.0 / 27.0).abs() < 1e-15);
        let sd = e.small_deviation_prob(2, 1).unwrap();
        assert_eq!(sd.t, 2);
        assert!((sd.probability - 5.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn extinction_first_steps() {
        let ext = ExtinctionSequence::new(&half(), 2);
        assert_eq!(ext.extinction(0), 0.0);
        assert!((ext.extinction(1) - 2.0 / 3.0).abs() < 1e-16);
        let f2 = 2.0 / 3.0 + 2.0 / 3.0 * (1.0f64 / 3.0).powf(1.5);
        assert!((ext.extinction(2) - f2).abs() < 1e-15);
    }

    #[test]
    fn lower_triangular_truncation() {
        let e = Engine::new(&half());
        let a = e.generation_table(30, 32).unwrap();
        let b = e.generation_table(30, 64).unwrap();
        assert_eq!(a.coefficients[..], b.coefficients[..33]);
    }

    #[test]
    fn taylor_at_point_edge_cases() {
        let law = half();
        let e = Engine::new(&law);
        let t = e.taylor_at_point(0, 0.3, 5).unwrap();
        assert!((t[0] - 0.3).abs() < 1e-16 && (t[1] - 1.0).abs() < 1e-16);
        assert!(t[2..].iter().all(|&x| x == 0.0));
        let t = e.taylor_at_point(1, 0.4, 8).unwrap();
        for k in 0..=8u32 {
            let d = law.derivative(k, 0.4).unwrap();
            assert!(
                (t[k as usize] - d).abs() <= 1e-12 * d.abs().max(1.0),
                "k = {k}"
            );
        }
        assert!(e.taylor_at_point(3, 1.0, 4).is_err());
    }

    #[test]
    fn reduced_joint_root_is_sole_ancestor() {
        let law = half();
        let e = Engine::new(&law);
        let rj = e.reduced_joint(40, 0, 10).unwrap();
        let q = e.extinction_sequence(40).survival(40);
        assert!((rj.pmf_reduced[1] - q).abs() < 1e-16);
        assert!(rj.pmf_reduced[2..].iter().all(|&x| x.abs() < 1e-300));
        assert!(e.reduced_joint(40, 40, 10).is_err());
    }

    #[test]
    fn custom_law_matches_geometric_truncation_structure() {
        // a finite law iterated through the generic Horner path
        let law = LawSpec::CustomPmf {
            probabilities: vec![0.25, 0.5, 0.25],
            alpha: 1.0.into(),
        }
        .build()
        .unwrap();
        let e = Engine::new(&law);
        let t = e.generation_table(2, 4).unwrap();
        // f_2(s) = f(f(s)) with f(s) = (1+s)^2/4
        let f = |s: f64| (1.0 + s) * (1.0 + s) / 4.0;
        assert!((t.coefficients[0] - f(f(0.0))).abs() < 1e-15);
        // [s^4] f(f(s)) = (1/4)·[s^4](f(s))^2 = (1/4)(1/16)
        assert!((t.coefficients[4] - 1.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        let e = Engine::new(&half());
        assert!(e.mu_sequence(4, &[8, 16, 32]).is_err());
        assert!(e.mu_sequence(4, &[8, 4, 256]).is_err());
        assert!(e.mu_sequence(4, &[8, 64, 128]).is_ok());
    }

    #[test]
    fn csv_export_header_and_digits() {
        let e = Engine::new(&OffspringLaw::geometric());
        let t = e.generation_table(3, 2).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("n,j,prob,tail_mass"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "3");
        assert_eq!(
            row[2]
                .split('e')
                .next()
                .unwrap()
                .replace(['.', '-'], "")
                .len(),
            17
        );
    }

    #[test]
    fn power_series_ops_roundtrip() {
        let p = PowerSeries::new(0.0, vec![2.0, 1.0, 0.5, -0.25, 0.1]);
        let sq = p.mul(&p, Precision::Compensated);
        let back = sq.powf(0.5, Precision::Compensated);
        for (a, b) in back.coefficients.iter().zip(&p.coefficients) {
            assert!((a - b).abs() < 1e-14);
        }
        let one = p.div(&p, Precision::DoubleDouble);
        assert!((one.coefficients[0] - 1.0).abs() < 1e-15);
        assert!(one.coefficients[1..].iter().all(|x| x.abs() < 1e-15));
        assert!((p.eval(0.5) - (2.0 + 0.5 + 0.125 - 0.03125 + 0.00625)).abs() < 1e-15);
    }
}
