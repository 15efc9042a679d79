//! Declarative experiments. A config names one check, the law, the
//! generations and grids; `run` dispatches it and produces a [`Report`] of
//! predicted/observed rows plus pass/fail checks, optionally persisted as
//! `<experiment>.csv` and `summary.json`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bell::{bell_partial_sums_ln, bell_sum_prediction_ln};
use crate::limit::{
    mu_partial_sum_prediction, thm1_prediction_from_survival, LimitError, YaglomLaw,
};
use crate::numeric::{
    ceil_guarded, floor_guarded, integrate, integrate_split, ln_gamma, QuadratureNonConverged,
};
use crate::offspring::{Family, LawError, LawSpec, OffspringLaw, Param};
use crate::series::{
    stationarity_residuals, threshold_from_survival, Engine, ExtinctionSequence, MuEstimates,
    SeriesError,
};
use crate::sim::{
    mc_conditional_reduced, mc_small_dev, mc_zubkov, Conditioning, McConfig, SimError,
};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("offspring law: {0}")]
    Law(#[from] LawError),
    #[error("series engine: {0}")]
    Series(#[from] SeriesError),
    #[error("limit law: {0}")]
    Limit(#[from] LimitError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureNonConverged),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Thm1,
    Thm2,
    Corollary,
    Stationarity,
    Tauberian,
    BellBound,
    IntegralLemmas,
    DerivativeLemmas,
    Zubkov,
    FiniteVariance,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 10] = [
        ExperimentId::Thm1,
        ExperimentId::Thm2,
        ExperimentId::Corollary,
        ExperimentId::Stationarity,
        ExperimentId::Tauberian,
        ExperimentId::BellBound,
        ExperimentId::IntegralLemmas,
        ExperimentId::DerivativeLemmas,
        ExperimentId::Zubkov,
        ExperimentId::FiniteVariance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::Thm1 => "thm1",
            ExperimentId::Thm2 => "thm2",
            ExperimentId::Corollary => "corollary",
            ExperimentId::Stationarity => "stationarity",
            ExperimentId::Tauberian => "tauberian",
            ExperimentId::BellBound => "bell_bound",
            ExperimentId::IntegralLemmas => "integral_lemmas",
            ExperimentId::DerivativeLemmas => "derivative_lemmas",
            ExperimentId::Zubkov => "zubkov",
            ExperimentId::FiniteVariance => "finite_variance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|e| e.name() == s)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `φ(n)`: either `⌈n^p⌉` or one explicit value per scheduled `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiRule {
    Exponent(f64),
    Table(Vec<usize>),
}

impl PhiRule {
    /// `φ` for the `index`-th scheduled generation `n`.
    pub fn phi(&self, n: usize, index: usize) -> usize {
        match self {
            PhiRule::Exponent(p) => ceil_guarded((n as f64).powf(*p)),
            PhiRule::Table(t) => t[index],
        }
    }

    /// `φ` for an `n` outside the schedule (exponent rules only).
    pub fn phi_at(&self, n: usize) -> Option<usize> {
        match self {
            PhiRule::Exponent(p) => Some(ceil_guarded((n as f64).powf(*p))),
            PhiRule::Table(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative tolerance on ratios (`|ratio - 1|`).
    pub relative: f64,
    /// Absolute tolerance on probabilities.
    pub absolute: f64,
    /// Number of final schedule points over which `|ratio - 1|` (or the
    /// absolute deviation) must strictly decrease; below 2 disables the check.
    pub trend_points: usize,
    /// Monte Carlo agreement in standard errors.
    pub mc_sigmas: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            relative: 0.2,
            absolute: 0.05,
            trend_points: 0,
            mc_sigmas: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub n: usize,
    pub replicates: u64,
    #[serde(default)]
    pub conditioning: Conditioning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlowFamily {
    Constant,
    Log,
    LogSquared,
}

impl SlowFamily {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            SlowFamily::Constant => 1.0,
            SlowFamily::Log => (std::f64::consts::E + x).ln(),
            SlowFamily::LogSquared => (std::f64::consts::E + x).ln().powi(2),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SlowFamily::Constant => "constant",
            SlowFamily::Log => "log(e+x)",
            SlowFamily::LogSquared => "log^2(e+x)",
        }
    }
}

/// Grids of the quadrature and derivative checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaGrids {
    pub families: Vec<SlowFamily>,
    /// θ and x for the scaled Gamma integral (x grows).
    pub gamma_theta: Vec<f64>,
    pub gamma_x: Vec<f64>,
    /// θ and s for the truncated Laplace integral (θ grows).
    pub laplace_theta: Vec<f64>,
    pub laplace_s: Vec<f64>,
    /// Derivative orders and distances `k(1-s)` for the derivative bound.
    pub k_grid: Vec<u32>,
    pub k_gap: Vec<f64>,
    /// Regime of the derivative bound: only points with `k(1-s) ≤ delta` are checked.
    pub delta: f64,
}

impl Default for LemmaGrids {
    fn default() -> Self {
        Self {
            families: vec![
                SlowFamily::Constant,
                SlowFamily::Log,
                SlowFamily::LogSquared,
            ],
            gamma_theta: vec![0.5, 1.0, 2.0, 5.0],
            gamma_x: vec![1e2, 1e4, 1e6],
            laplace_theta: vec![10.0, 50.0, 200.0],
            laplace_s: vec![0.5, 0.9],
            k_grid: vec![2, 3, 5, 10, 20, 50],
            k_gap: vec![0.1, 0.03, 0.01, 1e-3, 1e-4, 1e-6],
            delta: 0.1,
        }
    }
}

/// One experiment. Missing JSON fields take the experiment's preset values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub law: LawSpec,
    pub schedule: Vec<usize>,
    pub phi: PhiRule,
    pub x_grid: Vec<f64>,
    /// Inclusive `[j_lo, j_hi]`.
    pub j_range: [usize; 2],
    /// Truncation levels `T` (largest one sets the series order).
    pub t_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub tolerances: Tolerances,
    pub seed: u64,
    pub monte_carlo: Option<MonteCarloSpec>,
    pub lemmas: LemmaGrids,
    /// Artifact directory; a CLI `--out` takes precedence.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn pow2(lo: u32, hi: u32, step: usize) -> Vec<usize> {
    (lo..=hi).step_by(step).map(|k| 1usize << k).collect()
}

fn reference_law() -> LawSpec {
    LawSpec::stable_frac(Param::Float(0.8), Param::Ratio { num: 5, den: 9 })
}

impl ExperimentConfig {
    /// Full-scale settings for each experiment.
    pub fn preset(experiment: ExperimentId) -> Self {
        let mut c = ExperimentConfig {
            experiment,
            law: reference_law(),
            schedule: pow2(12, 20, 2),
            phi: PhiRule::Exponent(0.3),
            x_grid: vec![0.5, 1.0, 2.0],
            j_range: [1, 3],
            t_values: Vec::new(),
            k_values: Vec::new(),
            tolerances: Tolerances::default(),
            seed: 1,
            monte_carlo: None,
            lemmas: LemmaGrids::default(),
            out: None,
        };
        let t = &mut c.tolerances;
        match experiment {
            ExperimentId::Thm1 => {
                t.relative = 0.2;
                t.trend_points = 3;
            }
            ExperimentId::Thm2 => {
                t.absolute = 0.05;
                t.trend_points = 3;
            }
            ExperimentId::Corollary => t.absolute = 0.05,
            ExperimentId::Stationarity => {
                c.schedule = pow2(8, 14, 1);
                c.j_range = [1, 10];
                c.t_values = vec![200];
                t.relative = 0.01;
            }
            ExperimentId::Tauberian => {
                c.schedule = pow2(12, 16, 1);
                c.t_values = vec![64, 256, 512, 1024];
                t.relative = 0.05;
            }
            ExperimentId::BellBound => {
                c.schedule = pow2(12, 16, 1);
                c.t_values = vec![64, 256, 512, 1024];
                c.k_values = vec![2, 3];
                t.relative = 0.10;
            }
            ExperimentId::IntegralLemmas => t.relative = 0.01,
            ExperimentId::DerivativeLemmas => {
                c.x_grid = vec![1.0];
                c.j_range = [1, 2];
                t.relative = 0.15;
                t.trend_points = 0;
            }
            ExperimentId::Zubkov => {
                c.schedule = vec![2048];
                c.monte_carlo = Some(MonteCarloSpec {
                    n: 2048,
                    replicates: 100_000,
                    conditioning: Conditioning::ReducedTree,
                });
                t.absolute = 0.05;
            }
            ExperimentId::FiniteVariance => {
                c.law = LawSpec::Geometric;
                c.schedule = pow2(8, 20, 4);
                c.phi = PhiRule::Exponent(0.4);
                c.x_grid = vec![1.0];
                c.j_range = [1, 1];
                t.relative = 0.10;
                t.absolute = 0.02;
            }
        }
        c
    }

    /// Parses a config, filling fields absent from the JSON with the preset
    /// of the named experiment (objects are merged one level deep).
    pub fn from_json(s: &str) -> Result<Self, LabError> {
        let given: serde_json::Value = serde_json::from_str(s)?;
        let obj = given
            .as_object()
            .ok_or_else(|| LabError::ConfigInvalid("config must be a JSON object".into()))?;
        let id = obj
            .get("experiment")
            .and_then(|v| v.as_str())
            .ok_or_else(|| LabError::ConfigInvalid("missing \"experiment\"".into()))?;
        let id = ExperimentId::parse(id)
            .ok_or_else(|| LabError::ConfigInvalid(format!("unknown experiment {id:?}")))?;
        let mut base = serde_json::to_value(Self::preset(id))?;
        let target = base
            .as_object_mut()
            .expect("preset serializes to an object");
        for (k, v) in obj {
            match (target.get_mut(k), v) {
                (Some(serde_json::Value::Object(dst)), serde_json::Value::Object(src))
                    if k != "law" && k != "phi" =>
                {
                    for (kk, vv) in src {
                        dst.insert(kk.clone(), vv.clone());
                    }
                }
                _ => {
                    target.insert(k.clone(), v.clone());
                }
            }
        }
        let cfg: Self =
            serde_json::from_value(base).map_err(|e| LabError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::ConfigInvalid(m));
        if self.schedule.is_empty() {
            return bad("schedule is empty".into());
        }
        if self.schedule.windows(2).any(|w| w[0] >= w[1]) || self.schedule[0] == 0 {
            return bad("schedule must be positive and strictly increasing".into());
        }
        let t = &self.tolerances;
        if !(t.relative > 0.0 && t.absolute > 0.0 && t.mc_sigmas > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if let PhiRule::Table(tab) = &self.phi {
            if tab.len() != self.schedule.len() {
                return bad(format!(
                    "phi table has {} entries for {} scheduled n",
                    tab.len(),
                    self.schedule.len()
                ));
            }
        }
        if let PhiRule::Exponent(p) = self.phi {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("phi exponent {p} must lie in (0, 1)"));
            }
        }
        for (i, &n) in self.schedule.iter().enumerate() {
            let phi = self.phi.phi(n, i);
            if phi == 0 || phi >= n {
                return bad(format!("phi(n) = {phi} must lie in [1, n) for n = {n}"));
            }
        }
        if self.x_grid.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("x grid must be positive".into());
        }
        let [lo, hi] = self.j_range;
        if lo == 0 || lo > hi {
            return bad(format!("j range [{lo}, {hi}] must satisfy 1 ≤ lo ≤ hi"));
        }
        if self.t_values.windows(2).any(|w| w[0] >= w[1]) || self.t_values.first() == Some(&0) {
            return bad("t_values must be positive and strictly increasing".into());
        }
        if let Some(mc) = &self.monte_carlo {
            if mc.replicates == 0 || mc.n == 0 {
                return bad("monte_carlo needs positive n and replicates".into());
            }
        }
        self.law.build()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&Self {
            out: None,
            ..self.clone()
        })
        .expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One predicted/observed comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub n: Option<usize>,
    pub predicted: f64,
    pub observed: f64,
    pub ratio: f64,
    pub error_bar: Option<f64>,
    pub predicted_source: String,
    pub observed_source: String,
}

impl Row {
    fn new(
        label: impl Into<String>,
        n: Option<usize>,
        predicted: f64,
        observed: f64,
        sources: (&str, &str),
    ) -> Self {
        Self {
            label: label.into(),
            n,
            predicted,
            observed,
            ratio: observed / predicted,
            error_bar: None,
            predicted_source: sources.0.into(),
            observed_source: sources.1.into(),
        }
    }

    fn with_error(mut self, e: f64) -> Self {
        self.error_bar = Some(e);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
    /// Reported only; does not affect the verdict.
    pub informational: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl Report {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            experiment: cfg.experiment,
            config_hash: cfg.hash(),
            code_version: CODE_VERSION.into(),
            seed: cfg.seed,
            wall_time_secs: 0.0,
            rows: Vec::new(),
            checks: Vec::new(),
            pass: true,
        }
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
            informational: false,
        });
    }

    fn note(&mut self, name: impl Into<String>, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass: true,
            detail: detail.into(),
            informational: true,
        });
    }

    fn finish(mut self, start: Instant) -> Self {
        self.pass = self.checks.iter().all(|c| c.informational || c.pass);
        self.wall_time_secs = start.elapsed().as_secs_f64();
        self
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Exit code contract: 0 on pass, 2 on tolerance failure.
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            2
        }
    }

    /// CSV with a `# config_hash=…` header line.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<(), LabError> {
        writeln!(
            w,
            "# config_hash={} code_version={} seed={} experiment={}",
            self.config_hash, self.code_version, self.seed, self.experiment
        )?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "label",
            "n",
            "predicted",
            "observed",
            "ratio",
            "error_bar",
            "predicted_source",
            "observed_source",
        ])?;
        for r in &self.rows {
            wr.write_record([
                r.label.clone(),
                r.n.map(|n| n.to_string()).unwrap_or_default(),
                format!("{:.16e}", r.predicted),
                format!("{:.16e}", r.observed),
                format!("{:.16e}", r.ratio),
                r.error_bar.map(|e| format!("{e:.16e}")).unwrap_or_default(),
                r.predicted_source.clone(),
                r.observed_source.clone(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Writes `<experiment>.csv` and `summary.json` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<(), LabError> {
        fs::create_dir_all(dir)?;
        self.write_csv(fs::File::create(
            dir.join(format!("{}.csv", self.experiment)),
        )?)?;
        serde_json::to_writer_pretty(fs::File::create(dir.join("summary.json"))?, self)?;
        Ok(())
    }
}

/// Runs one experiment and, with `out`, persists its artifacts.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Report, LabError> {
    let start = Instant::now();
    cfg.validate()?;
    let law = cfg.law.build()?;
    let mut report = match cfg.experiment {
        ExperimentId::Thm1 => thm1(cfg, &law)?,
        ExperimentId::Thm2 => thm2(cfg, &law)?,
        ExperimentId::Corollary => corollary(cfg, &law)?,
        ExperimentId::Stationarity => stationarity(cfg, &law)?,
        ExperimentId::Tauberian => {
            let mu = mu_for(cfg, &law)?;
            tauberian(cfg, &law, &mu)?
        }
        ExperimentId::BellBound => {
            let mu = mu_for(cfg, &law)?;
            bell_bound(cfg, &law, &mu)?
        }
        ExperimentId::IntegralLemmas => verify_integral_lemmas(cfg)?,
        ExperimentId::DerivativeLemmas => verify_derivative_lemmas(cfg, &law)?,
        ExperimentId::Zubkov => zubkov(cfg, &law)?,
        ExperimentId::FiniteVariance => verify_finite_variance(cfg)?,
    };
    report.wall_time_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out.or(cfg.out.as_deref()) {
        report.persist(dir)?;
    }
    Ok(report)
}

fn stable_params(law: &OffspringLaw) -> Result<(f64, f64), LabError> {
    match law.family() {
        Family::StableFrac { alpha, c } => Ok((*alpha, *c)),
        _ => Err(LabError::ConfigInvalid(
            "this experiment needs a stable_frac law".into(),
        )),
    }
}

/// `|d_i|` strictly decreasing over the last `points` entries.
fn trend_check(report: &mut Report, name: &str, devs: &[f64], points: usize) {
    if points < 2 {
        return;
    }
    let tail = &devs[devs.len().saturating_sub(points)..];
    let pass = tail.len() >= 2 && tail.windows(2).all(|w| w[1].abs() < w[0].abs());
    let shown: Vec<String> = tail.iter().map(|d| format!("{:.4e}", d.abs())).collect();
    report.check(name, pass, format!("last deviations {}", shown.join(", ")));
}

fn thm1(cfg: &ExperimentConfig, law: &OffspringLaw) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let engine = Engine::new(law);
    let n_max = *cfg.schedule.last().unwrap();
    let ext = engine.extinction_sequence(n_max);
    let phis: Vec<usize> = cfg
        .schedule
        .iter()
        .enumerate()
        .map(|(i, &n)| cfg.phi.phi(n, i))
        .collect();
    let ts: Vec<usize> = phis
        .iter()
        .map(|&p| threshold_from_survival(ext.survival(p)))
        .collect();
    // one pass: entries up to T are unaffected by the larger truncation order
    let mut it = engine.generation_iter(*ts.iter().max().unwrap())?;
    let mut devs = Vec::new();
    for (i, &n) in cfg.schedule.iter().enumerate() {
        while it.steps() < n {
            it.step();
        }
        let table = engine.table_of(&it);
        let observed = table.positive_mass_up_to(ts[i]);
        let pred = thm1_prediction_from_survival(law.alpha(), n, phis[i], ext.survival(n));
        let row = Row::new(
            format!("phi={} T={}", phis[i], ts[i]),
            Some(n),
            pred.value,
            observed,
            ("limit_laws", "series_engine"),
        );
        devs.push(row.ratio - 1.0);
        if pred.regime_warning {
            report.note(
                format!("regime n={n}"),
                format!("phi/n = {:.3} > 0.1", phis[i] as f64 / n as f64),
            );
        }
        report.rows.push(row);
    }
    let last = *devs.last().unwrap();
    report.check(
        "final_ratio",
        last.abs() <= cfg.tolerances.relative,
        format!(
            "ratio {:.6} at n = {n_max}, tolerance {}",
            1.0 + last,
            cfg.tolerances.relative
        ),
    );
    trend_check(
        &mut report,
        "ratio_trend",
        &devs,
        cfg.tolerances.trend_points,
    );
    if let Some(mc) = &cfg.monte_carlo {
        let phi = cfg.phi.phi_at(mc.n).ok_or_else(|| {
            LabError::ConfigInvalid("monte carlo needs an exponent phi rule".into())
        })?;
        let exact = engine.small_deviation_prob(mc.n, phi)?;
        let est = mc_small_dev(law, mc.n, phi, &mc_config(cfg, mc))?;
        let r = &est.result;
        report.rows.push(
            Row::new(
                format!("mc phi={phi} T={}", est.t),
                Some(mc.n),
                exact.probability,
                r.estimate,
                ("series_engine", "simulator"),
            )
            .with_error(r.stderr),
        );
        let z = (r.estimate - exact.probability) / r.stderr;
        report.check(
            "mc_small_dev",
            z.abs() <= cfg.tolerances.mc_sigmas && r.indeterminate_count == 0,
            format!(
                "estimate {:.6e} ± {:.2e} vs exact {:.6e} ({z:+.2} se), {} hits of {}, {} indeterminate",
                r.estimate, r.stderr, exact.probability, r.accepted, r.replicates, r.indeterminate_count
            ),
        );
    }
    Ok(report.finish(start))
}

fn mc_config(cfg: &ExperimentConfig, mc: &MonteCarloSpec) -> McConfig {
    McConfig::new(mc.replicates, cfg.seed).with_conditioning(mc.conditioning)
}

/// `(n, φ, T)` for every scheduled generation.
fn schedule_points(cfg: &ExperimentConfig, law: &OffspringLaw) -> Vec<(usize, usize, usize)> {
    let ext = ExtinctionSequence::new(law, *cfg.schedule.last().unwrap());
    cfg.schedule
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let phi = cfg.phi.phi(n, i);
            (n, phi, threshold_from_survival(ext.survival(phi)))
        })
        .collect()
}

fn thm2(cfg: &ExperimentConfig, law: &OffspringLaw) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let engine = Engine::new(law);
    let yaglom = YaglomLaw::new(law.alpha())?;
    let [j_lo, j_hi] = cfg.j_range;
    let points = schedule_points(cfg, law);
    let jobs: Vec<(usize, usize, usize, f64)> = points
        .iter()
        .flat_map(|&(n, phi, t)| cfg.x_grid.iter().map(move |&x| (n, phi, t, x)))
        .collect();
    let joints = jobs
        .par_iter()
        .map(|&(n, phi, t, x)| {
            let lag = ceil_guarded(x * phi as f64);
            if lag >= n {
                return Err(LabError::ConfigInvalid(format!(
                    "⌈xφ⌉ = {lag} not below n = {n}"
                )));
            }
            Ok(engine.reduced_joint(n, n - lag, t.max(j_hi))?)
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    for &x in &cfg.x_grid {
        for j in j_lo..=j_hi {
            let limit = yaglom.thm2_limit_pmf(j as u32, x)?;
            let mut devs = Vec::new();
            for (job, rj) in jobs.iter().zip(&joints) {
                if job.3 != x {
                    continue;
                }
                let row = Row::new(
                    format!("x={x} j={j} m={}", rj.m),
                    Some(job.0),
                    limit,
                    rj.cond_j_given_h[j],
                    ("limit_laws", "series_engine"),
                );
                devs.push(row.observed - row.predicted);
                report.rows.push(row);
            }
            let last = *devs.last().unwrap();
            report.check(
                format!("final x={x} j={j}"),
                last.abs() <= cfg.tolerances.absolute,
                format!(
                    "|deviation| {:.4e}, tolerance {}",
                    last.abs(),
                    cfg.tolerances.absolute
                ),
            );
            trend_check(
                &mut report,
                &format!("trend x={x} j={j}"),
                &devs,
                cfg.tolerances.trend_points,
            );
        }
        let total: f64 = (1..=50)
            .map(|j| yaglom.thm2_limit_pmf(j, x))
            .sum::<Result<f64, _>>()?;
        report.note(
            format!("limit pmf mass x={x}"),
            format!("sum over j ≤ 50 = {total:.6}"),
        );
        report.check(
            format!("limit pmf bounded x={x}"),
            total <= 1.0 + 1e-3,
            format!("sum {total:.6} ≤ 1 + 1e-3"),
        );
    }
    if let Some(mc) = &cfg.monte_carlo {
        monte_carlo_reduced(cfg, law, &engine, mc, &mut report)?;
    }
    Ok(report.finish(start))
}

fn monte_carlo_reduced(
    cfg: &ExperimentConfig,
    law: &OffspringLaw,
    engine: &Engine,
    mc: &MonteCarloSpec,
    report: &mut Report,
) -> Result<(), LabError> {
    let phi = cfg
        .phi
        .phi_at(mc.n)
        .ok_or_else(|| LabError::ConfigInvalid("monte carlo needs an exponent phi rule".into()))?;
    let [j_lo, j_hi] = cfg.j_range;
    for &x in &cfg.x_grid {
        let est = mc_conditional_reduced(law, mc.n, phi, x, j_hi, &mc_config(cfg, mc))?;
        let exact = engine.reduced_joint(mc.n, est.m, est.t.max(j_hi))?;
        let mut tv = 0.0;
        let mut se_sum = 0.0;
        for j in j_lo..=j_hi {
            let (p, e) = (exact.cond_j_given_h[j], est.pmf[j]);
            report.rows.push(
                Row::new(
                    format!("mc x={x} j={j}"),
                    Some(mc.n),
                    p,
                    e,
                    ("series_engine", "simulator"),
                )
                .with_error(est.stderr[j]),
            );
            let z = if est.stderr[j] > 0.0 {
                (e - p) / est.stderr[j]
            } else {
                f64::INFINITY
            };
            report.check(
                format!("mc x={x} j={j}"),
                z.abs() <= cfg.tolerances.mc_sigmas && !est.too_few_accepted,
                format!(
                    "{e:.5} ± {:.5} vs exact {p:.5} ({z:+.2} se), {} accepted",
                    est.stderr[j], est.accepted
                ),
            );
            tv += 0.5 * (e - p).abs();
            se_sum += est.stderr[j];
        }
        report.check(
            format!("mc total variation x={x}"),
            tv <= 3.0 * se_sum,
            format!("TV {tv:.5} vs 3·Σse {:.5}", 3.0 * se_sum),
        );
        report.note(
            format!("mc acceptance x={x}"),
            format!(
                "{} of {} surviving draws in H(n) (rate {:.3e})",
                est.accepted, est.replicates, est.acceptance_rate
            ),
        );
    }
    Ok(())
}

fn corollary(cfg: &ExperimentConfig, law: &OffspringLaw) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let engine = Engine::new(law);
    let yaglom = YaglomLaw::new(law.alpha())?;
    let points = schedule_points(cfg, law);
    let jobs: Vec<(usize, usize, usize, f64)> = points
        .iter()
        .flat_map(|&(n, phi, t)| cfg.x_grid.iter().map(move |&x| (n, phi, t, x)))
        .collect();
    // d(n) ≤ r  ⇔  Z(n - r, n) = 1
    let values = jobs
        .par_iter()
        .map(|&(n, phi, t, x)| {
            let r = floor_guarded(x * phi as f64);
            if r == 0 || r >= n {
                return Err(LabError::ConfigInvalid(format!(
                    "⌊xφ⌋ = {r} must lie in [1, n) for n = {n}"
                )));
            }
            Ok(engine.reduced_joint(n, n - r, t)?.cond_j_given_h[1])
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    for &x in &cfg.x_grid {
        let limit = yaglom.mrca_limit_cdf(x)?;
        let mut devs = Vec::new();
        for (job, &v) in jobs.iter().zip(&values) {
            if job.3 == x {
                let row = Row::new(
                    format!("x={x}"),
                    Some(job.0),
                    limit,
                    v,
                    ("limit_laws", "series_engine"),
                );
                devs.push(row.observed - row.predicted);
                report.rows.push(row);
            }
        }
        let last = *devs.last().unwrap();
        report.check(
            format!("final x={x}"),
            last.abs() <= cfg.tolerances.absolute,
            format!(
                "|deviation| {:.4e}, tolerance {}",
                last.abs(),
                cfg.tolerances.absolute
            ),
        );
        trend_check(
            &mut report,
            &format!("trend x={x}"),
            &devs,
            cfg.tolerances.trend_points,
        );
    }
    Ok(report.finish(start))
}

fn stationarity(cfg: &ExperimentConfig, law: &OffspringLaw) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let engine = Engine::new(law);
    let [_, j_hi] = cfg.j_range;
    let order = cfg.t_values.last().copied().unwrap_or(200).max(j_hi);
    let mu = engine.mu_sequence(order, &cfg.schedule)?;
    let st = stationarity_residuals(law, mu.estimate(), j_hi, engine.config().precision);
    let n = *cfg.schedule.last().unwrap();
    let tol = cfg.tolerances.relative;
    for j in 1..=j_hi {
        let m = mu.mu(j);
        let lhs = m * (1.0 + st.residuals[j]);
        report.rows.push(Row::new(
            format!("j={j}"),
            Some(n),
            m,
            if m == 0.0 { st.residuals[j] } else { lhs },
            ("series_engine", "series_engine"),
        ));
        report.check(
            format!("residual j={j}"),
            st.residuals[j] < tol,
            format!("relative residual {:.3e}", st.residuals[j]),
        );
    }
    report.rows.push(Row::new(
        "normalization",
        Some(n),
        1.0,
        st.normalization,
        ("definition", "series_engine"),
    ));
    report.check(
        "normalization",
        (st.normalization - 1.0).abs() < tol,
        format!(
            "Σ μ̂_l p0^l = {:.6} (truncation correction {:.1e})",
            st.normalization, st.truncation_correction
        ),
    );
    mu_diagnostics(&mut report, &mu);
    Ok(report.finish(start))
}

fn mu_diagnostics(report: &mut Report, mu: &MuEstimates) {
    let worst = mu.relative_change.iter().copied().fold(0.0, f64::max);
    report.note(
        "mu_convergence",
        format!(
            "largest relative change over the last doubling {worst:.3e} (threshold {}, non-converged: {})",
            mu.threshold,
            mu.non_converged()
        ),
    );
}

/// μ̂ up to the largest `T` of the config along its schedule.
pub fn mu_for(cfg: &ExperimentConfig, law: &OffspringLaw) -> Result<MuEstimates, LabError> {
    let t_max = *cfg
        .t_values
        .last()
        .ok_or_else(|| LabError::ConfigInvalid("t_values is empty".into()))?;
    Ok(Engine::new(law).mu_sequence(t_max, &cfg.schedule)?)
}

/// Partial sums of μ̂ against their Tauberian prediction.
pub fn tauberian(
    cfg: &ExperimentConfig,
    law: &OffspringLaw,
    mu: &MuEstimates,
) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let (alpha, c) = stable_params(law)?;
    let n = *mu.schedule.last().unwrap();
    for &t in &cfg.t_values {
        report.rows.push(Row::new(
            format!("T={t}"),
            Some(n),
            mu_partial_sum_prediction(alpha, c, t),
            mu.partial_sum(t),
            ("limit_laws", "series_engine"),
        ));
    }
    let last = report.rows.last().unwrap().ratio;
    report.check(
        "final_ratio",
        (last - 1.0).abs() <= cfg.tolerances.relative,
        format!(
            "ratio {last:.5} at T = {}, tolerance {}",
            cfg.t_values.last().unwrap(),
            cfg.tolerances.relative
        ),
    );
    mu_diagnostics(&mut report, mu);
    Ok(report.finish(start))
}

/// Weighted Bell sums against their fixed-k prediction, plus the empirical
/// sup of the same ratio over `k ≤ 40` (the unspecified constant of the
/// uniform bound).
pub fn bell_bound(
    cfg: &ExperimentConfig,
    law: &OffspringLaw,
    mu: &MuEstimates,
) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let (alpha, c) = stable_params(law)?;
    let t_max = *cfg.t_values.last().unwrap();
    let k_max = cfg
        .k_values
        .iter()
        .copied()
        .max()
        .unwrap_or(2)
        .max(40)
        .min(t_max);
    let sums = bell_partial_sums_ln(mu.estimate(), k_max, t_max);
    let n = *mu.schedule.last().unwrap();
    for &k in &cfg.k_values {
        let mut last = f64::NAN;
        for &t in cfg.t_values.iter().filter(|&&t| t >= k) {
            let pred_ln = bell_sum_prediction_ln(alpha, c, k, t);
            let mut row = Row::new(
                format!("k={k} T={t}"),
                Some(n),
                pred_ln.exp(),
                sums[k][t].exp(),
                ("limit_laws", "bell_combinatorics"),
            );
            row.ratio = (sums[k][t] - pred_ln).exp();
            last = row.ratio;
            report.rows.push(row);
        }
        report.check(
            format!("final k={k}"),
            (last - 1.0).abs() <= cfg.tolerances.relative,
            format!(
                "ratio {last:.5} at T = {t_max}, tolerance {}",
                cfg.tolerances.relative
            ),
        );
    }
    let mut sup = (0.0f64, 0usize, 0usize);
    for k in 2..=k_max {
        for t in k..=t_max {
            let r = (sums[k][t] - bell_sum_prediction_ln(alpha, c, k, t)).exp();
            if r > sup.0 {
                sup = (r, k, t);
            }
        }
    }
    let mut row = Row::new(
        format!("sup k={} T={}", sup.1, sup.2),
        Some(n),
        1.0,
        sup.0,
        ("limit_laws", "bell_combinatorics"),
    );
    row.ratio = sup.0;
    report.rows.push(row);
    report.note(
        "uniform_bound_sup",
        format!(
            "sup over 2 ≤ k ≤ {k_max}, k ≤ T ≤ {t_max} of sum/prediction = {:.4} at k = {}, T = {}",
            sup.0, sup.1, sup.2
        ),
    );
    mu_diagnostics(&mut report, mu);
    Ok(report.finish(start))
}

const QUAD_ABS: f64 = 1e-14;
const QUAD_REL: f64 = 1e-12;

/// `∫_0^∞ y^{θ-1} (l(xy)/l(x)) e^{-y} dy / Γ(θ)`.
pub fn scaled_gamma_ratio(
    family: SlowFamily,
    theta: f64,
    x: f64,
) -> Result<f64, QuadratureNonConverged> {
    let lx = family.eval(x);
    let g = |y: f64| family.eval(x * y) / lx * (-y).exp();
    // y = u^{1/θ} removes the endpoint singularity on [0, 1]
    let head = integrate(
        |u: f64| g(u.powf(1.0 / theta)) / theta,
        0.0,
        1.0,
        QUAD_ABS,
        QUAD_REL,
    )?;
    let tail = integrate_split(
        |y: f64| ((theta - 1.0) * y.ln() - y).exp() * family.eval(x * y) / lx,
        &[1.0, theta + 1.0, 2.0 * theta + 40.0],
        QUAD_ABS,
        QUAD_REL,
    )?;
    Ok((head.value + tail.value) / ln_gamma(theta).exp())
}

/// `(1-s)^θ ∫_θ^∞ y^{θ-1} l(y) e^{-y(1-s)} dy / (Γ(θ) l(θ/(1-s)))`,
/// integrated in `v = y(1-s)` against the Gamma(θ) density.
pub fn truncated_laplace_ratio(
    family: SlowFamily,
    theta: f64,
    s: f64,
) -> Result<f64, QuadratureNonConverged> {
    let w = 1.0 - s;
    let norm = family.eval(theta / w);
    let lg = ln_gamma(theta);
    let f = |v: f64| ((theta - 1.0) * v.ln() - v - lg).exp() * family.eval(v / w) / norm;
    let a = theta * w;
    let sd = theta.sqrt();
    let mut points = vec![a];
    for z in [-12.0, -4.0, 0.0, 4.0, 12.0] {
        let p = theta - 1.0 + z * sd;
        if p > *points.last().unwrap() {
            points.push(p);
        }
    }
    Ok(integrate_split(f, &points, 1e-16, QUAD_REL)?.value)
}

pub fn verify_integral_lemmas(cfg: &ExperimentConfig) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let g = &cfg.lemmas;
    let tol = cfg.tolerances.relative;
    let x_max = g.gamma_x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for &fam in &g.families {
        for &theta in &g.gamma_theta {
            for &x in &g.gamma_x {
                let r = scaled_gamma_ratio(fam, theta, x)?;
                report.rows.push(Row::new(
                    format!("gamma {} theta={theta} x={x:e}", fam.name()),
                    None,
                    1.0,
                    r,
                    ("definition", "quadrature"),
                ));
                if fam == SlowFamily::Constant {
                    report.check(
                        format!("gamma constant theta={theta} x={x:e}"),
                        (r - 1.0).abs() <= 1e-10,
                        format!("ratio {r:.14}"),
                    );
                } else if x == x_max {
                    report.check(
                        format!("gamma {} theta={theta} x={x:e}", fam.name()),
                        (r - 1.0).abs() <= tol,
                        format!("ratio {r:.6}, tolerance {tol}"),
                    );
                }
            }
        }
    }
    let theta_max = g
        .laplace_theta
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    for &fam in &g.families {
        for &theta in &g.laplace_theta {
            for &s in &g.laplace_s {
                let r = truncated_laplace_ratio(fam, theta, s)?;
                report.rows.push(Row::new(
                    format!("laplace {} theta={theta} s={s}", fam.name()),
                    None,
                    1.0,
                    r,
                    ("definition", "quadrature"),
                ));
                if theta == theta_max {
                    report.check(
                        format!("laplace {} theta={theta} s={s}", fam.name()),
                        (r - 1.0).abs() <= tol,
                        format!("ratio {r:.6}, tolerance {tol}"),
                    );
                }
            }
        }
    }
    Ok(report.finish(start))
}

/// Right side of the derivative bound
/// `k! P(ξ≥k) + 2 s^{-k} k Γ(k-1-α) (1-s)^{-(k-1-α)} L₁((1-s)/k)`.
pub fn derivative_bound(law: &OffspringLaw, k: u32, s: f64) -> f64 {
    let a = law.alpha();
    let kf = k as f64;
    let first = (ln_gamma(kf + 1.0)).exp() * law.tail(k as u64);
    let ln_second = 2f64.ln() - kf * s.ln() + kf.ln() + ln_gamma(kf - 1.0 - a)
        - (kf - 1.0 - a) * (1.0 - s).ln();
    first + ln_second.exp() * law.tail_slowly_varying((1.0 - s) / kf)
}

pub fn verify_derivative_lemmas(
    cfg: &ExperimentConfig,
    law: &OffspringLaw,
) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    stable_params(law)?;
    let g = &cfg.lemmas;
    let mut worst = f64::INFINITY;
    let mut all_hold = true;
    for &k in &g.k_grid {
        for &gap in &g.k_gap {
            if gap > g.delta {
                continue;
            }
            let s = 1.0 - gap / k as f64;
            let lhs = law.derivative(k, s)?;
            let rhs = derivative_bound(law, k, s);
            report.rows.push(Row::new(
                format!("bound k={k} k(1-s)={gap:e}"),
                None,
                rhs,
                lhs,
                ("closed_form_bound", "offspring_laws"),
            ));
            worst = worst.min(rhs / lhs);
            all_hold &= lhs <= rhs;
        }
    }
    report.check(
        "derivative_bound",
        all_hold,
        format!("smallest margin bound/derivative {worst:.4}"),
    );

    // f_m^{(J)}(f_r(0)) against its asymptotic form, r = ⌈xφ⌉, m = n - r
    let engine = Engine::new(law);
    let alpha = law.alpha();
    let j0 = law.j0();
    let [j_lo, j_hi] = cfg.j_range;
    let x = *cfg.x_grid.first().unwrap();
    let n_max = *cfg.schedule.last().unwrap();
    let ext = engine.extinction_sequence(n_max);
    // P(Z(n) = J0) along the schedule, and μ̂_{J0} from the last point
    let mut it = engine.generation_iter(j0)?;
    let mut p_j0 = Vec::new();
    for &n in &cfg.schedule {
        while it.steps() < n {
            it.step();
        }
        p_j0.push(engine.table_of(&it).coefficients[j0]);
    }
    let mu_j0 = alpha * n_max as f64 * p_j0.last().unwrap() / ext.survival(n_max);
    let mut ratios: Vec<Vec<f64>> = vec![Vec::new(); j_hi + 1];
    for (i, &n) in cfg.schedule.iter().enumerate() {
        let phi = cfg.phi.phi(n, i);
        let r = ceil_guarded(x * phi as f64);
        if r >= n {
            return Err(LabError::ConfigInvalid(format!(
                "⌈xφ⌉ = {r} not below n = {n}"
            )));
        }
        let rj = engine.reduced_joint(n, n - r, j_hi)?;
        let q_r = ext.survival(r);
        let neg_log_s0 = -(-q_r).ln_1p();
        let delta = p_j0[i] / mu_j0;
        for j in j_lo..=j_hi {
            let jf = j as f64;
            let observed = (ln_gamma(jf + 1.0) + rj.pmf_reduced[j].ln() - jf * q_r.ln()).exp();
            let predicted = (r as f64).ln() + delta.ln() + ln_gamma(jf + alpha)
                - ln_gamma(alpha)
                - jf * neg_log_s0.ln();
            let row = Row::new(
                format!("J={j} r={r}"),
                Some(n),
                predicted.exp(),
                observed,
                ("asymptotic_form", "series_engine"),
            );
            ratios[j].push(row.ratio);
            report.rows.push(row);
        }
    }
    for j in j_lo..=j_hi {
        let last = *ratios[j].last().unwrap();
        report.check(
            format!("derivative_asymptotic J={j}"),
            (last - 1.0).abs() <= cfg.tolerances.relative,
            format!(
                "ratio {last:.5} at n = {n_max}, tolerance {}",
                cfg.tolerances.relative
            ),
        );
        let devs: Vec<f64> = ratios[j].iter().map(|r| r - 1.0).collect();
        trend_check(
            &mut report,
            &format!("derivative_asymptotic_trend J={j}"),
            &devs,
            cfg.tolerances.trend_points,
        );
    }
    if j_lo == 1 && j_hi >= 2 {
        let rr = ratios[2].last().unwrap() / ratios[1].last().unwrap();
        report.check(
            "derivative_j_dependence",
            (rr - 1.0).abs() <= 0.2,
            format!("ratio(J=2)/ratio(J=1) = {rr:.5}, tolerance 0.2"),
        );
    }
    Ok(report.finish(start))
}

fn zubkov(cfg: &ExperimentConfig, law: &OffspringLaw) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let mc = cfg
        .monte_carlo
        .clone()
        .ok_or_else(|| LabError::ConfigInvalid("zubkov needs a monte_carlo section".into()))?;
    if mc.replicates < 10_000 {
        return Err(LabError::ConfigInvalid(
            "zubkov needs at least 10^4 replicates".into(),
        ));
    }
    let n = mc.n;
    let res = mc_zubkov(law, n, &mc_config(cfg, &mc))?;
    let exact = Engine::new(law).mrca_distance_cdf(n);
    let mut all_agree = true;
    for (&y, &c) in res.grid.iter().zip(&res.cdf) {
        let se = (c * (1.0 - c) / res.accepted as f64).sqrt();
        report.rows.push(
            Row::new(
                format!("y={y:.1} uniform"),
                Some(n),
                y,
                c,
                ("limit_law", "simulator"),
            )
            .with_error(se),
        );
        let e = exact[floor_guarded(y * n as f64)];
        report.rows.push(
            Row::new(
                format!("y={y:.1} exact"),
                Some(n),
                e,
                c,
                ("series_engine", "simulator"),
            )
            .with_error(se),
        );
        if se > 0.0 {
            all_agree &= ((c - e) / se).abs() <= cfg.tolerances.mc_sigmas;
        } else {
            all_agree &= (c - e).abs() < 1e-12;
        }
    }
    report.check(
        "uniform_sup",
        res.sup_deviation <= cfg.tolerances.absolute,
        format!(
            "sup |F(y) - y| = {:.4} over {} surviving draws, tolerance {}",
            res.sup_deviation, res.accepted, cfg.tolerances.absolute
        ),
    );
    report.check(
        "exact_agreement",
        all_agree,
        format!(
            "every grid point within {} se of the exact CDF",
            cfg.tolerances.mc_sigmas
        ),
    );
    let cdf_monotone = res.cdf.windows(2).all(|w| w[0] <= w[1]) && res.cdf.last() == Some(&1.0);
    report.check("cdf_shape", cdf_monotone, "nondecreasing with F(1) = 1");
    Ok(report.finish(start))
}

/// Geometric law: `f_n(s) = (n - (n-1)s)/(n + 1 - ns)`, `Q(n) = 1/(n+1)`.
pub mod geometric {
    use crate::numeric::{ln_gamma, NeumaierSum};

    pub fn survival(n: usize) -> f64 {
        1.0 / (n as f64 + 1.0)
    }

    /// `P(Z(n) = j) = n^{j-1}/(n+1)^{j+1}`, `j ≥ 1`.
    pub fn prob(n: usize, j: usize) -> f64 {
        let nf = n as f64;
        if n == 0 {
            return if j == 1 { 1.0 } else { 0.0 };
        }
        ((j as f64 - 1.0) * nf.ln() - (j as f64 + 1.0) * nf.ln_1p()).exp()
    }

    /// `P(0 < Z(n) ≤ T) = (1 - (n/(n+1))^T)/(n+1)`.
    pub fn small_deviation(n: usize, t: usize) -> f64 {
        let nf = n as f64;
        -(t as f64 * (-1.0 / (nf + 1.0)).ln_1p()).exp_m1() / (nf + 1.0)
    }

    /// `P(Z(m, n) = j) = (r+1) m^{j-1}/(n+1)^{j+1}`, `r = n - m`.
    pub fn reduced_prob(n: usize, m: usize, j: usize) -> f64 {
        let r = (n - m) as f64;
        if m == 0 {
            return if j == 1 { 1.0 / (n as f64 + 1.0) } else { 0.0 };
        }
        (r.ln_1p() + (j as f64 - 1.0) * (m as f64).ln() - (j as f64 + 1.0) * (n as f64).ln_1p())
            .exp()
    }

    /// `P(S_j ≤ T)` for a sum of `j` independent `Z(r) | Z(r) > 0`, each
    /// geometric on `{1, 2, …}` with success probability `1/(r+1)`: at least
    /// `j` successes in `T` trials.
    pub fn sum_below(r: usize, j: usize, t: usize) -> f64 {
        if j > t {
            return 0.0;
        }
        let p = 1.0 / (r as f64 + 1.0);
        let (lp, lq) = (p.ln(), (-p).ln_1p());
        let tf = t as f64;
        let lt = ln_gamma(tf + 1.0);
        let mut s = NeumaierSum::new();
        for i in j..=t {
            let fi = i as f64;
            s.add(
                (lt - ln_gamma(fi + 1.0) - ln_gamma(tf - fi + 1.0) + fi * lp + (tf - fi) * lq)
                    .exp(),
            );
        }
        s.value().min(1.0)
    }

    /// `P(Z(m, n) = j | 0 < Z(n) ≤ T)` for `j = 0..=T`.
    pub fn reduced_given_h(n: usize, m: usize, t: usize) -> Vec<f64> {
        let r = n - m;
        let mut w: Vec<f64> = (0..=t)
            .map(|j| {
                if j == 0 {
                    0.0
                } else {
                    reduced_prob(n, m, j) * sum_below(r, j, t)
                }
            })
            .collect();
        let total: f64 = w.iter().copied().collect::<NeumaierSum>().value();
        w.iter_mut().for_each(|v| *v /= total);
        w
    }

    /// Erlang(j) CDF `1 - e^{-y} Σ_{i<j} y^i/i!`.
    pub fn erlang_cdf(j: usize, y: f64) -> f64 {
        let mut term = 1.0;
        let mut s = 0.0;
        for i in 0..j {
            if i > 0 {
                term *= y / i as f64;
            }
            s += term;
        }
        1.0 - (-y).exp() * s
    }
}

pub fn verify_finite_variance(cfg: &ExperimentConfig) -> Result<Report, LabError> {
    let start = Instant::now();
    let mut report = Report::new(cfg);
    let law = cfg.law.build()?;
    if !matches!(law.family(), Family::Geometric) {
        return Err(LabError::ConfigInvalid(
            "finite_variance runs on the geometric law".into(),
        ));
    }
    let sigma2 = law.sigma2().finite().expect("geometric variance is finite");
    let engine = Engine::new(&law);
    let tol = cfg.tolerances.relative;
    let [j_lo, j_hi] = cfg.j_range;
    let n_max = *cfg.schedule.last().unwrap();
    let mut fv_ratio = Vec::new();
    for (i, &n) in cfg.schedule.iter().enumerate() {
        let phi = cfg.phi.phi(n, i);
        let t = threshold_from_survival(geometric::survival(phi));
        // (a) small deviations
        let exact = geometric::small_deviation(n, t);
        let pred = geometric::survival(n) / n as f64 * phi as f64;
        let row = Row::new(
            format!("small_dev phi={phi} T={t}"),
            Some(n),
            pred,
            exact,
            ("limit_laws", "closed_form"),
        );
        fv_ratio.push(row.ratio);
        report.rows.push(row);
        // (b) reduced process
        for &x in &cfg.x_grid {
            let lag = ceil_guarded(x * phi as f64);
            let cond = geometric::reduced_given_h(n, n - lag, t.max(j_hi));
            for j in j_lo..=j_hi {
                let limit = x * geometric::erlang_cdf(j, 1.0 / x);
                report.rows.push(Row::new(
                    format!("reduced x={x} j={j}"),
                    Some(n),
                    limit,
                    cond[j],
                    ("closed_form_limit", "closed_form"),
                ));
                if n == n_max {
                    let dev = cond[j] - limit;
                    report.check(
                        format!("reduced x={x} j={j}"),
                        dev.abs() <= cfg.tolerances.absolute,
                        format!(
                            "{:.6} vs {limit:.6}, tolerance {}",
                            cond[j], cfg.tolerances.absolute
                        ),
                    );
                }
            }
        }
        // (c) local probabilities at j = ⌈n^0.3⌉
        let j = ceil_guarded((n as f64).powf(0.3));
        let local = geometric::prob(n, j) * sigma2 * sigma2 * (n as f64).powi(2) / 4.0;
        report.rows.push(Row::new(
            format!("local j={j}"),
            Some(n),
            1.0,
            local,
            ("local_limit", "closed_form"),
        ));
        if n == n_max {
            report.check(
                "local_limit",
                (local - 1.0).abs() <= tol,
                format!("scaled P(Z(n)={j}) = {local:.6}, tolerance {tol}"),
            );
        }
    }
    let last = *fv_ratio.last().unwrap();
    report.check(
        "small_dev",
        (last - 1.0).abs() <= tol,
        format!("ratio {last:.6} at n = {n_max}, tolerance {tol}"),
    );

    // closed forms against the generic engine where the series is cheap
    let mut worst = 0.0f64;
    for &n in cfg.schedule.iter().filter(|&&n| n <= 4096) {
        let phi = cfg.phi.phi_at(n).unwrap_or(1).min(n - 1).max(1);
        let t = threshold_from_survival(geometric::survival(phi));
        let sd = engine.small_deviation_prob(n, phi)?;
        worst =
            worst.max(((sd.probability - geometric::small_deviation(n, t)) / sd.probability).abs());
        let lag = ceil_guarded(phi as f64);
        let rj = engine.reduced_joint(n, n - lag, t)?;
        let cond = geometric::reduced_given_h(n, n - lag, t);
        for j in 1..=t.min(8) {
            worst = worst.max(((rj.cond_j_given_h[j] - cond[j]) / cond[j]).abs());
            worst = worst.max(
                ((rj.pmf_reduced[j] - geometric::reduced_prob(n, n - lag, j)) / rj.pmf_reduced[j])
                    .abs(),
            );
        }
    }
    report.check(
        "engine_matches_closed_form",
        worst <= 1e-9,
        format!("largest relative difference {worst:.3e}"),
    );
    Ok(report.finish(start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_configs_validate() {
        for id in ExperimentId::ALL {
            ExperimentConfig::preset(id).validate().unwrap();
            assert_eq!(ExperimentId::parse(id.name()), Some(id));
        }
    }

    #[test]
    fn json_overrides_merge_into_preset() {
        let cfg = ExperimentConfig::from_json(
            r#"{"experiment":"thm1","schedule":[64,256],"tolerances":{"relative":0.5}}"#,
        )
        .unwrap();
        assert_eq!(cfg.schedule, vec![64, 256]);
        assert_eq!(cfg.tolerances.relative, 0.5);
        assert_eq!(cfg.tolerances.trend_points, 3);
        assert_eq!(cfg.law, reference_law());
    }

    #[test]
    fn phi_not_below_n_is_rejected() {
        let err = ExperimentConfig::from_json(
            r#"{"experiment":"thm1","schedule":[4,8],"phi":{"table":[2,8]}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, LabError::ConfigInvalid(_)), "{err}");
        let err =
            ExperimentConfig::from_json(r#"{"experiment":"thm1","schedule":[8,4]}"#).unwrap_err();
        assert!(matches!(err, LabError::ConfigInvalid(_)));
        let err = ExperimentConfig::from_json(r#"{"experiment":"thm1","bogus":1}"#).unwrap_err();
        assert!(matches!(err, LabError::ConfigInvalid(_)));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::preset(ExperimentId::Thm1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn geometric_closed_forms() {
        // n = 2, φ = 1: T = 2, P = 1/9 + 2/27
        assert!((geometric::small_deviation(2, 2) - 5.0 / 27.0).abs() < 1e-15);
        assert!((geometric::prob(2, 2) - 2.0 / 27.0).abs() < 1e-15);
        // reduced law at m = 0 is survival at j = 1
        assert!((geometric::reduced_prob(10, 0, 1) - 1.0 / 11.0).abs() < 1e-15);
        let s: f64 = (1..400).map(|j| geometric::reduced_prob(30, 20, j)).sum();
        // Σ_j P(Z(m,n)=j) = Q(n)
        assert!((s - 1.0 / 31.0).abs() < 1e-12);
        assert!((geometric::erlang_cdf(2, 1.0) - (1.0 - 2.0 / std::f64::consts::E)).abs() < 1e-15);
    }

    #[test]
    fn constant_family_integrals_are_exact() {
        for theta in [0.5, 1.0, 2.0, 5.0] {
            let r = scaled_gamma_ratio(SlowFamily::Constant, theta, 1e6).unwrap();
            assert!((r - 1.0).abs() < 1e-10, "theta {theta}: {r}");
        }
        let r = truncated_laplace_ratio(SlowFamily::Constant, 200.0, 0.9).unwrap();
        // regularized upper incomplete gamma Q(200, 20)
        assert!((r - 1.0).abs() < 1e-10, "{r}");
    }

    #[test]
    fn small_run_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg =
            ExperimentConfig::from_json(r#"{"experiment":"thm1","schedule":[256,1024],"seed":3}"#)
                .unwrap();
        let report = run(&cfg, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("thm1.csv")).unwrap();
        assert!(csv.starts_with(&format!("# config_hash={}", cfg.hash())));
        let json: Report =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert_eq!(json, report);
        assert_eq!(report.rows.len(), 2);
    }
}
