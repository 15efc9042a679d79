//! Monte Carlo genealogies.
//!
//! Two samplers share the estimators. `Conditioning::Forward` simulates every
//! particle and conditions by rejection. `Conditioning::ReducedTree` draws the
//! reduced tree of a surviving process directly: a lineage alive at `g` whose
//! line survives to `n` splits into `K ≥ 2` surviving lines with probability
//! `P(K ≥ 2 | K ≥ 1)`, which only needs `Q(r)`. Rejection on `H(n)` is then
//! applied to that exact sample of `Z(n) | Z(n) > 0`.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::offspring::OffspringLaw;
use crate::series::{threshold_from_survival, ExtinctionSequence};

pub const DEFAULT_POPULATION_CAP: u64 = 10_000_000;
/// Accepted replicates below this flag a conditional estimate.
pub const MIN_ACCEPTED: u64 = 100;
const CAP_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Independent stream for one replicate: same draws whether run serially or in parallel.
pub fn replicate_rng(seed: u64, replicate: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Forward,
    #[default]
    ReducedTree,
}

/// One surviving genealogy.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeRun {
    pub n: usize,
    /// `generations[m][i]`: offspring count of particle `i` of generation `m`, `m < n`.
    pub generations: Vec<Vec<u64>>,
    /// `survivor_marks[m][i]`: particle has a descendant in generation `n`, `m ≤ n`.
    pub survivor_marks: Vec<Vec<bool>>,
    pub z_final: u64,
    /// `Z(m, n)`, `m = 0..=n`.
    pub reduced_counts: Vec<u64>,
    pub mrca_distance: usize,
}

impl TreeRun {
    pub fn population(&self, m: usize) -> u64 {
        if m < self.n {
            self.generations[m].len() as u64
        } else {
            self.z_final
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimOutcome {
    Extinct { generation: usize },
    Overflow { generation: usize, total: u64 },
    Survived(TreeRun),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationOutcome {
    Extinct { generation: usize },
    Overflow { generation: usize, total: u64 },
    Survived { z_final: u64 },
}

/// Generation sizes only. Consumes the stream exactly like [`simulate_tree_with`],
/// so a replicate can be replayed in full once it is known to be of interest.
pub fn simulate_population<R: Rng + ?Sized>(
    law: &OffspringLaw,
    n: usize,
    cap: u64,
    rng: &mut R,
) -> PopulationOutcome {
    let mut z: u64 = 1;
    let mut total: u64 = 1;
    for m in 0..n {
        let mut next: u64 = 0;
        for _ in 0..z {
            next = next.saturating_add(law.sample(rng));
            if total.saturating_add(next) > cap {
                return PopulationOutcome::Overflow {
                    generation: m + 1,
                    total: total.saturating_add(next),
                };
            }
        }
        total += next;
        z = next;
        if z == 0 {
            return PopulationOutcome::Extinct { generation: m + 1 };
        }
    }
    PopulationOutcome::Survived { z_final: z }
}

pub fn simulate_tree(law: &OffspringLaw, n: usize, seed: u64, cap: u64) -> SimOutcome {
    simulate_tree_with(law, n, cap, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn simulate_tree_with<R: Rng + ?Sized>(
    law: &OffspringLaw,
    n: usize,
    cap: u64,
    rng: &mut R,
) -> SimOutcome {
    let mut generations: Vec<Vec<u64>> = Vec::with_capacity(n);
    let mut z: u64 = 1;
    let mut total: u64 = 1;
    for m in 0..n {
        let mut counts = Vec::with_capacity(z as usize);
        let mut next: u64 = 0;
        for _ in 0..z {
            let k = law.sample(rng);
            next = next.saturating_add(k);
            if total.saturating_add(next) > cap {
                return SimOutcome::Overflow {
                    generation: m + 1,
                    total: total.saturating_add(next),
                };
            }
            counts.push(k);
        }
        generations.push(counts);
        total += next;
        z = next;
        if z == 0 {
            return SimOutcome::Extinct { generation: m + 1 };
        }
    }
    SimOutcome::Survived(back_mark(n, generations, z))
}

/// Children of particle `i` in generation `m` are the consecutive block of
/// generation `m+1` starting after the children of particles `0..i`.
fn back_mark(n: usize, generations: Vec<Vec<u64>>, z_final: u64) -> TreeRun {
    let mut marks: Vec<Vec<bool>> = vec![Vec::new(); n + 1];
    marks[n] = vec![true; z_final as usize];
    for m in (0..n).rev() {
        let below = &marks[m + 1];
        let mut start = 0usize;
        let row: Vec<bool> = generations[m]
            .iter()
            .map(|&k| {
                let end = start + k as usize;
                let alive = below[start..end].iter().any(|&b| b);
                start = end;
                alive
            })
            .collect();
        marks[m] = row;
    }
    let reduced_counts: Vec<u64> = marks
        .iter()
        .map(|r| r.iter().filter(|&&b| b).count() as u64)
        .collect();
    let b = (0..n).rev().find(|&m| reduced_counts[m] == 1).unwrap_or(0);
    TreeRun {
        n,
        generations,
        survivor_marks: marks,
        z_final,
        reduced_counts,
        mrca_distance: n - b,
    }
}

/// One draw of the reduced tree of a process conditioned to survive to `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReducedSample {
    /// `None` once the number of leaves exceeded the limit (sampling stopped).
    pub z_final: Option<u64>,
    /// `Z(m, n)` for the queried `m`, valid when `z_final` is `Some`.
    pub width: u64,
    pub mrca_distance: usize,
}

/// Exact sampler of reduced trees given `Z(n) > 0`.
#[derive(Debug, Clone)]
pub struct ReducedTreeSampler {
    law: OffspringLaw,
    n: usize,
    /// `Q(r)`, `r = 0..=n`.
    survival: Vec<f64>,
    /// `cum[g] = Σ_{i<g} -ln(1 - P(split at i))`, `g = 0..=n`.
    cum: Vec<f64>,
}

impl ReducedTreeSampler {
    pub fn new(law: &OffspringLaw, n: usize) -> Result<Self, SimError> {
        if n == 0 {
            return Err(SimError::InvalidArgument(
                "horizon n must be at least 1".into(),
            ));
        }
        let ext = ExtinctionSequence::new(law, n);
        let survival: Vec<f64> = (0..=n).map(|r| ext.survival(r)).collect();
        let mut cum = vec![0.0; n + 1];
        for g in 0..n {
            let r = n - g - 1;
            let split = (law.branching_mass(survival[r]) / survival[r + 1]).clamp(0.0, 1.0);
            cum[g + 1] = cum[g] - (-split).ln_1p();
        }
        Ok(Self {
            law: law.clone(),
            n,
            survival,
            cum,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn survival(&self) -> f64 {
        self.survival[self.n]
    }

    /// Generation at which a lineage alive from `start` splits, if before `n`.
    fn split_generation<R: Rng + ?Sized>(&self, start: usize, rng: &mut R) -> Option<usize> {
        if start >= self.n {
            return None;
        }
        let e = -(1.0 - rng.random::<f64>()).ln();
        let target = self.cum[start] + e;
        // smallest i > start with cum[i] > target; the split happens at i - 1
        let tail = &self.cum[start + 1..];
        let i = tail.partition_point(|&c| c <= target);
        if i == tail.len() {
            None
        } else {
            Some(start + i)
        }
    }

    fn split_children<R: Rng + ?Sized>(&self, g: usize, rng: &mut R) -> u64 {
        self.law
            .sample_branching_children(self.survival[self.n - g - 1], rng)
    }

    /// `d(n)` alone: only the root's first split matters.
    pub fn sample_mrca_distance<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self.split_generation(0, rng) {
            Some(g) => self.n - g,
            None => 1,
        }
    }

    /// Draws the tree until it has more than `leaf_limit` leaves or is complete.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        leaf_limit: u64,
        query: usize,
        rng: &mut R,
    ) -> ReducedSample {
        let mut leaves: u64 = 1;
        let mut width: u64 = 0;
        let mut mrca_distance = 1;
        let mut stack = vec![0usize];
        let mut root = true;
        while let Some(start) = stack.pop() {
            let split = self.split_generation(start, rng);
            let end = split.unwrap_or(self.n);
            if start <= query && query <= end {
                width += 1;
            }
            if root {
                if let Some(g) = split {
                    mrca_distance = self.n - g;
                }
                root = false;
            }
            if let Some(g) = split {
                let k = self.split_children(g, rng);
                leaves = leaves.saturating_add(k - 1);
                if leaves > leaf_limit {
                    return ReducedSample {
                        z_final: None,
                        width,
                        mrca_distance,
                    };
                }
                for _ in 0..k {
                    stack.push(g + 1);
                }
            }
        }
        ReducedSample {
            z_final: Some(leaves),
            width,
            mrca_distance,
        }
    }
}

/// Summary of one Monte Carlo estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimate: f64,
    pub stderr: f64,
    pub replicates: u64,
    pub accepted: u64,
    pub seed: u64,
    pub indeterminate_count: u64,
    pub wall_time_secs: f64,
    pub conditioning: Conditioning,
}

impl EstimatorResult {
    pub fn write_json<W: Write>(&self, w: W) -> Result<(), SimError> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Replicate-level log line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub z_final: Option<u64>,
    pub d_n: Option<usize>,
    pub accepted: bool,
}

pub fn write_replicate_log<W: Write>(records: &[ReplicateRecord], w: W) -> Result<(), SimError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["replicate", "z_final", "d_n", "accepted"])?;
    for r in records {
        wr.write_record([
            r.replicate.to_string(),
            r.z_final.map(|z| z.to_string()).unwrap_or_default(),
            r.d_n.map(|d| d.to_string()).unwrap_or_default(),
            r.accepted.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub replicates: u64,
    pub seed: u64,
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default = "default_cap")]
    pub population_cap: u64,
    #[serde(default)]
    pub keep_log: bool,
}

fn default_cap() -> u64 {
    DEFAULT_POPULATION_CAP
}

impl McConfig {
    pub fn new(replicates: u64, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            conditioning: Conditioning::default(),
            population_cap: DEFAULT_POPULATION_CAP,
            keep_log: false,
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }
}

/// What one replicate contributes; `None` fields mean "not observed".
#[derive(Debug, Clone, Copy)]
struct Draw {
    indeterminate: bool,
    z_final: Option<u64>,
    in_h: bool,
    width: u64,
    d_n: Option<usize>,
}

/// Forward replicate with the doubling-cap retry rule. Returns the outcome of
/// the population pass and, if `full`, the replayed tree when it survived.
fn forward_replicate(
    law: &OffspringLaw,
    n: usize,
    cap: u64,
    seed: u64,
    rep: u64,
    full: bool,
) -> (PopulationOutcome, Option<TreeRun>) {
    let mut cap = cap;
    let mut outcome = simulate_population(law, n, cap, &mut replicate_rng(seed, rep));
    for _ in 0..CAP_RETRIES {
        if !matches!(outcome, PopulationOutcome::Overflow { .. }) {
            break;
        }
        cap = cap.saturating_mul(2);
        outcome = simulate_population(law, n, cap, &mut replicate_rng(seed, rep));
    }
    let tree = match (outcome, full) {
        (PopulationOutcome::Survived { .. }, true) => {
            match simulate_tree_with(law, n, cap, &mut replicate_rng(seed, rep)) {
                SimOutcome::Survived(t) => Some(t),
                other => unreachable!("replay diverged from population pass: {other:?}"),
            }
        }
        _ => None,
    };
    (outcome, tree)
}

fn run_draws<F>(cfg: &McConfig, f: F) -> Vec<Draw>
where
    F: Fn(u64) -> Draw + Sync + Send,
{
    (0..cfg.replicates).into_par_iter().map(f).collect()
}

fn records(draws: &[Draw]) -> Vec<ReplicateRecord> {
    draws
        .iter()
        .enumerate()
        .map(|(i, d)| ReplicateRecord {
            replicate: i as u64,
            z_final: d.z_final,
            d_n: d.d_n,
            accepted: d.in_h,
        })
        .collect()
}

fn check_n_phi(n: usize, phi: usize) -> Result<(), SimError> {
    if n == 0 || phi == 0 || phi > n {
        return Err(SimError::InvalidArgument(format!(
            "need 1 ≤ phi ≤ n, got phi = {phi}, n = {n}"
        )));
    }
    Ok(())
}

/// Small-deviation estimate with its replicate log (empty unless requested).
#[derive(Debug, Clone, PartialEq)]
pub struct SmallDevEstimate {
    pub t: usize,
    pub result: EstimatorResult,
    pub log: Vec<ReplicateRecord>,
}

/// Estimate of `P(0 < Z(n) ≤ T)`, `T = ⌊1/Q(φ)⌋`.
///
/// Forward: frequency over determinate replicates, `accepted` counts hits.
/// Reduced tree: `Q(n)` times the hit frequency among surviving draws; both
/// standard errors are the binomial `sqrt(p(1-p)/N)` on the sampled indicator.
pub fn mc_small_dev(
    law: &OffspringLaw,
    n: usize,
    phi: usize,
    cfg: &McConfig,
) -> Result<SmallDevEstimate, SimError> {
    check_n_phi(n, phi)?;
    let start = Instant::now();
    let ext = ExtinctionSequence::new(law, n);
    let t = threshold_from_survival(ext.survival(phi)) as u64;
    let (draws, scale) = match cfg.conditioning {
        Conditioning::Forward => {
            let draws = run_draws(cfg, |rep| {
                let (out, _) = forward_replicate(law, n, cfg.population_cap, cfg.seed, rep, false);
                match out {
                    PopulationOutcome::Overflow { .. } => Draw {
                        indeterminate: true,
                        z_final: None,
                        in_h: false,
                        width: 0,
                        d_n: None,
                    },
                    PopulationOutcome::Extinct { .. } => Draw {
                        indeterminate: false,
                        z_final: Some(0),
                        in_h: false,
                        width: 0,
                        d_n: None,
                    },
                    PopulationOutcome::Survived { z_final } => Draw {
                        indeterminate: false,
                        z_final: Some(z_final),
                        in_h: z_final <= t,
                        width: 0,
                        d_n: None,
                    },
                }
            });
            (draws, 1.0)
        }
        Conditioning::ReducedTree => {
            let sampler = ReducedTreeSampler::new(law, n)?;
            let draws = run_draws(cfg, |rep| {
                let s = sampler.sample(t, n, &mut replicate_rng(cfg.seed, rep));
                Draw {
                    indeterminate: false,
                    z_final: s.z_final,
                    in_h: s.z_final.is_some(),
                    width: 0,
                    d_n: Some(s.mrca_distance),
                }
            });
            (draws, sampler.survival())
        }
    };
    let indeterminate = draws.iter().filter(|d| d.indeterminate).count() as u64;
    let hits = draws.iter().filter(|d| d.in_h).count() as u64;
    let used = (cfg.replicates - indeterminate).max(1) as f64;
    let p = hits as f64 / used;
    let result = EstimatorResult {
        estimate: scale * p,
        stderr: scale * (p * (1.0 - p) / used).sqrt(),
        replicates: cfg.replicates,
        accepted: hits,
        seed: cfg.seed,
        indeterminate_count: indeterminate,
        wall_time_secs: start.elapsed().as_secs_f64(),
        conditioning: cfg.conditioning,
    };
    let log = if cfg.keep_log {
        records(&draws)
    } else {
        Vec::new()
    };
    Ok(SmallDevEstimate {
        t: t as usize,
        result,
        log,
    })
}

/// Estimated `P(Z(m, n) = j | H(n))`, `m = n - ⌈xφ⌉`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalReduced {
    pub n: usize,
    pub m: usize,
    pub t: usize,
    /// Index `j = 0..=j_max`; index 0 unused.
    pub pmf: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Draws that reached `H(n)` (surviving draws for the reduced-tree sampler).
    pub accepted: u64,
    pub replicates: u64,
    /// `accepted / sampled`, where sampled excludes indeterminate forward runs.
    pub acceptance_rate: f64,
    pub too_few_accepted: bool,
    pub indeterminate_count: u64,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub log: Vec<ReplicateRecord>,
}

pub fn mc_conditional_reduced(
    law: &OffspringLaw,
    n: usize,
    phi: usize,
    x: f64,
    j_max: usize,
    cfg: &McConfig,
) -> Result<ConditionalReduced, SimError> {
    check_n_phi(n, phi)?;
    if !(x > 0.0) {
        return Err(SimError::InvalidArgument(format!(
            "x = {x} must be positive"
        )));
    }
    let lag = (x * phi as f64).ceil() as usize;
    if lag >= n {
        return Err(SimError::InvalidArgument(format!(
            "⌈xφ⌉ = {lag} must be below n = {n}"
        )));
    }
    let m = n - lag;
    let start = Instant::now();
    let ext = ExtinctionSequence::new(law, n);
    let t = threshold_from_survival(ext.survival(phi)) as u64;
    let draws = match cfg.conditioning {
        Conditioning::Forward => run_draws(cfg, |rep| {
            let (out, tree) = forward_replicate(law, n, cfg.population_cap, cfg.seed, rep, true);
            match out {
                PopulationOutcome::Overflow { .. } => Draw {
                    indeterminate: true,
                    z_final: None,
                    in_h: false,
                    width: 0,
                    d_n: None,
                },
                PopulationOutcome::Extinct { .. } => Draw {
                    indeterminate: false,
                    z_final: Some(0),
                    in_h: false,
                    width: 0,
                    d_n: None,
                },
                PopulationOutcome::Survived { z_final } => {
                    let tree = tree.expect("surviving run is replayed");
                    Draw {
                        indeterminate: false,
                        z_final: Some(z_final),
                        in_h: z_final <= t,
                        width: tree.reduced_counts[m],
                        d_n: Some(tree.mrca_distance),
                    }
                }
            }
        }),
        Conditioning::ReducedTree => {
            let sampler = ReducedTreeSampler::new(law, n)?;
            run_draws(cfg, |rep| {
                let s = sampler.sample(t, m, &mut replicate_rng(cfg.seed, rep));
                Draw {
                    indeterminate: false,
                    z_final: s.z_final,
                    in_h: s.z_final.is_some(),
                    width: s.width,
                    d_n: Some(s.mrca_distance),
                }
            })
        }
    };
    let indeterminate = draws.iter().filter(|d| d.indeterminate).count() as u64;
    let accepted = draws.iter().filter(|d| d.in_h).count() as u64;
    let mut counts = vec![0u64; j_max + 1];
    for d in draws.iter().filter(|d| d.in_h) {
        if (1..=j_max as u64).contains(&d.width) {
            counts[d.width as usize] += 1;
        }
    }
    let a = accepted.max(1) as f64;
    let pmf: Vec<f64> = counts.iter().map(|&c| c as f64 / a).collect();
    let stderr: Vec<f64> = pmf.iter().map(|&p| (p * (1.0 - p) / a).sqrt()).collect();
    let sampled = (cfg.replicates - indeterminate).max(1) as f64;
    Ok(ConditionalReduced {
        n,
        m,
        t: t as usize,
        pmf,
        stderr,
        accepted,
        replicates: cfg.replicates,
        acceptance_rate: accepted as f64 / sampled,
        too_few_accepted: accepted < MIN_ACCEPTED,
        indeterminate_count: indeterminate,
        seed: cfg.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
        log: if cfg.keep_log {
            records(&draws)
        } else {
            Vec::new()
        },
    })
}

/// Empirical CDF of `d(n)/n` given `Z(n) > 0` on `y = 0.1, …, 0.9, 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZubkovCdf {
    pub n: usize,
    pub grid: Vec<f64>,
    pub cdf: Vec<f64>,
    pub accepted: u64,
    pub replicates: u64,
    /// `max |cdf(y) - y|` over the grid.
    pub sup_deviation: f64,
    pub seed: u64,
    pub wall_time_secs: f64,
}

pub fn mc_zubkov(law: &OffspringLaw, n: usize, cfg: &McConfig) -> Result<ZubkovCdf, SimError> {
    if n == 0 {
        return Err(SimError::InvalidArgument(
            "horizon n must be at least 1".into(),
        ));
    }
    let start = Instant::now();
    let distances: Vec<Option<usize>> = match cfg.conditioning {
        Conditioning::Forward => (0..cfg.replicates)
            .into_par_iter()
            .map(|rep| {
                forward_replicate(law, n, cfg.population_cap, cfg.seed, rep, true)
                    .1
                    .map(|t| t.mrca_distance)
            })
            .collect(),
        Conditioning::ReducedTree => {
            let sampler = ReducedTreeSampler::new(law, n)?;
            (0..cfg.replicates)
                .into_par_iter()
                .map(|rep| Some(sampler.sample_mrca_distance(&mut replicate_rng(cfg.seed, rep))))
                .collect()
        }
    };
    let d: Vec<usize> = distances.into_iter().flatten().collect();
    let accepted = d.len() as u64;
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let cdf: Vec<f64> = grid
        .iter()
        .map(|&y| {
            let below = d
                .iter()
                .filter(|&&di| di as f64 <= y * n as f64 + 1e-9)
                .count();
            below as f64 / accepted.max(1) as f64
        })
        .collect();
    let sup_deviation = grid
        .iter()
        .zip(&cdf)
        .map(|(y, c)| (c - y).abs())
        .fold(0.0, f64::max);
    Ok(ZubkovCdf {
        n,
        grid,
        cdf,
        accepted,
        replicates: cfg.replicates,
        sup_deviation,
        seed: cfg.seed,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reduced counts from explicit parent pointers, walking up from every leaf.
    fn naive_reduced(run: &TreeRun) -> Vec<u64> {
        let n = run.n;
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
        for m in 0..n {
            for (i, &k) in run.generations[m].iter().enumerate() {
                for _ in 0..k {
                    parents[m + 1].push(i);
                }
            }
        }
        let mut alive: Vec<std::collections::BTreeSet<usize>> = vec![Default::default(); n + 1];
        for leaf in 0..run.z_final as usize {
            let mut idx = leaf;
            alive[n].insert(idx);
            for m in (0..n).rev() {
                idx = parents[m + 1][idx];
                alive[m].insert(idx);
            }
        }
        alive.iter().map(|s| s.len() as u64).collect()
    }

    #[test]
    fn back_marking_matches_naive_genealogy() {
        let law = OffspringLaw::stable_frac(0.5, 0.6).unwrap();
        let mut checked = 0;
        for seed in 0..50_000u64 {
            if let SimOutcome::Survived(run) = simulate_tree(&law, 4, seed, 12) {
                assert_eq!(run.reduced_counts, naive_reduced(&run));
                assert_eq!(run.reduced_counts[0], 1);
                assert_eq!(run.reduced_counts[run.n], run.z_final);
                assert!(run.reduced_counts.windows(2).all(|w| w[0] <= w[1]));
                for m in 0..run.n {
                    assert_eq!(
                        run.generations[m].iter().sum::<u64>(),
                        run.population(m + 1)
                    );
                }
                let b = (0..run.n)
                    .rev()
                    .find(|&m| run.reduced_counts[m] == 1)
                    .unwrap();
                assert_eq!(run.mrca_distance, run.n - b);
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} surviving trees");
    }

    #[test]
    fn trees_are_seed_deterministic() {
        let law = OffspringLaw::stable_frac(0.8, 1.0 / 1.8).unwrap();
        for seed in 0..50 {
            assert_eq!(
                simulate_tree(&law, 30, seed, 1 << 20),
                simulate_tree(&law, 30, seed, 1 << 20)
            );
        }
    }

    #[test]
    fn population_pass_agrees_with_tree() {
        let law = OffspringLaw::stable_frac(0.8, 1.0 / 1.8).unwrap();
        for rep in 0..300 {
            let p = simulate_population(&law, 25, 1 << 16, &mut replicate_rng(9, rep));
            let t = simulate_tree_with(&law, 25, 1 << 16, &mut replicate_rng(9, rep));
            match (p, t) {
                (
                    PopulationOutcome::Extinct { generation: a },
                    SimOutcome::Extinct { generation: b },
                ) => assert_eq!(a, b),
                (PopulationOutcome::Overflow { .. }, SimOutcome::Overflow { .. }) => {}
                (PopulationOutcome::Survived { z_final }, SimOutcome::Survived(run)) => {
                    assert_eq!(z_final, run.z_final)
                }
                other => panic!("mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn extinct_before_horizon() {
        let law = OffspringLaw::geometric();
        let out = (0..100)
            .map(|s| simulate_tree(&law, 50, s, 1 << 20))
            .find(|o| matches!(o, SimOutcome::Extinct { .. }));
        assert!(matches!(out, Some(SimOutcome::Extinct { generation }) if generation <= 50));
    }

    #[test]
    fn cap_overflow_is_reported() {
        let law = OffspringLaw::geometric();
        let over =
            (0..200).any(|s| matches!(simulate_tree(&law, 40, s, 5), SimOutcome::Overflow { .. }));
        assert!(over);
    }

    #[test]
    fn reduced_sampler_never_branches_past_horizon() {
        let law = OffspringLaw::stable_frac(0.8, 1.0 / 1.8).unwrap();
        let s = ReducedTreeSampler::new(&law, 40).unwrap();
        let mut rng = replicate_rng(1, 0);
        for _ in 0..2000 {
            let d = s.sample_mrca_distance(&mut rng);
            assert!((1..=40).contains(&d));
            let r = s.sample(u64::MAX, 0, &mut rng);
            assert_eq!(r.width, 1);
            assert!(r.z_final.unwrap() >= 1);
        }
    }

    #[test]
    fn parallel_and_serial_agree() {
        let law = OffspringLaw::stable_frac(0.8, 1.0 / 1.8).unwrap();
        let cfg = McConfig::new(4000, 77);
        let a = mc_small_dev(&law, 64, 8, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| mc_small_dev(&law, 64, 8, &cfg).unwrap());
        assert_eq!(a.result.estimate, b.result.estimate);
        assert_eq!(a.result.accepted, b.result.accepted);
    }
}
