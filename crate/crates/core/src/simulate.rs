//! Science-table generation, assignment enumeration and sampling, and Monte Carlo studies.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`. Stream 0
//! generates the fixed science table of a finite study; replication (or outer
//! draw) `r` runs on stream `r + 1`. Replications run in parallel but are
//! collected and reduced in index order, so results do not depend on the
//! number of threads.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ArmOutcomes, BlockSummary, ExperimentSummary, ScienceUnit};
use crate::error::{Error, Result};
use crate::estimators::{evaluate, EstimatorId, Observed};
use crate::oracle::{self, Design, Mechanism, ScienceBlock, ScienceTable, StrataPopulation};
use crate::scalar::{self, square, Scalar};

pub const DEFAULT_REPS: usize = 5000;
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Block sizes of the shipped 15-block layout: 100 units, half of them in small blocks.
pub const DEFAULT_SIZES: [usize; 15] = [3, 3, 4, 4, 5, 5, 6, 6, 7, 7, 7, 7, 8, 8, 20];
/// Treated counts for [`DEFAULT_SIZES`]: ten single-treated small blocks and five big ones, 22 treated in all.
pub const DEFAULT_N_T: [usize; 15] = [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 4];

/// RNG for replication `r` (or the science table when `stream` is 0).
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn block_label(k: usize, total: usize, prefix: char) -> String {
    let width = total.to_string().len().max(2);
    format!("{prefix}{k:0width$}")
}

/// Bivariate-normal data generating process with block-level mean shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub sizes: Vec<usize>,
    pub rho: f64,
    pub a: f64,
    pub b: f64,
    #[serde(default = "default_base_effect")]
    pub base_effect: f64,
    pub seed: u64,
}

fn default_base_effect() -> f64 {
    5.0
}

impl DgpConfig {
    /// Standard-normal quantile Φ⁻¹(1 − k/(K+1)) for the 1-based block position `k`.
    pub fn spread(&self, k: usize) -> f64 {
        let kk = self.sizes.len() as f64;
        Normal::standard().inverse_cdf(1.0 - k as f64 / (kk + 1.0))
    }

    /// Control mean α_k for the 1-based position `k`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.spread(k) * self.a
    }

    /// Mean effect β_k for the 1-based position `k`.
    pub fn beta(&self, k: usize) -> f64 {
        self.base_effect + self.spread(k) * self.b
    }

    fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::validation("sizes: at least one block is required"));
        }
        if self.sizes.iter().any(|&m| m < 2) {
            return Err(Error::validation("sizes: every block needs at least two units"));
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::validation("rho: must lie in [-1, 1]"));
        }
        if !(self.a >= 0.0 && self.b >= 0.0) {
            return Err(Error::validation("a, b: must be nonnegative"));
        }
        Ok(())
    }
}

/// Draws the science table. Blocks are labelled `B01`, `B02`, ... in list order.
pub fn generate_dgp(config: &DgpConfig) -> Result<ScienceTable<f64>> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, 0);
    let k_total = config.sizes.len();
    let tilt = (1.0 - config.rho * config.rho).max(0.0).sqrt();
    let mut units = Vec::new();
    for (i, &m) in config.sizes.iter().enumerate() {
        let (alpha, beta) = (config.alpha(i + 1), config.beta(i + 1));
        let label = block_label(i + 1, k_total, 'B');
        for _ in 0..m {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            units.push(ScienceUnit {
                block_id: label.clone(),
                y0: alpha + z1,
                y1: alpha + beta + config.rho * z1 + tilt * z2,
            });
        }
    }
    ScienceTable::new(units)
}

/// Treatment indicator per unit, in the science table's block-major unit order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    pub treated: Vec<bool>,
}

fn flags(n: usize, chosen: impl IntoIterator<Item = usize>) -> Vec<bool> {
    let mut out = vec![false; n];
    for i in chosen {
        out[i] = true;
    }
    out
}

/// Uniform draw over the assignments the mechanism allows.
pub fn draw_assignment<R: Rng + ?Sized>(design: &Design, mechanism: Mechanism, rng: &mut R) -> Assignment {
    match mechanism {
        Mechanism::Complete => {
            Assignment { treated: flags(design.n(), index::sample(rng, design.n(), design.n_t())) }
        }
        Mechanism::Blocked => {
            let mut treated = Vec::with_capacity(design.n());
            for b in design.blocks() {
                treated.extend(flags(b.n_k, index::sample(rng, b.n_k, b.n_tk)));
            }
            Assignment { treated }
        }
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Number of assignments the mechanism allows.
pub fn assignment_count(design: &Design, mechanism: Mechanism) -> u128 {
    match mechanism {
        Mechanism::Complete => binomial(design.n(), design.n_t()),
        Mechanism::Blocked => design
            .blocks()
            .iter()
            .map(|b| binomial(b.n_k, b.n_tk))
            .fold(1u128, |acc, c| acc.saturating_mul(c)),
    }
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        let Some(i) = (0..k).rev().find(|&i| current[i] < n - k + i) else {
            return out;
        };
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
}

/// Every assignment exactly once, as an odometer over per-segment combinations.
pub struct Assignments {
    segments: Vec<(usize, Vec<Vec<usize>>)>,
    position: Vec<usize>,
    n: usize,
    done: bool,
}

impl Iterator for Assignments {
    type Item = Assignment;

    fn next(&mut self) -> Option<Assignment> {
        if self.done {
            return None;
        }
        let chosen = self
            .segments
            .iter()
            .zip(&self.position)
            .flat_map(|((offset, combos), &p)| combos[p].iter().map(move |i| offset + i));
        let item = Assignment { treated: flags(self.n, chosen) };
        self.done = true;
        for (slot, (_, combos)) in self.position.iter_mut().zip(&self.segments).rev() {
            *slot += 1;
            if *slot < combos.len() {
                self.done = false;
                break;
            }
            *slot = 0;
        }
        Some(item)
    }
}

pub fn enumerate_assignments(design: &Design, mechanism: Mechanism, cap: u128) -> Result<Assignments> {
    let count = assignment_count(design, mechanism);
    if count > cap {
        return Err(Error::inapplicable(format!(
            "{count} assignments exceed the enumeration cap of {cap}; use sampled Monte Carlo"
        )));
    }
    let segments: Vec<(usize, Vec<Vec<usize>>)> = match mechanism {
        Mechanism::Complete => vec![(0, combinations(design.n(), design.n_t()))],
        Mechanism::Blocked => {
            let mut offset = 0;
            design
                .blocks()
                .iter()
                .map(|b| {
                    let seg = (offset, combinations(b.n_k, b.n_tk));
                    offset += b.n_k;
                    seg
                })
                .collect()
        }
    };
    Ok(Assignments { position: vec![0; segments.len()], segments, n: design.n(), done: false })
}

/// The data an analyst would see under `assignment`.
pub fn observe<T: Scalar>(science: &ScienceTable<T>, assignment: &Assignment) -> Observed<T> {
    let mut pooled = ArmOutcomes::default();
    let mut blocks = Vec::with_capacity(science.k());
    let mut failure = None;
    let mut flags = assignment.treated.iter();
    for b in science.blocks() {
        let mut arms = ArmOutcomes::default();
        for (y0, y1) in b.y0.iter().zip(&b.y1) {
            if *flags.next().expect("assignment covers every unit") {
                arms.treated.push(y1.clone());
            } else {
                arms.control.push(y0.clone());
            }
        }
        pooled.treated.extend(arms.treated.iter().cloned());
        pooled.control.extend(arms.control.iter().cloned());
        match BlockSummary::from_arms(b.block_id.clone(), &arms.treated, &arms.control) {
            Ok(s) => blocks.push(s),
            Err(e) => failure = failure.or(Some(e)),
        }
    }
    let summary = match failure {
        Some(e) => Err(e),
        None => ExperimentSummary::from_blocks(blocks),
    };
    Observed { pooled, summary }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyMode {
    /// Every assignment once, up to `cap` assignments.
    Exhaustive { cap: u128 },
    Sampled { reps: usize, seed: u64 },
}

/// Monte Carlo summary for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow<T> {
    pub estimator: EstimatorId,
    pub mean_tau: T,
    pub var_tau: T,
    pub mean_vhat: T,
    /// Variance the estimator targets.
    pub true_var: T,
    /// mean_vhat − true_var.
    pub bias: T,
    /// bias / true_var; absent when the target variance is zero.
    pub rel_bias: Option<T>,
    pub var_vhat: T,
    /// Monte Carlo standard error of `bias`; zero for exhaustive studies.
    pub mc_se: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McResult<T> {
    /// Replications (assignments, or outer × inner draws).
    pub reps: usize,
    pub rows: Vec<McRow<T>>,
    /// Estimators skipped because they failed on some replication.
    pub warnings: Vec<String>,
}

type Draw<T> = Vec<Result<(T, T), String>>;

fn evaluate_all<T: Scalar>(science: &ScienceTable<T>, assignment: &Assignment, ids: &[EstimatorId]) -> Draw<T> {
    let obs = observe(science, assignment);
    ids.iter()
        .map(|&id| evaluate(id, &obs).map(|r| (r.estimate, r.variance)).map_err(|e| e.to_string()))
        .collect()
}

/// Per-estimator columns, or the first failure.
fn columns<T: Clone>(draws: &[Draw<T>], which: usize) -> Result<Vec<(T, T)>, String> {
    draws.iter().map(|d| d[which].clone()).collect()
}

fn moments<T: Scalar>(values: &[T], unbiased: bool) -> (T, T) {
    let m = scalar::mean(values);
    let ss = scalar::sum(values.iter().map(|v| square(v.clone() - m.clone())));
    let denom = if unbiased { values.len() - 1 } else { values.len() };
    (m, ss / T::count(denom))
}

/// Finite-population study: fixed science, randomized assignment.
///
/// Each estimator's target is the true variance of the design's estimator under
/// `mechanism` (the blocked estimator for blocked assignment, the difference in
/// grand means for complete randomization).
pub fn monte_carlo_study<T: Scalar>(
    science: &ScienceTable<T>,
    design: &Design,
    estimators: &[EstimatorId],
    mechanism: Mechanism,
    mode: StudyMode,
) -> Result<McResult<T>> {
    design.check(science)?;
    let draws: Vec<Draw<T>> = match mode {
        StudyMode::Exhaustive { cap } => {
            let all: Vec<Assignment> = enumerate_assignments(design, mechanism, cap)?.collect();
            all.par_iter().map(|a| evaluate_all(science, a, estimators)).collect()
        }
        StudyMode::Sampled { reps, seed } => {
            if reps < 2 {
                return Err(Error::validation("reps: at least two replications are required"));
            }
            (0..reps)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream_rng(seed, r as u64 + 1);
                    evaluate_all(science, &draw_assignment(design, mechanism, &mut rng), estimators)
                })
                .collect()
        }
    };
    let exhaustive = matches!(mode, StudyMode::Exhaustive { .. });
    let true_var = oracle::true_var_finite(science, design, mechanism)?;
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (i, &id) in estimators.iter().enumerate() {
        let pairs = match columns(&draws, i) {
            Ok(p) => p,
            Err(e) => {
                warnings.push(format!("{id} skipped: {e}"));
                continue;
            }
        };
        let (taus, vhats): (Vec<T>, Vec<T>) = pairs.into_iter().unzip();
        let (mean_tau, var_tau) = moments(&taus, !exhaustive);
        let (mean_vhat, var_vhat) = moments(&vhats, !exhaustive);
        let mc_se = if exhaustive {
            T::zero()
        } else {
            (var_vhat.clone() / T::count(vhats.len())).sqrt_value()
        };
        let bias = mean_vhat.clone() - true_var.clone();
        rows.push(McRow {
            estimator: id,
            mean_tau,
            var_tau,
            mean_vhat,
            true_var: true_var.clone(),
            rel_bias: (!true_var.is_zero()).then(|| bias.clone() / true_var.clone()),
            bias,
            var_vhat,
            mc_se,
        });
    }
    Ok(McResult { reps: draws.len(), rows, warnings })
}

/// Population with a covariate that drives blocking; units are sorted by the
/// covariate and cut into consecutive blocks of the configured sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrsPopulation {
    pub sizes: Vec<usize>,
    pub n_t: Vec<usize>,
    #[serde(default)]
    pub control_slope: f64,
    #[serde(default)]
    pub effect_slope: f64,
    #[serde(default = "default_base_effect")]
    pub base_effect: f64,
    #[serde(default)]
    pub rho: f64,
}

impl SrsPopulation {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<ScienceTable<f64>> {
        let n: usize = self.sizes.iter().sum();
        let tilt = (1.0 - self.rho * self.rho).max(0.0).sqrt();
        let mut units: Vec<(f64, f64, f64)> = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                let e1 = self.rho * z1 + tilt * z2;
                let y0 = self.control_slope * x + z1;
                let y1 = self.base_effect + (self.control_slope + self.effect_slope) * x + e1;
                (x, y0, y1)
            })
            .collect();
        units.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut rest = units.as_slice();
        let mut blocks = Vec::with_capacity(self.sizes.len());
        for (k, &m) in self.sizes.iter().enumerate() {
            let (chunk, tail) = rest.split_at(m);
            rest = tail;
            blocks.push(ScienceBlock {
                block_id: block_label(k + 1, self.sizes.len(), 'B'),
                y0: chunk.iter().map(|u| u.1).collect(),
                y1: chunk.iter().map(|u| u.2).collect(),
            });
        }
        ScienceTable::from_blocks(blocks)
    }
}

/// A finite pool of structural blocks from which whole blocks are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingFrame {
    pub pool: Vec<(ScienceBlock<f64>, usize)>,
    /// Blocks included per draw.
    pub k: usize,
}

/// Parameters for a pool whose block sizes are independent of block effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameParams {
    /// Candidate block sizes.
    pub sizes: Vec<usize>,
    /// Treated count for each candidate size.
    pub n_t: Vec<usize>,
    /// Candidate block average effects.
    pub effects: Vec<f64>,
    #[serde(default)]
    pub rho: f64,
    pub k: usize,
}

impl SamplingFrame {
    /// Pool is the cross product of sizes and effects, so size carries no
    /// information about effect. Unit effects are re-centred so every block's
    /// SATE equals its profile effect exactly.
    pub fn independent(params: &FrameParams, seed: u64) -> Result<Self> {
        if params.sizes.len() != params.n_t.len() {
            return Err(Error::validation("framework_params.n_t: one entry per pool size is required"));
        }
        if params.sizes.is_empty() || params.effects.is_empty() || params.k < 2 {
            return Err(Error::validation("framework_params: sizes, effects and k >= 2 are required"));
        }
        let mut rng = stream_rng(seed, 0);
        let tilt = (1.0 - params.rho * params.rho).max(0.0).sqrt();
        let total = params.sizes.len() * params.effects.len();
        let mut pool = Vec::with_capacity(total);
        for (&m, &n_t) in params.sizes.iter().zip(&params.n_t) {
            if m < 2 || n_t == 0 || n_t >= m {
                return Err(Error::validation("framework_params: each pool block needs both arms"));
            }
            for &effect in &params.effects {
                let z: Vec<(f64, f64)> =
                    (0..m).map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal))).collect();
                let y0: Vec<f64> = z.iter().map(|p| p.0).collect();
                let mut y1: Vec<f64> = z.iter().map(|p| params.rho * p.0 + tilt * p.1).collect();
                let shift = effect - (scalar::mean(&y1) - scalar::mean(&y0));
                y1.iter_mut().for_each(|v| *v += shift);
                let block_id = block_label(pool.len() + 1, total, 'P');
                pool.push((ScienceBlock { block_id, y0, y1 }, n_t));
            }
        }
        Ok(SamplingFrame { pool, k: params.k })
    }

    /// K pool members drawn independently and uniformly; repeats count as distinct blocks.
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(ScienceTable<f64>, Vec<usize>)> {
        let mut blocks = Vec::with_capacity(self.k);
        let mut n_t = Vec::with_capacity(self.k);
        for slot in 0..self.k {
            let (block, t) = &self.pool[rng.random_range(0..self.pool.len())];
            blocks.push(ScienceBlock { block_id: block_label(slot + 1, self.k, 'S'), ..block.clone() });
            n_t.push(*t);
        }
        Ok((ScienceTable::from_blocks(blocks)?, n_t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Framework {
    /// Simple random sampling of units, blocks formed after sampling.
    Srs(SrsPopulation),
    /// Stratified sampling from fixed strata.
    M1(StrataPopulation<f64>),
    /// Whole blocks drawn from a pool.
    M2(SamplingFrame),
}

impl Framework {
    fn draw(&self, rng: &mut ChaCha8Rng) -> Result<(ScienceTable<f64>, Vec<usize>)> {
        match self {
            Framework::Srs(p) => Ok((p.draw(rng)?, p.n_t.clone())),
            Framework::M1(pop) => Ok((draw_strata(pop, rng)?, pop.strata().iter().map(|s| s.n_tk).collect())),
            Framework::M2(frame) => frame.draw(rng),
        }
    }
}

fn draw_strata(pop: &StrataPopulation<f64>, rng: &mut ChaCha8Rng) -> Result<ScienceTable<f64>> {
    let k_total = pop.strata().len();
    let blocks = pop
        .strata()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (sd_t, sd_c) = (s.var_t.sqrt(), s.var_c.sqrt());
            let cov = (s.var_t + s.var_c - s.var_tc) / 2.0;
            let r = if sd_t > 0.0 && sd_c > 0.0 { (cov / (sd_t * sd_c)).clamp(-1.0, 1.0) } else { 0.0 };
            let tilt = (1.0 - r * r).sqrt();
            let mut y0 = Vec::with_capacity(s.n_k);
            let mut y1 = Vec::with_capacity(s.n_k);
            for _ in 0..s.n_k {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                y0.push(s.mu_c + sd_c * z1);
                y1.push(s.mu_t + sd_t * (r * z1 + tilt * z2));
            }
            // keep the stratum order of the population
            ScienceBlock { block_id: block_label(i + 1, k_total, 'S'), y0, y1 }
        })
        .collect();
    ScienceTable::from_blocks(blocks)
}

/// Per-outer-draw sums for one estimator.
#[derive(Debug, Clone, Copy, Default)]
struct Cell {
    v: f64,
    v2: f64,
    t: f64,
    t2: f64,
}

fn sample_cov(x: &[f64], y: &[f64]) -> f64 {
    scalar::sample_covariance(x, y).unwrap_or(0.0)
}

/// Superpopulation study: outer draws of the science table, inner randomizations.
///
/// The target is the empirical variance of each point estimate across all draws.
/// The Monte Carlo SE of the bias treats outer draws as independent clusters and
/// applies the delta method to (mean v̂, mean τ̂, mean τ̂²).
pub fn superpopulation_study(
    framework: &Framework,
    estimators: &[EstimatorId],
    outer: usize,
    inner: usize,
    seed: u64,
) -> Result<McResult<f64>> {
    if outer < 2 || inner < 1 {
        return Err(Error::validation("reps: need at least two outer and one inner replication"));
    }
    let per_outer: Vec<Result<Vec<Result<Cell, String>>>> = (0..outer)
        .into_par_iter()
        .map(|o| {
            let mut rng = stream_rng(seed, o as u64 + 1);
            let (science, n_t) = framework.draw(&mut rng)?;
            let design = Design::from_counts(&science, &n_t)?;
            let mut cells: Vec<Result<Cell, String>> = vec![Ok(Cell::default()); estimators.len()];
            for _ in 0..inner {
                let a = draw_assignment(&design, Mechanism::Blocked, &mut rng);
                for (cell, value) in cells.iter_mut().zip(evaluate_all(&science, &a, estimators)) {
                    if let (Ok(c), Ok((t, v))) = (&mut *cell, &value) {
                        c.v += v;
                        c.v2 += v * v;
                        c.t += t;
                        c.t2 += t * t;
                    } else if let (Ok(_), Err(e)) = (&*cell, value) {
                        *cell = Err(e);
                    }
                }
            }
            let m = inner as f64;
            Ok(cells
                .into_iter()
                .map(|c| c.map(|c| Cell { v: c.v / m, v2: c.v2 / m, t: c.t / m, t2: c.t2 / m }))
                .collect())
        })
        .collect();
    let per_outer = per_outer.into_iter().collect::<Result<Vec<_>>>()?;
    let total = (outer * inner) as f64;
    let scale = total / (total - 1.0);
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (i, &id) in estimators.iter().enumerate() {
        let cells: Result<Vec<Cell>, String> = per_outer.iter().map(|d| d[i].clone()).collect();
        let cells = match cells {
            Ok(c) => c,
            Err(e) => {
                warnings.push(format!("{id} skipped: {e}"));
                continue;
            }
        };
        let a: Vec<f64> = cells.iter().map(|c| c.v).collect();
        let b: Vec<f64> = cells.iter().map(|c| c.t).collect();
        let c: Vec<f64> = cells.iter().map(|c| c.t2).collect();
        let d: Vec<f64> = cells.iter().map(|c| c.v2).collect();
        let (ma, mb, mc, md) = (scalar::mean(&a), scalar::mean(&b), scalar::mean(&c), scalar::mean(&d));
        let var_tau = scale * (mc - mb * mb);
        let var_vhat = scale * (md - ma * ma);
        let bias = ma - var_tau;
        let grad = [1.0, 2.0 * scale * mb, -scale];
        let cols = [&a, &b, &c];
        let mut quad = 0.0;
        for (gi, xi) in grad.iter().zip(cols) {
            for (gj, xj) in grad.iter().zip(cols) {
                quad += gi * gj * sample_cov(xi, xj);
            }
        }
        let mc_se = (quad.max(0.0) / outer as f64).sqrt();
        rows.push(McRow {
            estimator: id,
            mean_tau: mb,
            var_tau,
            mean_vhat: ma,
            true_var: var_tau,
            bias,
            rel_bias: (var_tau != 0.0).then(|| bias / var_tau),
            var_vhat,
            mc_se,
        });
    }
    Ok(McResult { reps: outer * inner, rows, warnings })
}

/// Share of the variation in (y0 + y1)/2 that lies between blocks.
/// Returns a warning instead of a ratio when there is no variation at all.
pub fn r2_blocks<T: Scalar>(science: &ScienceTable<T>) -> (T, Option<String>) {
    let two = T::count(2);
    let mids: Vec<Vec<T>> = science
        .blocks()
        .iter()
        .map(|b| b.y0.iter().zip(&b.y1).map(|(c, t)| (c.clone() + t.clone()) / two.clone()).collect())
        .collect();
    let all: Vec<T> = mids.iter().flatten().cloned().collect();
    let grand = scalar::mean(&all);
    let total = scalar::sum(all.iter().map(|v| square(v.clone() - grand.clone())));
    if total.is_zero() {
        return (T::zero(), Some("no variation in outcomes; R² set to 0".into()));
    }
    let between =
        scalar::sum(mids.iter().map(|m| T::count(m.len()) * square(scalar::mean(m) - grand.clone())));
    (between / total, None)
}

/// Simulation configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(rename = "K", default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub n_t: Vec<usize>,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default = "default_base_effect")]
    pub base_effect: f64,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ConfigMode,
    pub estimators: Vec<String>,
    #[serde(default)]
    pub framework: ConfigFramework,
    #[serde(default)]
    pub framework_params: Option<serde_json::Value>,
}

fn default_reps() -> usize {
    DEFAULT_REPS
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigMode {
    Exhaustive,
    #[default]
    Sampled,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigFramework {
    #[default]
    Finite,
    Srs,
    M1,
    M2,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SrsParams {
    #[serde(default)]
    control_slope: f64,
    #[serde(default)]
    effect_slope: f64,
    #[serde(default = "one")]
    inner_reps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct M1Params {
    #[serde(default)]
    strata: Option<Vec<oracle::Stratum<f64>>>,
    #[serde(default = "one")]
    inner_reps: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct M2Params {
    pool_sizes: Vec<usize>,
    pool_n_t: Vec<usize>,
    effects: Vec<f64>,
    #[serde(default = "one")]
    inner_reps: usize,
}

fn one() -> usize {
    1
}

fn params<P: serde::de::DeserializeOwned + Default>(value: &Option<serde_json::Value>) -> Result<P> {
    match value {
        None => Ok(P::default()),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::validation(format!("framework_params: {e}"))),
    }
}

impl Default for SrsParams {
    fn default() -> Self {
        SrsParams { control_slope: 0.0, effect_slope: 0.0, inner_reps: 1 }
    }
}

impl Default for M1Params {
    fn default() -> Self {
        M1Params { strata: None, inner_reps: 1 }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::validation(format!("invalid config: {e}")))
    }

    pub fn estimator_ids(&self) -> Result<Vec<EstimatorId>> {
        if self.estimators.is_empty() {
            return Err(Error::validation("estimators: at least one estimator is required"));
        }
        self.estimators
            .iter()
            .map(|s| s.parse().map_err(|e: Error| Error::validation(format!("estimators: {e}"))))
            .collect()
    }

    fn check_layout(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::validation("sizes: at least one block is required"));
        }
        if self.n_t.len() != self.sizes.len() {
            return Err(Error::validation("n_t: one treated count per block is required"));
        }
        if let Some(k) = self.k {
            if k != self.sizes.len() {
                return Err(Error::validation("K: must equal the number of sizes"));
            }
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::validation("rho: must lie in [-1, 1]"));
        }
        Ok(())
    }

    pub fn dgp(&self) -> DgpConfig {
        DgpConfig {
            sizes: self.sizes.clone(),
            rho: self.rho,
            a: self.a,
            b: self.b,
            base_effect: self.base_effect,
            seed: self.seed,
        }
    }

    /// Strata implied by the data generating process.
    fn dgp_strata(&self) -> Vec<oracle::Stratum<f64>> {
        let dgp = self.dgp();
        let n: usize = self.sizes.iter().sum();
        self.sizes
            .iter()
            .zip(&self.n_t)
            .enumerate()
            .map(|(i, (&m, &t))| oracle::Stratum {
                label: block_label(i + 1, self.sizes.len(), 'S'),
                weight: m as f64 / n as f64,
                mu_t: dgp.alpha(i + 1) + dgp.beta(i + 1),
                mu_c: dgp.alpha(i + 1),
                var_t: 1.0,
                var_c: 1.0,
                var_tc: 2.0 - 2.0 * self.rho,
                n_k: m,
                n_tk: t,
            })
            .collect()
    }

    /// Runs the configured study.
    pub fn run(&self) -> Result<McResult<f64>> {
        let ids = self.estimator_ids()?;
        if self.reps < 2 {
            return Err(Error::validation("reps: at least two replications are required"));
        }
        match self.framework {
            ConfigFramework::Finite => {
                self.check_layout()?;
                let science = generate_dgp(&self.dgp())?;
                let design = Design::from_counts(&science, &self.n_t)
                    .map_err(|e| Error::validation(format!("n_t: {e}")))?;
                let mode = match self.mode {
                    ConfigMode::Exhaustive => StudyMode::Exhaustive { cap: DEFAULT_ENUMERATION_CAP },
                    ConfigMode::Sampled => StudyMode::Sampled { reps: self.reps, seed: self.seed },
                };
                monte_carlo_study(&science, &design, &ids, Mechanism::Blocked, mode)
            }
            ConfigFramework::Srs => {
                self.check_layout()?;
                let p: SrsParams = params(&self.framework_params)?;
                let pop = SrsPopulation {
                    sizes: self.sizes.clone(),
                    n_t: self.n_t.clone(),
                    control_slope: p.control_slope,
                    effect_slope: p.effect_slope,
                    base_effect: self.base_effect,
                    rho: self.rho,
                };
                superpopulation_study(&Framework::Srs(pop), &ids, self.reps, p.inner_reps, self.seed)
            }
            ConfigFramework::M1 => {
                let p: M1Params = params(&self.framework_params)?;
                let strata = match p.strata {
                    Some(s) => s,
                    None => {
                        self.check_layout()?;
                        self.dgp_strata()
                    }
                };
                let pop = StrataPopulation::new(strata)?;
                superpopulation_study(&Framework::M1(pop), &ids, self.reps, p.inner_reps, self.seed)
            }
            ConfigFramework::M2 => {
                let v = self
                    .framework_params
                    .as_ref()
                    .ok_or_else(|| Error::validation("framework_params: required for m2"))?;
                let p: M2Params = serde_json::from_value(v.clone())
                    .map_err(|e| Error::validation(format!("framework_params: {e}")))?;
                let k = self.k.ok_or_else(|| Error::validation("K: required for m2"))?;
                let params = FrameParams { sizes: p.pool_sizes, n_t: p.pool_n_t, effects: p.effects, rho: self.rho, k };
                let frame = SamplingFrame::independent(&params, self.seed)?;
                superpopulation_study(&Framework::M2(frame), &ids, self.reps, p.inner_reps, self.seed)
            }
        }
    }
}
