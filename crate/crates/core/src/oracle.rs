//! Closed-form truths: true variances, estimator biases and design comparisons.
//!
//! Finite-sample oracles take a [`ScienceTable`] and a [`Design`]; stratified
//! sampling oracles take a [`StrataPopulation`], which carries its own design.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::data::{BlockClass, ScienceUnit};
use crate::error::{Error, Result};
use crate::estimators::EstimatorId;
use crate::scalar::{self, square, Scalar};

/// Both potential outcomes for every unit of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ScienceBlock<T> {
    pub block_id: String,
    pub y0: Vec<T>,
    pub y1: Vec<T>,
}

impl<T: Scalar> ScienceBlock<T> {
    pub fn n(&self) -> usize {
        self.y0.len()
    }

    pub fn mean_c(&self) -> T {
        scalar::mean(&self.y0)
    }

    pub fn mean_t(&self) -> T {
        scalar::mean(&self.y1)
    }

    /// Block SATE.
    pub fn tau(&self) -> T {
        self.mean_t() - self.mean_c()
    }

    pub fn s2_c(&self) -> T {
        scalar::sample_variance(&self.y0).expect("science blocks have two units")
    }

    pub fn s2_t(&self) -> T {
        scalar::sample_variance(&self.y1).expect("science blocks have two units")
    }

    /// Sample variance of the unit-level effects.
    pub fn s2_tc(&self) -> T {
        scalar::sample_variance(&self.effects()).expect("science blocks have two units")
    }

    pub fn effects(&self) -> Vec<T> {
        self.y1.iter().zip(&self.y0).map(|(a, b)| a.clone() - b.clone()).collect()
    }

    /// Variance of this block's difference in means with `n_t` treated units.
    pub fn true_var(&self, n_t: usize) -> T {
        self.s2_t() / T::count(n_t) + self.s2_c() / T::count(self.n() - n_t) - self.s2_tc() / T::count(self.n())
    }
}

/// The full potential-outcomes table, blocks ordered by label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScienceTable<T> {
    blocks: Vec<ScienceBlock<T>>,
}

impl<T: Scalar> ScienceTable<T> {
    pub fn new(units: Vec<ScienceUnit<T>>) -> Result<Self> {
        let mut grouped: BTreeMap<String, ScienceBlock<T>> = BTreeMap::new();
        for u in units {
            if !u.y0.is_finite_value() || !u.y1.is_finite_value() {
                return Err(Error::validation(format!("non-finite potential outcome in block {}", u.block_id)));
            }
            let b = grouped.entry(u.block_id.clone()).or_insert_with(|| ScienceBlock {
                block_id: u.block_id.clone(),
                y0: Vec::new(),
                y1: Vec::new(),
            });
            b.y0.push(u.y0);
            b.y1.push(u.y1);
        }
        Self::from_blocks(grouped.into_values().collect())
    }

    pub fn from_blocks(mut blocks: Vec<ScienceBlock<T>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::validation("science table is empty"));
        }
        blocks.sort_by(|a, b| a.block_id.cmp(&b.block_id));
        for w in blocks.windows(2) {
            if w[0].block_id == w[1].block_id {
                return Err(Error::validation(format!("duplicate block {}", w[0].block_id)));
            }
        }
        for b in &blocks {
            if b.y0.len() != b.y1.len() {
                return Err(Error::validation(format!("block {} has unequal outcome columns", b.block_id)));
            }
            if b.n() < 2 {
                return Err(Error::validation(format!("block {} has fewer than two units", b.block_id)));
            }
        }
        Ok(ScienceTable { blocks })
    }

    pub fn blocks(&self) -> &[ScienceBlock<T>] {
        &self.blocks
    }

    pub fn n(&self) -> usize {
        self.blocks.iter().map(ScienceBlock::n).sum()
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    fn all(&self, pick: impl Fn(&ScienceBlock<T>) -> &Vec<T>) -> Vec<T> {
        self.blocks.iter().flat_map(|b| pick(b).iter().cloned()).collect()
    }

    pub fn y0(&self) -> Vec<T> {
        self.all(|b| &b.y0)
    }

    pub fn y1(&self) -> Vec<T> {
        self.all(|b| &b.y1)
    }

    pub fn sate(&self) -> T {
        scalar::mean(&self.y1()) - scalar::mean(&self.y0())
    }

    pub fn s2_c(&self) -> T {
        scalar::sample_variance(&self.y0()).expect("at least two units")
    }

    pub fn s2_t(&self) -> T {
        scalar::sample_variance(&self.y1()).expect("at least two units")
    }

    pub fn s2_tc(&self) -> T {
        let effects: Vec<T> = self.blocks.iter().flat_map(ScienceBlock::effects).collect();
        scalar::sample_variance(&effects).expect("at least two units")
    }

    /// Block weights n_k/n.
    pub fn weights(&self) -> Vec<T> {
        let n = self.n();
        self.blocks.iter().map(|b| T::count(b.n()) / T::count(n)).collect()
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> ScienceTable<U> {
        ScienceTable {
            blocks: self
                .blocks
                .iter()
                .map(|b| ScienceBlock {
                    block_id: b.block_id.clone(),
                    y0: b.y0.iter().map(&f).collect(),
                    y1: b.y1.iter().map(&f).collect(),
                })
                .collect(),
        }
    }

    /// Only the named blocks.
    pub fn select(&self, ids: &[&str]) -> Self {
        ScienceTable {
            blocks: self.blocks.iter().filter(|b| ids.contains(&b.block_id.as_str())).cloned().collect(),
        }
    }
}

impl ScienceTable<f64> {
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        Self::new(crate::data::parse_science_csv(reader)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DesignBlock {
    pub block_id: String,
    pub n_k: usize,
    pub n_tk: usize,
}

impl DesignBlock {
    pub fn n_ck(&self) -> usize {
        self.n_k - self.n_tk
    }

    pub fn class(&self) -> BlockClass {
        BlockClass::of(self.n_tk, self.n_ck())
    }
}

/// Treated counts per block, ordered by label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Design {
    blocks: Vec<DesignBlock>,
}

impl Design {
    pub fn new(mut blocks: Vec<DesignBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::validation("design has no blocks"));
        }
        blocks.sort_by(|a, b| a.block_id.cmp(&b.block_id));
        for b in &blocks {
            if b.n_tk == 0 || b.n_tk >= b.n_k {
                return Err(Error::validation(format!(
                    "block {} needs between 1 and {} treated units, got {}",
                    b.block_id,
                    b.n_k.saturating_sub(1),
                    b.n_tk
                )));
            }
        }
        Ok(Design { blocks })
    }

    /// Design treating `n_t[k]` units in the k-th block of `science`.
    pub fn from_counts<T: Scalar>(science: &ScienceTable<T>, n_t: &[usize]) -> Result<Self> {
        if n_t.len() != science.k() {
            return Err(Error::validation(format!(
                "design lists {} blocks but the science table has {}",
                n_t.len(),
                science.k()
            )));
        }
        Self::new(
            science
                .blocks()
                .iter()
                .zip(n_t)
                .map(|(b, &n_tk)| DesignBlock { block_id: b.block_id.clone(), n_k: b.n(), n_tk })
                .collect(),
        )
    }

    /// Design with the same proportion `p` treated in every block; `p * n_k` must be whole.
    pub fn with_proportion<T: Scalar>(science: &ScienceTable<T>, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::validation("p must lie strictly between 0 and 1"));
        }
        let counts = science
            .blocks()
            .iter()
            .map(|b| {
                let x = p * b.n() as f64;
                if (x - x.round()).abs() > 1e-9 {
                    Err(Error::validation(format!("p * n_k is not whole in block {}", b.block_id)))
                } else {
                    Ok(x.round() as usize)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_counts(science, &counts)
    }

    /// Reads `block,n_t` rows.
    pub fn from_csv_reader<R: Read, T: Scalar>(reader: R, science: &ScienceTable<T>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            block: String,
            n_t: usize,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for (i, row) in rdr.deserialize::<Row>().enumerate() {
            let row = row.map_err(|e| Error::Parse { line: i as u64 + 2, message: e.to_string() })?;
            counts.insert(row.block, row.n_t);
        }
        let n_t = science
            .blocks()
            .iter()
            .map(|b| {
                counts
                    .get(&b.block_id)
                    .copied()
                    .ok_or_else(|| Error::validation(format!("design has no entry for block {}", b.block_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        if counts.len() != n_t.len() {
            return Err(Error::validation("design names blocks absent from the science table"));
        }
        Self::from_counts(science, &n_t)
    }

    pub fn blocks(&self) -> &[DesignBlock] {
        &self.blocks
    }

    pub fn n(&self) -> usize {
        self.blocks.iter().map(|b| b.n_k).sum()
    }

    pub fn n_t(&self) -> usize {
        self.blocks.iter().map(|b| b.n_tk).sum()
    }

    pub fn n_c(&self) -> usize {
        self.n() - self.n_t()
    }

    /// Exact equality of p_k by integer cross-multiplication.
    pub fn p_k_equal(&self) -> bool {
        let f = &self.blocks[0];
        self.blocks.iter().all(|b| b.n_tk * f.n_k == f.n_tk * b.n_k)
    }

    /// Checks labels and sizes against a science table.
    pub fn check<T: Scalar>(&self, science: &ScienceTable<T>) -> Result<()> {
        let matches = self.blocks.len() == science.k()
            && self
                .blocks
                .iter()
                .zip(science.blocks())
                .all(|(d, s)| d.block_id == s.block_id && d.n_k == s.n());
        if matches {
            Ok(())
        } else {
            Err(Error::validation("design block structure does not match the science table"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// n_t treated units drawn from the whole sample.
    Complete,
    /// n_tk treated units drawn within each block.
    Blocked,
}

/// True variance of the estimator the mechanism calls for: the difference in
/// grand means under complete randomization, the blocked estimator otherwise.
pub fn true_var_finite<T: Scalar>(science: &ScienceTable<T>, design: &Design, mechanism: Mechanism) -> Result<T> {
    design.check(science)?;
    Ok(match mechanism {
        Mechanism::Complete => {
            let n = science.n();
            science.s2_t() / T::count(design.n_t()) + science.s2_c() / T::count(design.n_c())
                - science.s2_tc() / T::count(n)
        }
        Mechanism::Blocked => blocked_true_var(science, design),
    })
}

fn blocked_true_var<T: Scalar>(science: &ScienceTable<T>, design: &Design) -> T {
    let n = T::count(design.n());
    scalar::sum(
        science
            .blocks()
            .iter()
            .zip(design.blocks())
            .map(|(b, d)| square(T::count(b.n()) / n.clone()) * b.true_var(d.n_tk)),
    )
}

/// Matched-pairs bias within size groups: sum over groups of
/// K_j m_j² / (n_s² (K_j − 1)) times the spread of block effects in the group.
fn stratified_bias<T: Scalar>(sizes: &[usize], taus: &[T]) -> Result<T> {
    let n_s = T::count(sizes.iter().sum());
    let mut groups: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for (&m, tau) in sizes.iter().zip(taus) {
        groups.entry(m).or_default().push(tau.clone());
    }
    let parts = groups
        .into_iter()
        .map(|(m, members)| {
            let k = members.len();
            if k < 2 {
                return Err(Error::inapplicable(format!("size group too small: {m}")));
            }
            let center = scalar::mean(&members);
            let spread = scalar::sum(members.into_iter().map(|t| square(t - center.clone())));
            Ok(T::count(k * m * m) / (square(n_s.clone()) * T::count(k - 1)) * spread)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(scalar::sum(parts))
}

fn unified_bias<T: Scalar>(sizes: &[usize], taus: &[T]) -> Result<T> {
    let w = crate::estimators::sbp_weights::<T>(sizes)?;
    let n = T::count(sizes.iter().sum());
    let center = scalar::sum(sizes.iter().zip(taus).map(|(&m, t)| T::count(m) * t.clone())) / n;
    Ok(scalar::sum(w.weights.into_iter().zip(taus).map(|(a, t)| a * square(t.clone() - center.clone()))))
}

/// Expectation of Σ_r w_r (Σ_j c_rj X_j)² for independent X_j with means `means` and variances `vars`.
fn quadratic_expectation<T: Scalar>(means: &[T], vars: &[T], rows: &[(T, Vec<T>)]) -> T {
    scalar::sum(rows.iter().map(|(w, c)| {
        let center = scalar::sum(c.iter().zip(means).map(|(c, m)| c.clone() * m.clone()));
        let spread = scalar::sum(c.iter().zip(vars).map(|(c, v)| square(c.clone()) * v.clone()));
        w.clone() * (square(center) + spread)
    }))
}

fn rct_yes_expectation<T: Scalar>(sizes: &[usize], means: &[T], vars: &[T], second: bool) -> Result<T> {
    let k = sizes.len();
    if k < 2 {
        return Err(Error::inapplicable("rct-yes requires at least two blocks"));
    }
    let n: usize = sizes.iter().sum();
    let nn = T::count(n);
    let mean_size = nn.clone() / T::count(k);
    let prefactor = T::one() / (T::count(k * (k - 1)) * square(mean_size.clone()));
    let rows: Vec<(T, Vec<T>)> = (0..k)
        .map(|r| {
            let c = (0..k)
                .map(|j| {
                    let share = T::count(sizes[j]) / nn.clone();
                    let own = if r == j { T::one() } else { T::zero() };
                    if second {
                        T::count(sizes[r]) * (own - share)
                    } else {
                        T::count(sizes[r]) * own - mean_size.clone() * share
                    }
                })
                .collect();
            (prefactor.clone(), c)
        })
        .collect();
    Ok(quadratic_expectation(means, vars, &rows))
}

/// Inputs shared by the finite and stratified bias oracles.
struct BlockMoments<T> {
    sizes: Vec<usize>,
    n_t: Vec<usize>,
    taus: Vec<T>,
    /// True variance of each block's difference in means.
    vars: Vec<T>,
    /// Expected s²_t and s²_c per block.
    s2_t: Vec<T>,
    s2_c: Vec<T>,
    /// Extra expectation of the big-block estimator per block, n_k² S²_tck / n_k / n² before scaling.
    neyman_excess: Vec<T>,
}

impl<T: Scalar> BlockMoments<T> {
    fn select(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.sizes.len()).filter(|&i| keep(i)).collect();
        let pick = |v: &Vec<T>| idx.iter().map(|&i| v[i].clone()).collect();
        BlockMoments {
            sizes: idx.iter().map(|&i| self.sizes[i]).collect(),
            n_t: idx.iter().map(|&i| self.n_t[i]).collect(),
            taus: pick(&self.taus),
            vars: pick(&self.vars),
            s2_t: pick(&self.s2_t),
            s2_c: pick(&self.s2_c),
            neyman_excess: pick(&self.neyman_excess),
        }
    }

    fn n(&self) -> usize {
        self.sizes.iter().sum()
    }

    fn class(&self, i: usize) -> BlockClass {
        BlockClass::of(self.n_t[i], self.sizes[i] - self.n_t[i])
    }

    fn true_var(&self) -> T {
        let n = T::count(self.n());
        scalar::sum(
            self.sizes.iter().zip(&self.vars).map(|(&m, v)| square(T::count(m) / n.clone()) * v.clone()),
        )
    }

    fn require_all_big(&self) -> Result<()> {
        if (0..self.sizes.len()).all(|i| self.class(i) == BlockClass::Big) {
            Ok(())
        } else {
            Err(Error::inapplicable("small blocks present; use hybrid-m or hybrid-p"))
        }
    }

    fn big_bias(&self) -> Result<T> {
        self.require_all_big()?;
        let n = T::count(self.n());
        Ok(scalar::sum(
            self.sizes.iter().zip(&self.neyman_excess).map(|(&m, e)| T::count(m) * e.clone() / square(n.clone())),
        ))
    }

    fn bias(&self, id: EstimatorId) -> Result<T> {
        match id {
            EstimatorId::Cr => Err(Error::inapplicable("cr bias is defined under complete randomization")),
            EstimatorId::Big => self.big_bias(),
            EstimatorId::SbEqual => {
                if self.sizes.len() < 2 {
                    return Err(Error::inapplicable("sb-equal requires at least two blocks"));
                }
                if self.sizes.iter().any(|&m| m != self.sizes[0]) {
                    return Err(Error::inapplicable("blocks differ in size; use sb-m or sb-p"));
                }
                stratified_bias(&self.sizes, &self.taus)
            }
            EstimatorId::SbM => stratified_bias(&self.sizes, &self.taus),
            EstimatorId::SbP => unified_bias(&self.sizes, &self.taus),
            EstimatorId::HybridM | EstimatorId::HybridP => {
                let small_id = if id == EstimatorId::HybridM { EstimatorId::SbM } else { EstimatorId::SbP };
                let big = self.select(|i| self.class(i) == BlockClass::Big);
                let small = self.select(|i| self.class(i) == BlockClass::Small);
                let n = T::count(self.n());
                match (big.sizes.is_empty(), small.sizes.is_empty()) {
                    (false, false) => Ok(square(T::count(big.n()) / n.clone()) * big.big_bias()?
                        + square(T::count(small.n()) / n) * small.bias(small_id)?),
                    (false, true) => big.big_bias(),
                    _ => small.bias(small_id),
                }
            }
            EstimatorId::RctYes | EstimatorId::RctYes2 => {
                let expected =
                    rct_yes_expectation(&self.sizes, &self.taus, &self.vars, id == EstimatorId::RctYes2)?;
                Ok(expected - self.true_var())
            }
            EstimatorId::Plugin => self.plugin_bias(),
            EstimatorId::Srs => Err(Error::inapplicable("srs bias is provided by the framework-specific oracle")),
        }
    }

    fn plugin_bias(&self) -> Result<T> {
        let big: Vec<usize> = (0..self.sizes.len()).filter(|&i| self.class(i) == BlockClass::Big).collect();
        if big.is_empty() {
            return Err(Error::inapplicable("no donor blocks for plug-in"));
        }
        let donor_units = T::count(big.iter().map(|&i| self.sizes[i]).sum());
        let pooled = |v: &Vec<T>| {
            scalar::sum(big.iter().map(|&i| T::count(self.sizes[i]) * v[i].clone())) / donor_units.clone()
        };
        let imputed_t = pooled(&self.s2_t);
        let imputed_c = pooled(&self.s2_c);
        let n = T::count(self.n());
        let expected = scalar::sum((0..self.sizes.len()).map(|i| {
            let n_t = self.n_t[i];
            let n_c = self.sizes[i] - n_t;
            let s2_t = if n_t >= 2 { self.s2_t[i].clone() } else { imputed_t.clone() };
            let s2_c = if n_c >= 2 { self.s2_c[i].clone() } else { imputed_c.clone() };
            square(T::count(self.sizes[i]) / n.clone()) * (s2_c / T::count(n_c) + s2_t / T::count(n_t))
        }));
        Ok(expected - self.true_var())
    }
}

fn finite_moments<T: Scalar>(science: &ScienceTable<T>, design: &Design) -> BlockMoments<T> {
    let blocks = science.blocks();
    BlockMoments {
        sizes: blocks.iter().map(ScienceBlock::n).collect(),
        n_t: design.blocks().iter().map(|d| d.n_tk).collect(),
        taus: blocks.iter().map(ScienceBlock::tau).collect(),
        vars: blocks.iter().zip(design.blocks()).map(|(b, d)| b.true_var(d.n_tk)).collect(),
        s2_t: blocks.iter().map(ScienceBlock::s2_t).collect(),
        s2_c: blocks.iter().map(ScienceBlock::s2_c).collect(),
        neyman_excess: blocks.iter().map(ScienceBlock::s2_tc).collect(),
    }
}

/// Finite-sample bias E[v̂] − var(τ̂). For `cr` the expectation and variance are
/// under complete randomization with the design's total treated count; every
/// other estimator is taken under blocked randomization.
pub fn bias_finite<T: Scalar>(science: &ScienceTable<T>, design: &Design, id: EstimatorId) -> Result<T> {
    design.check(science)?;
    match id {
        EstimatorId::Cr => Ok(science.s2_tc() / T::count(science.n())),
        EstimatorId::Srs => {
            finite_moments(science, design).require_all_big()?;
            Ok(science.s2_tc() / T::count(science.n()))
        }
        _ => finite_moments(science, design).bias(id),
    }
}

/// Σ w_k (x_k − Σ w_j x_j)².
pub fn var_k_weighted<T: Scalar>(values: &[T], weights: &[T]) -> Result<T> {
    cov_k_weighted(values, values, weights)
}

/// Σ w_k (x_k − x̄_w)(y_k − ȳ_w).
pub fn cov_k_weighted<T: Scalar>(x: &[T], y: &[T], weights: &[T]) -> Result<T> {
    if x.len() != weights.len() || y.len() != weights.len() {
        return Err(Error::validation("values and weights differ in length"));
    }
    let total = scalar::sum(weights.iter().cloned());
    if (total.to_f64_value() - 1.0).abs() > 1e-9 {
        return Err(Error::validation("weights must sum to 1"));
    }
    let mx = scalar::sum(x.iter().zip(weights).map(|(v, w)| v.clone() * w.clone()));
    let my = scalar::sum(y.iter().zip(weights).map(|(v, w)| v.clone() * w.clone()));
    Ok(scalar::sum(
        x.iter()
            .zip(y)
            .zip(weights)
            .map(|((a, b), w)| w.clone() * (a.clone() - mx.clone()) * (b.clone() - my.clone())),
    ))
}

/// (√r·c + t/√r)² without square roots, where r = p/(1−p) = n_t/n_c.
fn balanced_square<T: Scalar>(dc: T, dt: T, n_t: usize, n_c: usize) -> T {
    let r = T::count(n_t) / T::count(n_c);
    r.clone() * square(dc.clone()) + square(dt.clone()) / r + T::count(2) * dc * dt
}

/// Finite-sample blocking versus complete randomization, with its two parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FiniteComparison<T> {
    pub var_cr: T,
    pub var_blk: T,
    /// var_cr − var_blk from the per-unit closed form.
    pub difference: T,
    /// Between-block term, Var_k of the balanced block means over n − 1.
    pub between: T,
    /// Within-block term that is subtracted.
    pub within: T,
}

/// var(τ̂_cr) − var(τ̂_blk) for a design with equal treated proportions.
pub fn compare_designs_finite<T: Scalar>(science: &ScienceTable<T>, design: &Design) -> Result<FiniteComparison<T>> {
    design.check(science)?;
    if !design.p_k_equal() {
        return Err(Error::inapplicable(
            "treated proportions differ across blocks; use the stratified comparison with --p-cr or subtract the true variances directly",
        ));
    }
    let n = science.n();
    let (n_t, n_c) = (design.n_t(), design.n_c());
    let nn = T::count(n);
    let (grand_c, grand_t) = (scalar::mean(&science.y0()), scalar::mean(&science.y1()));
    let prefactor = T::one() / T::count(n * (n - 1));
    let mut between = Vec::new();
    let mut within = Vec::new();
    for b in science.blocks() {
        let (mc, mt) = (b.mean_c(), b.mean_t());
        let m = b.n();
        between.push(
            prefactor.clone()
                * T::count(m)
                * balanced_square(mc.clone() - grand_c.clone(), mt.clone() - grand_t.clone(), n_t, n_c),
        );
        let units = scalar::sum(
            b.y0.iter()
                .zip(&b.y1)
                .map(|(c, t)| balanced_square(c.clone() - mc.clone(), t.clone() - mt.clone(), n_t, n_c)),
        );
        within.push(prefactor.clone() * T::count(n - m) / (nn.clone() * T::count(m - 1)) * units);
    }
    let between = scalar::sum(between);
    let within = scalar::sum(within);
    Ok(FiniteComparison {
        var_cr: true_var_finite(science, design, Mechanism::Complete)?,
        var_blk: blocked_true_var(science, design),
        difference: between.clone() - within.clone(),
        between,
        within,
    })
}

/// E[var_neyman_cr] under blocked assignment minus var(τ̂_blk).
pub fn ignore_blocking_bias_finite<T: Scalar>(science: &ScienceTable<T>, design: &Design) -> Result<T> {
    design.check(science)?;
    if !design.p_k_equal() {
        return Err(Error::inapplicable("ignoring-blocking bias assumes equal treated proportions"));
    }
    let n = science.n();
    let nn = T::count(n);
    let (n_t, n_c) = (design.n_t(), design.n_c());
    let (grand_c, grand_t) = (scalar::mean(&science.y0()), scalar::mean(&science.y1()));
    let terms = science.blocks().iter().map(|b| {
        let m = b.n();
        let w = T::count(m) / nn.clone();
        let shrink = T::count(n - m) / square(nn.clone());
        let between = w.clone() * square(b.mean_c() - grand_c.clone()) / T::count(n_c - 1)
            + w * square(b.mean_t() - grand_t.clone()) / T::count(n_t - 1);
        let within = shrink.clone() * b.s2_c() / T::count(n_c - 1) + shrink * b.s2_t() / T::count(n_t - 1);
        between - within + T::count(m) * b.s2_tc() / square(nn.clone())
    });
    Ok(scalar::sum(terms))
}

/// One stratum of a stratified-sampling population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum<T> {
    pub label: String,
    pub weight: T,
    pub mu_t: T,
    pub mu_c: T,
    pub var_t: T,
    pub var_c: T,
    pub var_tc: T,
    pub n_k: usize,
    pub n_tk: usize,
}

impl<T: Scalar> Stratum<T> {
    pub fn tau(&self) -> T {
        self.mu_t.clone() - self.mu_c.clone()
    }

    pub fn n_ck(&self) -> usize {
        self.n_k - self.n_tk
    }

    /// Variance of this stratum's difference in means.
    pub fn block_var(&self) -> T {
        self.var_c.clone() / T::count(self.n_ck()) + self.var_t.clone() / T::count(self.n_tk)
    }
}

/// Strata of infinite size with a fixed number of sampled units each.
#[derive(Debug, Clone, PartialEq)]
pub struct StrataPopulation<T> {
    strata: Vec<Stratum<T>>,
}

impl<T: Scalar> StrataPopulation<T> {
    pub fn new(strata: Vec<Stratum<T>>) -> Result<Self> {
        if strata.is_empty() {
            return Err(Error::validation("population has no strata"));
        }
        let n: usize = strata.iter().map(|s| s.n_k).sum();
        for s in &strata {
            let label = &s.label;
            if s.n_tk == 0 || s.n_tk >= s.n_k {
                return Err(Error::validation(format!("stratum {label}: n_tk must lie in 1..n_k")));
            }
            let implied = s.n_k as f64 / n as f64;
            if (s.weight.to_f64_value() - implied).abs() > 1e-9 {
                return Err(Error::validation(format!("stratum {label}: weight must equal n_k/n = {implied}")));
            }
            let (vt, vc, vtc) = (s.var_t.to_f64_value(), s.var_c.to_f64_value(), s.var_tc.to_f64_value());
            if vt < 0.0 || vc < 0.0 || vtc < 0.0 {
                return Err(Error::validation(format!("stratum {label}: variances must be nonnegative")));
            }
            let bound = vt + vc + 2.0 * (vt * vc).sqrt();
            if vtc > bound * (1.0 + 1e-12) + 1e-12 {
                return Err(Error::validation(format!("stratum {label}: var_tc exceeds its covariance bound")));
            }
        }
        Ok(StrataPopulation { strata })
    }

    pub fn strata(&self) -> &[Stratum<T>] {
        &self.strata
    }

    pub fn n(&self) -> usize {
        self.strata.iter().map(|s| s.n_k).sum()
    }

    pub fn n_t(&self) -> usize {
        self.strata.iter().map(|s| s.n_tk).sum()
    }

    pub fn n_c(&self) -> usize {
        self.n() - self.n_t()
    }

    pub fn p_k_equal(&self) -> bool {
        let f = &self.strata[0];
        self.strata.iter().all(|s| s.n_tk * f.n_k == f.n_tk * s.n_k)
    }

    /// Weights n_k/n, exact in the scalar type.
    pub fn weights(&self) -> Vec<T> {
        let n = self.n();
        self.strata.iter().map(|s| T::count(s.n_k) / T::count(n)).collect()
    }

    pub fn tau(&self) -> T {
        scalar::sum(self.weights().into_iter().zip(&self.strata).map(|(w, s)| w * s.tau()))
    }

    fn column(&self, pick: impl Fn(&Stratum<T>) -> T) -> Vec<T> {
        self.strata.iter().map(pick).collect()
    }

    fn var_k(&self, pick: impl Fn(&Stratum<T>) -> T) -> T {
        var_k_weighted(&self.column(pick), &self.weights()).expect("weights sum to one")
    }

    fn cov_k(&self, x: impl Fn(&Stratum<T>) -> T, y: impl Fn(&Stratum<T>) -> T) -> T {
        cov_k_weighted(&self.column(x), &self.column(y), &self.weights()).expect("weights sum to one")
    }

    fn moments(&self) -> BlockMoments<T> {
        BlockMoments {
            sizes: self.strata.iter().map(|s| s.n_k).collect(),
            n_t: self.strata.iter().map(|s| s.n_tk).collect(),
            taus: self.column(Stratum::tau),
            vars: self.column(Stratum::block_var),
            s2_t: self.column(|s| s.var_t.clone()),
            s2_c: self.column(|s| s.var_c.clone()),
            neyman_excess: vec![T::zero(); self.strata.len()],
        }
    }
}

impl StrataPopulation<f64> {
    /// JSON array of strata objects.
    pub fn from_json(text: &str) -> Result<Self> {
        let strata: Vec<Stratum<f64>> =
            serde_json::from_str(text).map_err(|e| Error::validation(format!("invalid strata JSON: {e}")))?;
        Self::new(strata)
    }
}

/// Variance of the blocked estimator under stratified sampling.
pub fn true_var_m1<T: Scalar>(pop: &StrataPopulation<T>) -> T {
    pop.moments().true_var()
}

/// Variance of the difference in grand means when the same units are completely randomized
/// with `n_t` treated.
pub fn true_var_cr_m1<T: Scalar>(pop: &StrataPopulation<T>, n_t: usize) -> Result<T> {
    let n = pop.n();
    if n_t == 0 || n_t >= n {
        return Err(Error::validation("n_t must lie in 1..n"));
    }
    let (nt, nc, nn) = (T::count(n_t), T::count(n - n_t), T::count(n));
    let within = scalar::sum(
        pop.weights()
            .into_iter()
            .zip(pop.strata())
            .map(|(w, s)| w * (s.var_t.clone() / nt.clone() + s.var_c.clone() / nc.clone())),
    );
    let scale = nn.clone() / (nn - T::one());
    let between = scale.clone() * (pop.var_k(|s| s.mu_t.clone()) / nt + pop.var_k(|s| s.mu_c.clone()) / nc);
    Ok(within + between - pop.var_k(Stratum::tau) / T::count(n - 1))
}

/// Population bias E[v̂] − var(τ̂_blk) under stratified sampling and blocked assignment.
pub fn bias_m1<T: Scalar>(pop: &StrataPopulation<T>, id: EstimatorId) -> Result<T> {
    let m = pop.moments();
    match id {
        EstimatorId::Cr => Err(Error::inapplicable("use ignore_blocking_bias_m1 for cr under blocked assignment")),
        EstimatorId::Big => m.big_bias(),
        EstimatorId::Srs => {
            m.require_all_big()?;
            Ok(pop.var_k(Stratum::tau) / T::count(pop.n() - 1))
        }
        _ => m.bias(id),
    }
}

/// M1 comparison with equal treated proportions: a weighted variance, so always ≥ 0.
pub fn compare_designs_m1<T: Scalar>(pop: &StrataPopulation<T>) -> Result<T> {
    if !pop.p_k_equal() {
        return Err(Error::inapplicable("treated proportions differ across strata; use --p-cr"));
    }
    Ok(balanced_between(pop, pop.n_t(), pop.n_c()))
}

/// (1/(n−1)) Var_k(√(p/(1−p)) μ_c + √((1−p)/p) μ_t) with p = n_t/n, expanded without roots.
fn balanced_between<T: Scalar>(pop: &StrataPopulation<T>, n_t: usize, n_c: usize) -> T {
    let r = T::count(n_t) / T::count(n_c);
    let v = r.clone() * pop.var_k(|s| s.mu_c.clone())
        + pop.var_k(|s| s.mu_t.clone()) / r
        + T::count(2) * pop.cov_k(|s| s.mu_c.clone(), |s| s.mu_t.clone());
    v / T::count(pop.n() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnequalComparison<T> {
    /// Between-strata term at the complete-randomization proportion.
    pub between: T,
    /// Term driven by p_k differing from p.
    pub proportion_penalty: T,
    pub difference: T,
}

/// M1 comparison when the blocked design's p_k may differ from the complete design's p.
/// `n_t_cr` is the treated count of the complete design; p = n_t_cr/n.
pub fn compare_designs_unequal<T: Scalar>(pop: &StrataPopulation<T>, n_t_cr: usize) -> Result<UnequalComparison<T>> {
    let n = pop.n();
    if n_t_cr == 0 || n_t_cr >= n {
        return Err(Error::validation("p_cr must lie strictly between 0 and 1"));
    }
    let between = balanced_between(pop, n_t_cr, n - n_t_cr);
    let nn = T::count(n);
    let p = T::count(n_t_cr) / nn.clone();
    let penalty = scalar::sum(pop.strata().iter().map(|s| {
        let p_k = T::count(s.n_tk) / T::count(s.n_k);
        let lead = (p.clone() - p_k.clone()) * T::count(s.n_k) / square(nn.clone());
        lead * (s.var_c.clone() / ((T::one() - p_k.clone()) * (T::one() - p.clone()))
            - s.var_t.clone() / (p_k * p.clone()))
    }));
    Ok(UnequalComparison { difference: between.clone() + penalty.clone(), between, proportion_penalty: penalty })
}

/// var(τ̂_cr | SRS) − var(τ̂_cr | M1) with the population's own treated total.
pub fn srs_vs_m1_gap<T: Scalar>(pop: &StrataPopulation<T>) -> T {
    let (nt, nc) = (T::count(pop.n_t()), T::count(pop.n_c()));
    (pop.var_k(Stratum::tau) - pop.var_k(|s| s.mu_c.clone()) / nc - pop.var_k(|s| s.mu_t.clone()) / nt)
        / T::count(pop.n() - 1)
}

/// E[var_neyman_cr] under blocked assignment minus var(τ̂_blk), stratified sampling.
pub fn ignore_blocking_bias_m1<T: Scalar>(pop: &StrataPopulation<T>) -> Result<T> {
    if !pop.p_k_equal() {
        return Err(Error::inapplicable("ignoring-blocking bias assumes equal treated proportions"));
    }
    Ok(pop.var_k(|s| s.mu_c.clone()) / T::count(pop.n_c() - 1)
        + pop.var_k(|s| s.mu_t.clone()) / T::count(pop.n_t() - 1))
}
