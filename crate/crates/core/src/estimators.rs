//! Point estimators and the variance estimators for blocked designs.
//!
//! Every variance estimator takes an [`ExperimentSummary`] and uses the unit
//! count of the blocks it was given as `n`. The hybrid estimator relies on
//! this: it hands the small-block methods the small-block sub-summary, so
//! their weights and the half-size guard are computed with `n_small`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::data::{ArmOutcomes, BlockClass, BlockSummary, ExperimentSummary, ExperimentTable};
use crate::error::{Error, Result};
use crate::scalar::{self, square, Scalar};

/// User-facing estimator vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum EstimatorId {
    #[serde(rename = "cr")]
    Cr,
    #[serde(rename = "big")]
    Big,
    #[serde(rename = "sb-equal")]
    SbEqual,
    #[serde(rename = "sb-m")]
    SbM,
    #[serde(rename = "sb-p")]
    SbP,
    #[serde(rename = "hybrid-m")]
    HybridM,
    #[serde(rename = "hybrid-p")]
    HybridP,
    #[serde(rename = "srs")]
    Srs,
    #[serde(rename = "rct-yes")]
    RctYes,
    #[serde(rename = "rct-yes2")]
    RctYes2,
    #[serde(rename = "plugin")]
    Plugin,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 11] = [
        EstimatorId::Cr,
        EstimatorId::Big,
        EstimatorId::SbEqual,
        EstimatorId::SbM,
        EstimatorId::SbP,
        EstimatorId::HybridM,
        EstimatorId::HybridP,
        EstimatorId::Srs,
        EstimatorId::RctYes,
        EstimatorId::RctYes2,
        EstimatorId::Plugin,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorId::Cr => "cr",
            EstimatorId::Big => "big",
            EstimatorId::SbEqual => "sb-equal",
            EstimatorId::SbM => "sb-m",
            EstimatorId::SbP => "sb-p",
            EstimatorId::HybridM => "hybrid-m",
            EstimatorId::HybridP => "hybrid-p",
            EstimatorId::Srs => "srs",
            EstimatorId::RctYes => "rct-yes",
            EstimatorId::RctYes2 => "rct-yes2",
            EstimatorId::Plugin => "plugin",
        }
    }

    /// Parses a comma-separated list such as `big,hybrid-p`.
    pub fn parse_list(s: &str) -> Result<Vec<EstimatorId>> {
        let ids = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::validation("at least one estimator must be requested"));
        }
        Ok(ids)
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown estimator {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallMethod {
    /// Size-dependent weights over all small blocks.
    Unified,
    /// Matched-pairs estimator within size groups, then combined.
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RctVariant {
    /// Block-size weights inside the square.
    V1,
    /// Squared block-size weights outside the square.
    V2,
}

pub fn tau_hat_blk<T: Scalar>(summary: &ExperimentSummary<T>) -> T {
    let n = T::count(summary.n);
    scalar::sum(summary.blocks.iter().map(|b| T::count(b.n_k) * b.tau_hat.clone())) / n
}

/// Difference in grand arm means, ignoring blocks.
pub fn tau_hat_cr<T: Scalar>(table: &ExperimentTable<T>) -> Result<T> {
    tau_hat_cr_arms(&table.pooled_arms())
}

pub fn tau_hat_cr_arms<T: Scalar>(arms: &ArmOutcomes<T>) -> Result<T> {
    if arms.treated.is_empty() || arms.control.is_empty() {
        return Err(Error::validation("an arm is empty overall"));
    }
    Ok(scalar::mean(&arms.treated) - scalar::mean(&arms.control))
}

/// Classic s²_c/n_c + s²_t/n_t.
pub fn var_neyman_cr<T: Scalar>(table: &ExperimentTable<T>) -> Result<T> {
    var_neyman_cr_arms(&table.pooled_arms())
}

pub fn var_neyman_cr_arms<T: Scalar>(arms: &ArmOutcomes<T>) -> Result<T> {
    match (scalar::sample_variance(&arms.treated), scalar::sample_variance(&arms.control)) {
        (Some(s2_t), Some(s2_c)) => {
            Ok(s2_c / T::count(arms.control.len()) + s2_t / T::count(arms.treated.len()))
        }
        _ => Err(Error::inapplicable("insufficient units in arm: need at least two treated and two control")),
    }
}

fn share<T: Scalar>(part: usize, whole: usize) -> T {
    T::count(part) / T::count(whole)
}

/// Weighted sum of within-block Neyman variances. Every block must be big.
pub fn var_big_blocks<T: Scalar>(summary: &ExperimentSummary<T>) -> Result<T> {
    let small: Vec<&str> = summary
        .blocks
        .iter()
        .filter(|b| b.class == BlockClass::Small)
        .map(|b| b.block_id.as_str())
        .collect();
    if !small.is_empty() {
        return Err(Error::inapplicable(format!(
            "small blocks present ({}); use hybrid-m or hybrid-p",
            small.join(", ")
        )));
    }
    Ok(scalar::sum(summary.blocks.iter().map(|b| {
        square(share::<T>(b.n_k, summary.n)) * b.neyman_variance().expect("big block has both variances")
    })))
}

fn squared_deviations<'a, T: Scalar>(
    blocks: impl IntoIterator<Item = &'a BlockSummary<T>>,
    center: &T,
) -> Vec<T> {
    blocks.into_iter().map(|b| square(b.tau_hat.clone() - center.clone())).collect()
}

/// Matched-pairs estimator for blocks of one common size.
pub fn var_small_equal<T: Scalar>(summary: &ExperimentSummary<T>) -> Result<T> {
    let k = summary.k();
    if k < 2 {
        return Err(Error::inapplicable("sb-equal requires at least two blocks"));
    }
    let size = summary.blocks[0].n_k;
    if summary.blocks.iter().any(|b| b.n_k != size) {
        return Err(Error::inapplicable("blocks differ in size; use sb-m or sb-p"));
    }
    let tau = tau_hat_blk(summary);
    Ok(scalar::sum(squared_deviations(&summary.blocks, &tau)) / T::count(k * (k - 1)))
}

/// Matched-pairs estimator within each size group, combined with weights N_j².
pub fn var_small_stratified<T: Scalar>(summary: &ExperimentSummary<T>) -> Result<T> {
    let groups = crate::data::size_groups(&summary.blocks);
    if let Some(g) = groups.iter().find(|g| g.count < 2) {
        return Err(Error::inapplicable(format!("size group too small: {}", g.size)));
    }
    let total_units = T::count(groups.iter().map(|g| g.units).sum());
    let parts = groups.iter().map(|g| {
        let members: Vec<&BlockSummary<T>> = summary.blocks.iter().filter(|b| b.n_k == g.size).collect();
        let center = scalar::sum(members.iter().map(|b| b.tau_hat.clone())) / T::count(g.count);
        let within = scalar::sum(squared_deviations(members.iter().copied(), &center))
            / T::count(g.count * (g.count - 1));
        square(T::count(g.units)) * within
    });
    Ok(scalar::sum(parts) / square(total_units))
}

/// Weights of the unified small-block estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SbpWeights<T> {
    /// a_k, one per block in input order.
    pub weights: Vec<T>,
    /// C from its closed form; equals the sum of `weights`.
    pub total: T,
}

/// Equal sizes use the reduced form a_k = 1/(K(K−1)), which stays defined for two blocks
/// where the general closed form is 0/0.
pub fn sbp_weights<T: Scalar>(sizes: &[usize]) -> Result<SbpWeights<T>> {
    let k = sizes.len();
    if k >= 2 && sizes.iter().all(|&m| m == sizes[0]) {
        let a = T::one() / T::count(k * (k - 1));
        return Ok(SbpWeights { weights: vec![a; k], total: T::one() / T::count(k - 1) });
    }
    sbp_weights_general(sizes)
}

/// The general closed form, with the half-size guard and no equal-size shortcut.
pub fn sbp_weights_general<T: Scalar>(sizes: &[usize]) -> Result<SbpWeights<T>> {
    let n: usize = sizes.iter().sum();
    if let Some(&big) = sizes.iter().find(|&&m| 2 * m >= n) {
        return Err(Error::inapplicable(format!(
            "half-size guard violated: a block of {big} units among {n} units"
        )));
    }
    let nn = T::count(n);
    let ratios: Vec<T> = sizes
        .iter()
        .map(|&m| square(T::count(m)) / T::count(n - 2 * m))
        .collect();
    let ratio_sum = scalar::sum(ratios.iter().cloned());
    let denom = nn + ratio_sum.clone();
    let weights = ratios.into_iter().map(|r| r / denom.clone()).collect();
    Ok(SbpWeights { weights, total: ratio_sum / denom })
}

/// Unified small-block estimator: sum of a_k (tau_k - tau)².
pub fn var_small_unified<T: Scalar>(summary: &ExperimentSummary<T>) -> Result<T> {
    let sizes: Vec<usize> = summary.blocks.iter().map(|b| b.n_k).collect();
    let w = sbp_weights::<T>(&sizes)?;
    let tau = tau_hat_blk(summary);
    Ok(scalar::sum(
        w.weights
            .into_iter()
            .zip(squared_deviations(&summary.blocks, &tau))
            .map(|(a, d)| a * d),
    ))
}

/// Unified estimator applied within each user-supplied group, combined with (n_g/n)² weights.
pub fn var_grouped_unified<T: Scalar>(summary: &ExperimentSummary<T>, groups: &[Vec<String>]) -> Result<T> {
    let mut seen: Vec<&String> = groups.iter().flatten().collect();
    seen.sort();
    let all: Vec<&String> = summary.blocks.iter().map(|b| &b.block_id).collect();
    if seen != all {
        return Err(Error::validation("groups must partition the blocks exactly"));
    }
    let parts = groups
        .iter()
        .map(|g| {
            let sub = summary.select(g)?;
            Ok(square(share::<T>(sub.n, summary.n)) * var_small_unified(&sub)?)
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(scalar::sum(parts))
}

/// Combine big-block and small-block variance estimates by unit share.
pub fn var_hybrid<T: Scalar>(summary: &ExperimentSummary<T>, method: SmallMethod) -> Result<(T, Vec<String>)> {
    let small_var = |s: &ExperimentSummary<T>| match method {
        SmallMethod::Unified => var_small_unified(s),
        SmallMethod::Stratified => var_small_stratified(s),
    };
    let big = summary.restrict(BlockClass::Big);
    let small = summary.restrict(BlockClass::Small);
    match (big, small) {
        (Some(big), Some(small)) => {
            let v_big = var_big_blocks(&big)?;
            let v_small = small_var(&small)?;
            let w_big = square(share::<T>(big.n, summary.n));
            let w_small = square(share::<T>(small.n, summary.n));
            Ok((w_big * v_big + w_small * v_small, Vec::new()))
        }
        (Some(big), None) => Ok((
            var_big_blocks(&big)?,
            vec!["no small blocks; hybrid reduces to the big-block estimator".into()],
        )),
        (None, Some(small)) => Ok((
            small_var(&small)?,
            vec!["no big blocks; hybrid reduces to the small-block estimator".into()],
        )),
        (None, None) => unreachable!("summary has at least one block"),
    }
}

/// Estimator unbiased under simple random sampling with flexible blocks.
pub fn var_srs_unbiased<T: Scalar>(summary: &ExperimentSummary<T>) -> Result<T> {
    if let Some(b) = summary.blocks.iter().find(|b| b.class == BlockClass::Small) {
        return Err(Error::inapplicable(format!(
            "srs needs two units per arm in every block; block {} has a singleton arm",
            b.block_id
        )));
    }
    let n = summary.n;
    let denom = T::count(n * (n - 1));
    let tau = tau_hat_blk(summary);
    let within = scalar::sum(summary.blocks.iter().map(|b| {
        T::count(b.n_k * (b.n_k - 1)) / denom.clone() * b.neyman_variance().expect("big block")
    }));
    let between = scalar::sum(
        summary
            .blocks
            .iter()
            .map(|b| T::count(b.n_k) / denom.clone() * square(b.tau_hat.clone() - tau.clone())),
    );
    Ok(within + between)
}

/// The two RCT-YES style estimators with block-size weights.
pub fn var_rct_yes<T: Scalar>(summary: &ExperimentSummary<T>, variant: RctVariant) -> Result<T> {
    let k = summary.k();
    if k < 2 {
        return Err(Error::inapplicable("rct-yes requires at least two blocks"));
    }
    let kk = T::count(k);
    let mean_size = T::count(summary.n) / kk.clone();
    let tau = tau_hat_blk(summary);
    let terms = summary.blocks.iter().map(|b| {
        let nk = T::count(b.n_k);
        match variant {
            RctVariant::V1 => square(nk * b.tau_hat.clone() - mean_size.clone() * tau.clone()),
            RctVariant::V2 => square(nk) * square(b.tau_hat.clone() - tau.clone()),
        }
    });
    Ok(scalar::sum(terms) / (kk.clone() * (kk - T::one()) * square(mean_size)))
}

/// Missing arm variances of small blocks imputed from big blocks, then the big-block formula.
pub fn var_plug_in<T: Scalar>(summary: &ExperimentSummary<T>) -> Result<(T, Vec<String>)> {
    let donors: Vec<&BlockSummary<T>> = summary.blocks.iter().filter(|b| b.class == BlockClass::Big).collect();
    if donors.is_empty() {
        return Err(Error::inapplicable("no donor blocks for plug-in"));
    }
    let donor_units = T::count(donors.iter().map(|b| b.n_k).sum());
    let pooled = |pick: fn(&BlockSummary<T>) -> T| {
        scalar::sum(donors.iter().map(|b| T::count(b.n_k) * pick(b))) / donor_units.clone()
    };
    let s2_t_imputed = pooled(|b| b.s2_t.clone().expect("big block"));
    let s2_c_imputed = pooled(|b| b.s2_c.clone().expect("big block"));
    let mut imputed = 0usize;
    let total = scalar::sum(summary.blocks.iter().map(|b| {
        let s2_t = b.s2_t.clone().unwrap_or_else(|| {
            imputed += 1;
            s2_t_imputed.clone()
        });
        let s2_c = b.s2_c.clone().unwrap_or_else(|| {
            imputed += 1;
            s2_c_imputed.clone()
        });
        square(share::<T>(b.n_k, summary.n)) * (s2_c / T::count(b.n_ck) + s2_t / T::count(b.n_tk))
    }));
    let mut warnings = Vec::new();
    if imputed > 0 {
        warnings.push(format!(
            "{imputed} arm variance(s) imputed from big-block donors; valid only if small blocks share their variances"
        ));
    }
    Ok((total, warnings))
}

/// Per-block share of the blocked point estimate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockContribution<T> {
    pub block_id: String,
    pub weight: T,
    pub contribution: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport<T> {
    pub estimator: EstimatorId,
    pub estimate: T,
    pub variance: T,
    /// Square root of `variance`.
    pub se: T,
    pub per_block: Vec<BlockContribution<T>>,
    pub warnings: Vec<String>,
}

/// Pooled arms plus the blocked summary, which may fail independently.
#[derive(Debug)]
pub struct Observed<T> {
    pub pooled: ArmOutcomes<T>,
    pub summary: Result<ExperimentSummary<T>>,
}

impl<T: Scalar> Observed<T> {
    pub fn from_table(table: &ExperimentTable<T>) -> Self {
        Observed { pooled: table.pooled_arms(), summary: crate::data::summarize(table) }
    }

    fn summary(&self) -> Result<&ExperimentSummary<T>> {
        self.summary.as_ref().map_err(|e| match e {
            Error::NoOverlap(b) => Error::NoOverlap(b.clone()),
            other => Error::validation(other.to_string()),
        })
    }
}

const HETEROGENEITY_NOTE: &str =
    "small-block variance is conservative when block average effects differ";

/// Run one estimator end to end.
pub fn evaluate<T: Scalar>(id: EstimatorId, obs: &Observed<T>) -> Result<EstimateReport<T>> {
    let mut warnings = Vec::new();
    if id == EstimatorId::Cr {
        let estimate = tau_hat_cr_arms(&obs.pooled)?;
        let variance = var_neyman_cr_arms(&obs.pooled)?;
        if obs.summary.as_ref().map(|s| s.k() > 1).unwrap_or(true) {
            warnings.push("ignores blocking".to_string());
        }
        return Ok(EstimateReport {
            estimator: id,
            estimate,
            se: variance.sqrt_value(),
            variance,
            per_block: Vec::new(),
            warnings,
        });
    }
    let summary = obs.summary()?;
    let has_small = summary.n_small > 0;
    let has_big = summary.n_small < summary.n;
    let variance = match id {
        EstimatorId::Cr => unreachable!(),
        EstimatorId::Big => var_big_blocks(summary)?,
        EstimatorId::SbEqual | EstimatorId::SbM | EstimatorId::SbP => {
            if has_big {
                warnings.push("applied to big blocks as well; a hybrid estimator is preferable".into());
            }
            warnings.push(HETEROGENEITY_NOTE.into());
            match id {
                EstimatorId::SbEqual => var_small_equal(summary)?,
                EstimatorId::SbM => var_small_stratified(summary)?,
                _ => var_small_unified(summary)?,
            }
        }
        EstimatorId::HybridM | EstimatorId::HybridP => {
            let method = if id == EstimatorId::HybridM { SmallMethod::Stratified } else { SmallMethod::Unified };
            let (v, w) = var_hybrid(summary, method)?;
            warnings.extend(w);
            if has_small {
                warnings.push(HETEROGENEITY_NOTE.into());
            }
            v
        }
        EstimatorId::Srs => var_srs_unbiased(summary)?,
        EstimatorId::RctYes => var_rct_yes(summary, RctVariant::V1)?,
        EstimatorId::RctYes2 => var_rct_yes(summary, RctVariant::V2)?,
        EstimatorId::Plugin => {
            let (v, w) = var_plug_in(summary)?;
            warnings.extend(w);
            v
        }
    };
    let per_block = summary
        .blocks
        .iter()
        .map(|b| {
            let weight = share::<T>(b.n_k, summary.n);
            BlockContribution {
                block_id: b.block_id.clone(),
                contribution: weight.clone() * b.tau_hat.clone(),
                weight,
            }
        })
        .collect();
    Ok(EstimateReport {
        estimator: id,
        estimate: tau_hat_blk(summary),
        se: variance.sqrt_value(),
        variance,
        per_block,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    fn block(id: &str, t: &[f64], c: &[f64]) -> BlockSummary<f64> {
        BlockSummary::from_arms(id, t, c).unwrap()
    }

    fn summary(blocks: Vec<BlockSummary<f64>>) -> ExperimentSummary<f64> {
        ExperimentSummary::from_blocks(blocks).unwrap()
    }

    /// Small block of `size` units with one treated unit and the given effect estimate.
    fn small(id: &str, size: usize, tau: f64) -> BlockSummary<f64> {
        let control = vec![0.0; size - 1];
        block(id, &[tau], &control)
    }

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }

    #[test]
    fn blocked_point_estimates() {
        let s = summary(vec![small("a", 2, 2.0), small("b", 2, 4.0)]);
        close(tau_hat_blk(&s), 3.0);
        let s = summary(vec![
            block("a", &[2.0, 2.0], &[0.0, 0.0]),
            block("b", &[5.0], &[0.0]),
        ]);
        close(tau_hat_blk(&s), 3.0);
    }

    #[test]
    fn single_block_reduces_to_difference_in_means() {
        let t = ExperimentTable::parse_csv("unit_id,block,z,y\n1,A,1,3\n2,A,1,5\n3,A,0,1\n4,A,0,1").unwrap();
        let s = crate::data::summarize(&t).unwrap();
        close(tau_hat_blk(&s), tau_hat_cr(&t).unwrap());
        close(tau_hat_cr(&t).unwrap(), 3.0);
        close(var_big_blocks(&s).unwrap(), var_neyman_cr(&t).unwrap());
        close(var_srs_unbiased(&s).unwrap(), var_neyman_cr(&t).unwrap());
    }

    #[test]
    fn cr_point_estimate_ignores_blocks() {
        // p_k = 1/2 in every block, yet the arm-weighted and block-weighted estimates differ
        // when blocks of different size have different effects.
        let rows = "unit_id,block,z,y\n1,A,1,4\n2,A,0,0\n3,B,1,1\n4,B,1,1\n5,B,0,0\n6,B,0,0\n7,C,1,10\n8,C,0,10";
        let t = ExperimentTable::parse_csv(rows).unwrap();
        let s = crate::data::summarize(&t).unwrap();
        assert!(s.p_k_equal);
        // treated mean (4+1+1+10)/4 = 4, control mean 10/4 = 2.5
        close(tau_hat_cr(&t).unwrap(), 1.5);
        // block estimate (2*4 + 4*1 + 2*0)/8 = 1.5: with equal p_k the two coincide
        close(tau_hat_blk(&s), 1.5);
        let unequal = "unit_id,block,z,y\n1,A,1,4\n2,A,0,0\n3,B,1,1\n4,B,0,0\n5,B,0,0\n6,B,0,0";
        let t = ExperimentTable::parse_csv(unequal).unwrap();
        let s = crate::data::summarize(&t).unwrap();
        // cr: (4+1)/2 - 0 = 2.5; blk: (2*4 + 4*1)/6 = 2
        close(tau_hat_cr(&t).unwrap(), 2.5);
        close(tau_hat_blk(&s), 2.0);
    }

    #[test]
    fn neyman_cr_cases() {
        let arms = ArmOutcomes { treated: vec![1.0, 3.0], control: vec![0.0, 2.0, 4.0] };
        close(var_neyman_cr_arms(&arms).unwrap(), 1.0 + 4.0 / 3.0);
        let doubled = ArmOutcomes {
            treated: arms.treated.iter().map(|x| 2.0 * x).collect(),
            control: arms.control.iter().map(|x| 2.0 * x).collect(),
        };
        close(var_neyman_cr_arms(&doubled).unwrap(), 4.0 * (1.0 + 4.0 / 3.0));
        let flat = ArmOutcomes { treated: vec![2.0, 2.0], control: vec![2.0, 2.0] };
        close(var_neyman_cr_arms(&flat).unwrap(), 0.0);
        let thin = ArmOutcomes { treated: vec![2.0], control: vec![2.0, 2.0] };
        assert!(var_neyman_cr_arms(&thin).unwrap_err().to_string().contains("insufficient units in arm"));
    }

    #[test]
    fn big_block_estimator_by_hand() {
        let s = summary(vec![
            block("a", &[0.0, 2.0], &[0.0, 2.0]),
            block("b", &[1.0, 3.0], &[5.0, 7.0]),
        ]);
        close(var_big_blocks(&s).unwrap(), 1.0);
        let flat = summary(vec![block("a", &[1.0, 1.0], &[0.0, 0.0]), block("b", &[3.0, 3.0], &[2.0, 2.0])]);
        close(var_big_blocks(&flat).unwrap(), 0.0);
        let mixed = summary(vec![block("a", &[1.0, 1.0], &[0.0, 0.0]), small("b", 2, 1.0)]);
        let err = var_big_blocks(&mixed).unwrap_err().to_string();
        assert!(err.contains("hybrid"), "{err}");
    }

    #[test]
    fn equal_size_small_blocks() {
        close(var_small_equal(&summary(vec![small("a", 2, 1.0), small("b", 2, 3.0)])).unwrap(), 1.0);
        close(var_small_equal(&summary(vec![small("a", 3, 2.0), small("b", 3, 2.0)])).unwrap(), 0.0);
        let three = summary(vec![small("a", 2, 0.0), small("b", 2, 2.0), small("c", 2, 4.0)]);
        close(var_small_equal(&three).unwrap(), 4.0 / 3.0);
        assert!(var_small_equal(&summary(vec![small("a", 2, 0.0)])).is_err());
        let uneven = summary(vec![small("a", 2, 0.0), small("b", 3, 2.0)]);
        assert!(var_small_equal(&uneven).unwrap_err().to_string().contains("sb-m or sb-p"));
    }

    #[test]
    fn stratified_small_blocks() {
        let s = summary(vec![small("a", 2, 1.0), small("b", 2, 3.0), small("c", 3, 0.0), small("d", 3, 4.0)]);
        close(var_small_stratified(&s).unwrap(), 1.6);
        let same = summary(vec![small("a", 2, 0.0), small("b", 2, 2.0), small("c", 2, 4.0)]);
        close(var_small_stratified(&same).unwrap(), var_small_equal(&same).unwrap());
        let flat = summary(vec![small("a", 2, 1.0), small("b", 2, 1.0), small("c", 3, 5.0), small("d", 3, 5.0)]);
        close(var_small_stratified(&flat).unwrap(), 0.0);
        let lone = summary(vec![small("a", 2, 1.0), small("b", 2, 3.0), small("c", 3, 0.0)]);
        assert_eq!(var_small_stratified(&lone).unwrap_err().to_string(), "size group too small: 3");
    }

    #[test]
    fn unified_weights_by_hand() {
        let w = sbp_weights::<f64>(&[2, 3, 4]).unwrap();
        close(w.weights[0], 4.0 / 144.0);
        close(w.weights[1], 9.0 / 86.4);
        close(w.weights[2], 16.0 / 28.8);
        close(w.total, 0.6875);
        close(w.weights.iter().sum(), w.total);
        assert!(sbp_weights::<f64>(&[2, 3]).unwrap_err().to_string().contains("half-size guard"));
        close(sbp_weights::<f64>(&[2, 2]).unwrap().weights[0], 0.5);
        assert!(sbp_weights::<f64>(&[4]).is_err());
    }

    #[test]
    fn unified_weights_equal_sizes_exact() {
        for k in 2..=10usize {
            let w = sbp_weights::<BigRational>(&vec![2; k]).unwrap();
            let expect = BigRational::new(1.into(), ((k * (k - 1)) as i64).into());
            assert!(w.weights.iter().all(|a| *a == expect));
            if k > 2 {
                assert_eq!(sbp_weights_general::<BigRational>(&vec![3; k]).unwrap().weights[0], expect);
            } else {
                assert!(sbp_weights_general::<BigRational>(&vec![3; k]).is_err());
            }
            assert_eq!(w.total, BigRational::new(1.into(), ((k - 1) as i64).into()));
        }
    }

    #[test]
    fn unified_estimator_by_hand() {
        let s = summary(vec![small("a", 2, 1.0), small("b", 3, 2.0), small("c", 4, 3.0)]);
        close(tau_hat_blk(&s), 20.0 / 9.0);
        // a_k (tau_k - 20/9)^2 with the weights above
        let expect = 4.0 / 144.0 * (11.0f64 / 9.0).powi(2)
            + 9.0 / 86.4 * (2.0f64 / 9.0).powi(2)
            + 16.0 / 28.8 * (7.0f64 / 9.0).powi(2);
        close(var_small_unified(&s).unwrap(), expect);
        assert!((var_small_unified(&s).unwrap() - 0.3827160).abs() < 1e-6);
        let same = summary(vec![small("a", 2, 0.0), small("b", 2, 2.0), small("c", 2, 7.0)]);
        close(var_small_unified(&same).unwrap(), var_small_equal(&same).unwrap());
        let flat = summary(vec![small("a", 2, 1.0), small("b", 3, 1.0), small("c", 4, 1.0)]);
        close(var_small_unified(&flat).unwrap(), 0.0);
    }

    #[test]
    fn grouped_unified_matches_components() {
        let s = summary(vec![
            small("a", 2, 1.0),
            small("b", 2, 2.0),
            small("c", 3, 0.0),
            small("d", 2, 5.0),
            small("e", 3, 1.0),
            small("f", 2, 2.0),
        ]);
        let g1 = vec!["a".to_string(), "b".to_string(), "d".to_string()];
        let g2 = vec!["c".to_string(), "e".to_string(), "f".to_string()];
        let v = var_grouped_unified(&s, &[g1.clone(), g2.clone()]).unwrap();
        let s1 = s.select(&g1).unwrap();
        let s2 = s.select(&g2).unwrap();
        let expect = (6.0f64 / 14.0).powi(2) * var_small_unified(&s1).unwrap()
            + (8.0f64 / 14.0).powi(2) * var_small_unified(&s2).unwrap();
        close(v, expect);
        assert!(var_grouped_unified(&s, &[g1]).is_err());
    }

    #[test]
    fn hybrid_combination_and_reductions() {
        // n = 10, n_small = 4
        let big = block("big", &[0.0, 2.0, 4.0], &[1.0, 3.0, 5.0]);
        let s = summary(vec![big.clone(), small("p", 2, 1.0), small("q", 2, 3.0)]);
        let v_big = var_big_blocks(&s.restrict(BlockClass::Big).unwrap()).unwrap();
        let v_small = 1.0; // pairs with tau {1, 3}
        let (vm, w) = var_hybrid(&s, SmallMethod::Stratified).unwrap();
        assert!(w.is_empty());
        close(vm, 0.36 * v_big + 0.16 * v_small);
        let (vp, _) = var_hybrid(&s, SmallMethod::Unified).unwrap();
        close(vp, vm);

        let all_big = summary(vec![big.clone(), block("b2", &[1.0, 2.0], &[0.0, 0.0])]);
        let (v, w) = var_hybrid(&all_big, SmallMethod::Unified).unwrap();
        close(v, var_big_blocks(&all_big).unwrap());
        assert_eq!(w.len(), 1);

        let all_small = summary(vec![small("a", 2, 1.0), small("b", 3, 2.0), small("c", 4, 3.0)]);
        let (v, _) = var_hybrid(&all_small, SmallMethod::Unified).unwrap();
        close(v, var_small_unified(&all_small).unwrap());
    }

    #[test]
    fn hybrid_arithmetic_by_hand() {
        // n = 10, n_small = 4, v_big = 1.0, v_small = 0.5 -> 0.44
        let w_big: f64 = (6.0f64 / 10.0).powi(2);
        let w_small: f64 = (4.0f64 / 10.0).powi(2);
        close(w_big * 1.0 + w_small * 0.5, 0.44);
    }

    #[test]
    fn srs_estimator_by_hand() {
        let s = summary(vec![
            block("a", &[0.0, 2.0], &[0.0, 2.0]),
            block("b", &[3.0, 5.0], &[1.0, 3.0]),
        ]);
        // tau = {0, 2}; each block Neyman variance 2
        let s = summary(
            s.blocks
                .into_iter()
                .zip([1.0, 3.0])
                .map(|(b, shift)| {
                    let t: Vec<f64> = [0.0, 2.0].iter().map(|x| x + shift).collect();
                    BlockSummary::from_arms(b.block_id, &t, &[0.0, 2.0]).unwrap()
                })
                .collect(),
        );
        close(var_srs_unbiased(&s).unwrap(), 1.0);
        let flat = summary(vec![block("a", &[1.0, 1.0], &[1.0, 1.0]), block("b", &[1.0, 1.0], &[1.0, 1.0])]);
        close(var_srs_unbiased(&flat).unwrap(), 0.0);
        assert!(var_srs_unbiased(&summary(vec![small("a", 2, 1.0), small("b", 2, 1.0)])).is_err());
    }

    #[test]
    fn rct_yes_cases() {
        let s = summary(vec![small("a", 2, 1.0), small("b", 2, 3.0)]);
        close(var_rct_yes(&s, RctVariant::V1).unwrap(), 1.0);
        close(var_rct_yes(&s, RctVariant::V2).unwrap(), 1.0);
        let three = summary(vec![small("a", 3, 1.0), small("b", 3, 3.0), small("c", 3, 8.0)]);
        close(var_rct_yes(&three, RctVariant::V1).unwrap(), var_small_equal(&three).unwrap());
        close(var_rct_yes(&three, RctVariant::V2).unwrap(), var_small_equal(&three).unwrap());
        let flat = summary(vec![small("a", 2, 2.0), small("b", 2, 2.0)]);
        close(var_rct_yes(&flat, RctVariant::V1).unwrap(), 0.0);
        assert!(var_rct_yes(&summary(vec![small("a", 2, 2.0)]), RctVariant::V2).is_err());
    }

    #[test]
    fn plug_in_cases() {
        let all_big = summary(vec![
            block("a", &[0.0, 2.0], &[0.0, 2.0]),
            block("b", &[1.0, 3.0, 2.0], &[5.0, 7.0]),
        ]);
        let (v, w) = var_plug_in(&all_big).unwrap();
        close(v, var_big_blocks(&all_big).unwrap());
        assert!(w.is_empty());

        // one donor with s2_t = 2 and s2_c = 8
        let donor = block("a", &[0.0, 2.0], &[0.0, 4.0]);
        let tiny = block("b", &[1.0], &[0.0, 2.0]);
        let s = summary(vec![donor, tiny]);
        let (v, w) = var_plug_in(&s).unwrap();
        let expect = (4.0f64 / 7.0).powi(2) * (8.0 / 2.0 + 2.0 / 2.0) + (3.0f64 / 7.0).powi(2) * (2.0 / 2.0 + 2.0 / 1.0);
        close(v, expect);
        assert_eq!(w.len(), 1);

        // donors with s2_t = {1, 3} and equal sizes impute 2
        let d1 = block("d1", &[0.0, 2.0f64.sqrt()], &[0.0, 0.0]);
        let d2 = block("d2", &[0.0, 6.0f64.sqrt()], &[0.0, 0.0]);
        let pair = block("p", &[1.0], &[0.0]);
        let s = summary(vec![d1, d2, pair]);
        let (v, _) = var_plug_in(&s).unwrap();
        let expect = (4.0f64 / 10.0).powi(2) * (1.0 / 2.0) + (4.0f64 / 10.0).powi(2) * (3.0 / 2.0)
            + (2.0f64 / 10.0).powi(2) * (0.0 + 2.0);
        close(v, expect);

        let none = summary(vec![small("a", 2, 1.0), small("b", 2, 1.0)]);
        assert_eq!(var_plug_in(&none).unwrap_err().to_string(), "no donor blocks for plug-in");
    }

    #[test]
    fn estimator_ids_round_trip() {
        for id in EstimatorId::ALL {
            assert_eq!(id.as_str().parse::<EstimatorId>().unwrap(), id);
        }
        assert_eq!(
            EstimatorId::parse_list("big, hybrid-p").unwrap(),
            vec![EstimatorId::Big, EstimatorId::HybridP]
        );
        assert!(EstimatorId::parse_list("").is_err());
        assert!(EstimatorId::parse_list("nope").is_err());
    }

    #[test]
    fn evaluate_reports_se_and_blocks() {
        let t = ExperimentTable::parse_csv("unit_id,block,z,y\n1,A,1,2\n2,A,0,1\n3,B,1,3\n4,B,0,0").unwrap();
        let obs = Observed::from_table(&t);
        let r = evaluate(EstimatorId::SbEqual, &obs).unwrap();
        close(r.estimate, 2.0);
        close(r.variance, 1.0);
        close(r.se * r.se, r.variance);
        assert_eq!(r.per_block.len(), 2);
        close(r.per_block.iter().map(|b| b.contribution).sum(), r.estimate);
        assert!(evaluate(EstimatorId::Big, &obs).is_err());
        let cr = evaluate(EstimatorId::Cr, &obs).unwrap();
        assert_eq!(cr.warnings, vec!["ignores blocking".to_string()]);
        // pooled: treated {2, 3}, control {1, 0}
        close(cr.variance, 0.5 / 2.0 + 0.5 / 2.0);
    }
}
