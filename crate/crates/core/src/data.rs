//! Observed experiment data, science tables on disk, and per-block summaries.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Treated,
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord<T> {
    pub unit_id: String,
    pub block_id: String,
    pub arm: Arm,
    pub y_obs: T,
}

/// Observed data: one record per unit, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable<T> {
    units: Vec<UnitRecord<T>>,
}

/// Treated and control outcomes of one group of units.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmOutcomes<T> {
    pub treated: Vec<T>,
    pub control: Vec<T>,
}

impl<T> Default for ArmOutcomes<T> {
    fn default() -> Self {
        ArmOutcomes { treated: Vec::new(), control: Vec::new() }
    }
}

impl<T: Scalar> ExperimentTable<T> {
    pub fn new(units: Vec<UnitRecord<T>>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::validation("empty experiment: no data rows"));
        }
        let mut seen = HashSet::new();
        for u in &units {
            if !seen.insert(u.unit_id.as_str()) {
                return Err(Error::validation(format!("duplicate unit_id {}", u.unit_id)));
            }
            if !u.y_obs.is_finite_value() {
                return Err(Error::validation(format!("non-finite outcome for unit {}", u.unit_id)));
            }
        }
        Ok(ExperimentTable { units })
    }

    pub fn units(&self) -> &[UnitRecord<T>] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn map_outcomes<U: Scalar>(&self, f: impl Fn(&T) -> U) -> ExperimentTable<U> {
        ExperimentTable {
            units: self
                .units
                .iter()
                .map(|u| UnitRecord {
                    unit_id: u.unit_id.clone(),
                    block_id: u.block_id.clone(),
                    arm: u.arm,
                    y_obs: f(&u.y_obs),
                })
                .collect(),
        }
    }

    /// Outcomes pooled over all blocks.
    pub fn pooled_arms(&self) -> ArmOutcomes<T> {
        let mut out = ArmOutcomes::default();
        for u in &self.units {
            match u.arm {
                Arm::Treated => out.treated.push(u.y_obs.clone()),
                Arm::Control => out.control.push(u.y_obs.clone()),
            }
        }
        out
    }

    /// Outcomes grouped by block label, labels in lexicographic order.
    pub fn arms_by_block(&self) -> BTreeMap<String, ArmOutcomes<T>> {
        let mut out: BTreeMap<String, ArmOutcomes<T>> = BTreeMap::new();
        for u in &self.units {
            let entry = out.entry(u.block_id.clone()).or_default();
            match u.arm {
                Arm::Treated => entry.treated.push(u.y_obs.clone()),
                Arm::Control => entry.control.push(u.y_obs.clone()),
            }
        }
        out
    }
}

impl ExperimentTable<f64> {
    /// Parse the `unit_id,block,z,y` format.
    pub fn parse_csv(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let rows = read_rows(reader, &["unit_id", "block", "z", "y"])?;
        let mut units = Vec::with_capacity(rows.len());
        for (line, fields) in rows {
            let arm = match fields[2].as_str() {
                "1" => Arm::Treated,
                "0" => Arm::Control,
                _ => {
                    return Err(Error::Parse { line, message: "invalid treatment code".into() });
                }
            };
            let y_obs = parse_number(&fields[3], line, "y")?;
            units.push(UnitRecord {
                unit_id: fields[0].clone(),
                block_id: fields[1].clone(),
                arm,
                y_obs,
            });
        }
        ExperimentTable::new(units)
    }
}

/// One unit of a science table: both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScienceUnit<T> {
    pub block_id: String,
    pub y0: T,
    pub y1: T,
}

/// Parse the `block,y0,y1` science-table format.
pub fn parse_science_csv<R: Read>(reader: R) -> Result<Vec<ScienceUnit<f64>>> {
    let rows = read_rows(reader, &["block", "y0", "y1"])?;
    if rows.is_empty() {
        return Err(Error::validation("empty science table: no data rows"));
    }
    rows.into_iter()
        .map(|(line, f)| {
            Ok(ScienceUnit {
                block_id: f[0].clone(),
                y0: parse_number(&f[1], line, "y0")?,
                y1: parse_number(&f[2], line, "y1")?,
            })
        })
        .collect()
}

fn parse_number(field: &str, line: u64, column: &str) -> Result<f64> {
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(Error::Parse { line, message: format!("non-numeric {column} value {field:?}") }),
    }
}

/// Reads a headed CSV, checking the header and the column count of every row.
fn read_rows<R: Read>(reader: R, header: &[&str]) -> Result<Vec<(u64, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();
    let first = match records.next() {
        None => return Err(Error::validation("empty file")),
        Some(r) => r.map_err(csv_error)?,
    };
    let got: Vec<&str> = first.iter().collect();
    if got != header {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header {}", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", header.len(), rec.len()),
            });
        }
        rows.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse { line, message: format!("malformed row: {other:?}") },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockClass {
    Big,
    Small,
}

impl BlockClass {
    /// Big iff both arms have at least two units; small otherwise.
    pub fn of(n_tk: usize, n_ck: usize) -> Self {
        if n_tk >= 2 && n_ck >= 2 {
            BlockClass::Big
        } else {
            BlockClass::Small
        }
    }
}

impl fmt::Display for BlockClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockClass::Big => "big",
            BlockClass::Small => "small",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSummary<T> {
    pub block_id: String,
    pub n_k: usize,
    pub n_tk: usize,
    pub n_ck: usize,
    pub mean_t: T,
    pub mean_c: T,
    /// Present iff `n_tk >= 2`.
    pub s2_t: Option<T>,
    /// Present iff `n_ck >= 2`.
    pub s2_c: Option<T>,
    pub tau_hat: T,
    pub class: BlockClass,
}

impl<T: Scalar> BlockSummary<T> {
    pub fn from_arms(block_id: impl Into<String>, treated: &[T], control: &[T]) -> Result<Self> {
        let block_id = block_id.into();
        if treated.is_empty() || control.is_empty() {
            return Err(Error::NoOverlap(block_id));
        }
        let mean_t = scalar::mean(treated);
        let mean_c = scalar::mean(control);
        Ok(BlockSummary {
            n_k: treated.len() + control.len(),
            n_tk: treated.len(),
            n_ck: control.len(),
            s2_t: scalar::sample_variance(treated),
            s2_c: scalar::sample_variance(control),
            tau_hat: mean_t.clone() - mean_c.clone(),
            mean_t,
            mean_c,
            class: BlockClass::of(treated.len(), control.len()),
            block_id,
        })
    }

    /// Neyman variance of this block's difference in means, when both arm variances exist.
    pub fn neyman_variance(&self) -> Option<T> {
        let s2_t = self.s2_t.clone()?;
        let s2_c = self.s2_c.clone()?;
        Some(s2_c / T::count(self.n_ck) + s2_t / T::count(self.n_tk))
    }
}

/// A group of small blocks sharing one size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeGroup {
    /// Block size m_j.
    pub size: usize,
    /// Number of blocks K_j of this size.
    pub count: usize,
    /// Units N_j = m_j * K_j.
    pub units: usize,
}

/// Groups blocks by size, sizes ascending.
pub fn size_groups<'a, T: 'a>(blocks: impl IntoIterator<Item = &'a BlockSummary<T>>) -> Vec<SizeGroup> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for b in blocks {
        *counts.entry(b.n_k).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(size, count)| SizeGroup { size, count, units: size * count })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary<T> {
    pub n: usize,
    pub n_t: usize,
    pub n_c: usize,
    /// Ordered by block label.
    pub blocks: Vec<BlockSummary<T>>,
    /// Units in small blocks.
    pub n_small: usize,
    /// Size groups over small blocks only.
    pub size_groups: Vec<SizeGroup>,
    /// Exact equality of treated proportions across blocks.
    pub p_k_equal: bool,
}

impl<T: Scalar> ExperimentSummary<T> {
    pub fn from_blocks(mut blocks: Vec<BlockSummary<T>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::validation("experiment has no blocks"));
        }
        blocks.sort_by(|a, b| a.block_id.cmp(&b.block_id));
        if let Some(w) = blocks.windows(2).find(|w| w[0].block_id == w[1].block_id) {
            return Err(Error::validation(format!("duplicate block {}", w[0].block_id)));
        }
        let n = blocks.iter().map(|b| b.n_k).sum();
        let n_t = blocks.iter().map(|b| b.n_tk).sum();
        let small: Vec<&BlockSummary<T>> = blocks.iter().filter(|b| b.class == BlockClass::Small).collect();
        let n_small = small.iter().map(|b| b.n_k).sum();
        let size_groups = size_groups(small);
        let first = &blocks[0];
        let p_k_equal = blocks.iter().all(|b| b.n_tk * first.n_k == first.n_tk * b.n_k);
        Ok(ExperimentSummary { n, n_t, n_c: n - n_t, blocks, n_small, size_groups, p_k_equal })
    }

    /// Number of blocks K.
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    /// Number of distinct small-block sizes J.
    pub fn j(&self) -> usize {
        self.size_groups.len()
    }

    /// The sub-experiment made of blocks of one class, if any exist.
    pub fn restrict(&self, class: BlockClass) -> Option<Self> {
        let blocks: Vec<_> = self.blocks.iter().filter(|b| b.class == class).cloned().collect();
        if blocks.is_empty() {
            None
        } else {
            Some(Self::from_blocks(blocks).expect("non-empty subset of a valid summary"))
        }
    }

    /// The sub-experiment made of the named blocks.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let blocks = ids
            .iter()
            .map(|id| {
                self.blocks
                    .iter()
                    .find(|b| &b.block_id == id)
                    .cloned()
                    .ok_or_else(|| Error::validation(format!("unknown block {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_blocks(blocks)
    }
}

pub fn summarize<T: Scalar>(table: &ExperimentTable<T>) -> Result<ExperimentSummary<T>> {
    let blocks = table
        .arms_by_block()
        .into_iter()
        .map(|(id, arms)| BlockSummary::from_arms(id, &arms.treated, &arms.control))
        .collect::<Result<Vec<_>>>()?;
    ExperimentSummary::from_blocks(blocks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockPartition {
    pub big: Vec<String>,
    pub small: Vec<String>,
}

pub fn classify_blocks<T>(summary: &ExperimentSummary<T>) -> BlockPartition {
    let mut part = BlockPartition { big: Vec::new(), small: Vec::new() };
    for b in &summary.blocks {
        match b.class {
            BlockClass::Big => part.big.push(b.block_id.clone()),
            BlockClass::Small => part.small.push(b.block_id.clone()),
        }
    }
    part
}
