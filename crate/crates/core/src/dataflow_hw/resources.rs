use serde::{Deserialize, Serialize};

use super::{DataflowArch, Variant};
use crate::error::{Error, Result};
use crate::graph_ir::Precision;

/// Environment variable naming a replacement fixture file (same schema as the
/// embedded one).
pub const FIXTURE_ENV: &str = "SKIPWISE_FIXTURES";

const EMBEDDED: &str = include_str!("../../data/block_resources.json");

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub lut: f64,
    pub ff: f64,
    pub dsp: f64,
    /// 18Kb half-block units.
    pub bram: f64,
}

impl ResourceEstimate {
    fn rounded(self) -> Self {
        Self {
            lut: self.lut.round(),
            ff: self.ff.round(),
            dsp: self.dsp.round(),
            bram: (self.bram * 2.0).round() / 2.0,
        }
    }

    fn map2(self, other: Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self { lut: f(self.lut, other.lut), ff: f(self.ff, other.ff), dsp: f(self.dsp, other.dsp), bram: f(self.bram, other.bram) }
    }

    fn clamp_non_negative(self) -> Self {
        self.map2(self, |a, _| a.max(0.0))
    }
}

impl std::ops::Add for ResourceEstimate {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        self.map2(rhs, |a, b| a + b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureRow {
    pub filters: usize,
    pub traditional: ResourceEstimate,
    pub removed: ResourceEstimate,
    pub shortened: ResourceEstimate,
}

impl FixtureRow {
    pub fn get(&self, variant: Variant) -> ResourceEstimate {
        match variant {
            Variant::Traditional => self.traditional,
            Variant::Removed => self.removed,
            Variant::Shortened => self.shortened,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionTable {
    pub precision: String,
    pub rows: Vec<FixtureRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureTable {
    #[serde(default)]
    pub description: String,
    pub tables: Vec<PrecisionTable>,
}

impl FixtureTable {
    pub fn embedded() -> Self {
        Self::from_json(EMBEDDED).expect("embedded fixture table parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut table: FixtureTable = serde_json::from_str(text)?;
        for t in &mut table.tables {
            t.precision.parse::<Precision>()?;
            t.rows.sort_by_key(|r| r.filters);
            if t.rows.is_empty() {
                return Err(Error::InvalidParams(format!("fixture table {} has no rows", t.precision)));
            }
        }
        Ok(table)
    }

    /// The file named by [`FIXTURE_ENV`] if set, else the embedded table.
    pub fn active() -> Result<Self> {
        match std::env::var_os(FIXTURE_ENV) {
            Some(path) => Self::from_json(&std::fs::read_to_string(path)?),
            None => Ok(Self::embedded()),
        }
    }

    pub fn rows(&self, precision: Precision) -> Result<&[FixtureRow]> {
        self.tables
            .iter()
            .find(|t| t.precision.parse::<Precision>().ok() == Some(precision))
            .map(|t| t.rows.as_slice())
            .ok_or(Error::Uncalibrated(precision))
    }

    /// One residual unit with `filters` filters. Exact at fixture points,
    /// piecewise linear between them, extended with the end-segment slope
    /// outside, clamped at zero.
    pub fn unit(&self, precision: Precision, variant: Variant, filters: usize) -> Result<ResourceEstimate> {
        let rows = self.rows(precision)?;
        if let Some(r) = rows.iter().find(|r| r.filters == filters) {
            return Ok(r.get(variant));
        }
        if rows.len() == 1 {
            let r = &rows[0];
            let scale = filters as f64 / r.filters as f64;
            return Ok(r.get(variant).map2(r.get(variant), |a, _| a * scale).rounded());
        }
        let seg = rows
            .windows(2)
            .position(|w| filters < w[1].filters)
            .unwrap_or(rows.len() - 2);
        let (a, b) = (&rows[seg], &rows[seg + 1]);
        let t = (filters as f64 - a.filters as f64) / (b.filters as f64 - a.filters as f64);
        let est = a.get(variant).map2(b.get(variant), |x, y| x + t * (y - x));
        Ok(est.clamp_non_negative().rounded())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitEstimate {
    pub block: u32,
    pub filters: usize,
    pub resources: ResourceEstimate,
}

/// Sum of per-unit estimates. Layers outside residual units (stem, head)
/// are not priced.
pub fn estimate_resources_with(arch: &DataflowArch, table: &FixtureTable) -> Result<(ResourceEstimate, Vec<UnitEstimate>)> {
    let precision = arch.config.precision;
    table.rows(precision)?;
    if arch.units.is_empty() {
        return Err(Error::NoCalibratedUnits);
    }
    let mut total = ResourceEstimate::default();
    let mut units = Vec::with_capacity(arch.units.len());
    for u in &arch.units {
        let r = table.unit(precision, arch.variant, u.filters)?;
        total = total + r;
        units.push(UnitEstimate { block: u.block, filters: u.filters, resources: r });
    }
    Ok((total, units))
}

pub fn estimate_resources(arch: &DataflowArch) -> Result<ResourceEstimate> {
    Ok(estimate_resources_with(arch, &FixtureTable::active()?)?.0)
}
