use std::io::Write;

use serde::{Deserialize, Serialize};

use super::resources::{estimate_resources_with, FixtureTable, ResourceEstimate, UnitEstimate};
use super::{bind_memories, lower, DataflowArch, HwConfig, SkipFifo, StageKind, Variant};
use crate::error::Result;
use crate::graph_ir::{LayerId, NetworkGraph, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub latency_cycles: u64,
    pub initiation_interval: u64,
}

/// The slowest stage sets the initiation interval. Latency adds the fill
/// time of every main-path conv on top of one interval, so stages that only
/// exist for skips never lengthen it.
pub fn estimate_latency(arch: &DataflowArch) -> LatencyEstimate {
    let ii = arch.stages.iter().map(|s| s.cycles).max().unwrap_or(0);
    let fill: u64 = arch.stages.iter().map(|s| s.fill_cycles).sum();
    LatencyEstimate { latency_cycles: fill + ii, initiation_interval: ii }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub id: usize,
    pub kind: StageKind,
    pub contents: Vec<LayerId>,
    pub element_delay: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataflowReport {
    pub variant: Variant,
    pub precision: Precision,
    pub reuse_factor: u64,
    pub per_stage: Vec<StageReport>,
    pub fifos: Vec<SkipFifo>,
    pub resources: ResourceEstimate,
    pub units: Vec<UnitEstimate>,
    pub latency_cycles: u64,
    pub initiation_interval: u64,
    pub scope: String,
}

/// Lower, bind, and price `graph` as `variant`.
pub fn analyze(graph: &NetworkGraph, variant: Variant, cfg: &HwConfig, table: &FixtureTable) -> Result<DataflowReport> {
    let arch = bind_memories(lower(graph, variant, cfg)?);
    let (resources, units) = estimate_resources_with(&arch, table)?;
    let latency = estimate_latency(&arch);
    Ok(DataflowReport {
        variant,
        precision: cfg.precision,
        reuse_factor: cfg.reuse_factor,
        per_stage: arch
            .stages
            .iter()
            .map(|s| StageReport {
                id: s.id,
                kind: s.kind,
                contents: s.contents.clone(),
                element_delay: s.element_delay,
                cycles: s.cycles,
            })
            .collect(),
        fifos: arch.fifos,
        resources,
        units,
        latency_cycles: latency.latency_cycles,
        initiation_interval: latency.initiation_interval,
        scope: "resources sum residual units only; input, stem and classifier layers are excluded".into(),
    })
}

/// One row per report for side-by-side comparison.
pub fn write_summary_csv<W: Write>(reports: &[DataflowReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "precision",
        "lut",
        "ff",
        "dsp",
        "bram",
        "latency_cycles",
        "initiation_interval",
        "stages",
        "fifos",
        "max_fifo_depth",
    ])?;
    for r in reports {
        w.write_record([
            r.variant.to_string(),
            r.precision.to_string(),
            r.resources.lut.to_string(),
            r.resources.ff.to_string(),
            r.resources.dsp.to_string(),
            r.resources.bram.to_string(),
            r.latency_cycles.to_string(),
            r.initiation_interval.to_string(),
            r.per_stage.len().to_string(),
            r.fifos.len().to_string(),
            r.fifos.iter().map(|f| f.depth).max().unwrap_or(0).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::{build_basic_block, LayerGroup, LayerKind, TensorShape};
    use crate::transforms::{apply_all, AlterMode};

    #[test]
    fn dominant_stage_arithmetic() {
        let g = build_basic_block(16, TensorShape::new(32, 32, 16).unwrap()).unwrap();
        let arch = lower(&g, Variant::Traditional, &HwConfig::default()).unwrap();
        let lat = estimate_latency(&arch);
        assert_eq!(lat.initiation_interval, 32 * 32 * 576);
        assert_eq!(lat.latency_cycles, 2 * 33 * 576 + 32 * 32 * 576);
    }

    #[test]
    fn single_pixel_conv() {
        let input = TensorShape::new(1, 1, 1).unwrap();
        let layers = vec![
            LayerGroup { id: LayerId(0), kind: LayerKind::Input, input_shape: input, output_shape: input, block: None },
            LayerGroup {
                id: LayerId(1),
                kind: LayerKind::Conv { kernel: 1, out_channels: 1, stride: 1 },
                input_shape: input,
                output_shape: input,
                block: None,
            },
        ];
        let g = NetworkGraph::from_parts("one", layers, vec![]);
        let cfg = HwConfig::new(Precision::FIXED_8_3, 1).unwrap();
        let arch = lower(&g, Variant::Removed, &cfg).unwrap();
        assert_eq!(estimate_latency(&arch), LatencyEstimate { latency_cycles: 1, initiation_interval: 1 });
    }

    #[test]
    fn report_and_csv() {
        let g = build_basic_block(32, TensorShape::new(32, 32, 32).unwrap()).unwrap();
        let table = FixtureTable::embedded();
        let cfg = HwConfig::default();
        let reports = vec![
            analyze(&g, Variant::Traditional, &cfg, &table).unwrap(),
            analyze(&apply_all(&g, AlterMode::Remove), Variant::Removed, &cfg, &table).unwrap(),
        ];
        assert_eq!(reports[0].resources.bram, 124.0);
        assert_eq!(reports[1].resources.lut, 25330.0);
        let json = serde_json::to_value(&reports[0]).unwrap();
        assert_eq!(json["fifos"][0]["binding"], "bram_fifo");
        assert_eq!(json["per_stage"][0]["kind"], "clone");
        let mut out = Vec::new();
        write_summary_csv(&reports, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(2).unwrap().starts_with("removed,\"<16,6>\",25330,"));
    }
}
