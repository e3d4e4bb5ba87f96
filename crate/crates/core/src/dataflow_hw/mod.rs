//! Layer-pipelined streaming lowering: every layer group becomes a dataflow
//! stage, skips become FIFOs, and cost is read off the resulting pipeline.

mod resources;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_ir::{LayerGroup, LayerId, LayerKind, NetworkGraph, Precision, SkipId};

pub use report::{analyze, estimate_latency, write_summary_csv, DataflowReport, LatencyEstimate, StageReport};
pub use resources::{
    estimate_resources, estimate_resources_with, FixtureRow, FixtureTable, PrecisionTable, ResourceEstimate,
    UnitEstimate, FIXTURE_ENV,
};

/// Which hardware design a graph is lowered to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Traditional,
    Removed,
    Shortened,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Traditional, Variant::Removed, Variant::Shortened];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Traditional => "traditional",
            Variant::Removed => "removed",
            Variant::Shortened => "shortened",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "traditional" => Ok(Variant::Traditional),
            "removed" | "remove" => Ok(Variant::Removed),
            "shortened" | "shorten" => Ok(Variant::Shortened),
            other => Err(Error::InvalidParams(format!(
                "unknown variant {other:?} (traditional, removed, shortened)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwConfig {
    pub precision: Precision,
    pub reuse_factor: u64,
}

impl HwConfig {
    pub fn new(precision: Precision, reuse_factor: u64) -> Result<Self> {
        if reuse_factor == 0 {
            return Err(Error::InvalidParams("reuse factor must be at least 1".into()));
        }
        Ok(Self { precision, reuse_factor })
    }
}

impl Default for HwConfig {
    fn default() -> Self {
        Self { precision: Precision::FIXED_16_6, reuse_factor: 576 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Clone,
    #[serde(rename = "conv_bn")]
    ConvBN,
    #[serde(rename = "relu")]
    ReLU,
    #[serde(rename = "add_relu")]
    AddReLU,
    FusedResidualStage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataflowStage {
    pub id: usize,
    pub kind: StageKind,
    /// Layer groups computed by this stage, in stream order.
    pub contents: Vec<LayerId>,
    /// Stream elements (pixels) the stage holds back before its first output.
    pub element_delay: u64,
    /// Cycles to stream one inference through this stage.
    pub cycles: u64,
    /// Fill cycles this stage adds to the critical path.
    pub fill_cycles: u64,
    pub on_main_path: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryBinding {
    BramFifo,
    ShiftRegister,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipFifo {
    pub id: usize,
    pub skip: SkipId,
    pub producer: usize,
    pub consumer: usize,
    pub depth: u64,
    pub binding: Option<MemoryBinding>,
}

/// A residual unit that the resource fixtures can price.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataflowUnit {
    pub block: u32,
    pub filters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataflowArch {
    pub variant: Variant,
    pub config: HwConfig,
    pub stages: Vec<DataflowStage>,
    pub fifos: Vec<SkipFifo>,
    pub units: Vec<DataflowUnit>,
}

impl DataflowArch {
    pub fn count_kind(&self, kind: StageKind) -> usize {
        self.stages.iter().filter(|s| s.kind == kind).count()
    }
}

/// Pixels a same-padded `kernel`-wide conv buffers before its first output
/// on an image `width` pixels wide.
pub fn conv_element_delay(kernel: usize, width: usize) -> u64 {
    let half = (kernel / 2) as u64;
    half * width as u64 + half
}

/// Stream-element delay of one layer group. Convs wait for `K/2` rows plus
/// `K/2` pixels (rows clamped to the image height, so 1-D inputs only wait
/// `K/2`); ReLU and Add take one element; folded and dense layers take none.
pub fn element_delay(layer: &LayerGroup) -> u64 {
    match layer.kind {
        LayerKind::Conv { kernel, .. } => {
            let half = kernel / 2;
            let rows = half.min(layer.input_shape.height.saturating_sub(1));
            (rows * layer.input_shape.width + half) as u64
        }
        LayerKind::Relu | LayerKind::Add => 1,
        LayerKind::Input | LayerKind::Dense { .. } | LayerKind::BatchNormFolded | LayerKind::Quantize { .. } => 0,
    }
}

struct Lowering<'a> {
    graph: &'a NetworkGraph,
    cfg: HwConfig,
    stages: Vec<DataflowStage>,
    stage_of: HashMap<LayerId, usize>,
}

impl Lowering<'_> {
    fn layer(&self, id: LayerId) -> &LayerGroup {
        self.graph.layer(id).expect("layer listed in graph")
    }

    fn new_stage(&mut self, kind: StageKind, on_main_path: bool) -> usize {
        let id = self.stages.len();
        self.stages.push(DataflowStage {
            id,
            kind,
            contents: Vec::new(),
            element_delay: 0,
            cycles: 0,
            fill_cycles: 0,
            on_main_path,
        });
        id
    }

    fn attach(&mut self, stage: usize, id: LayerId, main: bool) {
        let layer = self.layer(id).clone();
        let reuse = self.cfg.reuse_factor;
        let pixels = layer.output_shape.pixels() as u64;
        let delay = element_delay(&layer);
        let s = &mut self.stages[stage];
        s.contents.push(id);
        s.element_delay += delay;
        let cycles = match layer.kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                if main {
                    s.fill_cycles += delay * reuse;
                }
                pixels * reuse
            }
            LayerKind::Input => 0,
            _ => pixels,
        };
        s.cycles = s.cycles.max(cycles);
        self.stage_of.insert(id, stage);
    }

    /// Stage for an unfused layer on the main chain.
    fn place_plain(&mut self, id: LayerId, prev_main: Option<LayerId>) {
        let kind = self.layer(id).kind;
        let prev_stage = prev_main.and_then(|p| self.stage_of.get(&p).copied());
        let stage = match kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => self.new_stage(StageKind::ConvBN, true),
            LayerKind::Add => self.new_stage(StageKind::AddReLU, true),
            LayerKind::Relu => match prev_stage {
                Some(s) if self.ends_with_add(s) => s,
                _ => self.new_stage(StageKind::ReLU, true),
            },
            LayerKind::BatchNormFolded | LayerKind::Quantize { .. } => match prev_stage {
                Some(s) => s,
                None => self.new_stage(StageKind::ReLU, true),
            },
            LayerKind::Input => return,
        };
        self.attach(stage, id, true);
    }

    fn ends_with_add(&self, stage: usize) -> bool {
        let s = &self.stages[stage];
        (s.kind == StageKind::AddReLU || s.kind == StageKind::FusedResidualStage)
            && s.contents.last().is_some_and(|&l| self.layer(l).kind == LayerKind::Add)
    }
}

/// Lowers `graph` to the `variant` design. Removed requires a skipless graph
/// and Shortened requires every skip to have span 1. FIFOs come back with
/// their depths set and unbound; see [`bind_memories`].
pub fn lower(graph: &NetworkGraph, variant: Variant, cfg: &HwConfig) -> Result<DataflowArch> {
    if graph.layers().first().map(|l| l.kind) != Some(LayerKind::Input) {
        return Err(Error::InvalidGraph("graph must start with an input layer".into()));
    }
    match variant {
        Variant::Removed if !graph.skips().is_empty() => {
            return Err(Error::VariantMismatch {
                variant: variant.to_string(),
                reason: format!("graph still has {} skips", graph.skips().len()),
            })
        }
        Variant::Shortened => {
            if let Some(s) = graph.skips().iter().find(|s| s.span > 1) {
                return Err(Error::VariantMismatch {
                    variant: variant.to_string(),
                    reason: format!("{} spans {} layer groups", s.id, s.span),
                });
            }
        }
        _ => {}
    }

    let mut lw = Lowering { graph, cfg: *cfg, stages: Vec::new(), stage_of: HashMap::new() };
    let projections = graph.projection_convs();
    let positions = graph.positions();
    let mut fifos = Vec::new();

    if variant == Variant::Shortened {
        // Each span-1 skip owns the layers after its source up to its add.
        let mut region_of: HashMap<LayerId, usize> = HashMap::new();
        for (k, skip) in graph.skips().iter().enumerate() {
            let (from, to) = (positions[&skip.source], positions[&skip.sink]);
            for layer in &graph.layers()[from + 1..=to] {
                if projections.contains(&layer.id) && skip.kind.projection_conv() != Some(layer.id) {
                    continue;
                }
                if region_of.insert(layer.id, k).is_some() {
                    return Err(Error::VariantMismatch {
                        variant: variant.to_string(),
                        reason: format!("{} overlaps another residual region", skip.id),
                    });
                }
            }
        }
        let mut fused: HashMap<usize, usize> = HashMap::new();
        let mut prev_main = None;
        for layer in &graph.layers()[1..] {
            let main = !projections.contains(&layer.id);
            if let Some(&k) = region_of.get(&layer.id) {
                let stage = match fused.get(&k) {
                    Some(&s) => s,
                    None => {
                        let s = lw.new_stage(StageKind::FusedResidualStage, true);
                        fused.insert(k, s);
                        s
                    }
                };
                lw.attach(stage, layer.id, main);
            } else if !main {
                let s = lw.new_stage(StageKind::ConvBN, false);
                lw.attach(s, layer.id, false);
            } else {
                lw.place_plain(layer.id, prev_main);
            }
            if main {
                prev_main = Some(layer.id);
            }
        }
        for (k, skip) in graph.skips().iter().enumerate() {
            let stage = fused[&k];
            fifos.push(SkipFifo { id: fifos.len(), skip: skip.id, producer: stage, consumer: stage, depth: 0, binding: None });
        }
    } else {
        let mut sources: BTreeMap<LayerId, Vec<usize>> = BTreeMap::new();
        for (k, s) in graph.skips().iter().enumerate() {
            sources.entry(s.source).or_default().push(k);
        }
        let mut clone_of: HashMap<LayerId, usize> = HashMap::new();
        let mut prev_main = None;
        for layer in graph.layers() {
            let main = !projections.contains(&layer.id);
            if main {
                lw.place_plain(layer.id, prev_main);
                prev_main = Some(layer.id);
            } else {
                let s = lw.new_stage(StageKind::ConvBN, false);
                lw.attach(s, layer.id, false);
            }
            if sources.contains_key(&layer.id) {
                let s = lw.new_stage(StageKind::Clone, true);
                let pixels = layer.output_shape.pixels() as u64;
                let st = &mut lw.stages[s];
                st.contents.push(layer.id);
                st.element_delay = 1;
                st.cycles = pixels;
                clone_of.insert(layer.id, s);
            }
        }
        for skip in graph.skips() {
            fifos.push(SkipFifo {
                id: fifos.len(),
                skip: skip.id,
                producer: clone_of[&skip.source],
                consumer: lw.stage_of[&skip.sink],
                depth: 0,
                binding: None,
            });
        }
    }

    let units = collect_units(graph);
    let mut arch = DataflowArch { variant, config: *cfg, stages: lw.stages, fifos, units };
    let depths = fifo_depths(&arch, graph);
    for (f, d) in arch.fifos.iter_mut().zip(depths) {
        f.depth = d;
    }
    Ok(arch)
}

/// Skip buffer depth per FIFO. A cross-stage FIFO holds everything the main
/// path buffers between the producing and consuming stages, plus two
/// elements of handshake margin. An in-stage buffer holds what the fused
/// layers ahead of the add buffer. Depths never drop below one.
pub fn fifo_depths(arch: &DataflowArch, graph: &NetworkGraph) -> Vec<u64> {
    arch.fifos
        .iter()
        .map(|f| {
            let depth = if f.producer == f.consumer {
                let stage = &arch.stages[f.producer];
                let sink = graph.skips().iter().find(|s| s.id == f.skip).map(|s| s.sink);
                let projections = graph.projection_convs();
                stage
                    .contents
                    .iter()
                    .take_while(|&&l| Some(l) != sink)
                    .filter(|l| !projections.contains(l))
                    .filter_map(|&l| graph.layer(l))
                    .map(element_delay)
                    .sum()
            } else {
                arch.stages[f.producer + 1..f.consumer]
                    .iter()
                    .filter(|s| s.on_main_path)
                    .map(|s| s.element_delay)
                    .sum::<u64>()
                    + 2
            };
            depth.max(1)
        })
        .collect()
}

/// Buffers that live inside one stage become shift registers; those that
/// cross stages become BRAM FIFOs.
pub fn bind_memories(mut arch: DataflowArch) -> DataflowArch {
    for f in &mut arch.fifos {
        f.binding = Some(if f.producer == f.consumer { MemoryBinding::ShiftRegister } else { MemoryBinding::BramFifo });
    }
    arch
}

/// Residual units by block tag, each sized by its widest conv.
fn collect_units(graph: &NetworkGraph) -> Vec<DataflowUnit> {
    let mut units: BTreeMap<u32, usize> = BTreeMap::new();
    for layer in graph.layers() {
        let Some(block) = layer.block else { continue };
        let width = match layer.kind {
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::Dense { out_features } => out_features,
            _ => 0,
        };
        let entry = units.entry(block).or_insert(0);
        *entry = (*entry).max(width);
    }
    units.into_iter().map(|(block, filters)| DataflowUnit { block, filters }).collect()
}
