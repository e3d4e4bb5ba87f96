//! Cycle and off-chip traffic model of a layer-by-layer PE-array engine.
//!
//! Every conv or dense layer group is one invocation of an `rows x cols`
//! multiply-accumulate array over a whole batch. Activations and weights live
//! off chip. Residual adds run on the host while the array works on the next
//! invocation, so they cost no array cycles but share its DRAM bandwidth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_ir::{LayerId, LayerKind, NetworkGraph};

/// Calibration constants fitted against the reference throughput pair
/// (see `examples/fit_pe_array.rs` and `data/pe_array_fit.txt`).
pub const FITTED_OVERHEAD_CYCLES: u64 = 0;
pub const FITTED_UTILIZATION: f64 = 0.87;
pub const FITTED_DRAM_BITS_PER_CYCLE: f64 = 49.78693552286246;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PEArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub clock_hz: f64,
    pub batch: usize,
    pub bits_in: u32,
    pub bits_weight: u32,
    pub bits_out: u32,
    pub per_invocation_overhead_cycles: u64,
    /// Fraction of PEs doing useful work on average, in (0, 1].
    pub utilization: f64,
    /// Off-chip bandwidth. `None` means transfers are free and only compute
    /// is counted.
    pub dram_bits_per_cycle: Option<f64>,
}

impl Default for PEArrayConfig {
    fn default() -> Self {
        Self {
            rows: 7,
            cols: 96,
            clock_hz: 250e6,
            batch: 7,
            bits_in: 8,
            bits_weight: 8,
            bits_out: 8,
            per_invocation_overhead_cycles: FITTED_OVERHEAD_CYCLES,
            utilization: FITTED_UTILIZATION,
            dram_bits_per_cycle: Some(FITTED_DRAM_BITS_PER_CYCLE),
        }
    }
}

impl PEArrayConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.rows * self.cols == 0 {
            return bad("the array needs at least one PE".into());
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return bad(format!("clock must be positive, got {}", self.clock_hz));
        }
        if !(self.utilization > 0.0 && self.utilization <= 1.0) {
            return bad(format!("utilization must lie in (0, 1], got {}", self.utilization));
        }
        if let Some(bw) = self.dram_bits_per_cycle {
            if !(bw.is_finite() && bw > 0.0) {
                return bad(format!("DRAM bandwidth must be positive, got {bw}"));
            }
        }
        Ok(())
    }

    fn pes(&self) -> f64 {
        (self.rows * self.cols) as f64
    }
}

/// Off-chip bits per image, itemized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MemoryTraffic {
    pub input_bits: f64,
    pub output_bits: f64,
    /// Weight bits divided by the batch they are shared across.
    pub weight_bits: f64,
    pub skip_fetch_bits: f64,
    pub sum_store_bits: f64,
}

impl MemoryTraffic {
    pub fn total(&self) -> f64 {
        self.input_bits + self.output_bits + self.weight_bits + self.skip_fetch_bits + self.sum_store_bits
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub layer: LayerId,
    pub macs: u64,
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub invocations: usize,
    /// Cycles for one batch.
    pub total_cycles: u64,
    pub fps: f64,
    pub time_per_image_s: f64,
    /// Wall time for one batch to come out.
    pub latency_s: f64,
    pub mem_bits_per_image: f64,
    pub traffic: MemoryTraffic,
    pub per_invocation: Vec<Invocation>,
}

impl ScheduleReport {
    pub fn mem_mb_per_image(&self) -> f64 {
        self.mem_bits_per_image / 1e6
    }

    /// The headline fields in table form.
    pub fn summary(&self, accuracy: Option<f64>) -> PerformanceSummary {
        PerformanceSummary {
            accuracy,
            fps: self.fps,
            time_per_image_s: self.time_per_image_s,
            latency_s: self.latency_s,
            mem_mb_per_image: self.mem_mb_per_image(),
            invocations: self.invocations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSummary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    pub fps: f64,
    pub time_per_image_s: f64,
    pub latency_s: f64,
    pub mem_mb_per_image: f64,
    pub invocations: usize,
}

/// Ratios of `without` skips over `with` skips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fps_ratio: f64,
    pub latency_ratio: f64,
    pub time_per_image_ratio: f64,
    pub memory_ratio: f64,
    pub invocations_removed: usize,
}

pub fn compare(with: &ScheduleReport, without: &ScheduleReport) -> Comparison {
    Comparison {
        fps_ratio: without.fps / with.fps,
        latency_ratio: without.latency_s / with.latency_s,
        time_per_image_ratio: without.time_per_image_s / with.time_per_image_s,
        memory_ratio: without.mem_bits_per_image / with.mem_bits_per_image,
        invocations_removed: with.invocations.saturating_sub(without.invocations),
    }
}

/// Array work and DRAM bits per batch for one invocation.
#[derive(Debug, Clone, Copy)]
struct Work {
    layer: LayerId,
    macs: u64,
    /// Own transfers plus residual-add traffic left over from before.
    bits: f64,
}

/// Batch-level work items and any residual traffic after the last one.
fn workload(graph: &NetworkGraph, cfg: &PEArrayConfig) -> (Vec<Work>, f64, MemoryTraffic) {
    let batch = cfg.batch as f64;
    let mut traffic = MemoryTraffic::default();
    let mut work = Vec::new();
    let mut pending = 0.0;
    for layer in graph.layers() {
        match layer.kind {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                let input = layer.input_shape.elements() as f64 * f64::from(cfg.bits_in);
                let output = layer.output_shape.elements() as f64 * f64::from(cfg.bits_out);
                let weights = layer.kind.weight_count(layer.input_shape) as f64 * f64::from(cfg.bits_weight);
                traffic.input_bits += input;
                traffic.output_bits += output;
                traffic.weight_bits += weights / batch;
                work.push(Work {
                    layer: layer.id,
                    macs: layer.kind.macs(layer.input_shape, layer.output_shape),
                    bits: (input + output) * batch + weights + pending,
                });
                pending = 0.0;
            }
            LayerKind::Add => {
                let tensor = layer.output_shape.elements() as f64 * f64::from(cfg.bits_out);
                traffic.skip_fetch_bits += tensor;
                traffic.sum_store_bits += tensor;
                pending += 2.0 * tensor * batch;
            }
            _ => {}
        }
    }
    (work, pending, traffic)
}

fn memory_cycles(bits: f64, cfg: &PEArrayConfig) -> u64 {
    match cfg.dram_bits_per_cycle {
        Some(bw) if bits > 0.0 => (bits / bw).ceil() as u64,
        _ => 0,
    }
}

/// Per-image off-chip traffic of `graph` on `cfg`.
pub fn memory_traffic(graph: &NetworkGraph, cfg: &PEArrayConfig) -> MemoryTraffic {
    workload(graph, cfg).2
}

/// Schedules every conv and dense layer group as one invocation. An
/// invocation takes `max(compute, transfer) + overhead` cycles, where compute
/// is `ceil(MACs * batch / (PEs * utilization))`.
pub fn schedule(graph: &NetworkGraph, cfg: &PEArrayConfig) -> Result<ScheduleReport> {
    cfg.validate()?;
    let (work, trailing, traffic) = workload(graph, cfg);
    let batch = cfg.batch as u64;
    let mut per_invocation = Vec::with_capacity(work.len());
    let mut total = 0u64;
    for w in &work {
        let compute = ((w.macs * batch) as f64 / (cfg.pes() * cfg.utilization)).ceil() as u64;
        let memory = memory_cycles(w.bits, cfg);
        let cycles = compute.max(memory) + cfg.per_invocation_overhead_cycles;
        total += cycles;
        per_invocation.push(Invocation { layer: w.layer, macs: w.macs, compute_cycles: compute, memory_cycles: memory, cycles });
    }
    total += memory_cycles(trailing, cfg);
    let (fps, time_per_image_s, latency_s) = if total == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let batch_s = total as f64 / cfg.clock_hz;
        (cfg.clock_hz * cfg.batch as f64 / total as f64, batch_s / cfg.batch as f64, batch_s)
    };
    Ok(ScheduleReport {
        invocations: per_invocation.len(),
        total_cycles: total,
        fps,
        time_per_image_s,
        latency_s,
        mem_bits_per_image: traffic.total(),
        traffic,
        per_invocation,
    })
}

/// Result of fitting the three calibration constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub utilization: f64,
    pub per_invocation_overhead_cycles: u64,
    pub dram_bits_per_cycle: f64,
    pub fps_with: f64,
    pub fps_without: f64,
    /// Sum of absolute log errors against the two targets.
    pub error: f64,
}

/// Grid search for the constants that best reproduce `target_with` and
/// `target_without` frames per second on the two graphs.
pub fn calibrate(
    with: &NetworkGraph,
    without: &NetworkGraph,
    base: &PEArrayConfig,
    target_with: f64,
    target_without: f64,
) -> Result<Calibration> {
    base.validate()?;
    let mut best: Option<Calibration> = None;
    for u in (50..=100).rev().map(|p| p as f64 / 100.0) {
        for overhead in (0..=40).map(|k| k * 500) {
            for bw in (0..=160).map(|k| 2f64.powf(k as f64 / 16.0)) {
                let cfg = PEArrayConfig {
                    utilization: u,
                    per_invocation_overhead_cycles: overhead,
                    dram_bits_per_cycle: Some(bw),
                    ..*base
                };
                let fw = schedule(with, &cfg)?.fps;
                let fo = schedule(without, &cfg)?.fps;
                let error = (fw / target_with).ln().abs() + (fo / target_without).ln().abs();
                if best.is_none_or(|b| error < b.error - 1e-12) {
                    best = Some(Calibration {
                        utilization: u,
                        per_invocation_overhead_cycles: overhead,
                        dram_bits_per_cycle: bw,
                        fps_with: fw,
                        fps_without: fo,
                        error,
                    });
                }
            }
        }
    }
    let mut best = best.ok_or_else(|| Error::InvalidParams("empty calibration grid".into()))?;
    // Finer bandwidth steps around the coarse optimum.
    let coarse = best;
    for k in -64..=64 {
        let bw = coarse.dram_bits_per_cycle * 2f64.powf(k as f64 / 1024.0);
        let cfg = PEArrayConfig {
            utilization: coarse.utilization,
            per_invocation_overhead_cycles: coarse.per_invocation_overhead_cycles,
            dram_bits_per_cycle: Some(bw),
            ..*base
        };
        let fw = schedule(with, &cfg)?.fps;
        let fo = schedule(without, &cfg)?.fps;
        let error = (fw / target_with).ln().abs() + (fo / target_without).ln().abs();
        if error < best.error - 1e-12 {
            best = Calibration { dram_bits_per_cycle: bw, fps_with: fw, fps_without: fo, error, ..best };
        }
    }
    Ok(best)
}
