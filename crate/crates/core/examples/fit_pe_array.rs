//! Fits the PE-array calibration constants to the reference ResNet-50
//! throughput pair (28.69 FPS with skips, 37.47 FPS without) on a 7x96 array
//! at 250 MHz with batch 7.
//!
//! cargo run --release -p skipwise --example fit_pe_array > crates/core/data/pe_array_fit.txt

use skipwise::graph_ir::{build_resnet_bottleneck, TensorShape};
use skipwise::pe_array::{calibrate, compare, schedule, PEArrayConfig};
use skipwise::transforms::{apply_all, AlterMode};

const FPS_WITH: f64 = 28.69;
const FPS_WITHOUT: f64 = 37.47;

fn main() -> skipwise::Result<()> {
    let with = build_resnet_bottleneck(TensorShape::new(224, 224, 3)?)?;
    let without = apply_all(&with, AlterMode::Remove);
    let base = PEArrayConfig::default();
    let fit = calibrate(&with, &without, &base, FPS_WITH, FPS_WITHOUT)?;
    println!("targets: fps_with={FPS_WITH} fps_without={FPS_WITHOUT}");
    println!("utilization={}", fit.utilization);
    println!("per_invocation_overhead_cycles={}", fit.per_invocation_overhead_cycles);
    println!("dram_bits_per_cycle={}", fit.dram_bits_per_cycle);
    println!("fitted: fps_with={:.3} fps_without={:.3} log_error={:.5}", fit.fps_with, fit.fps_without, fit.error);

    let cfg = PEArrayConfig {
        utilization: fit.utilization,
        per_invocation_overhead_cycles: fit.per_invocation_overhead_cycles,
        dram_bits_per_cycle: Some(fit.dram_bits_per_cycle),
        ..base
    };
    let a = schedule(&with, &cfg)?;
    let b = schedule(&without, &cfg)?;
    let c = compare(&a, &b);
    println!(
        "with skips:    fps={:.2} time_per_image={:.4}s latency={:.4}s mem={:.2}Mb invocations={}",
        a.fps, a.time_per_image_s, a.latency_s, a.mem_mb_per_image(), a.invocations
    );
    println!(
        "without skips: fps={:.2} time_per_image={:.4}s latency={:.4}s mem={:.2}Mb invocations={}",
        b.fps, b.time_per_image_s, b.latency_s, b.mem_mb_per_image(), b.invocations
    );
    println!("fps_ratio={:.4} memory_ratio={:.4}", c.fps_ratio, c.memory_ratio);
    Ok(())
}
