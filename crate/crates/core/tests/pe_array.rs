use proptest::prelude::*;

use skipwise::graph_ir::{build_quartznet, build_resnet_basic, build_resnet_bottleneck, NetworkGraph, TensorShape};
use skipwise::pe_array::{compare, memory_traffic, schedule, PEArrayConfig};
use skipwise::transforms::{apply_all, AlterMode};

fn resnet50() -> NetworkGraph {
    build_resnet_bottleneck(TensorShape::new(224, 224, 3).unwrap()).unwrap()
}

fn graph_strategy() -> impl Strategy<Value = NetworkGraph> {
    prop_oneof![
        prop::sample::select(vec![8usize, 20, 32, 56]).prop_map(|d| {
            build_resnet_basic(d, 16, TensorShape::new(32, 32, 3).unwrap()).unwrap()
        }),
        (1usize..=6, 1usize..=5).prop_map(|(n, s)| {
            build_quartznet(n, s, TensorShape::new(1, 64, 32).unwrap()).unwrap()
        }),
    ]
}

fn config_strategy() -> impl Strategy<Value = PEArrayConfig> {
    (1usize..=16, 1usize..=128, 1usize..=16, 0.3f64..=1.0, 0u64..5000, prop::option::of(1.0f64..512.0)).prop_map(
        |(rows, cols, batch, utilization, overhead, bw)| PEArrayConfig {
            rows,
            cols,
            batch,
            utilization,
            per_invocation_overhead_cycles: overhead,
            dram_bits_per_cycle: bw,
            ..PEArrayConfig::default()
        },
    )
}

#[test]
fn resnet50_drops_four_invocations() {
    let g = resnet50();
    let cfg = PEArrayConfig::default();
    let with = schedule(&g, &cfg).unwrap();
    let without = schedule(&apply_all(&g, AlterMode::Remove), &cfg).unwrap();
    assert_eq!(with.invocations, 53);
    assert_eq!(without.invocations, 49);
    let cmp = compare(&with, &without);
    assert_eq!(cmp.invocations_removed, 4);
    assert!(cmp.fps_ratio > 1.0 && cmp.latency_ratio < 1.0 && cmp.memory_ratio < 1.0);
    assert_eq!(without.traffic.skip_fetch_bits, 0.0);
    assert_eq!(without.traffic.sum_store_bits, 0.0);
}

#[test]
fn directions_hold_without_a_bandwidth_bound() {
    let g = resnet50();
    let cfg = PEArrayConfig { dram_bits_per_cycle: None, per_invocation_overhead_cycles: 200, ..PEArrayConfig::default() };
    let cmp = compare(&schedule(&g, &cfg).unwrap(), &schedule(&apply_all(&g, AlterMode::Remove), &cfg).unwrap());
    assert!(cmp.fps_ratio > 1.0 && cmp.latency_ratio < 1.0 && cmp.memory_ratio < 1.0);
}

#[test]
fn report_is_self_consistent() {
    let cfg = PEArrayConfig::default();
    let r = schedule(&resnet50(), &cfg).unwrap();
    let cycles: u64 = r.per_invocation.iter().map(|i| i.cycles).sum();
    let last_add = 7.0 * 7.0 * 2048.0 * 8.0;
    let trailing = (2.0 * last_add * cfg.batch as f64 / cfg.dram_bits_per_cycle.unwrap()).ceil() as u64;
    assert_eq!(cycles + trailing, r.total_cycles);
    assert!((r.latency_s - r.total_cycles as f64 / cfg.clock_hz).abs() < 1e-12);
    assert!((r.time_per_image_s * cfg.batch as f64 - r.latency_s).abs() < 1e-12);
    assert!((r.fps * r.time_per_image_s - 1.0).abs() < 1e-9);
    assert!((r.traffic.total() - r.mem_bits_per_image).abs() < 1e-6);
    assert_eq!(memory_traffic(&resnet50(), &cfg), r.traffic);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn removing_skips_never_costs_more(g in graph_strategy(), cfg in config_strategy()) {
        let with = schedule(&g, &cfg).unwrap();
        let without = schedule(&apply_all(&g, AlterMode::Remove), &cfg).unwrap();
        prop_assert!(without.invocations <= with.invocations);
        prop_assert!(without.total_cycles <= with.total_cycles);
        prop_assert!(without.mem_bits_per_image < with.mem_bits_per_image);
        prop_assert!(without.fps >= with.fps);
    }
}
