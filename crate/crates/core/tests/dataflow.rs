use proptest::prelude::*;

use skipwise::dataflow_hw::{
    analyze, bind_memories, estimate_latency, estimate_resources, fifo_depths, lower, FixtureTable, HwConfig,
    MemoryBinding, StageKind, Variant, FIXTURE_ENV,
};
use skipwise::graph_ir::{build_basic_block, build_resnet_basic, NetworkGraph, Precision, TensorShape};
use skipwise::transforms::{apply_all, AlterMode};
use skipwise::Error;

fn p8() -> Precision {
    Precision::new(8, 3).unwrap()
}

fn p16() -> Precision {
    Precision::new(16, 6).unwrap()
}

fn block(filters: usize) -> NetworkGraph {
    build_basic_block(filters, TensorShape::new(32, 32, filters).unwrap()).unwrap()
}

fn as_variant(g: &NetworkGraph, v: Variant) -> NetworkGraph {
    match v {
        Variant::Traditional => g.clone(),
        Variant::Removed => apply_all(g, AlterMode::Remove),
        Variant::Shortened => apply_all(g, AlterMode::Shorten),
    }
}

#[test]
fn removal_never_costs_more_at_fixture_points() {
    let table = FixtureTable::embedded();
    for p in [p8(), p16()] {
        for f in [16, 32, 64] {
            let t = table.unit(p, Variant::Traditional, f).unwrap();
            let r = table.unit(p, Variant::Removed, f).unwrap();
            assert!(r.lut < t.lut && r.ff < t.ff, "{p} {f}");
            assert!(r.dsp == t.dsp && r.bram <= t.bram);
        }
    }
    for f in [16, 32, 64] {
        let s = table.unit(p16(), Variant::Shortened, f).unwrap();
        let r = table.unit(p16(), Variant::Removed, f).unwrap();
        assert!(s.bram < r.bram);
    }
}

#[test]
fn latency_is_variant_invariant() {
    for p in [p8(), p16()] {
        let cfg = HwConfig::new(p, 576).unwrap();
        for f in [16, 32, 64] {
            let g = block(f);
            let cycles: Vec<u64> = Variant::ALL
                .iter()
                .map(|&v| estimate_latency(&lower(&as_variant(&g, v), v, &cfg).unwrap()).latency_cycles)
                .collect();
            assert!(cycles.iter().all(|&c| c == cycles[0] && c > 0), "{cycles:?}");
        }
    }
}

#[test]
fn resnet20_lowering() {
    let g = build_resnet_basic(20, 16, TensorShape::new(32, 32, 3).unwrap()).unwrap();
    let cfg = HwConfig::default();
    let trad = bind_memories(lower(&g, Variant::Traditional, &cfg).unwrap());
    assert_eq!(trad.fifos.len(), 9);
    assert_eq!(trad.count_kind(StageKind::Clone), 9);
    assert_eq!(trad.count_kind(StageKind::AddReLU), 9);
    assert!(trad.fifos.iter().all(|f| f.binding == Some(MemoryBinding::BramFifo)));

    let short_graph = apply_all(&g, AlterMode::Shorten);
    let short = bind_memories(lower(&short_graph, Variant::Shortened, &cfg).unwrap());
    assert_eq!(short.fifos.len(), 18);
    assert_eq!(short.count_kind(StageKind::Clone), 0);
    assert!(short.fifos.iter().all(|f| f.binding == Some(MemoryBinding::ShiftRegister)));
    let depths = fifo_depths(&short, &short_graph);
    assert_eq!(depths.len(), 18);

    let removed = lower(&apply_all(&g, AlterMode::Remove), Variant::Removed, &cfg).unwrap();
    assert!(removed.fifos.is_empty());
    assert!(removed.stages.len() < trad.stages.len());
    assert_eq!(removed.units.len(), 9);
}

#[test]
fn mismatched_variant_is_rejected() {
    let g = block(16);
    let cfg = HwConfig::default();
    assert!(matches!(lower(&g, Variant::Removed, &cfg), Err(Error::VariantMismatch { .. })));
    assert!(matches!(lower(&g, Variant::Shortened, &cfg), Err(Error::VariantMismatch { .. })));
}

#[test]
fn uncalibrated_precision_is_reported() {
    let g = block(16);
    let cfg = HwConfig::new(Precision::new(12, 4).unwrap(), 576).unwrap();
    let err = analyze(&g, Variant::Traditional, &cfg, &FixtureTable::embedded()).unwrap_err();
    assert!(matches!(err, Error::Uncalibrated(_)));
}

#[test]
fn fixture_file_override() {
    let mut table = FixtureTable::embedded();
    for t in &mut table.tables {
        for r in &mut t.rows {
            r.traditional.lut += 1000.0;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixtures.json");
    std::fs::write(&path, serde_json::to_string(&table).unwrap()).unwrap();
    let arch = lower(&block(16), Variant::Traditional, &HwConfig::default()).unwrap();
    assert_eq!(estimate_resources(&arch).unwrap().lut, 14733.0);
    // SAFETY: no other test in this binary touches the environment.
    unsafe { std::env::set_var(FIXTURE_ENV, &path) };
    let overridden = estimate_resources(&arch).unwrap().lut;
    unsafe { std::env::remove_var(FIXTURE_ENV) };
    assert_eq!(overridden, 15733.0);
}

proptest! {
    #[test]
    fn interpolation_is_monotone(a in 1usize..200, b in 1usize..200, wide in any::<bool>(), v in 0usize..3) {
        let (lo, hi) = (a.min(b), a.max(b));
        let p = if wide { p16() } else { p8() };
        let table = FixtureTable::embedded();
        let x = table.unit(p, Variant::ALL[v], lo).unwrap();
        let y = table.unit(p, Variant::ALL[v], hi).unwrap();
        prop_assert!(x.lut <= y.lut && x.ff <= y.ff && x.dsp <= y.dsp && x.bram <= y.bram);
        prop_assert!(x.lut >= 0.0 && x.bram >= 0.0);
        prop_assert_eq!(x.bram * 2.0, (x.bram * 2.0).round());
    }
}
