use proptest::prelude::*;

use skipwise::graph_ir::{
    build_quartznet, build_resnet_basic, build_resnet_bottleneck, validate, LayerId, LayerKind, NetworkGraph,
    SkipKind, TensorShape,
};
use skipwise::transforms::{apply_all, is_fixed_point, step, AlterMode};

fn adds(g: &NetworkGraph) -> usize {
    g.layers().iter().filter(|l| l.kind == LayerKind::Add).count()
}

fn projections(g: &NetworkGraph) -> usize {
    g.skips().iter().filter(|s| matches!(s.kind, SkipKind::Projection1x1 { .. })).count()
}

/// Parametric layers on the main chain, in order.
fn main_params(g: &NetworkGraph) -> Vec<LayerId> {
    let proj = g.projection_convs();
    g.layers().iter().filter(|l| l.kind.is_parametric() && !proj.contains(&l.id)).map(|l| l.id).collect()
}

fn graph_strategy() -> impl Strategy<Value = NetworkGraph> {
    prop_oneof![
        prop::sample::select(vec![8usize, 20, 32, 44, 56, 110]).prop_map(|d| {
            build_resnet_basic(d, 16, TensorShape::new(32, 32, 3).unwrap()).unwrap()
        }),
        (1usize..=12, 1usize..=6).prop_map(|(n, s)| {
            build_quartznet(n, s, TensorShape::new(1, 64, 32).unwrap()).unwrap()
        }),
    ]
}

#[test]
fn bottleneck_counts() {
    let g = build_resnet_bottleneck(TensorShape::new(224, 224, 3).unwrap()).unwrap();
    assert!(validate(&g).is_empty());
    assert_eq!(g.skips().len(), 16);
    assert_eq!(adds(&g), 16);
    assert_eq!(projections(&g), 4);
    assert_eq!(g.conv_count(), 1 + 16 * 3 + 4);
    assert!(g.skips().iter().all(|s| s.span == 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn resnet_basic_structure(k in 1usize..=18) {
        let depth = 6 * k + 2;
        let g = build_resnet_basic(depth, 16, TensorShape::new(32, 32, 3).unwrap()).unwrap();
        prop_assert!(validate(&g).is_empty());
        prop_assert_eq!(g.skips().len(), 3 * k);
        prop_assert_eq!(adds(&g), 3 * k);
        prop_assert_eq!(projections(&g), 2);
        prop_assert_eq!(g.conv_count(), depth - 2 + 1 + 2);
        prop_assert!(g.skips().iter().all(|s| s.span == 2));
    }

    #[test]
    fn resnet_rejects_bad_depth(depth in 0usize..200) {
        prop_assume!(depth < 8 || (depth - 2) % 6 != 0);
        let err = build_resnet_basic(depth, 16, TensorShape::new(32, 32, 3).unwrap()).unwrap_err();
        prop_assert!(err.to_string().contains("6k + 2"));
    }

    #[test]
    fn quartznet_structure(n in 1usize..=12, s in 1usize..=6) {
        let g = build_quartznet(n, s, TensorShape::new(1, 64, 32).unwrap()).unwrap();
        prop_assert!(validate(&g).is_empty());
        prop_assert_eq!(g.skips().len(), n);
        prop_assert_eq!(adds(&g), n);
        prop_assert!(g.skips().iter().all(|e| e.span == s));
        prop_assert_eq!(g.conv_count(), n * s + 1);
    }

    #[test]
    fn json_round_trip(g in graph_strategy(), steps in 0usize..4, shorten in any::<bool>()) {
        let mode = if shorten { AlterMode::Shorten } else { AlterMode::Remove };
        let mut g = g;
        for _ in 0..steps {
            if let Some((next, _)) = step(&g, mode) { g = next; }
        }
        let text = g.to_json().unwrap();
        let back = NetworkGraph::from_json(&text).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn removal_steps(g in graph_strategy()) {
        let before = g.skips().len();
        let mut cur = g.clone();
        for k in 1..=before {
            let (next, alt) = step(&cur, AlterMode::Remove).unwrap();
            prop_assert!(alt.created.is_empty());
            prop_assert_eq!(next.skips().len(), before - k);
            prop_assert!(validate(&next).is_empty());
            cur = next;
        }
        prop_assert!(is_fixed_point(&cur, AlterMode::Remove));
        prop_assert_eq!(&apply_all(&cur, AlterMode::Remove), &cur);
        prop_assert_eq!(main_params(&cur), main_params(&g));
        prop_assert_eq!(adds(&cur), 0);
    }

    #[test]
    fn shortening_fixed_point(g in graph_strategy()) {
        let total_span: usize = g.skips().iter().map(|s| s.span).sum();
        let short = apply_all(&g, AlterMode::Shorten);
        prop_assert!(validate(&short).is_empty());
        prop_assert!(short.skips().iter().all(|s| s.span == 1));
        prop_assert_eq!(short.skips().len(), total_span);
        prop_assert_eq!(main_params(&short), main_params(&g));
        prop_assert!(is_fixed_point(&short, AlterMode::Shorten));
        prop_assert_eq!(projections(&short), projections(&g));
    }

    #[test]
    fn one_shorten_step_splits_first_long_skip(g in graph_strategy()) {
        let Some(target) = g.skips().iter().find(|s| s.span > 1).cloned() else { return Ok(()) };
        let (next, alt) = step(&g, AlterMode::Shorten).unwrap();
        prop_assert_eq!(alt.altered, target.id);
        prop_assert_eq!(alt.created.len(), target.span);
        prop_assert_eq!(next.skips().len(), g.skips().len() - 1 + target.span);
        prop_assert!(validate(&next).is_empty());
    }
}
