//! Skip-connection rewrites: removal and shortening, one skip at a time,
//! always starting from the skip closest to the input.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::graph_ir::{LayerGroup, LayerId, LayerKind, NetworkGraph, SkipEdge, SkipId, SkipKind, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlterMode {
    Remove,
    Shorten,
}

impl fmt::Display for AlterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlterMode::Remove => "remove",
            AlterMode::Shorten => "shorten",
        })
    }
}

impl FromStr for AlterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "remove" => Ok(AlterMode::Remove),
            "shorten" => Ok(AlterMode::Shorten),
            other => Err(Error::InvalidParams(format!("unknown alter mode {other:?}, expected remove or shorten"))),
        }
    }
}

/// What one step did: the skip that was altered and the skips that replaced
/// it (empty for removal).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alteration {
    pub altered: SkipId,
    pub created: Vec<SkipId>,
}

/// Deletes the input-most skip. Its `Add` collapses to a pass-through and is
/// dropped, together with the projection conv if the skip had one.
pub fn remove_next_skip(graph: &NetworkGraph) -> (NetworkGraph, Option<SkipId>) {
    let Some(&skip) = graph.skips().first() else {
        return (graph.clone(), None);
    };
    let pass_through = graph
        .main_predecessor(skip.sink)
        .expect("a skip sink always has a main-chain predecessor");
    let projection = skip.kind.projection_conv();
    let (name, mut layers, mut skips) = graph.clone().into_parts();
    skips.remove(0);
    layers.retain(|l| l.id != skip.sink && Some(l.id) != projection);
    for s in &mut skips {
        if s.source == skip.sink {
            s.source = pass_through;
        }
    }
    (NetworkGraph::from_parts(name, layers, skips).normalize(), Some(skip.id))
}

/// Splits the input-most skip spanning more than one layer-group into one
/// span-1 skip per group, chained through newly inserted `Add` nodes.
///
/// Group boundaries sit right after each parametric layer, so a trailing
/// activation starts the next group. A projection conv moves to the first
/// split whose endpoints differ in shape; any further split that still
/// changes shape gets a fresh 1x1 projection.
pub fn shorten_next_skip(graph: &NetworkGraph) -> (NetworkGraph, Option<Vec<SkipId>>) {
    match shorten_step(graph) {
        Some((g, alt)) => (g, Some(alt.created)),
        None => (graph.clone(), None),
    }
}

fn shorten_step(graph: &NetworkGraph) -> Option<(NetworkGraph, Alteration)> {
    let target_idx = graph.skips().iter().position(|s| s.span > 1)?;
    let target = graph.skips()[target_idx];
    let pos = graph.positions();
    let projections = graph.projection_convs();
    let layers = graph.layers();
    let (src, dst) = (pos[&target.source], pos[&target.sink]);

    // Main-chain layers that end a group (all but the last parametric layer).
    let mut param_layers: Vec<usize> = (src + 1..dst)
        .filter(|&i| !projections.contains(&layers[i].id) && layers[i].kind.is_parametric())
        .collect();
    param_layers.pop();
    let boundaries = param_layers;

    let mut next_layer = graph.next_layer_id().0;
    let mut next_skip = graph.next_skip_id().0;
    let mut reusable_projection = target.kind.projection_conv();
    let block = layers[dst].block;

    // Endpoint shapes of each split, in order.
    let mut split_sources = vec![(target.source, layers[src].output_shape)];
    let mut split_adds = Vec::with_capacity(boundaries.len());
    for &b in &boundaries {
        let add = LayerId(next_layer);
        next_layer += 1;
        split_adds.push(add);
        split_sources.push((add, layers[b].output_shape));
    }
    let mut split_sinks: Vec<(LayerId, TensorShape)> =
        boundaries.iter().zip(&split_adds).map(|(&b, &a)| (a, layers[b].output_shape)).collect();
    split_sinks.push((target.sink, layers[dst].output_shape));

    let mut new_skips = Vec::with_capacity(split_sinks.len());
    let mut projection_layers: Vec<Option<LayerGroup>> = Vec::with_capacity(split_sinks.len());
    for (&(source, from), &(sink, to)) in split_sources.iter().zip(&split_sinks) {
        let id = SkipId(next_skip);
        next_skip += 1;
        let (kind, conv_layer) = if from == to {
            (SkipKind::Identity, None)
        } else {
            let conv = reusable_projection.take().unwrap_or_else(|| {
                next_layer += 1;
                LayerId(next_layer - 1)
            });
            let stride = from.height.div_ceil(to.height).max(1);
            let conv_kind = LayerKind::Conv { kernel: 1, out_channels: to.channels, stride };
            let output_shape = conv_kind.output_shape(from).unwrap_or(to);
            (
                SkipKind::Projection1x1 { out_channels: to.channels, stride, conv },
                Some(LayerGroup { id: conv, kind: conv_kind, input_shape: from, output_shape, block }),
            )
        };
        new_skips.push(SkipEdge { id, source, sink, span: 1, kind });
        projection_layers.push(conv_layer);
    }

    let old_projection = target.kind.projection_conv();
    let mut out_layers = Vec::with_capacity(layers.len() + 2 * boundaries.len());
    for (i, layer) in layers.iter().enumerate() {
        if Some(layer.id) == old_projection {
            continue;
        }
        if i == dst {
            if let Some(conv) = projection_layers.last().cloned().flatten() {
                out_layers.push(conv);
            }
        }
        out_layers.push(layer.clone());
        if let Some(j) = boundaries.iter().position(|&b| b == i) {
            if let Some(conv) = projection_layers[j].clone() {
                out_layers.push(conv);
            }
            let shape = layer.output_shape;
            out_layers.push(LayerGroup {
                id: split_adds[j],
                kind: LayerKind::Add,
                input_shape: shape,
                output_shape: shape,
                block,
            });
        }
    }

    let (name, _, mut skips) = graph.clone().into_parts();
    let created: Vec<SkipId> = new_skips.iter().map(|s| s.id).collect();
    skips.splice(target_idx..=target_idx, new_skips);
    let g = NetworkGraph::from_parts(name, out_layers, skips).normalize();
    Some((g, Alteration { altered: target.id, created }))
}

/// One alteration in the given mode, or `None` when no candidate remains.
pub fn step(graph: &NetworkGraph, mode: AlterMode) -> Option<(NetworkGraph, Alteration)> {
    match mode {
        AlterMode::Remove => {
            let (g, removed) = remove_next_skip(graph);
            removed.map(|altered| (g, Alteration { altered, created: Vec::new() }))
        }
        AlterMode::Shorten => shorten_step(graph),
    }
}

/// Applies single steps until nothing is left to alter.
pub fn apply_all(graph: &NetworkGraph, mode: AlterMode) -> NetworkGraph {
    let budget = graph.skips().len() * graph.max_span().max(1);
    let mut current = graph.clone();
    let mut steps = 0;
    while let Some((next, _)) = step(&current, mode) {
        current = next;
        steps += 1;
        debug_assert!(steps <= budget, "apply_all exceeded {budget} steps");
    }
    current
}

/// True when `mode` has nothing left to do on `graph`.
pub fn is_fixed_point(graph: &NetworkGraph, mode: AlterMode) -> bool {
    match mode {
        AlterMode::Remove => graph.skips().is_empty(),
        AlterMode::Shorten => graph.skips().iter().all(|s| s.span <= 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::{
        build_basic_block, build_quartznet, build_resnet_basic, build_resnet_bottleneck, validate,
    };

    fn resnet20() -> NetworkGraph {
        build_resnet_basic(20, 16, TensorShape::new(32, 32, 3).unwrap()).unwrap()
    }

    #[test]
    fn remove_first_skip() {
        let g = resnet20();
        let (h, removed) = remove_next_skip(&g);
        assert_eq!(removed, Some(g.skips()[0].id));
        assert_eq!(h.skips().len(), 8);
        assert!(validate(&h).is_empty(), "{:?}", validate(&h));
        assert_eq!(h.layers().len(), g.layers().len() - 1);
    }

    #[test]
    fn remove_on_skipless_graph_is_identity() {
        let g = apply_all(&resnet20(), AlterMode::Remove);
        assert!(g.skips().is_empty());
        let (h, removed) = remove_next_skip(&g);
        assert_eq!(removed, None);
        assert_eq!(h, g);
    }

    #[test]
    fn removing_projection_drops_its_conv() {
        let g = build_resnet_bottleneck(TensorShape::new(224, 224, 3).unwrap()).unwrap();
        let before = g.conv_count();
        let (h, _) = remove_next_skip(&g);
        assert_eq!(h.conv_count(), before - 1);
        assert!(validate(&h).is_empty());
    }

    #[test]
    fn shorten_basic_block_groups() {
        let g = build_basic_block(16, TensorShape::new(32, 32, 16).unwrap()).unwrap();
        let (h, created) = shorten_next_skip(&g);
        let created = created.unwrap();
        assert_eq!(created.len(), 2);
        assert!(validate(&h).is_empty(), "{:?}", validate(&h));
        let kinds: Vec<&str> = h.layers().iter().map(|l| l.kind.name()).collect();
        assert_eq!(kinds, ["input", "conv", "add", "relu", "conv", "add", "relu"]);
        assert_eq!(h.skips()[0].source, LayerId(0));
        assert_eq!(h.skips()[1].source, h.skips()[0].sink);
    }

    #[test]
    fn shorten_quartznet_block() {
        let g = build_quartznet(10, 5, TensorShape::new(1, 64, 32).unwrap()).unwrap();
        let (h, created) = shorten_next_skip(&g);
        assert_eq!(created.unwrap().len(), 5);
        assert_eq!(h.skips().len(), 14);
        assert!(h.skips()[..5].iter().all(|s| s.span == 1));
        assert!(validate(&h).is_empty());
    }

    #[test]
    fn shorten_skips_over_span_one() {
        let g = apply_all(&resnet20(), AlterMode::Shorten);
        assert!(g.skips().iter().all(|s| s.span == 1));
        let (h, created) = shorten_next_skip(&g);
        assert!(created.is_none());
        assert_eq!(h, g);
    }

    #[test]
    fn shorten_projection_basic_block_keeps_one_projection() {
        let g = resnet20();
        let projections_before = g.projection_convs().len();
        let h = apply_all(&g, AlterMode::Shorten);
        assert!(validate(&h).is_empty(), "{:?}", validate(&h));
        assert_eq!(h.projection_convs().len(), projections_before);
        assert_eq!(h.skips().len(), 18);
    }

    #[test]
    fn shorten_bottleneck_stays_valid() {
        let g = build_resnet_bottleneck(TensorShape::new(64, 64, 3).unwrap()).unwrap();
        let h = apply_all(&g, AlterMode::Shorten);
        assert_eq!(h.skips().len(), 48);
        assert!(validate(&h).is_empty(), "{:?}", validate(&h));
    }

    #[test]
    fn alter_mode_parsing() {
        assert_eq!("Remove".parse::<AlterMode>().unwrap(), AlterMode::Remove);
        assert!("prune".parse::<AlterMode>().is_err());
    }
}
