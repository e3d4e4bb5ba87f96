use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{LayerKind, NetworkGraph, SkipKind};

/// One broken invariant. `subject` names the offending layer or skip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

/// Checks every structural invariant of the IR. An empty result means the
/// graph is well formed.
pub fn validate(graph: &NetworkGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut report = |subject: String, message: String| out.push(Violation { subject, message });

    let layers = graph.layers();
    if layers.is_empty() {
        report("graph".into(), "graph has no layers".into());
        return out;
    }
    if layers[0].kind != LayerKind::Input {
        report(layers[0].id.to_string(), "first layer must be the graph input".into());
    }

    let mut seen = HashSet::new();
    for l in layers {
        if !seen.insert(l.id) {
            report(l.id.to_string(), "duplicate layer id".into());
        }
    }
    let mut seen = HashSet::new();
    for s in graph.skips() {
        if !seen.insert(s.id) {
            report(s.id.to_string(), "duplicate skip id".into());
        }
    }

    let pos = graph.positions();
    let projections = graph.projection_convs();
    let mut projection_owner: HashMap<_, usize> = HashMap::new();
    for s in graph.skips() {
        if let Some(c) = s.kind.projection_conv() {
            *projection_owner.entry(c).or_default() += 1;
        }
    }
    for (conv, owners) in &projection_owner {
        if *owners > 1 {
            report(conv.to_string(), format!("projection conv shared by {owners} skips"));
        }
    }

    // Per-layer shape consistency along the main chain.
    let mut prev_out = None;
    for (i, l) in layers.iter().enumerate() {
        if !l.input_shape.is_valid() || !l.output_shape.is_valid() {
            report(l.id.to_string(), "tensor dimensions must be >= 1".into());
            continue;
        }
        if i > 0 && l.kind == LayerKind::Input {
            report(l.id.to_string(), "graph has more than one input".into());
        }
        match l.kind.output_shape(l.input_shape) {
            Ok(expected) if expected != l.output_shape => report(
                l.id.to_string(),
                format!("output shape {} inconsistent with {} on input {}", l.output_shape, l.kind.name(), l.input_shape),
            ),
            Err(msg) => report(l.id.to_string(), msg),
            _ => {}
        }
        if projections.contains(&l.id) {
            continue;
        }
        if let Some(prev) = prev_out {
            if l.input_shape != prev {
                report(
                    l.id.to_string(),
                    format!("input shape {} does not match predecessor output {prev}", l.input_shape),
                );
            }
        } else if l.input_shape != l.output_shape {
            report(l.id.to_string(), "graph input must not change shape".into());
        }
        prev_out = Some(l.output_shape);
    }

    // Every Add takes exactly one skip operand on top of its main input.
    let mut skips_into: HashMap<_, usize> = HashMap::new();
    for s in graph.skips() {
        *skips_into.entry(s.sink).or_default() += 1;
    }
    for l in layers.iter().filter(|l| l.kind == LayerKind::Add) {
        let n = skips_into.get(&l.id).copied().unwrap_or(0);
        if n != 1 {
            report(l.id.to_string(), format!("add node has {} predecessors, expected 2", n + 1));
        }
    }

    let mut last_source = None;
    for s in graph.skips() {
        let subject = s.id.to_string();
        let (Some(&src), Some(&dst)) = (pos.get(&s.source), pos.get(&s.sink)) else {
            report(subject, "source or sink does not exist".into());
            continue;
        };
        if layers[dst].kind != LayerKind::Add {
            report(subject.clone(), format!("sink {} is not an add node", s.sink));
        }
        if projections.contains(&s.source) {
            report(subject.clone(), "source is a projection conv".into());
        }
        if src >= dst {
            report(subject, "source does not precede sink".into());
            continue;
        }
        if let Some(prev) = last_source {
            if src <= prev {
                report(subject.clone(), "skips are not sorted by source position".into());
            }
        }
        last_source = Some(src);

        let span = graph.span_between(s.source, s.sink).unwrap_or(0);
        if span < 1 {
            report(subject.clone(), "skip bypasses no layer-group".into());
        }
        if span != s.span {
            report(subject.clone(), format!("recorded span {} but bypasses {span} layer-groups", s.span));
        }

        let src_shape = layers[src].output_shape;
        let dst_shape = layers[dst].output_shape;
        match s.kind {
            SkipKind::Identity => {
                if src_shape != dst_shape {
                    report(subject, format!("identity skip joins {src_shape} with {dst_shape}"));
                }
            }
            SkipKind::Projection1x1 { out_channels, stride, conv } => {
                let Some(&c) = pos.get(&conv) else {
                    report(subject, format!("projection conv {conv} does not exist"));
                    continue;
                };
                let layer = &layers[c];
                if layer.kind != (LayerKind::Conv { kernel: 1, out_channels, stride }) {
                    report(subject.clone(), format!("{conv} is not a matching 1x1 projection conv"));
                }
                if !(src < c && c < dst) {
                    report(subject.clone(), format!("{conv} is not between source and sink"));
                }
                if layer.input_shape != src_shape || layer.output_shape != dst_shape {
                    report(subject, format!("projection maps {} -> {}, needs {src_shape} -> {dst_shape}", layer.input_shape, layer.output_shape));
                }
            }
        }
    }
    out
}
