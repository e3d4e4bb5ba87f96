//! Builders for the topologies used throughout the crate.

use super::{LayerGroup, LayerId, LayerKind, NetworkGraph, SkipEdge, SkipId, SkipKind, TensorShape};
use crate::error::{Error, Result};

/// Kernel widths of QuartzNet's five block groups (B1..B5).
pub const QUARTZNET_KERNELS: [usize; 5] = [33, 39, 51, 63, 75];

struct GraphBuilder {
    name: String,
    layers: Vec<LayerGroup>,
    skips: Vec<SkipEdge>,
    shape: TensorShape,
    tail: LayerId,
    block: Option<u32>,
    next_block: u32,
}

impl GraphBuilder {
    fn new(name: impl Into<String>, input: TensorShape) -> Result<Self> {
        if !input.is_valid() {
            return Err(Error::InvalidParams(format!("invalid input shape {input}")));
        }
        let id = LayerId(0);
        Ok(Self {
            name: name.into(),
            layers: vec![LayerGroup {
                id,
                kind: LayerKind::Input,
                input_shape: input,
                output_shape: input,
                block: None,
            }],
            skips: Vec::new(),
            shape: input,
            tail: id,
            block: None,
            next_block: 0,
        })
    }

    fn add_layer(&mut self, kind: LayerKind, input: TensorShape) -> Result<(LayerId, TensorShape)> {
        let output = kind.output_shape(input).map_err(Error::InvalidParams)?;
        let id = LayerId(self.layers.len() as u32);
        self.layers.push(LayerGroup {
            id,
            kind,
            input_shape: input,
            output_shape: output,
            block: self.block,
        });
        Ok((id, output))
    }

    /// Appends a main-chain layer.
    fn push(&mut self, kind: LayerKind) -> Result<LayerId> {
        let (id, out) = self.add_layer(kind, self.shape)?;
        self.shape = out;
        self.tail = id;
        Ok(id)
    }

    fn conv(&mut self, kernel: usize, out_channels: usize, stride: usize) -> Result<LayerId> {
        self.push(LayerKind::Conv { kernel, out_channels, stride })
    }

    fn relu(&mut self) -> Result<LayerId> {
        self.push(LayerKind::Relu)
    }

    /// Wraps `body` in a skip connection that ends in an `Add`. With
    /// `projection = Some(stride)` the skip carries a 1x1 conv matching the
    /// body's output channels.
    fn residual(
        &mut self,
        projection: Option<usize>,
        body: impl FnOnce(&mut Self) -> Result<()>,
    ) -> Result<()> {
        self.block = Some(self.next_block);
        self.next_block += 1;
        let source = self.tail;
        let source_shape = self.shape;
        body(self)?;
        let kind = match projection {
            None => {
                if source_shape != self.shape {
                    return Err(Error::InvalidParams(format!(
                        "identity skip from {source} joins {source_shape} with {}",
                        self.shape
                    )));
                }
                SkipKind::Identity
            }
            Some(stride) => {
                let out_channels = self.shape.channels;
                let (conv, out) = self.add_layer(
                    LayerKind::Conv { kernel: 1, out_channels, stride },
                    source_shape,
                )?;
                if out != self.shape {
                    return Err(Error::InvalidParams(format!(
                        "projection produces {out} but the block produces {}",
                        self.shape
                    )));
                }
                SkipKind::Projection1x1 { out_channels, stride, conv }
            }
        };
        let sink = self.push(LayerKind::Add)?;
        self.block = None;
        let span = self
            .layers
            .iter()
            .skip_while(|l| l.id != source)
            .skip(1)
            .take_while(|l| l.id != sink)
            .filter(|l| l.kind.is_parametric() && kind.projection_conv() != Some(l.id))
            .count();
        self.skips.push(SkipEdge { id: SkipId(self.skips.len() as u32), source, sink, span, kind });
        Ok(())
    }

    fn finish(self) -> NetworkGraph {
        NetworkGraph::from_parts(self.name, self.layers, self.skips)
    }
}

/// CIFAR-style ResNet with basic blocks: a 3x3 stem, then three stages of
/// `(depth - 2) / 6` blocks at `base_filters`, `2x` and `4x` channels. Stage
/// transitions downsample by 2 and use projection skips.
///
/// The IR holds the convolutional trunk only; pooling and the classifier are
/// not represented.
pub fn build_resnet_basic(depth: usize, base_filters: usize, input: TensorShape) -> Result<NetworkGraph> {
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(Error::InvalidParams(format!(
            "resnet depth must satisfy depth = 6k + 2 with k >= 1 (8, 20, 32, 44, 56, 110, ...), got {depth}"
        )));
    }
    if base_filters == 0 {
        return Err(Error::InvalidParams("base_filters must be >= 1".into()));
    }
    let per_stage = (depth - 2) / 6;
    let mut b = GraphBuilder::new(format!("resnet{depth}"), input)?;
    b.conv(3, base_filters, 1)?;
    b.relu()?;
    for stage in 0..3 {
        let filters = base_filters << stage;
        for block in 0..per_stage {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let needs_projection = stride != 1 || b.shape.channels != filters;
            b.residual(needs_projection.then_some(stride), |b| {
                b.conv(3, filters, stride)?;
                b.relu()?;
                b.conv(3, filters, 1)?;
                Ok(())
            })?;
            b.relu()?;
        }
    }
    Ok(b.finish())
}

/// A single basic block (conv-relu-conv-add-relu) whose skip starts at the
/// graph input. This is the unit the hardware fixtures were measured on.
pub fn build_basic_block(filters: usize, input: TensorShape) -> Result<NetworkGraph> {
    if filters == 0 {
        return Err(Error::InvalidParams("filters must be >= 1".into()));
    }
    let input = TensorShape { channels: filters, ..input };
    let mut b = GraphBuilder::new(format!("basic_block_f{filters}"), input)?;
    b.residual(None, |b| {
        b.conv(3, filters, 1)?;
        b.relu()?;
        b.conv(3, filters, 1)?;
        Ok(())
    })?;
    b.relu()?;
    Ok(b.finish())
}

/// ResNet-50 style network: stage block counts [3, 4, 6, 3] of 1x1-3x3-1x1
/// bottlenecks; the first block of every stage has a projection skip.
///
/// The 7x7 stem uses stride 4, standing in for the stride-2 stem plus
/// stride-2 max-pool that the IR cannot express.
pub fn build_resnet_bottleneck(input: TensorShape) -> Result<NetworkGraph> {
    let mut b = GraphBuilder::new("resnet50", input)?;
    b.conv(7, 64, 4)?;
    b.relu()?;
    for (stage, (mid, blocks)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
        for block in 0..blocks {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let projection = (block == 0).then_some(stride);
            b.residual(projection, |b| {
                b.conv(1, mid, 1)?;
                b.relu()?;
                b.conv(3, mid, stride)?;
                b.relu()?;
                b.conv(1, 4 * mid, 1)?;
                Ok(())
            })?;
            b.relu()?;
        }
    }
    Ok(b.finish())
}

/// QuartzNet-style 1-D network with `n_blocks` residual blocks, each wrapping
/// `span` conv groups. Time runs along the width; height is 1.
pub fn build_quartznet(n_blocks: usize, span: usize, input: TensorShape) -> Result<NetworkGraph> {
    if n_blocks == 0 || span == 0 {
        return Err(Error::InvalidParams(format!(
            "quartznet needs n_blocks >= 1 and span >= 1, got {n_blocks}x{span}"
        )));
    }
    const FILTERS: usize = 256;
    let mut b = GraphBuilder::new(format!("quartznet{n_blocks}x{span}"), input)?;
    b.conv(33, FILTERS, 1)?;
    b.relu()?;
    for block in 0..n_blocks {
        let kernel = QUARTZNET_KERNELS[block * QUARTZNET_KERNELS.len() / n_blocks];
        b.residual(None, |b| {
            for r in 0..span {
                b.conv(kernel, FILTERS, 1)?;
                if r + 1 < span {
                    b.relu()?;
                }
            }
            Ok(())
        })?;
        b.relu()?;
    }
    Ok(b.finish())
}

/// Fully connected residual network for the desk-scale training tasks:
/// `Dense(hidden) -> ReLU`, then `n_blocks` identity-skip blocks of
/// `layers_per_block` dense layers, then a `Dense(classes)` head producing
/// logits.
pub fn build_residual_mlp(
    features: usize,
    hidden: usize,
    n_blocks: usize,
    layers_per_block: usize,
    classes: usize,
) -> Result<NetworkGraph> {
    if features == 0 || hidden == 0 || classes == 0 || layers_per_block == 0 {
        return Err(Error::InvalidParams(
            "features, hidden, classes and layers_per_block must be >= 1".into(),
        ));
    }
    let mut b = GraphBuilder::new(format!("resmlp{n_blocks}x{layers_per_block}"), TensorShape::vector(features)?)?;
    b.push(LayerKind::Dense { out_features: hidden })?;
    b.relu()?;
    for _ in 0..n_blocks {
        b.residual(None, |b| {
            for r in 0..layers_per_block {
                b.push(LayerKind::Dense { out_features: hidden })?;
                if r + 1 < layers_per_block {
                    b.relu()?;
                }
            }
            Ok(())
        })?;
        b.relu()?;
    }
    b.push(LayerKind::Dense { out_features: classes })?;
    Ok(b.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_ir::validate;

    fn cifar() -> TensorShape {
        TensorShape::new(32, 32, 3).unwrap()
    }

    /// Counts residual blocks by walking the layer list for Add nodes; kept
    /// independent of the builder's own skip bookkeeping.
    fn count_adds(g: &NetworkGraph) -> usize {
        g.layers().iter().filter(|l| l.kind == LayerKind::Add).count()
    }

    #[test]
    fn resnet20_has_nine_blocks() {
        let g = build_resnet_basic(20, 16, cifar()).unwrap();
        assert_eq!(count_adds(&g), 9);
        assert_eq!(g.skips().len(), 9);
        assert!(validate(&g).is_empty());
        let projections = g.skips().iter().filter(|s| s.kind.projection_conv().is_some()).count();
        assert_eq!(projections, 2);
        for s in g.skips() {
            assert_eq!(s.span, 2);
            if let SkipKind::Projection1x1 { stride, .. } = s.kind {
                assert_eq!(stride, 2);
            }
        }
        assert_eq!(g.output_shape().unwrap(), TensorShape::new(8, 8, 64).unwrap());
    }

    #[test]
    fn resnet8_has_three_blocks() {
        let g = build_resnet_basic(8, 16, cifar()).unwrap();
        assert_eq!(count_adds(&g), 3);
    }

    #[test]
    fn resnet_depth_rule() {
        let err = build_resnet_basic(21, 16, cifar()).unwrap_err().to_string();
        assert!(err.contains("6k + 2"), "{err}");
        assert!(build_resnet_basic(2, 16, cifar()).is_err());
    }

    #[test]
    fn bottleneck_counts() {
        let g = build_resnet_bottleneck(TensorShape::new(224, 224, 3).unwrap()).unwrap();
        assert_eq!(count_adds(&g), 16);
        assert_eq!(g.conv_count(), 1 + 3 * 16 + 4);
        assert!(validate(&g).is_empty());
        let mut first_of_stage = 0;
        for (i, s) in g.skips().iter().enumerate() {
            assert_eq!(s.span, 3);
            if [0, 3, 7, 13].contains(&i) {
                assert!(s.kind.projection_conv().is_some());
                first_of_stage += 1;
            } else {
                assert_eq!(s.kind, SkipKind::Identity);
            }
        }
        assert_eq!(first_of_stage, 4);
        assert_eq!(g.output_shape().unwrap(), TensorShape::new(7, 7, 2048).unwrap());
    }

    #[test]
    fn quartznet_spans() {
        let input = TensorShape::new(1, 128, 64).unwrap();
        for (n, s) in [(10, 5), (5, 5), (1, 1)] {
            let g = build_quartznet(n, s, input).unwrap();
            assert_eq!(g.skips().len(), n);
            assert!(g.skips().iter().all(|k| k.span == s));
            assert!(validate(&g).is_empty());
        }
        assert!(build_quartznet(0, 5, input).is_err());
    }

    #[test]
    fn basic_block_fixture_unit() {
        let g = build_basic_block(16, cifar()).unwrap();
        assert_eq!(g.skips().len(), 1);
        assert_eq!(g.skips()[0].source, LayerId(0));
        assert_eq!(g.skips()[0].span, 2);
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn residual_mlp_shape() {
        let g = build_residual_mlp(2, 16, 9, 2, 3).unwrap();
        assert_eq!(g.skips().len(), 9);
        assert_eq!(g.output_shape().unwrap(), TensorShape::vector(3).unwrap());
        assert!(validate(&g).is_empty());
    }
}
