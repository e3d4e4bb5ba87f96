//! Evaluating a [`NetworkGraph`] on the tape, parameter storage and SGD.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph_ir::{LayerGroup, LayerId, LayerKind, NetworkGraph, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Weights of every parametric layer, keyed by layer id. Also used to hold
/// per-layer gradients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamStore {
    layers: BTreeMap<LayerId, LayerParams>,
}

/// Weight tensor shape of a parametric layer: `[k, k, c_in, c_out]` for conv,
/// `[in, out]` for dense.
pub fn weight_shape(layer: &LayerGroup) -> Option<Vec<usize>> {
    match layer.kind {
        LayerKind::Conv { kernel, out_channels, .. } => {
            Some(vec![kernel, kernel, layer.input_shape.channels, out_channels])
        }
        LayerKind::Dense { out_features } => Some(vec![layer.input_shape.elements(), out_features]),
        _ => None,
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: LayerId) -> Option<&LayerParams> {
        self.layers.get(&id)
    }

    pub fn get_mut(&mut self, id: LayerId) -> Option<&mut LayerParams> {
        self.layers.get_mut(&id)
    }

    pub fn insert(&mut self, id: LayerId, params: LayerParams) {
        self.layers.insert(id, params);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &LayerParams)> {
        self.layers.iter()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.layers.values().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Zero tensors shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(id, p)| {
                (*id, LayerParams { weight: Tensor::zeros(p.weight.shape()), bias: Tensor::zeros(p.bias.shape()) })
            })
            .collect();
        Self { layers }
    }

    /// Drops parameters of layers no longer in `graph` and He-initializes any
    /// parametric layer that is missing or whose shape changed.
    pub fn sync_with(&mut self, graph: &NetworkGraph, rng: &mut ChaCha8Rng) {
        let wanted: HashMap<LayerId, Vec<usize>> = graph
            .layers()
            .iter()
            .filter_map(|l| weight_shape(l).map(|s| (l.id, s)))
            .collect();
        self.layers.retain(|id, p| wanted.get(id).is_some_and(|s| s.as_slice() == p.weight.shape()));
        for layer in graph.layers() {
            let Some(shape) = weight_shape(layer) else { continue };
            if self.layers.contains_key(&layer.id) {
                continue;
            }
            let fan_in = shape[..shape.len() - 1].iter().product::<usize>().max(1);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(rng)).collect();
            let out = *shape.last().expect("non-empty weight shape");
            self.layers.insert(
                layer.id,
                LayerParams { weight: Tensor::new(shape, data).expect("weight shape"), bias: Tensor::zeros(&[out]) },
            );
        }
    }
}

/// He-normal weights and zero biases, reproducible from `seed`.
pub fn init_params(graph: &NetworkGraph, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    store.sync_with(graph, &mut rng);
    store
}

/// A recorded forward evaluation. Extend `tape` with a loss, then call
/// [`ForwardPass::backward`].
pub struct ForwardPass {
    pub tape: Tape,
    pub output: Var,
    params: BTreeMap<LayerId, (Var, Var)>,
}

impl ForwardPass {
    pub fn output_value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Per-layer parameter gradients of the scalar `loss`. Parameters the loss
    /// does not depend on get zero gradients.
    pub fn backward(&self, loss: Var) -> ParamStore {
        let grads: Gradients = self.tape.backward(loss);
        let layers = self
            .params
            .iter()
            .map(|(id, &(w, b))| {
                let pick = |v: Var| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape()));
                (*id, LayerParams { weight: pick(w), bias: pick(b) })
            })
            .collect();
        ParamStore { layers }
    }
}

/// Runs `graph` on a batch `input` of shape `[n, h, w, c]` (or `[n, features]`
/// for vector-input graphs). With `weight_precision` set, weights and biases
/// pass through fake quantization with a straight-through gradient.
pub fn forward(
    graph: &NetworkGraph,
    params: &ParamStore,
    input: &Tensor,
    weight_precision: Option<Precision>,
) -> Result<ForwardPass> {
    let in_shape = graph
        .input_shape()
        .ok_or_else(|| Error::InvalidGraph("graph has no layers".into()))?;
    let n = input.rows();
    if input.row_len() != in_shape.elements() || input.is_empty() {
        return Err(Error::Shape {
            layer: "input".into(),
            message: format!("expected {n} samples of {in_shape}, got tensor {:?}", input.shape()),
        });
    }
    let input = input
        .clone()
        .reshaped(vec![n, in_shape.height, in_shape.width, in_shape.channels])?;

    let projections = graph.projection_convs();
    let skip_operand: HashMap<LayerId, (LayerId, Option<LayerId>)> = graph
        .skips()
        .iter()
        .map(|s| (s.sink, (s.source, s.kind.projection_conv())))
        .collect();
    let skip_source_of_projection: HashMap<LayerId, LayerId> = graph
        .skips()
        .iter()
        .filter_map(|s| s.kind.projection_conv().map(|c| (c, s.source)))
        .collect();

    let mut tape = Tape::new();
    let mut values: HashMap<LayerId, Var> = HashMap::new();
    let mut param_vars = BTreeMap::new();
    let mut main: Option<Var> = None;

    for layer in graph.layers() {
        let name = || layer.id.to_string();
        let operand = if projections.contains(&layer.id) {
            let src = skip_source_of_projection[&layer.id];
            values.get(&src).copied()
        } else {
            main
        };
        let value = match layer.kind {
            LayerKind::Input => tape.leaf(input.clone()),
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                let x = operand.ok_or_else(|| Error::Shape { layer: name(), message: "no input".into() })?;
                let p = params
                    .get(layer.id)
                    .ok_or_else(|| Error::Shape { layer: name(), message: "missing parameters".into() })?;
                let expected = weight_shape(layer).expect("parametric layer");
                if p.weight.shape() != expected.as_slice() || p.bias.len() != *expected.last().unwrap() {
                    return Err(Error::Shape {
                        layer: name(),
                        message: format!("weight shape {:?}, expected {expected:?}", p.weight.shape()),
                    });
                }
                let mut w = tape.leaf(p.weight.clone());
                let mut b = tape.leaf(p.bias.clone());
                param_vars.insert(layer.id, (w, b));
                if let Some(prec) = weight_precision {
                    w = tape.fake_quantize(w, prec);
                    b = tape.fake_quantize(b, prec);
                }
                match layer.kind {
                    LayerKind::Conv { stride, .. } => tape.conv2d(x, w, b, stride),
                    _ => tape.dense(x, w, b),
                }
            }
            LayerKind::Relu => tape.relu(operand.expect("main chain has an input")),
            LayerKind::BatchNormFolded => operand.expect("main chain has an input"),
            LayerKind::Quantize { precision } => tape.fake_quantize(operand.expect("main chain has an input"), precision),
            LayerKind::Add => {
                let (src, proj) = skip_operand
                    .get(&layer.id)
                    .copied()
                    .ok_or_else(|| Error::Shape { layer: name(), message: "add without a skip operand".into() })?;
                let skip_var = values
                    .get(&proj.unwrap_or(src))
                    .copied()
                    .ok_or_else(|| Error::Shape { layer: name(), message: "skip operand not yet computed".into() })?;
                let m = operand.expect("main chain has an input");
                if tape.value(m).len() != tape.value(skip_var).len() {
                    return Err(Error::Shape { layer: name(), message: "skip operand shape differs".into() });
                }
                tape.add(m, skip_var)
            }
        };
        values.insert(layer.id, value);
        if !projections.contains(&layer.id) {
            main = Some(value);
        }
    }
    let output = main.ok_or_else(|| Error::InvalidGraph("graph has no layers".into()))?;
    Ok(ForwardPass { tape, output, params: param_vars })
}

/// Forward value only.
pub fn predict(
    graph: &NetworkGraph,
    params: &ParamStore,
    input: &Tensor,
    weight_precision: Option<Precision>,
) -> Result<Tensor> {
    let pass = forward(graph, params, input, weight_precision)?;
    let out = pass.output_value().clone();
    let n = out.rows();
    let row = out.row_len();
    out.reshaped(vec![n, row])
}

/// `p <- p - lr * g` for every parameter present in both stores.
pub fn sgd_step(params: &mut ParamStore, grads: &ParamStore, learning_rate: f64) {
    for (id, g) in grads.iter() {
        let Some(p) = params.get_mut(*id) else { continue };
        debug_assert_eq!(p.weight.shape(), g.weight.shape());
        for (w, gw) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
            *w -= learning_rate * gw;
        }
        for (b, gb) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
            *b -= learning_rate * gb;
        }
    }
}
