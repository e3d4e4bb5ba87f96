#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use skipwise::autodiff::{forward, init_params, ParamStore, Tensor};
use skipwise::graph_ir::{
    build_residual_mlp, LayerGroup, LayerId, LayerKind, NetworkGraph, SkipEdge, SkipId, SkipKind, TensorShape,
};
use skipwise::kd_train::{kd_loss_on_tape, KdLossConfig};
use skipwise::transforms::{apply_all, AlterMode};

pub fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn layer(id: u32, kind: LayerKind, input: TensorShape) -> LayerGroup {
    let output = kind.output_shape(input).unwrap();
    LayerGroup { id: LayerId(id), kind, input_shape: input, output_shape: output, block: Some(0) }
}

/// input -> conv -> relu -> conv3 -> [1x1 projection] -> add -> relu -> dense
fn small_conv_net(rng: &mut ChaCha8Rng) -> NetworkGraph {
    let side = rng.random_range(3..=5);
    let input = TensorShape::new(side, side, rng.random_range(1..=3)).unwrap();
    let kernel = if rng.random_bool(0.5) { 3 } else { 1 };
    let filters = rng.random_range(2..=4);
    let stride = rng.random_range(1..=2);
    let mut layers = vec![LayerGroup { id: LayerId(0), kind: LayerKind::Input, input_shape: input, output_shape: input, block: None }];
    layers.push(layer(1, LayerKind::Conv { kernel, out_channels: filters, stride }, input));
    let a = layers[1].output_shape;
    layers.push(layer(2, LayerKind::Relu, a));
    layers.push(layer(3, LayerKind::Conv { kernel: 3, out_channels: filters, stride: 1 }, a));
    let b = layers[3].output_shape;
    let kind = if b == input {
        SkipKind::Identity
    } else {
        layers.push(layer(6, LayerKind::Conv { kernel: 1, out_channels: filters, stride }, input));
        SkipKind::Projection1x1 { out_channels: filters, stride, conv: LayerId(6) }
    };
    layers.push(layer(4, LayerKind::Add, b));
    layers.push(layer(5, LayerKind::Relu, b));
    let mut head = layer(7, LayerKind::Dense { out_features: rng.random_range(2..=4) }, b);
    head.block = None;
    layers.push(head);
    let skip = SkipEdge { id: SkipId(0), source: LayerId(0), sink: LayerId(4), span: 2, kind };
    NetworkGraph::from_parts("small_conv", layers, vec![skip])
}

/// A random network with at most six parametric layer groups and at most
/// sixteen units per layer.
pub fn random_small_graph(rng: &mut ChaCha8Rng) -> NetworkGraph {
    let g = match rng.random_range(0..3) {
        0 => {
            let blocks = rng.random_range(0..=2);
            let per_block = if blocks == 2 { rng.random_range(1..=2) } else { rng.random_range(1..=4) };
            build_residual_mlp(
                rng.random_range(2..=5),
                rng.random_range(2..=16),
                blocks,
                per_block,
                rng.random_range(2..=4),
            )
            .unwrap()
        }
        _ => small_conv_net(rng),
    };
    if rng.random_bool(0.3) {
        apply_all(&g, AlterMode::Shorten)
    } else {
        g
    }
}

pub struct KdCase {
    pub graph: NetworkGraph,
    pub params: ParamStore,
    pub input: Tensor,
    pub teacher: Tensor,
    pub labels: Vec<usize>,
    pub cfg: KdLossConfig,
}

pub fn random_kd_case(seed: u64) -> KdCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = random_small_graph(&mut rng);
    let params = init_params(&graph, seed);
    let in_shape = graph.input_shape().unwrap();
    let out = graph.output_shape().unwrap().elements();
    let n = rng.random_range(1..=3);
    let input = normal_tensor(&[n, in_shape.elements()], &mut rng);
    let teacher_rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..out).map(|_| rng.random::<f64>() + 0.05).collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..out)).collect();
    let cfg = KdLossConfig::new(rng.random::<f64>()).unwrap();
    KdCase { graph, params, input, teacher: Tensor::from_rows(&teacher_rows).unwrap(), labels, cfg }
}

fn loss_and_signs(case: &KdCase, params: &ParamStore) -> (f64, Vec<bool>) {
    let mut pass = forward(&case.graph, params, &case.input, None).unwrap();
    let out = pass.output;
    let loss = kd_loss_on_tape(&mut pass.tape, out, &case.teacher, &case.labels, &case.cfg);
    let signs = pass.tape.relu_inputs().flat_map(|t| t.data().iter().map(|v| *v > 0.0)).collect();
    (pass.tape.value(loss).item(), signs)
}

pub struct GradCheck {
    /// Largest |analytic - numeric| / max(|analytic|, |numeric|, floor).
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose +-step crosses a ReLU kink, where the loss has no
    /// derivative and central differences are meaningless.
    pub skipped_at_kinks: usize,
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-4;

/// Compares every parameter gradient of the KD objective with central
/// differences.
pub fn gradient_check(case: &KdCase) -> GradCheck {
    let mut pass = forward(&case.graph, &case.params, &case.input, None).unwrap();
    let out = pass.output;
    let loss = kd_loss_on_tape(&mut pass.tape, out, &case.teacher, &case.labels, &case.cfg);
    let analytic = pass.backward(loss);
    let mut result = GradCheck { max_rel_error: 0.0, checked: 0, skipped_at_kinks: 0 };
    let ids: Vec<LayerId> = case.params.iter().map(|(id, _)| *id).collect();
    for id in ids {
        for which in 0..2 {
            let len = {
                let p = case.params.get(id).unwrap();
                if which == 0 { p.weight.len() } else { p.bias.len() }
            };
            for k in 0..len {
                let eval = |delta: f64| {
                    let mut p = case.params.clone();
                    let lp = p.get_mut(id).unwrap();
                    let t = if which == 0 { &mut lp.weight } else { &mut lp.bias };
                    t.data_mut()[k] += delta;
                    loss_and_signs(case, &p)
                };
                let (plus, s_plus) = eval(FD_STEP);
                let (minus, s_minus) = eval(-FD_STEP);
                if s_plus != s_minus {
                    result.skipped_at_kinks += 1;
                    continue;
                }
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                let g = analytic.get(id).unwrap();
                let a = if which == 0 { g.weight.data()[k] } else { g.bias.data()[k] };
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                result.max_rel_error = result.max_rel_error.max(rel);
                result.checked += 1;
            }
        }
    }
    result
}
