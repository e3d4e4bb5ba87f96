//! Reverse-mode tape. Every op appends a node holding its forward value;
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients.

use super::quant::fake_quantize_value;
use super::Tensor;
use crate::graph_ir::Precision;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// x: [n, ...] flattened to [n, in], w: [in, out], b: [out] -> [n, 1, 1, out]
    Dense { x: Var, w: Var, b: Var },
    /// x: [n, h, w, c], w: [k, k, c, o], b: [o] -> [n, h', w', o], same padding
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Relu(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Row-wise softmax over all non-leading dims.
    Softmax(Var),
    /// Mean over rows of -log softmax(logits)[label].
    CrossEntropy { logits: Var, labels: Vec<usize> },
    /// Mean squared difference to a constant target.
    Mse { x: Var, target: Tensor },
    /// Forward rounds to the fixed-point grid; backward passes straight through.
    FakeQuantize(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one scalar w.r.t. every node of a tape. Nodes the scalar does
/// not depend on have no entry.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn conv_out(size: usize, stride: usize) -> usize {
    size.div_ceil(stride)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Values entering each ReLU, in recording order. Gradient checkers use
    /// them to spot inputs sitting on the kink.
    pub fn relu_inputs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().filter_map(|n| match n.op {
            Op::Relu(x) => Some(&self.nodes[x.0].value),
            _ => None,
        })
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let n = xv.rows();
        let inp = xv.row_len();
        let out = wv.shape()[1];
        debug_assert_eq!(wv.shape()[0], inp);
        let mut y = vec![0.0; n * out];
        for r in 0..n {
            let row = xv.row(r);
            let dst = &mut y[r * out..(r + 1) * out];
            dst.copy_from_slice(bv.data());
            for (i, &xi) in row.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &wv.data()[i * out..(i + 1) * out];
                for (d, &wij) in dst.iter_mut().zip(wrow) {
                    *d += xi * wij;
                }
            }
        }
        let value = Tensor::new(vec![n, 1, 1, out], y).expect("dense output shape");
        self.push(Op::Dense { x, w, b }, value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let &[n, h, wd, c] = xv.shape() else { panic!("conv2d input must be rank 4") };
        let &[k, _, wc, o] = wv.shape() else { panic!("conv2d weight must be rank 4") };
        debug_assert_eq!(wc, c);
        let pad = k / 2;
        let (oh, ow) = (conv_out(h, stride), conv_out(wd, stride));
        let (xd, wdata) = (xv.data(), wv.data());
        let mut y = vec![0.0; n * oh * ow * o];
        for bi in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let dst = &mut y[((bi * oh + oy) * ow + ox) * o..][..o];
                    dst.copy_from_slice(bv.data());
                    for ky in 0..k {
                        let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h) else { continue };
                        for kx in 0..k {
                            let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < wd) else { continue };
                            let xrow = &xd[((bi * h + iy) * wd + ix) * c..][..c];
                            for (ci, &xval) in xrow.iter().enumerate() {
                                let wrow = &wdata[((ky * k + kx) * c + ci) * o..][..o];
                                for (d, &wv) in dst.iter_mut().zip(wrow) {
                                    *d += xval * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, o], y).expect("conv output shape");
        self.push(Op::Conv2d { x, w, b, stride }, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.len(), self.value(b).len(), "add operands differ in size");
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(x), value)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut out = Vec::with_capacity(t.len());
        for r in 0..t.rows() {
            out.extend(softmax_row(t.row(r)));
        }
        let value = Tensor::new(t.shape().to_vec(), out).expect("softmax shape");
        self.push(Op::Softmax(x), value)
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), labels.len(), "one label per row");
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| log_sum_exp(t.row(r)) - t.row(r)[l])
            .sum();
        let value = Tensor::scalar(total / labels.len() as f64);
        self.push(Op::CrossEntropy { logits, labels: labels.to_vec() }, value)
    }

    pub fn mse(&mut self, x: Var, target: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.len(), target.len(), "mse operands differ in size");
        let total: f64 = t.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(total / t.len() as f64);
        self.push(Op::Mse { x, target: target.clone() }, value)
    }

    pub fn fake_quantize(&mut self, x: Var, precision: Precision) -> Var {
        let value = self.value(x).map(|v| fake_quantize_value(v, precision));
        self.push(Op::FakeQuantize(x), value)
    }

    /// Gradients of the scalar `loss` w.r.t. every node it depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut accumulate = |v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, inp, out) = (xv.rows(), xv.row_len(), wv.shape()[1]);
                let gd = g.data();
                let mut dx = vec![0.0; n * inp];
                let mut dw = vec![0.0; inp * out];
                let mut db = vec![0.0; out];
                for r in 0..n {
                    let grow = &gd[r * out..(r + 1) * out];
                    let xrow = xv.row(r);
                    for (d, &gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                    for i in 0..inp {
                        let wrow = &wv.data()[i * out..(i + 1) * out];
                        dx[r * inp + i] = wrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let xi = xrow[i];
                        if xi != 0.0 {
                            for (d, &gv) in dw[i * out..(i + 1) * out].iter_mut().zip(grow) {
                                *d += xi * gv;
                            }
                        }
                    }
                }
                accumulate(*x, Tensor::new(xv.shape().to_vec(), dx).expect("dense dx"));
                accumulate(*w, Tensor::new(wv.shape().to_vec(), dw).expect("dense dw"));
                accumulate(*b, Tensor::new(vec![out], db).expect("dense db"));
            }
            Op::Conv2d { x, w, b, stride } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let &[n, h, wd, c] = xv.shape() else { unreachable!() };
                let &[k, _, _, o] = wv.shape() else { unreachable!() };
                let pad = k / 2;
                let (oh, ow) = (conv_out(h, *stride), conv_out(wd, *stride));
                let (xd, wdata, gd) = (xv.data(), wv.data(), g.data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wdata.len()];
                let mut db = vec![0.0; o];
                for bi in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let grow = &gd[((bi * oh + oy) * ow + ox) * o..][..o];
                            for (d, &gv) in db.iter_mut().zip(grow) {
                                *d += gv;
                            }
                            for ky in 0..k {
                                let Some(iy) = (oy * stride + ky).checked_sub(pad).filter(|&v| v < h) else { continue };
                                for kx in 0..k {
                                    let Some(ix) = (ox * stride + kx).checked_sub(pad).filter(|&v| v < wd) else { continue };
                                    let xbase = ((bi * h + iy) * wd + ix) * c;
                                    for ci in 0..c {
                                        let wbase = ((ky * k + kx) * c + ci) * o;
                                        let wrow = &wdata[wbase..wbase + o];
                                        dx[xbase + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                                        let xval = xd[xbase + ci];
                                        for (d, &gv) in dw[wbase..wbase + o].iter_mut().zip(grow) {
                                            *d += xval * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(*x, Tensor::new(xv.shape().to_vec(), dx).expect("conv dx"));
                accumulate(*w, Tensor::new(wv.shape().to_vec(), dw).expect("conv dw"));
                accumulate(*b, Tensor::new(vec![o], db).expect("conv db"));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv.data().iter().zip(g.data()).map(|(&a, &gv)| if a > 0.0 { gv } else { 0.0 }).collect();
                accumulate(*x, Tensor::new(xv.shape().to_vec(), data).expect("relu grad"));
            }
            Op::Add(a, b) => {
                accumulate(*a, reshape_like(g, self.value(*a)));
                accumulate(*b, reshape_like(g, self.value(*b)));
            }
            Op::Scale(x, factor) => accumulate(*x, g.map(|v| v * factor)),
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(*x, Tensor::filled(xv.shape(), g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                accumulate(*x, Tensor::filled(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::Softmax(x) => {
                let y = &self.nodes[idx].value;
                let mut dx = Vec::with_capacity(y.len());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &g.data()[r * y.row_len()..(r + 1) * y.row_len()]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                }
                accumulate(*x, Tensor::new(y.shape().to_vec(), dx).expect("softmax grad"));
            }
            Op::CrossEntropy { logits, labels } => {
                let t = self.value(*logits);
                let scale = g.item() / labels.len() as f64;
                let mut dx = Vec::with_capacity(t.len());
                for (r, &l) in labels.iter().enumerate() {
                    let start = dx.len();
                    dx.extend(softmax_row(t.row(r)).into_iter().map(|p| p * scale));
                    dx[start + l] -= scale;
                }
                accumulate(*logits, Tensor::new(t.shape().to_vec(), dx).expect("ce grad"));
            }
            Op::Mse { x, target } => {
                let xv = self.value(*x);
                let scale = 2.0 * g.item() / xv.len() as f64;
                let data = xv.data().iter().zip(target.data()).map(|(a, b)| scale * (a - b)).collect();
                accumulate(*x, Tensor::new(xv.shape().to_vec(), data).expect("mse grad"));
            }
            Op::FakeQuantize(x) => accumulate(*x, reshape_like(g, self.value(*x))),
        }
    }
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("gradient size")
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_linear_layer_gradient() {
        // loss = sum(x W + b): dL/dW_ij = sum over batch of x_i.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap());
        let w = tape.leaf(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.dense(x, w, b);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 4.0, 4.0, 1.0, 1.0, 1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let loss = tape.scale(a, 3.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn cross_entropy_matches_softmax_probability() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::from_rows(&[vec![0.7f64.ln(), 0.3f64.ln()]]).unwrap());
        let ce = tape.cross_entropy(logits, &[0]);
        assert!((tape.value(ce).item() + 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax_row(&[1000.0, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3, 3, 1], (1..=9).map(f64::from).collect()).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = tape.leaf(Tensor::new(vec![3, 3, 1, 1], k).unwrap());
        let b = tape.leaf(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
        let y2 = tape.conv2d(x, w, b, 2);
        assert_eq!(tape.value(y2).shape(), &[1, 2, 2, 1]);
        assert_eq!(tape.value(y2).data(), &[1.0, 3.0, 7.0, 9.0]);
    }
}
