//! Minimal reverse-mode automatic differentiation over `f64` tensors, enough
//! to train the desk-scale networks built from the graph IR.

mod network;
mod quant;
mod tape;
mod tensor;

pub use network::{forward, init_params, predict, sgd_step, weight_shape, ForwardPass, LayerParams, ParamStore};
pub use quant::{fake_quantize, fake_quantize_value};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::softmax_row;
pub use tensor::Tensor;
