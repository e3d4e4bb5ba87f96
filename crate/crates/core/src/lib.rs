//! Skip-connection graph rewriting, hardware-aware distillation training and
//! FPGA cost models for residual networks.
//!
//! The pipeline is: build a [`graph_ir::NetworkGraph`], alter its skips with
//! [`transforms`], retrain the altered student under distillation with
//! [`kd_train`], and price the result on two accelerator styles:
//! [`dataflow_hw`] (layer-pipelined streaming) and [`pe_array`] (a 2D array of
//! processing elements programmed layer by layer).

pub mod autodiff;
pub mod dataflow_hw;
pub mod error;
pub mod graph_ir;
pub mod kd_train;
pub mod pe_array;
pub mod transforms;

pub use error::{Error, Result};
