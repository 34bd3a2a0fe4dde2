//! Efficient Conformer building blocks on a small fp64 reverse-mode engine.
//!
//! The crate is `no_std` (with `alloc`) and has no IO. It provides:
//!
//! - [`graph`]: dense tensors, a differentiation tape and the operator set
//!   used by every model component;
//! - [`attention`]: relative-position multi-head self-attention in regular,
//!   strided, grouped, local and linear forms, with plain-loop reference
//!   implementations in [`attention::reference`];
//! - [`blocks`] and [`encoder`]: Conformer blocks, the downsampling modules
//!   and the three-stage progressively downsampled encoder with presets;
//! - [`profiler`]: analytic multiply-add, parameter and activation-memory
//!   accounting;
//! - [`ctc`]: CTC loss, greedy decoding and a path-enumeration oracle;
//! - [`toy`]: a synthetic token-sequence task and a gradient-descent loop
//!   for checking that the encoder learns.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod blocks;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod profiler;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use graph::{ConvMode, Gradients, Graph, Param, Var};
pub use tensor::Tensor;
