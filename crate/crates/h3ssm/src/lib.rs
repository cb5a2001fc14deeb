//! Discrete state-space sequence modeling at desk scale.
//!
//! The crate provides:
//! - dense f64 tensors with a reverse-mode tape ([`tensor`], [`tape`]),
//! - FFT machinery: a direct-DFT oracle, radix-2 FFT, Cooley-Tukey block
//!   FFT, and causal FFT convolution with analytic gradients ([`fft`],
//!   [`block_fft`], [`conv`]),
//! - shift and diagonal state-space models with conv/recurrent duality
//!   ([`ssm`]) and chunked state-passing evaluation ([`statepass`]),
//! - the H3 sequence mixer plus attention baselines and a small pre-norm
//!   model stack ([`h3`], [`attention`], [`model`]),
//! - synthetic in-context-recall tasks and a training harness
//!   ([`tasks`], [`train`]),
//! - the explicit associative-recall construction and its verifier
//!   ([`lambda`]),
//! - a benchmark harness and CLI plumbing ([`bench`], [`cli`]).
//!
//! See `examples/` for one runnable example per capability.

pub mod block_fft;
pub mod conv;
pub mod error;
pub mod fft;
pub mod flops;
pub mod rng;
pub mod tensor;

pub mod ssm;
pub mod attention;
pub mod h3;
pub mod model;
pub mod optim;
pub mod statepass;
pub mod tasks;
pub mod train;
pub mod tape;
pub use error::{Error, Result};
pub use tensor::Tensor;
