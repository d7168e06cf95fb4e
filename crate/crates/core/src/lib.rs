//! Coarse-to-fine sparse Transformer for snapshot compressive spectral imaging.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optics;
pub mod pipeline;
pub mod rng;
pub mod sah_msa;
pub mod sasm;
pub mod synth;
pub mod tensor;

pub use error::{CstError, Result};
pub use tensor::{Graph, Tensor, Var};
