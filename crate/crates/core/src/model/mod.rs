//! The CST network, its configuration, cost accounting and checkpoints.

mod accounting;
mod checkpoint;
mod config;
mod cst;

pub use accounting::{count_flops, count_params, nominal_selection, FlopReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::CstConfig;
pub use cst::{CstModel, FeedForward, ForwardOutput, Reconstruction, Sahab};
