//! Decoder-only transformer with intra-layer and block recurrence, a
//! reverse-mode autodiff tape, and the training and analysis code around it.

pub mod analysis;
pub mod config;
pub mod data;
pub mod model;
pub mod recurrence;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use data::{Batch, BatchStream, Corpus};
pub use model::{ModelConfig, ModelParams, PositionalMode};
pub use recurrence::{RecurrenceStrategy, ReuseMap};
pub use tensor::{Float, Graph, Tensor, Var};
