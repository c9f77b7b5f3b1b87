//! Parameter storage, reverse-mode gradients, Adam, checkpoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{gradient_check, BlockReport, GradCheckReport};
pub use graph::{sigmoid, softplus, Gradients, Graph, Var, CHROMA_EPS};
pub use params::{adam_step, zero_grads, AdamConfig, ParamBlock, ParamStore, Precision};
