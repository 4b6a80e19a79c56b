//! Minimal reverse-mode differentiable compute core.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Traffic, Var};
pub use layers::{Bound, LayerSpec};
pub use params::{load_checkpoint, save_checkpoint, AdamW, Param, ParamCount, ParamSet};
pub use tensor::{Float, Tensor};
