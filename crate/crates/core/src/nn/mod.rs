//! Small dense tensors with reverse-mode autodiff, the single-layer
//! denoiser built on them, and the AdamW optimizer used to train it.

mod denoiser;
mod graph;
mod optim;
mod state;
mod tensor;

pub use denoiser::{forward_denoiser, predict_batch, timestep_features, Backbone, DenoiserArch};
pub use graph::{Graph, Var};
pub use optim::AdamW;
pub use state::{Init, ModelState, Param, ParamVars};
pub use tensor::Tensor;
