//! Minimal differentiable tensor engine used by the detector and the adapters.

mod adam;
pub mod blob;
mod graph;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig, MomentState};
pub use graph::{log_sigmoid, sigmoid, smooth_l1_value, ConvGeom, Gradients, Graph, Var};
pub use params::{quantize_f32, Grads, ParamId, ParamStore};
pub use tensor::Tensor;
