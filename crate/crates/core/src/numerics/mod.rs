//! Dense tensors, the gradient tape, and primitive layers.

pub mod avht;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params};
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use ops::LayerNormParams;
pub use params::{Init, ParamPlan, ParamStore, Session};
pub use tensor::Tensor;
