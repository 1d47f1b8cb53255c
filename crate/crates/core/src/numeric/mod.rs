//! Dense numerics: tensors, the differentiation tape, layers, gradient
//! checking and optimizers.

pub mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{scalar, Backward, Graph, NodeId, Unary};
pub use layers::{glorot_uniform, mlp_apply, Activation, GruCell, LayerSpec, Mlp};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;
