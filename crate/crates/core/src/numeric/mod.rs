//! Dense f64 tensors, hand-derived kernels, parameter storage, AdaGrad and
//! checkpoint serialisation.

pub mod adagrad;
pub mod checkpoint;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adagrad::{adagrad_step, AdaGrad};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use params::{GradBuffer, ParamId, ParamKind, ParameterStore};
pub use rng::RngState;
pub use tensor::Tensor;
