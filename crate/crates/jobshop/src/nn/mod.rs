//! Tensors, reverse-mode autodiff, and the policy architectures.

pub mod checkpoint;
pub mod model;
pub mod tape;
pub mod tensor;

pub use checkpoint::TrainMeta;
pub use model::{
    Arch, ForwardOutput, GraphBatch, Mode, ModelConfig, PolicyModel, PreparedGraph, TapedPolicy,
};
pub use tape::{DropoutMask, Tape, VarId};
pub use tensor::Tensor;
