//! Training objectives, a toy conditional generator with analytic gradients,
//! a procedural dataset and a two-stage training harness.

pub mod objectives;
pub mod perceptual;
pub mod synth;
pub mod tensor;
pub mod toygen;
pub mod trainer;

pub use crate::objectives::{
    loss_clip, loss_cycle, loss_identity, loss_sft, loss_total, loss_total_grad, ConstantExtractor, Differentiable,
    GeneratorContract, LossBackends, LossBreakdown, PerceptualExtractor,
};
pub use crate::perceptual::ToyPerceptual;
pub use crate::synth::make_synthetic_dataset;
pub use crate::toygen::{ToyGenerator, ToyShape};
pub use crate::trainer::{evaluate_checkpoint, train, TrainConfig};
