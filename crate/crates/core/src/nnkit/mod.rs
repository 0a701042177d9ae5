//! Minimal differentiable-ops kit: tensors, a recording tape with reverse-mode
//! gradients, parameter storage, AdamW, checkpoints and a finite-difference checker.

mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub(crate) use checkpoint::Reader;
pub use gradcheck::{grad_check, standard_suite, GradCheckReport, InputError, REL_ERROR_FLOOR};
pub use layers::{Activation, LayerNorm, Linear, Mlp};
pub use params::{Adam, ParamStore};
pub use scalar::Scalar;
pub use tape::{CustomOp, Gradients, Segments, Tape, Var};
pub use tensor::Tensor;
