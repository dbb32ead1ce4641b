//! Dense tensors, a reverse-mode tape, optimizers with freeze masks, and
//! bit-exact checkpoints.

mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_matching, save_checkpoint, MANIFEST};
pub use gradcheck::{grad_check, GradCheckReport, REL_ERROR_FLOOR};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{param_key, BoundParams, GradMap, ModelParams, ParamGroup};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
