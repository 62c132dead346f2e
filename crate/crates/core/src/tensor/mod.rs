//! Dense tensors, reverse-mode differentiation, the parameter store and the
//! (optionally masked) Adam optimizer.

mod checkpoint;
mod gradcheck;
mod optim;
mod scalar;
mod store;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::grad_check;
pub use optim::{optimizer_step, Adam, LrSchedule, OptimizerState};
pub use scalar::{gemm, MatRef, Scalar};
pub use store::{ParamEntry, ParamId, ParamStore};
pub use tape::{AttnSpec, Tape, Var};
