//! Reverse-mode AD engine: tape, optimizers, finite-difference oracle.

pub mod fdcheck;
pub mod optim;
pub mod tape;

pub use fdcheck::{finite_diff_check, finite_diff_check_sampled};
pub use optim::{adam_step, rmsprop_step, GradMap, OptimizerHyper, ParamStore};
pub use tape::{DropoutMode, Tape, UnaryFn, Var};
