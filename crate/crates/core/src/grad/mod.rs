//! Reverse-mode differentiation, the finite-difference oracle, and Adam.

mod adam;
mod fd;
mod tape;

pub use adam::{adam_step, OptimizerState};
pub use fd::{finite_diff, max_relative_error};
pub use tape::{Gradients, NonFinite, Op, Tape, Var};
