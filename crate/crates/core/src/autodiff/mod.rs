//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
pub mod serialize;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{rel_index, Gradients, Tape, Var};
pub use tensor::{log_add, log_sum_exp, Tensor};
