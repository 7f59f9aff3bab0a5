//! Reverse-mode differentiation for the fixed operator set used by the
//! networks in this crate, plus gradient checking and SGD.

mod check;
pub(crate) mod kernels;
mod optim;
mod tape;

pub use check::{grad_check, GradCheckReport};
pub use optim::sgd_step;
pub use tape::{Bound, NodeId, OpKind, Tape, PROB_FLOOR};
