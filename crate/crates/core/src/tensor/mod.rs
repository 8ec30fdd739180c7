//! Dense tensors, the autodiff tape, trainable parameters and the seeded
//! generator shared by the rest of the crate.

mod array;
mod gradcheck;
mod graph;
mod param;
mod rng;

pub use array::Tensor;
pub use gradcheck::grad_check;
pub use graph::{CustomOp, Graph, Var};
pub use param::{Param, ParamId};
pub use rng::{streams, Rng};

pub(crate) use graph::dot;
