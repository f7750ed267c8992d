//! Tensors, the reverse-mode tape, parameters, seeded randomness and
//! gradient checking.

pub mod gradcheck;
mod nn;
mod ops;
pub use ops::gather_rows;
mod param;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use nn::{softmax_classes, ConvGeometry};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{Rng, RngState};
pub use tape::{BackwardFn, FrozenLog, Gradients, Tape, Var};
pub use tensor::{pairwise_sqdist, Tensor};
