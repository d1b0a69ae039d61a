//! Dense tensors, reverse-mode differentiation, Adam and seeded randomness.

mod adam;
mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::finite_diff_check;
pub use params::{Bound, ParamSet};
pub use rng::Rng;
pub(crate) use tape::softmax_in_place;
pub use tape::{Binary, Grads, Tape, Unary, Var};
pub use tensor::Tensor;
