//! Dense `f64` tensors, a reverse-mode tape, a seeded generator and a
//! central-difference gradient oracle.

mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use params::{ParamGrads, ParamId, ParamStore};
pub use rng::{seeded_rng, SeededRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, dot, norm, softmax_rows, Tensor};
