//! Dense f64 tensors, reverse-mode automatic differentiation, seeded
//! randomness, and the finite-difference gradient-check harness.

pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod rng;
pub mod sampling;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, param_gradient_check};
pub use kernels::softmax_rows;
pub use params::{ParamGrads, ParamId, ParamSet};
pub use rng::{streams, SeededRng};
pub use sampling::{sample_multinomial_without_replacement, Draw};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
