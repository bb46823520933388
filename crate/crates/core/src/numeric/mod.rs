//! Tensor arithmetic, reverse-mode differentiation, seeded randomness and
//! the Adam optimizer.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::OptimizerState;
pub use gradcheck::check_gradients;
pub use ops::Activation;
pub use rng::{sample_standard_normal, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
