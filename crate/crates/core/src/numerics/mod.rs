//! Dense `f64` tensors, a dynamic reverse-mode tape, Adam, and
//! finite-difference gradient checks.

mod adam;
pub mod gradcheck;
pub mod init;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::{check_gradients, check_param_gradients, relative_error, GradCheckReport};
pub use params::{Param, ParamKind, ParamStore, Session};
pub use tape::{Gradients, ParamId, Tape, Var, LOG_CLAMP, MASK_SCORE, RATIO_GUARD};
pub use tensor::{cosine, sigmoid, softmax, Tensor, COSINE_EPS, SIGMOID_CLAMP};

#[cfg(test)]
mod tests;
