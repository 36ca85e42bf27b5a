//! Numeric substrate: tensors, forward ops, the reverse-mode tape, Adam, and
//! the finite-difference harness that keeps the reverse pass honest.

pub mod adam;
pub mod element;
pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use element::Element;
pub use gradcheck::{grad_check, GradReport, FD_STEP, GRAD_TOL};
pub use ops::LAYER_NORM_EPS;
pub use tape::{Tape, TapeId};
pub use tensor::Tensor;
