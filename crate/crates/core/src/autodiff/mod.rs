//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! Values are plain [`Tensor`]s. Registering one on a [`Tape`] yields a
//! [`Var`]; kernels applied through the tape are recorded in order and
//! [`Tape::backward`] sweeps them in reverse to produce [`Gradients`].
//!
//! ```
//! use sada::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = tape.square(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod gradcheck;
mod kernels;
mod suite;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, ABS_FLOOR};
pub use kernels::{Kernel, NORM_EPS, SQRT_CLAMP};
pub use suite::{
    check_binary, check_unary, kernel_suite, KernelCheck, KERNEL_EPS, KERNEL_TOLERANCE,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
