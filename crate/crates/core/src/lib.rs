//! Few-shot prompt tuning with selective attack and cross-modal
//! distribution alignment, on frozen toy encoders.
//!
//! The guide in `book/` walks through each module with runnable examples.

// `!(x > 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod attack;
pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod encoders;
pub mod error;
pub mod pipeline;
pub mod prompt;
pub mod rng;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/attack.md")]
    mod attack {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/alignment.md")]
    mod alignment {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
}
