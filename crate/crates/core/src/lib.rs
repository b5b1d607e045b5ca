pub mod data;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod margin;
pub mod model;
pub mod optimize;
pub mod rng;
pub mod separators;
pub mod stats;

pub use error::{NtkError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/kernels.md")]
    mod kernels {}
    #[doc = include_str!("../../../book/src/margins.md")]
    mod margins {}
    #[doc = include_str!("../../../book/src/separators.md")]
    mod separators {}
    #[doc = include_str!("../../../book/src/harness.md")]
    mod harness {}
}
