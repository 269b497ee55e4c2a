//! Ownership watermarks for image-text dual encoders: adversarial trigger
//! sets, a post-hoc transform module, and two-phase black-box verification.
//!
//! The guide lives in `book/`; its code blocks run as doctests.

pub mod attack;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod metrics;
mod nn;
pub mod pipeline;
pub mod transform;
pub mod verify;
pub mod trigger;
pub mod rng;
pub mod sample;
pub mod stealth;

pub use error::{Error, Result};
pub use nn::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/library.md")]
    mod library {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
