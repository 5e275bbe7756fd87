//! Trainable translation-quality evaluation in one model for three input
//! formats: hypothesis with reference, with source, or with both.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evalcorr;
pub mod labeling;
pub mod model;
pub mod mra;
pub mod packing;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};

// Compiles every guide chapter's code blocks as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/packing.md")]
    mod packing {}
    #[doc = include_str!("../../../book/src/attention-masks.md")]
    mod attention_masks {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/labeling.md")]
    mod labeling {}
    #[doc = include_str!("../../../book/src/correlation.md")]
    mod correlation {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
