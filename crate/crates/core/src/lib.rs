#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod f0;
pub mod harness;
pub mod metrics;
pub mod model;
mod serde_util;
pub mod vq;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/quantizer.md")]
    mod quantizer {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/f0.md")]
    mod f0 {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
