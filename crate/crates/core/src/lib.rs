//! Few-shot image classification by sparse cross-attention over patch pyramids.
//!
//! Images are cut into a pyramid of overlapping patches, each patch is encoded
//! by a small convolutional backbone, and a query is compared against every
//! support class through a sparse cross-attention layer: only query patches
//! that are *mutual* nearest neighbours of some support patch attend sharply,
//! producing a query-aligned prototype per class. A parameter-free patch
//! matcher then scores each class by summing, over query patches, the best
//! cosine match among the prototype's patches.
//!
//! Everything runs on the crate's own `f64` reverse-mode [`tensor`] engine.
//! The guide under `book/` walks through each stage; its code listings are
//! compiled as doc-tests of this crate.

pub mod backbone;
pub mod bench;
pub mod data;
pub mod episodes;
pub mod error;
pub mod model;
pub mod pmm;
pub mod selftest;
pub mod sstl;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Guide chapters under `book/src`, compiled so their listings run as
/// doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/patches.md")]
    mod patches {}
    #[doc = include_str!("../../../book/src/sparse-attention.md")]
    mod sparse_attention {}
    #[doc = include_str!("../../../book/src/patch-matching.md")]
    mod patch_matching {}
    #[doc = include_str!("../../../book/src/episodes.md")]
    mod episodes {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
}
pub use tensor::{Tape, Tensor, Var};
