//! Quantized encoder-decoder segmentation engine.
//!
//! The crate covers the whole life of a small vessel-segmentation network:
//! dense tensor kernels ([`tensor`]), the eight-layer model and its file
//! format ([`model`]), weighted BCE + IoU training with hand-written reverse
//! mode gradients ([`train`]), int8 post-training quantization with an
//! integer-only forward pass ([`quant`]), evaluation ([`metrics`]) and data
//! loading, augmentation and synthetic vessel generation ([`data`]).

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_model, ModelGraph};
pub use tensor::{Shape, Tensor};

// The guide's snippets run as doc-tests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dataflow.md")]
    mod dataflow {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
