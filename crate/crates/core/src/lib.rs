//! Text-guided image patch selection inside a Vision Transformer backbone.
//!
//! The library is organised around the selection pipeline: dense numeric
//! kernels ([`tensor`]), attention blocks ([`attention`]), the text-aware
//! scoring / top-k / token-fusion core ([`select`]), the assembled backbone
//! ([`backbone`]), an analytic cost model ([`cost`]), a tape-based gradient
//! checker ([`grad`]), and file formats plus synthetic inputs ([`io`]).
//!
//! All numeric code is generic over the scalar type through [`scalar::Real`];
//! the concrete aliases at the crate root fix `f64`, which is what the CLI,
//! the file formats, and every shipped tolerance assume.

pub mod attention;
pub mod backbone;
pub mod bench;
pub mod cost;
pub mod error;
pub mod grad;
pub mod io;
pub mod scalar;
pub mod select;
pub mod tensor;

pub use error::{KernelError, Result};
pub use scalar::Real;

/// Double-precision tensor, the type every shipped interface speaks.
pub type Tensor = tensor::Tensor<f64>;
/// Single-precision variant, available for experiments; none of the shipped
/// tolerances are calibrated for it.
pub type Tensor32 = tensor::Tensor<f32>;

pub type LinearLayer = tensor::LinearLayer<f64>;
pub type MhsaLayer = attention::MhsaLayer<f64>;
pub type FfnBlock = attention::FfnBlock<f64>;
pub type CrossAttnLayer = attention::CrossAttnLayer<f64>;
pub type AttnMaps = attention::AttnMaps<f64>;
pub type TokenSequence = select::TokenSequence<f64>;
pub type SelectionOutcome = select::SelectionOutcome<f64>;
pub type SelectiveVit = backbone::SelectiveVit<f64>;
pub type ForwardTrace = backbone::ForwardTrace<f64>;
