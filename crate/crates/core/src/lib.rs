//! Portrait matting without trimaps, on the CPU.
//!
//! The crate is organised around a small tape-based autodiff engine
//! ([`tensor`]) on top of which a three-branch matting network ([`net`]) is
//! trained ([`train`]) with the objectives defined in [`mattemath`].
//! Deployment helpers live in [`video`] (temporal smoothing), [`data`]
//! (synthetic corpora, trimaps from depth) and [`bench`] (quality metrics and
//! reports).
//!
//! Everything is generic over the floating point type via [`Scalar`]; single
//! precision is the default in the shipped binary, double precision is used
//! where finite-difference headroom matters.

pub mod bench;
pub mod data;
pub mod gradcheck;
pub mod mattemath;
pub mod net;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod video;

pub use net::{Model, ModelConfig, ModelOutputs, NetError};
pub use scalar::{Precision, Scalar};
pub use tensor::{Graph, Shape, Tensor, TensorError, Var};
