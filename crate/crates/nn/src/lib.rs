//! Small encoder-decoder segmentation networks trained with hand-written
//! backpropagation.
//!
//! Activations are kept in a channel-major `(C, B·H·W)` layout so that every
//! convolution is a single matrix product over the whole batch. All kernels
//! run in a fixed order, so forward and backward passes are bit-reproducible.

mod act;
mod error;
mod layers;
mod unet;

pub use act::Act;
pub use error::NnError;
pub use layers::{BatchNorm2d, Conv2d, Param};
pub use unet::{make_pair, ModelConfig, PairConfig, UNet, UNetTape, Variant};

use ndarray::NdFloat;

/// Floating point element type the networks can be instantiated with.
///
/// Training uses `f32`; `f64` exists so finite-difference gradient checks
/// are not drowned in rounding noise.
pub trait Scalar: NdFloat + num_traits::FromPrimitive + std::iter::Sum {}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn cast<F: Scalar>(v: f64) -> F {
    F::from_f64(v).expect("representable constant")
}
