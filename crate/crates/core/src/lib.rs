//! Mask-aware dynamic filtering (MADF) image inpainting with cascaded
//! refinement decoders, written on a small reverse-mode tensor engine.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod layers;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{ConvSpec, PadMode, Shape4, Tensor4};
