mod codebook;
#[cfg(feature = "backend")]
mod loss;
#[cfg(feature = "backend")]
mod model;
#[cfg(feature = "backend")]
mod quantize;
#[cfg(feature = "backend")]
mod train;

pub use codebook::*;
#[cfg(feature = "backend")]
pub use loss::*;
#[cfg(feature = "backend")]
pub use model::*;
#[cfg(feature = "backend")]
pub use quantize::*;
#[cfg(feature = "backend")]
pub use train::*;
