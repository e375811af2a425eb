//! Second stage: index prediction over the frozen codebook, the stage-two
//! objective, and generation.

mod data;
mod discriminator;
mod loss;
mod model;
mod train;
mod transformer;

pub use data::*;
pub use discriminator::*;
pub use loss::*;
pub use model::*;
pub use train::*;
pub use transformer::*;
