pub mod archive;
pub mod autodiff;
pub mod diffnet;
pub mod error;
pub mod geometry;
pub mod guidance;
pub mod io;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use raster::Raster;
pub use tensor::Matrix;
