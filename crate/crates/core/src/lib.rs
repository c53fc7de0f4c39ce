pub mod autodiff;
pub mod ctp;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod metrics;
pub mod raster;
pub mod renderer;
pub mod snd;
pub mod trainer;

pub use error::{Error, Result};
