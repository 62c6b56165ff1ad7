pub mod data;
pub mod error;
pub mod experiment;
pub mod format;
pub mod labelmap;
pub mod model;
pub mod plot;
pub mod preprocess;
pub mod psd;
pub mod sampling;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
