pub mod armodel;
pub mod blocksampler;
pub mod error;
pub mod grid;
pub mod harness;
pub mod measure;
pub mod numeric;
pub mod oracle;
pub mod sampler;
pub mod smoothing;

pub use error::{Error, Result};
pub use grid::Grid;
