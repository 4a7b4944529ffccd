pub mod checkpoint;
pub mod critic;
pub mod error;
pub mod evaluation;
pub mod exemplar;
pub mod frontend;
pub mod generator;
pub mod nn;
pub mod slicer;
pub mod tensor;
pub mod trainer;
pub mod volume;
pub mod volume_io;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use volume::{Axis, Volume};
