pub mod decode;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
