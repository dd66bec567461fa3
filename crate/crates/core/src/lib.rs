//! Video object detection on one-stage detectors with location and size priors.

pub mod attention;
pub mod bbox;
pub mod detector;
pub mod error;
pub mod io;
pub mod lpn;
pub mod pipeline;
pub mod profile;
pub mod spn;
pub mod synth;
pub mod tensor;

pub use bbox::{BBox, Detection, TruthBox};
pub use error::{Error, Result};
pub use tensor::Tensor;
