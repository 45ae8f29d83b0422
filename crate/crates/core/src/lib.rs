//! A desk-scale end-to-end text spotter: synthetic data, a transformer model
//! that jointly segments and reads text instances, set-based training and
//! evaluation.

pub mod charset;
pub mod engine;
pub mod error;
pub mod matching;
pub mod model;
pub mod synth;

pub use charset::Charset;
pub use error::{Error, Result};
