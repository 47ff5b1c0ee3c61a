//! Spectral input prompts for test-time adaptation of a small segmentation
//! network: instance prompts tuned per image, multi-scale global prompts
//! carried across a stream, and the runtime, benchmark generator and
//! metrics around them.

pub mod adam;
pub mod aip;
pub mod benchgen;
pub mod error;
pub mod fft;
pub mod io;
pub mod metrics;
pub mod mgp;
pub mod net;
pub mod par;
pub mod prompt;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
