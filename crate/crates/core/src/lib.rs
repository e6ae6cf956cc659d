//! Video ↔ fMRI encoding and decoding.

pub mod error;
pub mod eval;
pub mod fmri;
pub mod gradcheck;
pub mod io;
pub mod nn;
pub mod objectives;
pub mod saliency;
pub mod seed;
pub mod stimulus;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
