//! Post-training quantization and quantization-aware fine-tuning for small
//! convolutional networks.
//!
//! The fp32 executor and trainer live in [`nnexec`], activation scale search
//! in [`calib`], BN folding and the integer runtime in [`quantize`], QAT in
//! [`qat`] and magnitude pruning in [`prune`].

pub mod calib;
pub mod error;
pub mod graph;
pub mod nnexec;
pub mod par;
pub mod prune;
pub mod qat;
pub mod quantize;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::ModelGraph;
pub use tensor::{DType, Tensor};
