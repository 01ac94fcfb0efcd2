//! Coarse-to-fine adaptive inference for bidirectional state-space vision
//! encoders.
//!
//! An image is first classified from a coarse patch grid. If the softmax
//! confidence clears a threshold the answer stands; otherwise the most
//! informative coarse patches, ranked by the encoder's own SSM activations,
//! are split into 2×2 fine patches and the mixed sequence is classified
//! again with the same weights.

pub mod cli;
pub mod config;
pub mod error;
pub mod flops;
pub mod geometry;
pub mod oracle;
pub mod pipeline;
pub mod reuse;
pub mod rng;
pub mod scoring;
pub mod selftest;
pub mod ssm;
pub mod synth;
pub mod tensor;
pub mod vim;
pub mod weights;

pub use config::{ModelConfig, RunConfig};
pub use error::{Error, LoadError, Result};
pub use pipeline::{infer, Model, RoutingOutcome, StageTaken};
pub use tensor::Tensor;
