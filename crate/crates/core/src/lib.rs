//! Audio-visual speech recognition at desk scale: filterbank and MFCC
//! frontends, residual and inverted-residual visual backbones, concatenation
//! and gated fusion, transformer and conformer encoders, masked prediction of
//! clustered pseudo-labels, seq2seq fine-tuning, and a noise-robustness
//! evaluation harness.

pub mod audio;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod sequence;
pub mod visual;

pub use error::{Error, Result};
