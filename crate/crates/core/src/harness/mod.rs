//! Noise-robustness evaluation and the staged pipeline behind the CLI.

pub mod config;
pub mod eval;
pub mod noise;
pub mod pipeline;
pub mod report;
pub mod scoring;
pub mod synth;

pub use config::RunConfig;
pub use noise::{mix_at_snr, synth_noise, NoiseCategory, NoiseMixSpec};
pub use pipeline::{param_report, Pipeline};
pub use report::{EvalMode, EvalReport, EvalRow};
pub use scoring::{edit_distance, score_corpus, EditCounts, Unit};
