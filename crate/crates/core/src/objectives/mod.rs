//! Pre-training and fine-tuning objectives, and the loops that optimise them.

pub mod decoder;
pub mod kmeans;
pub mod masking;
pub mod optim;
pub mod phases;
pub mod train;
pub mod vocab;

pub use decoder::{greedy_decode, seq2seq_step, DecoderConfig};
pub use kmeans::{kmeans, kmeans_restarts, KMeansResult};
pub use masking::{masked_prediction_loss, span_mask, MaskSpec};
pub use optim::{Adam, FreezeSchedule, LrSchedule};
pub use phases::{FeatureSource, Phase, PhaseSchedule, PseudoLabelSet};
pub use vocab::{UnitKind, Vocab};
