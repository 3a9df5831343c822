use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// What a [`FeatureSequence`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Fbank,
    Mfcc39,
    Visual,
    Fused,
    Encoded,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureKind::Fbank => "fbank",
            FeatureKind::Mfcc39 => "mfcc39",
            FeatureKind::Visual => "visual",
            FeatureKind::Fused => "fused",
            FeatureKind::Encoded => "encoded",
        };
        f.write_str(s)
    }
}

/// Time-major feature matrix `[T, D]` at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Tensor,
    frame_rate_hz: f64,
    kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(frames: Tensor, frame_rate_hz: f64, kind: FeatureKind) -> Result<Self> {
        if frames.ndim() != 2 {
            return Err(shape_err!(
                "feature sequences are [T, D] matrices, got {:?}",
                frames.dims()
            ));
        }
        if !(frame_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        Ok(Self {
            frames,
            frame_rate_hz,
            kind,
        })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.dims()[1]
    }

    pub fn frame_rate_hz(&self) -> f64 {
        self.frame_rate_hz
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    /// First `t` frames.
    pub fn truncate(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.len() {
            return Err(shape_err!("cannot truncate {} frames to {t}", self.len()));
        }
        let d = self.dim();
        let frames = Tensor::new([t, d], self.frames.data()[..t * d].to_vec())?;
        Self::new(frames, self.frame_rate_hz, self.kind)
    }
}
