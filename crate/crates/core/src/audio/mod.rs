//! Log-mel filterbank and MFCC-39 features from 16 kHz mono PCM.

mod framing;
mod mel;
mod mfcc;
pub mod wav;

pub use framing::{frame_count, frame_signal, hamming};
pub use mel::{hz_to_mel, log_mel_fbank, mel_to_hz, power_spectrum, MelFilterbank, LOG_FLOOR};
pub use mfcc::{deltas, dct_ii, mfcc39, MFCC_MELS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sequence::FeatureSequence;

pub const SAMPLE_RATE_HZ: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioFeatureConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    /// Zero means "next power of two at or above the window length".
    pub fft_size: usize,
    pub mfcc_coeffs: usize,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self::fbank(26, 25.0)
    }
}

impl AudioFeatureConfig {
    pub fn fbank(n_mels: usize, window_ms: f64) -> Self {
        Self {
            sample_rate_hz: SAMPLE_RATE_HZ,
            window_ms,
            hop_ms: 10.0,
            n_mels,
            fft_size: 0,
            mfcc_coeffs: 13,
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.hop_ms / 1000.0).round() as usize
    }

    pub fn resolved_fft_size(&self) -> usize {
        if self.fft_size == 0 {
            self.window_samples().next_power_of_two()
        } else {
            self.fft_size
        }
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.hop_ms
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sample_rate_hz == 0 {
            return bad("sample rate must be positive".into());
        }
        if !(self.hop_ms > 0.0) || self.hop_samples() == 0 {
            return bad(format!("hop {} ms is too small", self.hop_ms));
        }
        if self.window_ms < self.hop_ms {
            return bad(format!(
                "window {} ms shorter than hop {} ms",
                self.window_ms, self.hop_ms
            ));
        }
        let fft = self.resolved_fft_size();
        if !fft.is_power_of_two() {
            return bad(format!("fft size {fft} is not a power of two"));
        }
        if fft < self.window_samples() {
            return bad(format!(
                "fft size {fft} below window of {} samples",
                self.window_samples()
            ));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        if self.mfcc_coeffs == 0 || self.mfcc_coeffs > MFCC_MELS {
            return bad(format!("mfcc_coeffs must be in 1..={MFCC_MELS}"));
        }
        Ok(())
    }
}

/// Concatenates each run of `factor` consecutive frames along the feature axis.
/// Trailing frames that do not fill a group are dropped.
pub fn stack_to_video_rate(feats: &FeatureSequence, factor: usize) -> Result<FeatureSequence> {
    if factor == 0 {
        return Err(Error::Config("stacking factor must be at least 1".into()));
    }
    let t = feats.len() / factor;
    if t == 0 {
        return Err(Error::Input(format!(
            "{} frames cannot fill one group of {factor}",
            feats.len()
        )));
    }
    let d = feats.dim();
    let data = feats.frames().data()[..t * factor * d].to_vec();
    FeatureSequence::new(
        Tensor::new([t, d * factor], data)?,
        feats.frame_rate_hz() / factor as f64,
        feats.kind(),
    )
}

/// Per-utterance mean and variance normalisation of every feature dimension.
pub fn normalize_utterance(feats: &FeatureSequence) -> Result<FeatureSequence> {
    let (t, d) = (feats.len(), feats.dim());
    let x = feats.frames().data();
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = (0..t).map(|i| x[i * d + j]).sum::<f64>() / t as f64;
        let var = (0..t).map(|i| (x[i * d + j] - mean).powi(2)).sum::<f64>() / t as f64;
        let inv = 1.0 / var.sqrt().max(1e-5);
        for i in 0..t {
            out[i * d + j] = (x[i * d + j] - mean) * inv;
        }
    }
    FeatureSequence::new(Tensor::new([t, d], out)?, feats.frame_rate_hz(), feats.kind())
}

/// Normalised log-mel features stacked to the video frame rate.
pub fn audio_stream_features(
    samples: &[f64],
    cfg: &AudioFeatureConfig,
    stack: usize,
) -> Result<FeatureSequence> {
    let frames = frame_signal(samples, cfg)?;
    let fbank = log_mel_fbank(&frames, cfg)?;
    stack_to_video_rate(&normalize_utterance(&fbank)?, stack)
}
