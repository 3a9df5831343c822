use std::f64::consts::PI;

use super::AudioFeatureConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of complete frames of `window` samples at stride `hop` in `n` samples.
pub fn frame_count(n: usize, window: usize, hop: usize) -> usize {
    if n < window {
        0
    } else {
        1 + (n - window) / hop
    }
}

pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Splits `samples` into Hamming-windowed frames `[T, W]`. No padding: the
/// trailing samples that do not fill a frame are dropped.
pub fn frame_signal(samples: &[f64], cfg: &AudioFeatureConfig) -> Result<Tensor> {
    cfg.validate()?;
    let w = cfg.window_samples();
    let h = cfg.hop_samples();
    if samples.len() < w {
        return Err(Error::Input(format!(
            "signal of {} samples is shorter than one {w}-sample window",
            samples.len()
        )));
    }
    let t = frame_count(samples.len(), w, h);
    let win = hamming(w);
    let mut out = Vec::with_capacity(t * w);
    for i in 0..t {
        let frame = &samples[i * h..i * h + w];
        out.extend(frame.iter().zip(&win).map(|(s, c)| s * c));
    }
    Tensor::new([t, w], out)
}
