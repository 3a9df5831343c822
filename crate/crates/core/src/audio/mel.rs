use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::AudioFeatureConfig;
use crate::error::{shape_err, Result};
use crate::numerics::Tensor;
use crate::sequence::{FeatureKind, FeatureSequence};

/// Energies below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced evenly on the mel scale from 0 Hz to Nyquist,
/// evaluated at the FFT bin frequencies.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz; filter `m` spans
    /// `edges[m]..edges[m + 2]` and peaks at `edges[m + 1]`.
    pub edges_hz: Vec<f64>,
    /// `[n_mels][fft_size / 2 + 1]` weights.
    pub weights: Vec<Vec<f64>>,
    pub bin_hz: f64,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, fft_size: usize, sample_rate_hz: u32) -> Self {
        let nyquist = sample_rate_hz as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges_hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / fft_size as f64;
        let weights = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
                (0..n_bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= lo || f >= hi {
                            0.0
                        } else if f <= mid {
                            (f - lo) / (mid - lo)
                        } else {
                            (hi - f) / (hi - mid)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            edges_hz,
            weights,
            bin_hz,
        }
    }

    pub fn from_config(cfg: &AudioFeatureConfig) -> Self {
        Self::new(cfg.n_mels, cfg.resolved_fft_size(), cfg.sample_rate_hz)
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.edges_hz[1..self.edges_hz.len() - 1]
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w.iter().zip(power).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Power spectra `[T, fft_size/2 + 1]` of windowed frames.
pub fn power_spectrum(frames: &Tensor, fft_size: usize) -> Result<Tensor> {
    let w = frames.last_dim();
    if w > fft_size {
        return Err(shape_err!("frames of {w} samples exceed fft size {fft_size}"));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);
    let n_bins = fft_size / 2 + 1;
    let t = frames.rows();
    let mut out = Vec::with_capacity(t * n_bins);
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for i in 0..t {
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for (c, &s) in buf.iter_mut().zip(frames.row(i)) {
            c.re = s;
        }
        fft.process(&mut buf);
        out.extend(buf[..n_bins].iter().map(|c| c.norm_sqr()));
    }
    Tensor::new([t, n_bins], out)
}

/// Natural-log mel energies `[T, n_mels]` of frames from [`super::frame_signal`].
pub fn log_mel_fbank(frames: &Tensor, cfg: &AudioFeatureConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    if frames.ndim() != 2 || frames.last_dim() != cfg.window_samples() {
        return Err(shape_err!(
            "frames {:?} do not match a {}-sample window",
            frames.dims(),
            cfg.window_samples()
        ));
    }
    let power = power_spectrum(frames, cfg.resolved_fft_size())?;
    let bank = MelFilterbank::from_config(cfg);
    let mut out = Vec::with_capacity(frames.rows() * cfg.n_mels);
    for i in 0..power.rows() {
        out.extend(bank.apply(power.row(i)).into_iter().map(|e| e.max(LOG_FLOOR).ln()));
    }
    FeatureSequence::new(
        Tensor::new([frames.rows(), cfg.n_mels], out)?,
        cfg.frame_rate_hz(),
        FeatureKind::Fbank,
    )
}
