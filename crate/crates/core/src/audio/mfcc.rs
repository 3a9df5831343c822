use std::f64::consts::PI;

use super::{frame_signal, log_mel_fbank, AudioFeatureConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sequence::{FeatureKind, FeatureSequence};

/// Number of mel bands the cepstra are computed from.
pub const MFCC_MELS: usize = 26;

/// Half-width of the delta regression window.
const DELTA_WINDOW: usize = 2;

/// Orthonormal DCT-II, keeping the first `n_out` coefficients (c0 included).
pub fn dct_ii(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            scale
                * x.iter()
                    .enumerate()
                    .map(|(i, v)| v * (PI * k as f64 * (i as f64 + 0.5) / n).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// Regression deltas over a ±2 frame window, clamping indices at the edges:
/// `d_t = Σ_{n=1..2} n (c_{t+n} − c_{t−n}) / (2 Σ n²)`.
pub fn deltas(x: &Tensor) -> Tensor {
    let (t, d) = (x.rows(), x.last_dim());
    let norm = 2.0 * (1..=DELTA_WINDOW).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        for n in 1..=DELTA_WINDOW {
            let next = x.row((i + n).min(t - 1));
            let prev = x.row(i.saturating_sub(n));
            for j in 0..d {
                out[i * d + j] += n as f64 * (next[j] - prev[j]);
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= norm);
    Tensor::new([t, d], out).expect("dims preserved")
}

/// 13 cepstra of the 26-band log-mel spectrum with deltas and delta-deltas.
pub fn mfcc39(samples: &[f64], cfg: &AudioFeatureConfig) -> Result<FeatureSequence> {
    let cfg = AudioFeatureConfig {
        n_mels: MFCC_MELS,
        ..cfg.clone()
    };
    let fbank = log_mel_fbank(&frame_signal(samples, &cfg)?, &cfg)?;
    let t = fbank.len();
    if t < 2 * DELTA_WINDOW + 1 {
        return Err(Error::Input(format!(
            "{t} frames is too short for delta features, need at least {}",
            2 * DELTA_WINDOW + 1
        )));
    }
    let c = cfg.mfcc_coeffs;
    let mut ceps = Vec::with_capacity(t * c);
    for i in 0..t {
        ceps.extend(dct_ii(fbank.frames().row(i), c));
    }
    let ceps = Tensor::new([t, c], ceps)?;
    let d1 = deltas(&ceps);
    let d2 = deltas(&d1);
    let mut out = Vec::with_capacity(t * 3 * c);
    for i in 0..t {
        out.extend_from_slice(ceps.row(i));
        out.extend_from_slice(d1.row(i));
        out.extend_from_slice(d2.row(i));
    }
    FeatureSequence::new(
        Tensor::new([t, 3 * c], out)?,
        cfg.frame_rate_hz(),
        FeatureKind::Mfcc39,
    )
}
