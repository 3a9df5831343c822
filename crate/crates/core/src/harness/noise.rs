//! Synthetic noise generators and mixing at a target signal-to-noise ratio.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::SAMPLE_RATE_HZ;
use crate::error::{Error, Result};

/// RMS level every generator is scaled to.
const NOISE_RMS: f64 = 0.1;
const BABBLE_VOICES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseCategory {
    Babble,
    Music,
    Natural,
    /// One of the other three, drawn per utterance.
    All,
}

impl NoiseCategory {
    pub const CONCRETE: [NoiseCategory; 3] = [Self::Babble, Self::Music, Self::Natural];
}

impl fmt::Display for NoiseCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Babble => "babble",
            Self::Music => "music",
            Self::Natural => "natural",
            Self::All => "all",
        })
    }
}

impl FromStr for NoiseCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "babble" => Ok(Self::Babble),
            "music" => Ok(Self::Music),
            "natural" => Ok(Self::Natural),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown noise category {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseMixSpec {
    pub category: NoiseCategory,
    pub snr_db: f64,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseMixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_nan() {
            return Err(Error::Config("snr_db must be a number".into()));
        }
        Ok(())
    }

    /// Short label such as `babble@5dB`.
    pub fn label(&self) -> String {
        format!("{}@{}dB", self.category, self.snr_db)
    }

    /// Seed of the noise added to utterance `index`.
    pub fn utterance_seed(&self, index: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(index as u64)
    }
}

fn finish(mut x: Vec<f64>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter_mut().for_each(|v| *v -= mean);
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|v| *v *= NOISE_RMS / rms);
    }
    x
}

/// Harmonic voices with a wandering pitch, each gated by a syllable-rate envelope.
fn babble(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE_HZ as f64;
    let mut out = vec![0.0; n];
    for _ in 0..BABBLE_VOICES {
        let f0: f64 = rng.gen_range(110.0..220.0);
        let vib_rate = rng.gen_range(0.5..2.0);
        let vib_depth: f64 = rng.gen_range(0.02..0.06);
        let syl_rate = rng.gen_range(3.0..6.0);
        let syl_phase = rng.gen_range(0.0..2.0 * PI);
        let formant = rng.gen_range(500.0..1500.0);
        let harmonics = (3800.0 / (f0 * (1.0 + vib_depth))).floor() as usize;
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let mut theta = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            theta += 2.0 * PI * f / sr;
            let env = 0.5 * (1.0 - (2.0 * PI * syl_rate * t + syl_phase).cos());
            let mut v = 0.0;
            for (h, ph) in phases.iter().enumerate() {
                let fh = f0 * (h + 1) as f64;
                let weight = 1.0 / (1.0 + ((fh - formant) / 600.0).powi(2));
                v += weight * ((h + 1) as f64 * theta + ph).sin();
            }
            *o += env * v;
        }
    }
    out
}

/// Two-note chords on a pentatonic scale, one per beat, with decaying notes.
fn music(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const SCALE: [i32; 5] = [0, 2, 4, 7, 9];
    let sr = SAMPLE_RATE_HZ as f64;
    let bpm = rng.gen_range(90.0..140.0);
    let beat = ((60.0 / bpm) * sr) as usize;
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let notes: Vec<f64> = (0..2)
            .map(|_| {
                let midi = 57 + 12 * rng.gen_range(0..2) + SCALE[rng.gen_range(0..SCALE.len())];
                440.0 * 2f64.powf((midi - 69) as f64 / 12.0)
            })
            .collect();
        let end = (start + beat).min(n);
        for (i, o) in out[start..end].iter_mut().enumerate() {
            let t = i as f64 / sr;
            let env = (t / 0.005).min(1.0) * (-3.0 * t * sr / beat as f64).exp();
            let mut v = 0.0;
            for f in &notes {
                for h in 1..=6 {
                    v += 0.6f64.powi(h) * (2.0 * PI * f * h as f64 * t).sin();
                }
            }
            *o = env * v;
        }
        start = end;
    }
    out
}

/// Gaussian noise shaped to a 1/f power spectrum and low-passed at 2 kHz.
fn natural(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE_HZ as f64;
    let mut buf: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * sr / n as f64;
        *c *= if f == 0.0 {
            0.0
        } else {
            (1.0 / f).sqrt() / (1.0 + (f / 2000.0).powi(2)).sqrt()
        };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re).collect()
}

/// Deterministic noise of `n` samples at 16 kHz, zero-mean with RMS 0.1.
/// For [`NoiseCategory::All`] the concrete category is drawn from `seed`;
/// the one used is returned alongside the samples.
pub fn synth_noise(category: NoiseCategory, n: usize, seed: u64) -> Result<(Vec<f64>, NoiseCategory)> {
    if n == 0 {
        return Err(Error::Input("noise duration must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let category = match category {
        NoiseCategory::All => NoiseCategory::CONCRETE[rng.gen_range(0..3)],
        c => c,
    };
    let x = match category {
        NoiseCategory::Babble => babble(n, &mut rng),
        NoiseCategory::Music => music(n, &mut rng),
        NoiseCategory::Natural => natural(n, &mut rng),
        NoiseCategory::All => unreachable!("resolved above"),
    };
    Ok((finish(x), category))
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Noise tiled or trimmed to `n` samples.
pub fn fit_length(noise: &[f64], n: usize) -> Vec<f64> {
    noise.iter().copied().cycle().take(n).collect()
}

/// Gain that brings `noise` to `snr_db` below `speech`.
pub fn snr_gain(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    let ps = power(speech);
    if ps == 0.0 {
        return Err(Error::Input("speech is silent; SNR is undefined".into()));
    }
    let pn = power(noise);
    if pn == 0.0 {
        return Err(Error::Input("noise is silent; SNR is unreachable".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `speech + g·noise`, with the noise tiled or trimmed to the speech length and
/// `g` chosen so the mixture has the requested SNR.
pub fn mix_at_snr(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<Vec<f64>> {
    if noise.is_empty() {
        return Err(Error::Input("noise is empty".into()));
    }
    let noise = fit_length(noise, speech.len());
    let g = snr_gain(speech, &noise, snr_db)?;
    Ok(speech.iter().zip(&noise).map(|(s, n)| s + g * n).collect())
}

/// Mixes freshly synthesised noise of `spec` into one utterance.
pub fn add_noise(speech: &[f64], spec: &NoiseMixSpec, index: usize) -> Result<Vec<f64>> {
    let (noise, _) = synth_noise(spec.category, speech.len(), spec.utterance_seed(index))?;
    mix_at_snr(speech, &noise, spec.snr_db)
}
