//! Browser bindings for three small operations of the recognition stack.
//! Each binding returns a JSON string that `www/index.html` draws.

use avsr_core::audio::{frame_signal, log_mel_fbank, AudioFeatureConfig, MelFilterbank, SAMPLE_RATE_HZ};
use avsr_core::harness::noise::{mix_at_snr, power, synth_noise};
use avsr_core::harness::synth::render_utterance;
use avsr_core::harness::{score_corpus, NoiseCategory, Unit};
use avsr_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Points per waveform sent to the page.
const ENVELOPE_POINTS: usize = 400;

/// Mean log-mel energy per band of a half-second pure tone.
pub fn tone_fbank_json(freq_hz: f64, n_mels: usize, window_ms: f64) -> Result<Value> {
    let cfg = AudioFeatureConfig::fbank(n_mels, window_ms);
    cfg.validate()?;
    let n = SAMPLE_RATE_HZ as usize / 2;
    let tone: Vec<f64> = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * freq_hz * i as f64 / SAMPLE_RATE_HZ as f64).sin())
        .collect();
    let fb = log_mel_fbank(&frame_signal(&tone, &cfg)?, &cfg)?;
    let f = fb.frames();
    let energies: Vec<f64> = (0..n_mels)
        .map(|j| (0..f.rows()).map(|i| f.at2(i, j)).sum::<f64>() / f.rows() as f64)
        .collect();
    let peak = (0..n_mels)
        .max_by(|&a, &b| energies[a].total_cmp(&energies[b]))
        .unwrap_or(0);
    let centers = MelFilterbank::from_config(&cfg).centers_hz().to_vec();
    Ok(json!({ "energies": energies, "centers_hz": centers, "peak": peak, "frames": f.rows() }))
}

/// Error counts of one hypothesis against its reference.
pub fn score_json(reference: &str, hypothesis: &str, unit: &str) -> Result<Value> {
    let unit: Unit = unit.parse()?;
    let c = score_corpus([(reference, hypothesis)], unit)?;
    Ok(json!({
        "metric": unit.metric(),
        "rate": c.rate(),
        "substitutions": c.substitutions,
        "deletions": c.deletions,
        "insertions": c.insertions,
        "n_ref": c.n_ref,
    }))
}

/// Peak absolute value of consecutive chunks, for drawing a waveform.
fn envelope(x: &[f64]) -> Vec<f64> {
    let chunk = x.len().div_ceil(ENVELOPE_POINTS).max(1);
    x.chunks(chunk)
        .map(|c| c.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect()
}

/// Renders `text` as synthetic speech and mixes in noise at `snr_db`.
pub fn mix_json(text: &str, category: &str, snr_db: f64, seed: u32) -> Result<Value> {
    let category: NoiseCategory = category.parse()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let speech = render_utterance("demo", text, 16, 0.0, &mut rng)?.samples;
    let (noise, used) = synth_noise(category, speech.len(), seed as u64)?;
    let mixed = mix_at_snr(&speech, &noise, snr_db)?;
    let residual: Vec<f64> = mixed.iter().zip(&speech).map(|(m, s)| m - s).collect();
    let measured = 10.0 * (power(&speech) / power(&residual)).log10();
    Ok(json!({
        "category": used.to_string(),
        "measured_snr_db": measured,
        "seconds": speech.len() as f64 / SAMPLE_RATE_HZ as f64,
        "clean": envelope(&speech),
        "mixed": envelope(&mixed),
    }))
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn tone_fbank(freq_hz: f64, n_mels: usize, window_ms: f64) -> std::result::Result<String, JsValue> {
    to_js(tone_fbank_json(freq_hz, n_mels, window_ms))
}

#[wasm_bindgen]
pub fn score(reference: &str, hypothesis: &str, unit: &str) -> std::result::Result<String, JsValue> {
    to_js(score_json(reference, hypothesis, unit))
}

#[wasm_bindgen]
pub fn mix(text: &str, category: &str, snr_db: f64, seed: u32) -> std::result::Result<String, JsValue> {
    to_js(mix_json(text, category, snr_db, seed))
}
