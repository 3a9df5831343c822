//! Procedural audio-visual corpus: every character is a short chord of tones
//! paired with a moving bright blob whose position encodes the character.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{wav, SAMPLE_RATE_HZ};
use crate::corpus::{Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::numerics::avht::{self, Dtype};
use crate::numerics::Tensor;
use crate::visual::VIDEO_FPS;

/// Video frames spent on each character, including spaces.
pub const FRAMES_PER_SYMBOL: usize = 3;
const SAMPLES_PER_FRAME: usize = (SAMPLE_RATE_HZ as usize) / VIDEO_FPS as usize;
/// Extra samples so a 25 ms analysis window fits the final frame exactly.
const TAIL_SAMPLES: usize = 240;
const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub utterances: usize,
    /// Size of the alphabet prefix transcripts are drawn from.
    pub letters: usize,
    pub min_words: usize,
    pub max_words: usize,
    pub frame_size: usize,
    /// Per-utterance variation of pitch and loudness, 0 for none.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            utterances: 20,
            letters: 8,
            min_words: 2,
            max_words: 3,
            frame_size: 32,
            jitter: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub id: String,
    pub transcript: String,
    pub samples: Vec<f64>,
    /// `[T, 1, S, S]` frames in [0, 1].
    pub video: Tensor,
}

/// Tone frequencies of a character: a low and a high component plus an overtone.
fn symbol_tones(idx: usize) -> [f64; 3] {
    let f1 = 300.0 + 90.0 * (idx % 7) as f64;
    let f2 = 1100.0 + 230.0 * ((idx * 3) % 8) as f64;
    [f1, f2, 2.0 * f2 + 150.0]
}

/// Blob centre of a character as fractions of the frame.
fn symbol_position(idx: usize) -> (f64, f64) {
    let col = idx % 5;
    let row = (idx / 5) % 5;
    (0.2 + 0.15 * col as f64, 0.2 + 0.15 * row as f64)
}

fn render_audio(transcript: &str, gain: f64, pitch: f64) -> Vec<f64> {
    let seg = FRAMES_PER_SYMBOL * SAMPLES_PER_FRAME;
    let n = transcript.chars().count() * seg + TAIL_SAMPLES;
    let mut out = vec![0.0; n];
    for (k, c) in transcript.chars().enumerate() {
        let Some(idx) = ALPHABET.find(c) else { continue };
        let tones = symbol_tones(idx);
        for (i, o) in out[k * seg..(k + 1) * seg].iter_mut().enumerate() {
            let t = i as f64 / SAMPLE_RATE_HZ as f64;
            let ramp = (i.min(seg - 1 - i) as f64 / 80.0).min(1.0);
            let v: f64 = tones
                .iter()
                .zip([0.3, 0.2, 0.08])
                .map(|(f, a)| a * (2.0 * PI * f * pitch * t).sin())
                .sum();
            *o = gain * ramp * v;
        }
    }
    out
}

fn render_video(transcript: &str, s: usize) -> Result<Tensor> {
    let t = transcript.chars().count() * FRAMES_PER_SYMBOL;
    let mut data = vec![0.0; t * s * s];
    let sigma = 0.12 * s as f64;
    for (k, c) in transcript.chars().enumerate() {
        let Some(idx) = ALPHABET.find(c) else { continue };
        let (cx, cy) = symbol_position(idx);
        for f in 0..FRAMES_PER_SYMBOL {
            // The blob drifts right and grows across the character's frames.
            let x0 = (cx + 0.06 * f as f64) * s as f64;
            let y0 = cy * s as f64;
            let sg = sigma * (1.0 + 0.25 * f as f64);
            let frame = &mut data[(k * FRAMES_PER_SYMBOL + f) * s * s..][..s * s];
            for y in 0..s {
                for x in 0..s {
                    let d2 = (x as f64 + 0.5 - x0).powi(2) + (y as f64 + 0.5 - y0).powi(2);
                    frame[y * s + x] = (-d2 / (2.0 * sg * sg)).exp();
                }
            }
        }
    }
    Tensor::new([t, 1, s, s], data)
}

/// Audio and video of one transcript. Characters outside `a..z` render as
/// silence and a blank frame.
pub fn render_utterance(
    id: &str,
    transcript: &str,
    frame_size: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SynthUtterance> {
    if transcript.is_empty() {
        return Err(Error::Input("cannot render an empty transcript".into()));
    }
    let gain = 1.0 + jitter * rng.gen_range(-0.2..0.2);
    let pitch = 1.0 + jitter * rng.gen_range(-0.03..0.03);
    Ok(SynthUtterance {
        id: id.to_string(),
        transcript: transcript.to_string(),
        samples: render_audio(transcript, gain, pitch),
        video: render_video(transcript, frame_size)?,
    })
}

/// `n` distinct transcripts of short words over the first `letters` letters.
pub fn synth_transcripts(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<String>> {
    if spec.letters < 2 || spec.letters > ALPHABET.len() {
        return Err(Error::Config(format!("letters must be in 2..=26, got {}", spec.letters)));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(Error::Config("need 1 <= min_words <= max_words".into()));
    }
    let letters: Vec<char> = ALPHABET.chars().take(spec.letters).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.utterances);
    let mut attempts = 0;
    while out.len() < spec.utterances {
        attempts += 1;
        if attempts > 1000 * spec.utterances.max(1) {
            return Err(Error::Config("cannot draw enough distinct transcripts".into()));
        }
        let words = rng.gen_range(spec.min_words..=spec.max_words);
        let text = (0..words)
            .map(|_| {
                let len = rng.gen_range(2..=4);
                (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect::<String>()
            })
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    Ok(out)
}

pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<SynthUtterance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let transcripts = synth_transcripts(spec, &mut rng)?;
    transcripts
        .iter()
        .enumerate()
        .map(|(i, t)| render_utterance(&format!("utt{i:04}"), t, spec.frame_size, spec.jitter, &mut rng))
        .collect()
}

/// Writes `audio/<id>.wav`, `video/<id>.avht` and `manifest.tsv` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, utts: &[SynthUtterance]) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["audio", "video"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = Manifest::default();
    for u in utts {
        let audio_path = dir.join("audio").join(format!("{}.wav", u.id));
        let video_path = dir.join("video").join(format!("{}.avht", u.id));
        wav::write_wav(&audio_path, &u.samples)?;
        avht::write_tensor(&video_path, &u.video, Dtype::F32)?;
        manifest.entries.push(ManifestEntry {
            utt_id: u.id.clone(),
            audio_path,
            video_path,
            transcript: u.transcript.clone(),
        });
    }
    manifest.write(dir.join("manifest.tsv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::featurize;
    use crate::model::ModelConfig;

    #[test]
    fn streams_align_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = render_utterance("u", "ab cd", 16, 0.0, &mut rng).unwrap();
        assert_eq!(u.video.dims(), &[15, 1, 16, 16]);
        let mut cfg = ModelConfig::default();
        cfg.visual.frame_size = 16;
        let f = featurize(&u.id, &u.samples, &u.video, &u.transcript, &cfg).unwrap();
        assert_eq!(f.len(), 15);
    }

    #[test]
    fn corpus_is_deterministic_and_distinct() {
        let spec = SynthSpec::default();
        let a = synth_corpus(&spec).unwrap();
        assert_eq!(a, synth_corpus(&spec).unwrap());
        let texts: BTreeSet<_> = a.iter().map(|u| u.transcript.clone()).collect();
        assert_eq!(texts.len(), spec.utterances);
        assert!(a.iter().all(|u| u.video.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn written_corpus_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            utterances: 2,
            ..Default::default()
        };
        let utts = synth_corpus(&spec).unwrap();
        let m = write_corpus(dir.path(), &utts).unwrap();
        let back = Manifest::read(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back, m);
        let samples = wav::read_wav(&m.entries[0].audio_path).unwrap();
        assert_eq!(samples.len(), utts[0].samples.len());
    }
}
