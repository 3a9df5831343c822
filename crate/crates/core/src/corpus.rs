//! Corpus manifests and per-utterance feature extraction.
//!
//! A manifest is a UTF-8 TSV with one utterance per line:
//! `utt_id \t audio_path \t video_path \t transcript`. Relative paths are
//! resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::audio::{audio_stream_features, mfcc39, stack_to_video_rate, wav};
use crate::error::{shape_err, Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{avht, Tensor};

/// Largest frame-count difference between the streams that is trimmed away
/// rather than reported.
pub const MAX_SKEW: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub audio_path: PathBuf,
    pub video_path: PathBuf,
    pub transcript: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Data(format!(
                    "manifest line {} has {} columns, expected 4",
                    n + 1,
                    cols.len()
                )));
            }
            if cols[0].is_empty() {
                return Err(Error::Data(format!("manifest line {} has no utt_id", n + 1)));
            }
            let resolve = |p: &str| {
                let p = PathBuf::from(p);
                if p.is_absolute() {
                    p
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                utt_id: cols[0].to_string(),
                audio_path: resolve(cols[1]),
                video_path: resolve(cols[2]),
                transcript: cols[3].to_string(),
            });
        }
        if entries.is_empty() {
            return Err(Error::Data("manifest lists no utterances".into()));
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes the manifest with paths relative to its own directory.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
        let base = abs(path.parent().unwrap_or(Path::new(".")));
        let mut out = String::new();
        for e in &self.entries {
            let rel = |p: &Path| {
                let p = abs(p);
                pathdiff::diff_paths(&p, &base)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            };
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.utt_id,
                rel(&e.audio_path),
                rel(&e.video_path),
                e.transcript
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn transcripts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.transcript.as_str())
    }
}

/// Model-ready streams of one utterance, trimmed to a common length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Normalised, stacked filterbanks `[T, n_mels · stack]`.
    pub audio: Tensor,
    /// Grayscale frames `[T, S, S, 1]`.
    pub video: Tensor,
    pub transcript: String,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Common length of two streams, or an alignment error if they differ by
/// more than [`MAX_SKEW`] frames.
pub fn align_lengths(audio: usize, video: usize) -> Result<usize> {
    if audio.abs_diff(video) > MAX_SKEW || audio.min(video) == 0 {
        return Err(Error::Alignment { audio, video });
    }
    Ok(audio.min(video))
}

fn leading_rows(t: &Tensor, n: usize) -> Result<Tensor> {
    let row: usize = t.dims()[1..].iter().product();
    let mut dims = t.dims().to_vec();
    dims[0] = n;
    Tensor::new(dims, t.data()[..n * row].to_vec())
}

/// Checks a `[T, 1, S, S]` video against the configured frame size and
/// returns it channels-last.
pub fn prepare_video(video: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.visual.frame_size;
    match video.dims() {
        &[t, 1, h, w] if h == s && w == s => video.clone().reshape([t, s, s, 1]),
        d => Err(shape_err!("video must be [T, 1, {s}, {s}], got {d:?}")),
    }
}

/// Audio stream features from raw samples and a `[T, 1, S, S]` video.
pub fn featurize(
    id: &str,
    samples: &[f64],
    video: &Tensor,
    transcript: &str,
    cfg: &ModelConfig,
) -> Result<Utterance> {
    let audio = audio_stream_features(samples, &cfg.audio, cfg.stack_factor)?.into_frames();
    let video = prepare_video(video, cfg)?;
    let t = align_lengths(audio.rows(), video.dims()[0])?;
    Ok(Utterance {
        id: id.to_string(),
        audio: leading_rows(&audio, t)?,
        video: leading_rows(&video, t)?,
        transcript: transcript.to_string(),
    })
}

/// MFCC-39 stacked to the video rate and trimmed to `t` frames.
pub fn mfcc_features(samples: &[f64], cfg: &ModelConfig, t: usize) -> Result<Tensor> {
    let m = mfcc39(samples, &cfg.audio)?;
    let stacked = stack_to_video_rate(&m, cfg.stack_factor)?.into_frames();
    if stacked.rows() < t {
        return Err(Error::Alignment {
            audio: stacked.rows(),
            video: t,
        });
    }
    leading_rows(&stacked, t)
}

pub fn read_samples(entry: &ManifestEntry) -> Result<Vec<f64>> {
    wav::read_wav(&entry.audio_path)
}

pub fn read_video(entry: &ManifestEntry) -> Result<Tensor> {
    avht::read_tensor(&entry.video_path)
}

pub fn load_utterance(entry: &ManifestEntry, cfg: &ModelConfig) -> Result<Utterance> {
    let samples = read_samples(entry)?;
    featurize(&entry.utt_id, &samples, &read_video(entry)?, &entry.transcript, cfg)
}
