//! 16-bit mono 16 kHz WAV input and output.

use std::path::Path;

use super::SAMPLE_RATE_HZ;
use crate::error::{Error, Result};

/// Reads a WAV file as samples scaled to [-1, 1). Anything other than
/// single-channel 16-bit integer PCM at 16 kHz is rejected.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_rate != SAMPLE_RATE_HZ
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Data(format!(
            "{}: expected mono 16-bit 16 kHz PCM, got {} ch {}-bit {:?} at {} Hz",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format,
            spec.sample_rate
        )));
    }
    reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(|e| wav_err(path, e)))
        .collect()
}

/// Writes samples as 16-bit mono 16 kHz PCM, clipping to the representable range.
pub fn write_wav(path: impl AsRef<Path>, samples: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE_HZ,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_quantised() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        write_wav(&p, &x).unwrap();
        let y = read_wav(&p).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn rejects_stereo_and_other_rates() {
        let dir = tempfile::tempdir().unwrap();
        for (ch, rate) in [(2, 16_000), (1, 8_000)] {
            let p = dir.path().join(format!("{ch}_{rate}.wav"));
            let spec = hound::WavSpec {
                channels: ch,
                sample_rate: rate,
                bits_per_sample: 16,
                sample_format: hound::SampleFormat::Int,
            };
            let mut w = hound::WavWriter::create(&p, spec).unwrap();
            for _ in 0..ch * 10 {
                w.write_sample(0i16).unwrap();
            }
            w.finalize().unwrap();
            assert!(matches!(read_wav(&p), Err(Error::Data(_))));
        }
        assert!(matches!(read_wav(dir.path().join("missing.wav")), Err(Error::Io { .. })));
    }
}
