//! Decoding a corpus under clean and noisy conditions, audio-only and
//! audio-visual, and scoring the transcripts.

use super::config::RunConfig;
use super::noise::{add_noise, NoiseCategory, NoiseMixSpec};
use super::report::{EvalMode, EvalReport, EvalRow};
use super::scoring::score_corpus;
use crate::corpus::{featurize, read_samples, read_video, Manifest};
use crate::error::Result;
use crate::fusion::Dropped;
use crate::numerics::{ParamStore, Tensor};
use crate::objectives::train::transcribe;
use crate::objectives::Vocab;

/// Raw streams of a manifest, read once and reused for every condition.
pub struct RawCorpus {
    pub items: Vec<RawUtterance>,
}

pub struct RawUtterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub video: Tensor,
    pub transcript: String,
}

impl RawCorpus {
    pub fn read(manifest: &Manifest) -> Result<Self> {
        let items = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(RawUtterance {
                    id: e.utt_id.clone(),
                    samples: read_samples(e)?,
                    video: read_video(e)?,
                    transcript: e.transcript.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { items })
    }
}

/// Hypothesis text of every utterance, with optional noise mixed into the audio.
pub fn decode_corpus(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocab,
    corpus: &RawCorpus,
    mode: EvalMode,
    noise: Option<&NoiseMixSpec>,
) -> Result<Vec<String>> {
    let dropped = match mode {
        EvalMode::A => Dropped::Visual,
        EvalMode::AV => Dropped::Neither,
    };
    corpus
        .items
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let samples = match noise {
                Some(spec) => add_noise(&u.samples, spec, i)?,
                None => u.samples.clone(),
            };
            let utt = featurize(&u.id, &samples, &u.video, &u.transcript, &cfg.model)?;
            let ids = transcribe(store, &cfg.model, &utt, dropped, cfg.finetune.max_decode_len)?;
            Ok(vocab.decode(&ids))
        })
        .collect()
}

/// One row per (mode, condition): clean first, then each noise spec in order.
pub fn run_eval(
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocab,
    corpus: &RawCorpus,
) -> Result<EvalReport> {
    let mut conditions: Vec<Option<&NoiseMixSpec>> = vec![None];
    conditions.extend(cfg.eval.noise.iter().map(Some));
    let mut report = EvalReport::default();
    for cond in conditions {
        for &mode in &cfg.eval.modes {
            let hyps = decode_corpus(store, cfg, vocab, corpus, mode, cond)?;
            let counts = score_corpus(
                corpus
                    .items
                    .iter()
                    .zip(&hyps)
                    .map(|(u, h)| (u.transcript.as_str(), h.as_str())),
                cfg.eval.unit,
            )?;
            let (label, noise): (String, Option<(NoiseCategory, f64)>) = match cond {
                Some(s) => (s.label(), Some((s.category, s.snr_db))),
                None => ("clean".into(), None),
            };
            log::info!("{mode} {label}: {} errors over {} tokens", counts.errors(), counts.n_ref);
            report
                .rows
                .push(EvalRow::new(mode, label, noise, cfg.eval.unit, counts)?);
        }
    }
    Ok(report)
}
