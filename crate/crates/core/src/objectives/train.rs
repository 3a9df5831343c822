//! Training loops: masked-prediction pre-training over pseudo-labels and
//! seq2seq fine-tuning with a freeze-then-unfreeze schedule.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{decoder_logits, greedy_decode, teacher_forcing};
use super::masking::{span_mask, MaskSpec};
use super::optim::{accumulate, Adam, FreezeSchedule, LrSchedule};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::fusion::{draw_modality_dropout, Dropped};
use crate::model::{encode, encoder_side_prefixes, pretrain_logits, ForwardOptions, ModelConfig};
use crate::numerics::{ParamStore, Session, Tensor, Var};

/// One line of the metrics log. `masked_acc` is the accuracy of the update's
/// predictions: masked frames in pre-training, target tokens in fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub masked_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Optimizer updates.
    pub steps: usize,
    pub batch_size: usize,
    /// Batches accumulated into one update.
    pub update_freq: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub mask: MaskSpec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            update_freq: 1,
            lr: 1e-3,
            warmup_steps: 30,
            mask: MaskSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub update_freq: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Fraction of updates during which pre-trained parameters stay frozen.
    pub freeze_fraction: f64,
    pub max_decode_len: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 5,
            update_freq: 1,
            lr: 1e-3,
            warmup_steps: 30,
            freeze_fraction: 0.8,
            max_decode_len: 100,
        }
    }
}

fn check_loop(steps: usize, batch_size: usize, update_freq: usize, n: usize) -> Result<()> {
    if steps == 0 || batch_size == 0 || update_freq == 0 {
        return Err(Error::Config(
            "steps, batch_size and update_freq must be positive".into(),
        ));
    }
    if n == 0 {
        return Err(Error::Input("no training utterances".into()));
    }
    Ok(())
}

/// Yields utterance indices in reshuffled epochs.
struct Batcher {
    order: Vec<usize>,
    at: usize,
}

impl Batcher {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            at: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.at == self.order.len() {
                self.order.shuffle(rng);
                self.at = 0;
            }
            out.push(self.order[self.at]);
            self.at += 1;
        }
        out
    }
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len())
        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
        .unwrap_or(0)
}

fn count_correct(logits: &Tensor, labels: &[usize], mask: &[bool]) -> usize {
    labels
        .iter()
        .zip(mask)
        .enumerate()
        .filter(|&(i, (&y, &m))| m && argmax(logits.row(i)) == y)
        .count()
}

fn scale_grads(grads: &mut BTreeMap<String, Tensor>, s: f64) {
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss {loss} at update {step}; lower the learning rate or check the inputs"
        )))
    }
}

fn check_labels(data: &[Utterance], labels: &[Vec<usize>], k: usize) -> Result<()> {
    if data.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} utterances but {} label sequences",
            data.len(),
            labels.len()
        )));
    }
    for (u, l) in data.iter().zip(labels) {
        if u.len() != l.len() {
            return Err(Error::Alignment {
                audio: u.len(),
                video: l.len(),
            });
        }
        if let Some(&bad) = l.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!(
                "{}: label {bad} outside {k} clusters",
                u.id
            )));
        }
    }
    Ok(())
}

fn head_clusters(store: &ParamStore) -> Result<usize> {
    Ok(store.get(&format!("{}.weight", crate::model::PRETRAIN_HEAD))?.last_dim())
}

/// Masked-prediction pre-training. `store` must hold the encoder side and the
/// pre-training head; it is updated in place. Updates are numbered from 1 and
/// `on_step` sees each update's record as soon as it is made.
pub fn pretrain(
    store: &mut ParamStore,
    model: &ModelConfig,
    tc: &PretrainConfig,
    data: &[Utterance],
    labels: &[Vec<usize>],
    seed: u64,
    mut on_step: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    check_loop(tc.steps, tc.batch_size, tc.update_freq, data.len())?;
    tc.mask.validate()?;
    check_labels(data, labels, head_clusters(store)?)?;
    let sched = LrSchedule {
        peak: tc.lr,
        warmup_steps: tc.warmup_steps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batcher = Batcher::new(data.len());
    let mut adam = Adam::default();
    let mut records = Vec::with_capacity(tc.steps);
    for step in 1..=tc.steps {
        let batch: Vec<usize> = (0..tc.update_freq)
            .flat_map(|_| batcher.next(tc.batch_size, &mut rng))
            .collect();
        let mut draws = Vec::with_capacity(batch.len());
        for &i in &batch {
            let t = data[i].len();
            let spec = MaskSpec {
                span_len: tc.mask.span_len.min(t),
                ..tc.mask.clone()
            };
            let mask = span_mask(t, &spec, &mut rng)?;
            let dropped = draw_modality_dropout(model.fusion.p_audio, model.fusion.p_visual, &mut rng)?;
            draws.push((mask, dropped));
        }
        let total: usize = draws.iter().map(|(m, _)| m.iter().filter(|&&b| b).count()).sum();
        let mut grads = BTreeMap::new();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (&i, (mask, dropped)) in batch.iter().zip(&draws) {
            let u = &data[i];
            let mut s = Session::new(store);
            let opts = ForwardOptions {
                mask: Some(mask),
                dropped: Some(*dropped),
            };
            let out = encode(&mut s, model, &u.audio, &u.video, &opts, Some(&mut rng))?;
            let logits = pretrain_logits(&mut s, out.output)?;
            let (loss, count) = s.g.masked_cross_entropy(logits, &labels[i], mask)?;
            if count == 0 {
                continue;
            }
            let lv = s.g.value(loss).data()[0];
            check_finite(lv, step)?;
            loss_sum += lv * count as f64;
            correct += count_correct(s.g.value(logits), &labels[i], mask);
            let mut g = s.backward(loss)?;
            scale_grads(&mut g, count as f64 / total as f64);
            accumulate(&mut grads, g);
        }
        let lr = sched.lr(step);
        if total > 0 {
            adam.step(store, &grads, lr)?;
        } else {
            log::warn!("update {step}: every mask in the batch was empty");
        }
        let rec = MetricsRecord {
            step,
            loss: if total > 0 { loss_sum / total as f64 } else { 0.0 },
            lr,
            masked_acc: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        };
        on_step(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Accuracy of the pre-training head on masked frames, with masks drawn from
/// `seed` and no dropout of any kind.
pub fn masked_accuracy(
    store: &ParamStore,
    model: &ModelConfig,
    data: &[Utterance],
    labels: &[Vec<usize>],
    mask: &MaskSpec,
    seed: u64,
) -> Result<f64> {
    check_labels(data, labels, head_clusters(store)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut total) = (0, 0);
    for (u, l) in data.iter().zip(labels) {
        let spec = MaskSpec {
            span_len: mask.span_len.min(u.len()),
            ..mask.clone()
        };
        let m = span_mask(u.len(), &spec, &mut rng)?;
        let mut s = Session::new(store);
        let opts = ForwardOptions {
            mask: Some(&m),
            dropped: None,
        };
        let out = encode(&mut s, model, &u.audio, &u.video, &opts, None)?;
        let logits = pretrain_logits(&mut s, out.output)?;
        correct += count_correct(s.g.value(logits), l, &m);
        total += m.iter().filter(|&&b| b).count();
    }
    if total == 0 {
        return Err(Error::Input("no frames were masked".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Encoder outputs `[T, D]` and every block's output, without stochasticity.
pub fn encoder_states(
    store: &ParamStore,
    model: &ModelConfig,
    u: &Utterance,
    dropped: Dropped,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut s = Session::new(store);
    let opts = ForwardOptions {
        mask: None,
        dropped: Some(dropped),
    };
    let out = encode(&mut s, model, &u.audio, &u.video, &opts, None)?;
    let layers = out.layers.iter().map(|&v| s.g.value(v).clone()).collect();
    Ok((s.g.value(out.output).clone(), layers))
}

fn is_stochastic(model: &ModelConfig) -> bool {
    let e = &model.encoder;
    e.layer_drop > 0.0 || e.dropout > 0.0 || e.attention_dropout > 0.0
}

/// Teacher-forced loss and correct-token count of one utterance.
fn seq2seq_terms(s: &mut Session, model: &ModelConfig, enc: Var, targets: &[usize]) -> Result<(Var, usize, usize)> {
    let (inputs, outputs) = teacher_forcing(targets);
    let logits = decoder_logits(s, &model.decoder, enc, &inputs)?;
    let vocab = s.g.dims(logits)[1];
    if let Some(&bad) = outputs.iter().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let mask = vec![true; outputs.len()];
    let (loss, count) = s.g.masked_cross_entropy(logits, &outputs, &mask)?;
    let correct = count_correct(s.g.value(logits), &outputs, &mask);
    Ok((loss, count, correct))
}

/// Seq2seq fine-tuning of encoder and decoder on token targets. Encoder-side
/// parameters are frozen for the first `freeze_fraction` of updates; while
/// frozen and deterministic, encoder outputs are computed once and reused.
pub fn finetune(
    store: &mut ParamStore,
    model: &ModelConfig,
    tc: &FinetuneConfig,
    data: &[Utterance],
    targets: &[Vec<usize>],
    seed: u64,
    mut on_step: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<Vec<MetricsRecord>> {
    check_loop(tc.steps, tc.batch_size, tc.update_freq, data.len())?;
    if data.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} utterances but {} transcripts",
            data.len(),
            targets.len()
        )));
    }
    let freeze = FreezeSchedule::fraction(encoder_side_prefixes(), tc.freeze_fraction, tc.steps)?;
    let sched = LrSchedule {
        peak: tc.lr,
        warmup_steps: tc.warmup_steps,
    };
    let stochastic = is_stochastic(model);
    let mut cache: Vec<Option<Tensor>> = vec![None; data.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batcher = Batcher::new(data.len());
    let mut adam = Adam::default();
    let mut records = Vec::with_capacity(tc.steps);
    for step in 1..=tc.steps {
        let frozen = freeze.frozen_at(step - 1).to_vec();
        let batch: Vec<usize> = (0..tc.update_freq)
            .flat_map(|_| batcher.next(tc.batch_size, &mut rng))
            .collect();
        let total: usize = batch.iter().map(|&i| targets[i].len() + 1).sum();
        let mut grads = BTreeMap::new();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for &i in &batch {
            let u = &data[i];
            let mut s = Session::new(store).with_frozen(&frozen);
            let enc = if !frozen.is_empty() && !stochastic {
                if cache[i].is_none() {
                    cache[i] = Some(encoder_states(store, model, u, Dropped::Neither)?.0);
                }
                s.g.constant(cache[i].clone().expect("filled above"))
            } else {
                let r = if stochastic { Some(&mut rng) } else { None };
                encode(&mut s, model, &u.audio, &u.video, &ForwardOptions::default(), r)?.output
            };
            let (loss, count, c) = seq2seq_terms(&mut s, model, enc, &targets[i])?;
            let lv = s.g.value(loss).data()[0];
            check_finite(lv, step)?;
            loss_sum += lv * count as f64;
            correct += c;
            let mut g = s.backward(loss)?;
            scale_grads(&mut g, count as f64 / total as f64);
            accumulate(&mut grads, g);
        }
        let lr = sched.lr(step);
        adam.step(store, &grads, lr)?;
        if frozen.is_empty() {
            cache.iter_mut().for_each(|c| *c = None);
        }
        let rec = MetricsRecord {
            step,
            loss: loss_sum / total as f64,
            lr,
            masked_acc: correct as f64 / total as f64,
        };
        on_step(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// Greedy transcription of one utterance as token ids.
pub fn transcribe(
    store: &ParamStore,
    model: &ModelConfig,
    u: &Utterance,
    dropped: Dropped,
    max_len: usize,
) -> Result<Vec<usize>> {
    let (enc, _) = encoder_states(store, model, u, dropped)?;
    greedy_decode(store, &model.decoder, &enc, max_len)
}
