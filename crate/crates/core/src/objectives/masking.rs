//! Span masking and the masked-prediction loss.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    /// Expected number of span starts per frame.
    pub mask_prob: f64,
    pub span_len: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            mask_prob: 0.08,
            span_len: 10,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!(
                "mask_prob {} is not a probability",
                self.mask_prob
            )));
        }
        if self.span_len == 0 {
            return Err(Error::Config("span_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// Boolean mask over `t` frames made of contiguous spans.
///
/// `⌊mask_prob·t + u⌋` starts (`u` uniform in [0, 1)) are drawn without
/// replacement from `0..t`; each masks `span_len` frames, clipped at `t`.
pub fn span_mask<R: Rng + ?Sized>(t: usize, spec: &MaskSpec, rng: &mut R) -> Result<Vec<bool>> {
    spec.validate()?;
    if spec.span_len > t {
        return Err(Error::Input(format!(
            "span of {} frames does not fit in {t} frames",
            spec.span_len
        )));
    }
    let starts = ((spec.mask_prob * t as f64 + rng.gen::<f64>()).floor() as usize).min(t);
    let mut mask = vec![false; t];
    for s in sample(rng, t, starts).into_iter() {
        for m in &mut mask[s..(s + spec.span_len).min(t)] {
            *m = true;
        }
    }
    Ok(mask)
}

/// Loss value and whether the mask was empty (in which case the loss is zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedLoss {
    pub loss: f64,
    pub empty_mask: bool,
}

/// Mean cross-entropy of `logits: [T, K]` against `labels` over masked frames.
/// Unmasked rows are never read.
pub fn masked_prediction_loss(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<MaskedLoss> {
    if logits.ndim() != 2 {
        return Err(shape_err!("logits must be [T, K], got {:?}", logits.dims()));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let (loss, count) = g.masked_cross_entropy(l, labels, mask)?;
    if count == 0 {
        log::warn!("masked prediction loss over an empty mask is defined as zero");
    }
    Ok(MaskedLoss {
        loss: g.value(loss).data()[0],
        empty_mask: count == 0,
    })
}

/// Correct argmax predictions and the number of masked rows.
pub fn masked_correct(logits: &Tensor, labels: &[usize], mask: &[bool]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (i, (&m, &y)) in mask.iter().zip(labels).enumerate() {
        if !m {
            continue;
        }
        total += 1;
        let row = logits.row(i);
        let arg = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        if arg == y {
            correct += 1;
        }
    }
    (correct, total)
}
