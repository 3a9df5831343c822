//! Autoregressive transformer decoder over encoder states.

use serde::{Deserialize, Serialize};

use super::vocab::{BOS, EOS};
use crate::encoder::feed_forward;
use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::{layer_norm_layer, linear};
use crate::numerics::{ParamPlan, ParamStore, Session, Tensor, Var};

pub const PREFIX: &str = "decoder";
/// Added to attention logits of future positions.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            ffn_expansion: 4,
        }
    }
}

impl DecoderConfig {
    pub fn paper() -> Self {
        Self {
            layers: 6,
            heads: 12,
            ffn_expansion: 4,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder width {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.ffn_expansion == 0 {
            return Err(Error::Config("decoder ffn_expansion must be positive".into()));
        }
        Ok(())
    }
}

fn mha_plan(plan: &mut ParamPlan, p: &str, d: usize) {
    for n in ["q", "k", "v", "out"] {
        plan.linear(&format!("{p}.{n}"), d, d, true);
    }
}

pub fn decoder_plan(cfg: &DecoderConfig, dim: usize, vocab_size: usize) -> Result<ParamPlan> {
    cfg.validate(dim)?;
    let mut plan = ParamPlan::new();
    plan.uniform(format!("{PREFIX}.embed"), [vocab_size, dim], dim);
    for i in 0..cfg.layers {
        let p = format!("{PREFIX}.layers.{i}");
        mha_plan(&mut plan, &format!("{p}.self_attn"), dim);
        plan.norm(&format!("{p}.norm_self"), dim);
        mha_plan(&mut plan, &format!("{p}.cross_attn"), dim);
        plan.norm(&format!("{p}.norm_cross"), dim);
        plan.linear(&format!("{p}.ffn.fc1"), dim, cfg.ffn_expansion * dim, true);
        plan.linear(&format!("{p}.ffn.fc2"), cfg.ffn_expansion * dim, dim, true);
        plan.norm(&format!("{p}.norm_ffn"), dim);
    }
    plan.linear(&format!("{PREFIX}.out"), dim, vocab_size, true);
    Ok(plan)
}

/// Absolute sinusoidal position codes for positions `0..n`.
pub fn position_table(n: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for m in 0..d / 2 {
            let w = 10000f64.powf(-2.0 * m as f64 / d as f64);
            out[pos * d + 2 * m] = (pos as f64 * w).sin();
            out[pos * d + 2 * m + 1] = (pos as f64 * w).cos();
        }
    }
    Tensor::new([n, d], out).expect("positive extents")
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros([n, n]);
    for i in 0..n {
        m.row_mut(i)[i + 1..].fill(MASKED_LOGIT);
    }
    m
}

fn attention(
    s: &mut Session,
    p: &str,
    xq: Var,
    xkv: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = linear(s, &format!("{p}.q"), xq)?;
    let k = linear(s, &format!("{p}.k"), xkv)?;
    let v = linear(s, &format!("{p}.v"), xkv)?;
    let (n, d) = (s.g.dims(q)[0], s.g.dims(q)[1]);
    let dh = d / heads;
    let mask = causal.then(|| s.g.constant(causal_mask(n)));
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.g.slice_cols(q, h * dh, dh)?;
        let kh = s.g.slice_cols(k, h * dh, dh)?;
        let vh = s.g.slice_cols(v, h * dh, dh)?;
        let l = s.g.matmul_nt(qh, kh)?;
        let mut l = s.g.scale(l, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            l = s.g.add(l, m)?;
        }
        let a = s.g.softmax_rows(l);
        outs.push(s.g.matmul(a, vh)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        s.g.concat_cols(&outs)?
    };
    linear(s, &format!("{p}.out"), cat)
}

/// Next-token logits `[L, V]` for every prefix of `inputs`.
pub fn decoder_logits(
    s: &mut Session,
    cfg: &DecoderConfig,
    enc: Var,
    inputs: &[usize],
) -> Result<Var> {
    let embed = s.param(&format!("{PREFIX}.embed"))?;
    let (vocab, d) = (s.g.dims(embed)[0], s.g.dims(embed)[1]);
    if s.g.dims(enc).len() != 2 || s.g.dims(enc)[1] != d {
        return Err(shape_err!(
            "decoder of width {d} cannot attend to encoder states {:?}",
            s.g.dims(enc)
        ));
    }
    if let Some(&bad) = inputs.iter().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let x = s.g.gather_rows(embed, inputs)?;
    let pos = s.g.constant(position_table(inputs.len(), d));
    let mut x = s.g.add(x, pos)?;
    for i in 0..cfg.layers {
        let p = format!("{PREFIX}.layers.{i}");
        let a = attention(s, &format!("{p}.self_attn"), x, x, cfg.heads, true)?;
        let r = s.g.add(x, a)?;
        x = layer_norm_layer(s, &format!("{p}.norm_self"), r)?;
        let c = attention(s, &format!("{p}.cross_attn"), x, enc, cfg.heads, false)?;
        let r = s.g.add(x, c)?;
        x = layer_norm_layer(s, &format!("{p}.norm_cross"), r)?;
        let f = feed_forward(s, &format!("{p}.ffn"), x)?;
        let r = s.g.add(x, f)?;
        x = layer_norm_layer(s, &format!("{p}.norm_ffn"), r)?;
    }
    linear(s, &format!("{PREFIX}.out"), x)
}

/// Teacher-forced inputs `<s> y…` and outputs `y… </s>` of a target sequence.
pub fn teacher_forcing(targets: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let inputs = std::iter::once(BOS).chain(targets.iter().copied()).collect();
    let outputs = targets.iter().copied().chain(std::iter::once(EOS)).collect();
    (inputs, outputs)
}

/// Mean cross-entropy of the teacher-forced predictions of `targets`, plus
/// the number of predicted positions.
pub fn seq2seq_step(
    s: &mut Session,
    cfg: &DecoderConfig,
    enc: Var,
    targets: &[usize],
) -> Result<(Var, usize)> {
    let (inputs, outputs) = teacher_forcing(targets);
    let logits = decoder_logits(s, cfg, enc, &inputs)?;
    let vocab = s.g.dims(logits)[1];
    if let Some(&bad) = outputs.iter().find(|&&t| t >= vocab) {
        return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let mask = vec![true; outputs.len()];
    s.g.masked_cross_entropy(logits, &outputs, &mask)
}

/// Cross-entropy of each teacher-forced position separately.
pub fn position_losses(
    store: &ParamStore,
    cfg: &DecoderConfig,
    enc: &Tensor,
    targets: &[usize],
) -> Result<Vec<f64>> {
    let (inputs, outputs) = teacher_forcing(targets);
    let mut s = Session::new(store);
    let e = s.g.constant(enc.clone());
    let logits = decoder_logits(&mut s, cfg, e, &inputs)?;
    let lp = s.g.log_softmax_rows(logits);
    let lp = s.g.value(lp);
    Ok(outputs.iter().enumerate().map(|(i, &y)| -lp.row(i)[y]).collect())
}

/// Argmax decoding from `<s>` until `</s>` or `max_len` tokens. The returned
/// tokens exclude both markers.
pub fn greedy_decode(
    store: &ParamStore,
    cfg: &DecoderConfig,
    enc: &Tensor,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut tokens = vec![BOS];
    while tokens.len() <= max_len {
        let mut s = Session::new(store);
        let e = s.g.constant(enc.clone());
        let logits = decoder_logits(&mut s, cfg, e, &tokens)?;
        let l = s.g.value(logits);
        let last = l.row(l.rows() - 1);
        let next = (0..last.len())
            .max_by(|&a, &b| last[a].total_cmp(&last[b]).then(b.cmp(&a)))
            .expect("non-empty vocabulary");
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    Ok(tokens[1..].to_vec())
}
