//! Transformer and conformer sequence encoders.
//!
//! Both block types are post-norm. A conformer block computes
//!
//! ```text
//! x1 = LN(x  + ½ FFN(x))
//! x2 = LN(x1 + MHSA(x1))
//! x3 = LN(x2 + Conv(x2))
//! y  = LN(x3 + ½ FFN(x3))
//! ```
//!
//! with relative sinusoidal position terms inside MHSA. A transformer block is
//! `LN(x + MHSA(x))` then `LN(· + FFN(·))`; its stack injects positions once at
//! entry through a depthwise convolution added residually.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::{layer_norm_layer, linear};
use crate::numerics::{ParamPlan, ParamStore, Session, Tensor, Var};
use crate::sequence::{FeatureKind, FeatureSequence};

pub const PREFIX: &str = "encoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Conformer,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Transformer => "transformer",
            EncoderKind::Conformer => "conformer",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(EncoderKind::Transformer),
            "conformer" => Ok(EncoderKind::Conformer),
            _ => Err(Error::Config(format!(
                "unknown encoder backbone {s:?}, expected transformer or conformer"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backbone: EncoderKind,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Depthwise kernel of the conformer convolution module.
    pub conv_kernel: usize,
    /// Depthwise kernel of the transformer's positional convolution.
    pub pos_conv_kernel: usize,
    pub layer_drop: f64,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk(EncoderKind::Conformer)
    }
}

impl EncoderConfig {
    pub fn desk(backbone: EncoderKind) -> Self {
        Self {
            backbone,
            blocks: 2,
            dim: 64,
            heads: 4,
            ffn_expansion: 4,
            conv_kernel: 15,
            pos_conv_kernel: 15,
            layer_drop: 0.0,
            dropout: 0.0,
            attention_dropout: 0.0,
        }
    }

    pub fn paper(backbone: EncoderKind) -> Self {
        Self {
            backbone,
            blocks: 12,
            dim: 768,
            heads: 12,
            ffn_expansion: 4,
            conv_kernel: 31,
            pos_conv_kernel: 127,
            layer_drop: 0.05,
            dropout: 0.1,
            attention_dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if !self.dim.is_multiple_of(2) {
            return bad(format!("model dim {} must be even", self.dim));
        }
        if self.conv_kernel.is_multiple_of(2) || self.pos_conv_kernel.is_multiple_of(2) {
            return bad("convolution kernels must be odd".into());
        }
        if self.ffn_expansion == 0 {
            return bad("ffn_expansion must be positive".into());
        }
        if !(0.0..1.0).contains(&self.layer_drop) {
            return bad(format!("layer_drop {} must lie in [0, 1)", self.layer_drop));
        }
        for (n, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{n} {p} must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

// ---- parameter plans ------------------------------------------------------

fn attention_plan(plan: &mut ParamPlan, p: &str, d: usize, relative: bool) {
    for n in ["q", "k", "v", "out"] {
        plan.linear(&format!("{p}.{n}"), d, d, true);
    }
    if relative {
        plan.linear(&format!("{p}.pos"), d, d, false);
        plan.uniform(format!("{p}.pos_bias_u"), [d], d);
        plan.uniform(format!("{p}.pos_bias_v"), [d], d);
    }
}

fn ffn_plan(plan: &mut ParamPlan, p: &str, d: usize, expansion: usize) {
    plan.linear(&format!("{p}.fc1"), d, expansion * d, true);
    plan.linear(&format!("{p}.fc2"), expansion * d, d, true);
}

fn conv_module_plan(plan: &mut ParamPlan, p: &str, d: usize, k: usize) {
    plan.linear(&format!("{p}.pw1"), d, 2 * d, true);
    plan.uniform(format!("{p}.dw.weight"), [k, d], k);
    plan.uniform(format!("{p}.dw.bias"), [d], k);
    plan.norm(&format!("{p}.norm"), d);
    plan.linear(&format!("{p}.pw2"), d, d, true);
}

pub fn conformer_block_plan(p: &str, cfg: &EncoderConfig) -> ParamPlan {
    let d = cfg.dim;
    let mut plan = ParamPlan::new();
    ffn_plan(&mut plan, &format!("{p}.ffn1"), d, cfg.ffn_expansion);
    plan.norm(&format!("{p}.norm_ffn1"), d);
    attention_plan(&mut plan, &format!("{p}.attn"), d, true);
    plan.norm(&format!("{p}.norm_attn"), d);
    conv_module_plan(&mut plan, &format!("{p}.conv"), d, cfg.conv_kernel);
    plan.norm(&format!("{p}.norm_conv"), d);
    ffn_plan(&mut plan, &format!("{p}.ffn2"), d, cfg.ffn_expansion);
    plan.norm(&format!("{p}.norm_ffn2"), d);
    plan
}

pub fn transformer_block_plan(p: &str, cfg: &EncoderConfig) -> ParamPlan {
    let d = cfg.dim;
    let mut plan = ParamPlan::new();
    attention_plan(&mut plan, &format!("{p}.attn"), d, false);
    plan.norm(&format!("{p}.norm_attn"), d);
    ffn_plan(&mut plan, &format!("{p}.ffn"), d, cfg.ffn_expansion);
    plan.norm(&format!("{p}.norm_ffn"), d);
    plan
}

pub fn encoder_plan(cfg: &EncoderConfig) -> Result<ParamPlan> {
    cfg.validate()?;
    let mut plan = ParamPlan::new();
    if cfg.backbone == EncoderKind::Transformer {
        plan.uniform(
            format!("{PREFIX}.pos_conv.weight"),
            [cfg.pos_conv_kernel, cfg.dim],
            cfg.pos_conv_kernel,
        );
        plan.uniform(format!("{PREFIX}.pos_conv.bias"), [cfg.dim], cfg.pos_conv_kernel);
        plan.norm(&format!("{PREFIX}.pos_norm"), cfg.dim);
    }
    for i in 0..cfg.blocks {
        let p = format!("{PREFIX}.layers.{i}");
        plan.extend(match cfg.backbone {
            EncoderKind::Conformer => conformer_block_plan(&p, cfg),
            EncoderKind::Transformer => transformer_block_plan(&p, cfg),
        });
    }
    Ok(plan)
}

// ---- forward --------------------------------------------------------------

/// Inverted dropout: zeroes each entry with probability `p` and rescales the rest.
pub fn dropout(s: &mut Session, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let dims = s.g.dims(x).to_vec();
    let n: usize = dims.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = s.g.constant(Tensor::new(dims, mask)?);
    s.g.mul(x, m)
}

/// Sinusoidal embeddings of relative offsets `T−1, T−2, …, −(T−1)`, one per
/// row of a `[2T−1, D]` matrix: `sin(r ω_m)` at column `2m` and `cos(r ω_m)`
/// at column `2m+1`, with `ω_m = 10000^(−2m/D)`.
pub fn relative_position_table(t: usize, d: usize) -> Tensor {
    let rows = 2 * t - 1;
    let mut out = vec![0.0; rows * d];
    for c in 0..rows {
        let r = t as f64 - 1.0 - c as f64;
        for m in 0..d / 2 {
            let w = 10000f64.powf(-2.0 * m as f64 / d as f64);
            out[c * d + 2 * m] = (r * w).sin();
            out[c * d + 2 * m + 1] = (r * w).cos();
        }
    }
    Tensor::new([rows, d], out).expect("positive extents")
}

/// Scaled pre-softmax attention logits `[T, T]`, one per head.
///
/// Without relative terms these are `q_i·k_j / √d_h`. With them they are
/// `((q_i + u)·k_j + (q_i + v)·p_{i−j}) / √d_h`, where `p_r` is the projected
/// sinusoid of offset `r`.
pub fn attention_logits(
    s: &mut Session,
    p: &str,
    x: Var,
    heads: usize,
    relative: bool,
) -> Result<(Vec<Var>, Var)> {
    let dims = s.g.dims(x).to_vec();
    let [t, d] = dims[..] else {
        return Err(shape_err!("attention expects [T, D], got {dims:?}"));
    };
    if d % heads != 0 {
        return Err(shape_err!("width {d} is not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(s, &format!("{p}.q"), x)?;
    let k = linear(s, &format!("{p}.k"), x)?;
    let v = linear(s, &format!("{p}.v"), x)?;
    let rel = if relative {
        let table = s.g.constant(relative_position_table(t, d));
        let pos = linear(s, &format!("{p}.pos"), table)?;
        let u = s.param(&format!("{p}.pos_bias_u"))?;
        let w = s.param(&format!("{p}.pos_bias_v"))?;
        Some((pos, u, w))
    } else {
        None
    };
    let mut logits = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.g.slice_cols(q, h * dh, dh)?;
        let kh = s.g.slice_cols(k, h * dh, dh)?;
        let l = match rel {
            None => s.g.matmul_nt(qh, kh)?,
            Some((pos, u, w)) => {
                let uh = s.g.reshape(u, [1, d])?;
                let uh = s.g.slice_cols(uh, h * dh, dh)?;
                let uh = s.g.reshape(uh, [dh])?;
                let wh = s.g.reshape(w, [1, d])?;
                let wh = s.g.slice_cols(wh, h * dh, dh)?;
                let wh = s.g.reshape(wh, [dh])?;
                let qu = s.g.add_row(qh, uh)?;
                let qv = s.g.add_row(qh, wh)?;
                let content = s.g.matmul_nt(qu, kh)?;
                let ph = s.g.slice_cols(pos, h * dh, dh)?;
                let by_offset = s.g.matmul_nt(qv, ph)?;
                let position = s.g.rel_shift(by_offset)?;
                s.g.add(content, position)?
            }
        };
        logits.push(s.g.scale(l, scale));
    }
    Ok((logits, v))
}

/// Multi-head self-attention with output projection.
pub fn self_attention(
    s: &mut Session,
    p: &str,
    x: Var,
    cfg: &EncoderConfig,
    relative: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let (logits, v) = attention_logits(s, p, x, cfg.heads, relative)?;
    let dh = cfg.head_dim();
    let mut outs = Vec::with_capacity(cfg.heads);
    for (h, l) in logits.into_iter().enumerate() {
        let a = s.g.softmax_rows(l);
        let a = dropout(s, a, cfg.attention_dropout, rng.as_deref_mut())?;
        let vh = s.g.slice_cols(v, h * dh, dh)?;
        outs.push(s.g.matmul(a, vh)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        s.g.concat_cols(&outs)?
    };
    linear(s, &format!("{p}.out"), cat)
}

pub fn feed_forward(s: &mut Session, p: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{p}.fc1"), x)?;
    let h = s.g.swish(h);
    linear(s, &format!("{p}.fc2"), h)
}

/// Pointwise D→2D, GLU, depthwise, layer norm, Swish, pointwise D→D.
pub fn conv_module(s: &mut Session, p: &str, x: Var) -> Result<Var> {
    let h = linear(s, &format!("{p}.pw1"), x)?;
    let h = s.g.glu(h)?;
    let k = s.param(&format!("{p}.dw.weight"))?;
    let h = s.g.depthwise_conv1d(h, k)?;
    let b = s.param(&format!("{p}.dw.bias"))?;
    let h = s.g.add_row(h, b)?;
    let h = layer_norm_layer(s, &format!("{p}.norm"), h)?;
    let h = s.g.swish(h);
    linear(s, &format!("{p}.pw2"), h)
}

fn residual(
    s: &mut Session,
    x: Var,
    branch: Var,
    weight: f64,
    p_drop: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let b = dropout(s, branch, p_drop, rng)?;
    let b = if weight == 1.0 { b } else { s.g.scale(b, weight) };
    s.g.add(x, b)
}

pub fn conformer_block_graph(
    s: &mut Session,
    p: &str,
    x: Var,
    cfg: &EncoderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let f = feed_forward(s, &format!("{p}.ffn1"), x)?;
    let r = residual(s, x, f, 0.5, cfg.dropout, rng.as_deref_mut())?;
    let x1 = layer_norm_layer(s, &format!("{p}.norm_ffn1"), r)?;
    let a = self_attention(s, &format!("{p}.attn"), x1, cfg, true, rng.as_deref_mut())?;
    let r = residual(s, x1, a, 1.0, cfg.dropout, rng.as_deref_mut())?;
    let x2 = layer_norm_layer(s, &format!("{p}.norm_attn"), r)?;
    let c = conv_module(s, &format!("{p}.conv"), x2)?;
    let r = residual(s, x2, c, 1.0, cfg.dropout, rng.as_deref_mut())?;
    let x3 = layer_norm_layer(s, &format!("{p}.norm_conv"), r)?;
    let f = feed_forward(s, &format!("{p}.ffn2"), x3)?;
    let r = residual(s, x3, f, 0.5, cfg.dropout, rng)?;
    layer_norm_layer(s, &format!("{p}.norm_ffn2"), r)
}

pub fn transformer_block_graph(
    s: &mut Session,
    p: &str,
    x: Var,
    cfg: &EncoderConfig,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let a = self_attention(s, &format!("{p}.attn"), x, cfg, false, rng.as_deref_mut())?;
    let r = residual(s, x, a, 1.0, cfg.dropout, rng.as_deref_mut())?;
    let x1 = layer_norm_layer(s, &format!("{p}.norm_attn"), r)?;
    let f = feed_forward(s, &format!("{p}.ffn"), x1)?;
    let r = residual(s, x1, f, 1.0, cfg.dropout, rng)?;
    layer_norm_layer(s, &format!("{p}.norm_ffn"), r)
}

/// `LN(x + Swish(depthwise(x) + bias))`, the transformer stack's position injection.
pub fn positional_conv(s: &mut Session, x: Var) -> Result<Var> {
    let k = s.param(&format!("{PREFIX}.pos_conv.weight"))?;
    let b = s.param(&format!("{PREFIX}.pos_conv.bias"))?;
    let c = s.g.depthwise_conv1d(x, k)?;
    let c = s.g.add_row(c, b)?;
    let c = s.g.swish(c);
    let r = s.g.add(x, c)?;
    layer_norm_layer(s, &format!("{PREFIX}.pos_norm"), r)
}

/// Result of running the block stack.
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub output: Var,
    /// Output after each block (equal to its input when the block was skipped).
    pub layers: Vec<Var>,
    /// Indices of blocks skipped by layer drop.
    pub skipped: Vec<usize>,
}

/// Runs every block in order. With an rng (training), each block is skipped
/// with probability `layer_drop` and dropout is active; without one nothing
/// is random.
pub fn encode_stack_graph(
    s: &mut Session,
    cfg: &EncoderConfig,
    x: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<StackOutput> {
    let d = s.g.dims(x).to_vec();
    if d.len() != 2 || d[1] != cfg.dim {
        return Err(shape_err!("encoder expects [T, {}], got {d:?}", cfg.dim));
    }
    let mut y = match cfg.backbone {
        EncoderKind::Transformer => positional_conv(s, x)?,
        EncoderKind::Conformer => x,
    };
    let mut layers = Vec::with_capacity(cfg.blocks);
    let mut skipped = Vec::new();
    for i in 0..cfg.blocks {
        let skip = match rng.as_deref_mut() {
            Some(r) if cfg.layer_drop > 0.0 => r.gen::<f64>() < cfg.layer_drop,
            _ => false,
        };
        if skip {
            skipped.push(i);
        } else {
            let p = format!("{PREFIX}.layers.{i}");
            y = match cfg.backbone {
                EncoderKind::Conformer => conformer_block_graph(s, &p, y, cfg, rng.as_deref_mut())?,
                EncoderKind::Transformer => {
                    transformer_block_graph(s, &p, y, cfg, rng.as_deref_mut())?
                }
            };
        }
        layers.push(y);
    }
    Ok(StackOutput {
        output: y,
        layers,
        skipped,
    })
}

// ---- eager wrappers ---------------------------------------------------------

/// Applies `f` to each `[T, D]` sequence of a `[T, D]` or `[B, T, D]` tensor.
fn per_sequence(
    store: &ParamStore,
    x: &Tensor,
    mut f: impl FnMut(&mut Session, Var) -> Result<Var>,
) -> Result<Tensor> {
    let (b, t, d) = match *x.dims() {
        [t, d] => (1, t, d),
        [b, t, d] => (b, t, d),
        ref other => return Err(shape_err!("expected [T, D] or [B, T, D], got {other:?}")),
    };
    let mut out = Vec::with_capacity(x.len());
    for i in 0..b {
        let seq = Tensor::new([t, d], x.data()[i * t * d..(i + 1) * t * d].to_vec())?;
        let mut s = Session::new(store);
        let xv = s.g.constant(seq);
        let y = f(&mut s, xv)?;
        out.extend_from_slice(s.g.value(y).data());
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// One conformer block with parameters under `prefix`, over `[T, D]` or `[B, T, D]`.
pub fn conformer_block(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    per_sequence(store, x, |s, v| conformer_block_graph(s, prefix, v, cfg, None))
}

pub fn transformer_block(
    x: &Tensor,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<Tensor> {
    per_sequence(store, x, |s, v| transformer_block_graph(s, prefix, v, cfg, None))
}

/// Relative-position self-attention of the block under `prefix`.
pub fn relative_attention(
    x: &FeatureSequence,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<FeatureSequence> {
    let y = per_sequence(store, x.frames(), |s, v| {
        self_attention(s, prefix, v, cfg, true, None)
    })?;
    FeatureSequence::new(y, x.frame_rate_hz(), x.kind())
}

/// The full stack. Passing an rng selects training behaviour.
pub fn encode_stack(
    x: &FeatureSequence,
    store: &ParamStore,
    cfg: &EncoderConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(FeatureSequence, Vec<usize>)> {
    let mut s = Session::new(store);
    let xv = s.g.constant(x.frames().clone());
    let out = encode_stack_graph(&mut s, cfg, xv, rng)?;
    let y = FeatureSequence::new(
        s.g.value(out.output).clone(),
        x.frame_rate_hz(),
        FeatureKind::Encoded,
    )?;
    Ok((y, out.skipped))
}
