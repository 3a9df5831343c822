//! Frame-level fusion of audio and visual streams.
//!
//! `concat` maps `[v; a]` to the model width with one linear layer. `glu`
//! gates the audio stream by a sigmoid of the joint features,
//!
//! ```text
//! m = [v; a] U + a_bias
//! h = (a W + b) ⊙ σ(m V + c)
//! ```
//!
//! and hands `[h; v]` through a linear layer to the encoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::linear;
use crate::numerics::{ParamPlan, ParamStore, Session, Tensor, Var};
use crate::sequence::{FeatureKind, FeatureSequence};

pub const PREFIX: &str = "fusion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Glu,
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Concat => "concat",
            FusionMode::Glu => "glu",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "glu" => Ok(FusionMode::Glu),
            _ => Err(Error::Config(format!(
                "unknown fusion mode {s:?}, expected concat or glu"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Probability of zeroing the audio stream of a training utterance.
    pub p_audio: f64,
    /// Probability of zeroing the visual stream of a training utterance.
    pub p_visual: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Glu,
            p_audio: 0.0,
            p_visual: 0.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        check_probabilities(self.p_audio, self.p_visual)
    }
}

fn check_probabilities(p_audio: f64, p_visual: f64) -> Result<()> {
    for (name, p) in [("p_audio", p_audio), ("p_visual", p_visual)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("{name} = {p} is not a probability")));
        }
    }
    Ok(())
}

/// Parameters of the gate: `U: [2D, D]`, `W, V: [D, D]`, biases `a, b, c: [D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedFusionParams {
    pub u: Tensor,
    pub w: Tensor,
    pub v: Tensor,
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
}

impl GatedFusionParams {
    pub fn dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let ok = self.u.dims() == [2 * d, d]
            && self.w.dims() == [d, d]
            && self.v.dims() == [d, d]
            && [&self.a, &self.b, &self.c].iter().all(|t| t.dims() == [d]);
        if !ok {
            return Err(shape_err!("gated fusion parameters are inconsistent with D = {d}"));
        }
        Ok(())
    }

    pub fn random<R: Rng + ?Sized>(d: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            u: Tensor::uniform([2 * d, d], bound, rng),
            w: Tensor::uniform([d, d], bound, rng),
            v: Tensor::uniform([d, d], bound, rng),
            a: Tensor::uniform([d], bound, rng),
            b: Tensor::uniform([d], bound, rng),
            c: Tensor::uniform([d], bound, rng),
        }
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| store.get(&format!("{PREFIX}.gate.{n}")).cloned();
        let p = Self {
            u: get("U")?,
            w: get("W")?,
            v: get("V")?,
            a: get("a")?,
            b: get("b")?,
            c: get("c")?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn into_store(self) -> ParamStore {
        let mut store = ParamStore::new();
        for (n, t) in [
            ("U", self.u),
            ("W", self.w),
            ("V", self.v),
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
        ] {
            store.insert(format!("{PREFIX}.gate.{n}"), t);
        }
        store
    }
}

/// Fusion parameters for streams already projected to `d`.
pub fn fusion_plan(mode: FusionMode, d: usize) -> ParamPlan {
    let mut plan = ParamPlan::new();
    match mode {
        FusionMode::Concat => plan.linear(&format!("{PREFIX}.concat_proj"), 2 * d, d, true),
        FusionMode::Glu => {
            let g = format!("{PREFIX}.gate");
            plan.uniform(format!("{g}.U"), [2 * d, d], 2 * d);
            plan.uniform(format!("{g}.W"), [d, d], d);
            plan.uniform(format!("{g}.V"), [d, d], d);
            plan.uniform(format!("{g}.a"), [d], 2 * d);
            plan.uniform(format!("{g}.b"), [d], d);
            plan.uniform(format!("{g}.c"), [d], d);
            plan.linear(&format!("{PREFIX}.encoder_input"), 2 * d, d, true);
        }
    }
    plan
}

fn check_aligned(s: &Session, a: Var, v: Var) -> Result<usize> {
    let (ad, vd) = (s.g.dims(a), s.g.dims(v));
    if ad.len() != 2 || vd.len() != 2 {
        return Err(shape_err!("fusion expects [T, D] streams, got {ad:?} and {vd:?}"));
    }
    if ad[0] != vd[0] {
        return Err(Error::Alignment {
            audio: ad[0],
            video: vd[0],
        });
    }
    if ad[1] != vd[1] {
        return Err(shape_err!(
            "audio width {} differs from visual width {}",
            ad[1],
            vd[1]
        ));
    }
    Ok(ad[1])
}

/// `[v; a]` mapped to the model width by `fusion.concat_proj`.
pub fn concat_fuse_graph(s: &mut Session, a: Var, v: Var) -> Result<Var> {
    check_aligned(s, a, v)?;
    let cat = s.g.concat_cols(&[v, a])?;
    linear(s, &format!("{PREFIX}.concat_proj"), cat)
}

/// The gated audio stream `h`.
pub fn gated_fuse_graph(s: &mut Session, a: Var, v: Var) -> Result<Var> {
    let d = check_aligned(s, a, v)?;
    let g = format!("{PREFIX}.gate");
    let u = s.param(&format!("{g}.U"))?;
    if s.g.dims(u) != [2 * d, d] {
        return Err(shape_err!(
            "gate U has dims {:?}, streams have width {d}",
            s.g.dims(u)
        ));
    }
    let w = s.param(&format!("{g}.W"))?;
    let vm = s.param(&format!("{g}.V"))?;
    let ab = s.param(&format!("{g}.a"))?;
    let bb = s.param(&format!("{g}.b"))?;
    let cb = s.param(&format!("{g}.c"))?;
    let cat = s.g.concat_cols(&[v, a])?;
    let m = s.g.matmul(cat, u)?;
    let m = s.g.add_row(m, ab)?;
    let aw = s.g.matmul(a, w)?;
    let lin = s.g.add_row(aw, bb)?;
    let mv = s.g.matmul(m, vm)?;
    let gate_in = s.g.add_row(mv, cb)?;
    let gate = s.g.sigmoid(gate_in);
    s.g.mul(lin, gate)
}

/// `[h; v]` mapped to the model width by `fusion.encoder_input`.
pub fn encoder_input_graph(s: &mut Session, h: Var, v: Var) -> Result<Var> {
    check_aligned(s, h, v)?;
    let cat = s.g.concat_cols(&[h, v])?;
    linear(s, &format!("{PREFIX}.encoder_input"), cat)
}

/// Fused encoder input for either mode.
pub fn fuse_graph(s: &mut Session, mode: FusionMode, a: Var, v: Var) -> Result<Var> {
    match mode {
        FusionMode::Concat => concat_fuse_graph(s, a, v),
        FusionMode::Glu => {
            let h = gated_fuse_graph(s, a, v)?;
            encoder_input_graph(s, h, v)
        }
    }
}

fn check_sequences(a: &FeatureSequence, v: &FeatureSequence) -> Result<()> {
    if a.len() != v.len() {
        return Err(Error::Alignment {
            audio: a.len(),
            video: v.len(),
        });
    }
    if a.frame_rate_hz() != v.frame_rate_hz() {
        return Err(shape_err!(
            "audio at {} Hz cannot be fused with video at {} Hz",
            a.frame_rate_hz(),
            v.frame_rate_hz()
        ));
    }
    Ok(())
}

fn eval_binary(
    store: &ParamStore,
    a: &FeatureSequence,
    v: &FeatureSequence,
    f: impl FnOnce(&mut Session, Var, Var) -> Result<Var>,
) -> Result<FeatureSequence> {
    check_sequences(a, v)?;
    let mut s = Session::new(store);
    let av = s.g.constant(a.frames().clone());
    let vv = s.g.constant(v.frames().clone());
    let y = f(&mut s, av, vv)?;
    FeatureSequence::new(s.g.value(y).clone(), a.frame_rate_hz(), FeatureKind::Fused)
}

/// Per-frame `[v; a]` before any projection.
pub fn concat_features(a: &FeatureSequence, v: &FeatureSequence) -> Result<FeatureSequence> {
    eval_binary(&ParamStore::new(), a, v, |s, a, v| s.g.concat_cols(&[v, a]))
}

/// Concatenation fusion with the projection stored at `fusion.concat_proj`.
pub fn concat_fuse(
    a: &FeatureSequence,
    v: &FeatureSequence,
    store: &ParamStore,
) -> Result<FeatureSequence> {
    eval_binary(store, a, v, concat_fuse_graph)
}

pub fn gated_fuse(
    a: &FeatureSequence,
    v: &FeatureSequence,
    p: &GatedFusionParams,
) -> Result<FeatureSequence> {
    p.validate()?;
    let store = p.clone().into_store();
    eval_binary(&store, a, v, gated_fuse_graph)
}

/// Projection of `[h; v]` stored at `fusion.encoder_input`.
pub fn encoder_input(
    h: &FeatureSequence,
    v: &FeatureSequence,
    store: &ParamStore,
) -> Result<FeatureSequence> {
    eval_binary(store, h, v, encoder_input_graph)
}

/// Which stream, if any, modality dropout removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dropped {
    Neither,
    Audio,
    Visual,
}

/// Draws which modality to drop for one utterance. When both are drawn, one
/// of them is kept with equal probability, so both are never dropped.
pub fn draw_modality_dropout<R: Rng + ?Sized>(
    p_audio: f64,
    p_visual: f64,
    rng: &mut R,
) -> Result<Dropped> {
    check_probabilities(p_audio, p_visual)?;
    let drop_a = rng.gen::<f64>() < p_audio;
    let drop_v = rng.gen::<f64>() < p_visual;
    Ok(match (drop_a, drop_v) {
        (false, false) => Dropped::Neither,
        (true, false) => Dropped::Audio,
        (false, true) => Dropped::Visual,
        (true, true) => {
            if rng.gen::<bool>() {
                Dropped::Audio
            } else {
                Dropped::Visual
            }
        }
    })
}

/// Zeroes at most one of the two streams for the whole utterance.
pub fn modality_dropout<R: Rng + ?Sized>(
    a: &FeatureSequence,
    v: &FeatureSequence,
    p_audio: f64,
    p_visual: f64,
    rng: &mut R,
) -> Result<(FeatureSequence, FeatureSequence, Dropped)> {
    let dropped = draw_modality_dropout(p_audio, p_visual, rng)?;
    let zero = |x: &FeatureSequence| {
        FeatureSequence::new(
            Tensor::zeros(x.frames().dims().to_vec()),
            x.frame_rate_hz(),
            x.kind(),
        )
    };
    Ok(match dropped {
        Dropped::Neither => (a.clone(), v.clone(), dropped),
        Dropped::Audio => (zero(a)?, v.clone(), dropped),
        Dropped::Visual => (a.clone(), zero(v)?, dropped),
    })
}
