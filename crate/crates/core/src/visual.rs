//! Per-frame embeddings of grayscale mouth-region video.
//!
//! Both backbones share one 3-D convolutional stem (temporal kernel, spatial
//! stride 2) and then apply a per-frame 2-D trunk: basic residual blocks for
//! `resnet`, inverted-residual blocks for `mobilenet`. A global spatial mean
//! and a linear head map each frame to `embed_dim`. Normalisation is group
//! norm throughout so a single utterance is a well-defined batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::linear;
use crate::numerics::{ConvGeom, ParamPlan, ParamStore, Session, Tensor, Var};
use crate::sequence::{FeatureKind, FeatureSequence};

pub const VIDEO_FPS: f64 = 25.0;
const PREFIX: &str = "visual";
const GN_EPS: f64 = 1e-5;
const STEM_CHANNELS: usize = 64;
const STEM_STRIDE: usize = 2;
/// Output channels and first-block stride of the four residual stages.
const RESNET_STAGES: [(usize, usize); 4] = [(64, 1), (128, 2), (256, 2), (512, 1)];
const RESNET_BLOCKS_PER_STAGE: usize = 2;
/// (expansion, output channels, repeats, first-block stride) per group.
const MOBILENET_GROUPS: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 1),
    (6, 96, 3, 1),
    (6, 160, 3, 1),
    (6, 320, 1, 1),
];
const MOBILENET_LAST: usize = 1280;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Resnet,
    Mobilenet,
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backbone::Resnet => "resnet",
            Backbone::Mobilenet => "mobilenet",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(Backbone::Resnet),
            "mobilenet" => Ok(Backbone::Mobilenet),
            _ => Err(Error::Config(format!(
                "unknown visual backbone {s:?}, expected resnet or mobilenet"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    pub backbone: Backbone,
    pub frame_size: usize,
    /// Stem kernel extents `(t, h, w)`.
    pub stem_3d_kernel: [usize; 3],
    pub embed_dim: usize,
    pub width_multiplier: f64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self::desk(Backbone::Resnet)
    }
}

impl VisualConfig {
    pub fn desk(backbone: Backbone) -> Self {
        Self {
            backbone,
            frame_size: 32,
            stem_3d_kernel: [5, 7, 7],
            embed_dim: 64,
            width_multiplier: 0.25,
        }
    }

    /// Full-width backbone on 88x88 crops, for parameter counting.
    pub fn paper(backbone: Backbone, embed_dim: usize) -> Self {
        Self {
            backbone,
            frame_size: 88,
            stem_3d_kernel: [5, 7, 7],
            embed_dim,
            width_multiplier: 1.0,
        }
    }

    pub fn total_stride(&self) -> usize {
        let trunk: usize = match self.backbone {
            Backbone::Resnet => RESNET_STAGES.iter().map(|s| s.1).product(),
            Backbone::Mobilenet => MOBILENET_GROUPS.iter().map(|g| g.3).product(),
        };
        STEM_STRIDE * trunk
    }

    pub fn validate(&self) -> Result<()> {
        let stride = self.total_stride();
        if self.frame_size == 0 || !self.frame_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "frame size {} is not divisible by the total spatial stride {stride}",
                self.frame_size
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("visual embed_dim must be positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.stem_3d_kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!(
                "stem kernel {:?} must have odd extents",
                self.stem_3d_kernel
            )));
        }
        Ok(())
    }

    /// Channel count scaled by the width multiplier, rounded to a multiple of 4.
    pub fn width(&self, c: usize) -> usize {
        (((c as f64 * self.width_multiplier) / 4.0).round() as usize * 4).max(4)
    }

    fn stem_geom(&self) -> ConvGeom {
        let [kt, kh, kw] = self.stem_3d_kernel;
        ConvGeom {
            kt,
            kh,
            kw,
            stride: STEM_STRIDE,
        }
    }

    /// Channels entering the head.
    pub fn trunk_out_channels(&self) -> usize {
        match self.backbone {
            Backbone::Resnet => self.width(RESNET_STAGES[3].0),
            Backbone::Mobilenet => self.width(MOBILENET_LAST),
        }
    }
}

fn norm_groups(c: usize) -> usize {
    if c.is_multiple_of(8) {
        8
    } else {
        4
    }
}

fn conv_plan(plan: &mut ParamPlan, name: &str, taps: usize, cin: usize, cout: usize) {
    plan.uniform(format!("{name}.weight"), [taps * cin, cout], taps * cin);
}

fn basic_block_plan(plan: &mut ParamPlan, p: &str, cin: usize, cout: usize, stride: usize) {
    conv_plan(plan, &format!("{p}.conv1"), 9, cin, cout);
    plan.norm(&format!("{p}.norm1"), cout);
    conv_plan(plan, &format!("{p}.conv2"), 9, cout, cout);
    plan.norm(&format!("{p}.norm2"), cout);
    if stride != 1 || cin != cout {
        conv_plan(plan, &format!("{p}.down"), 1, cin, cout);
        plan.norm(&format!("{p}.down_norm"), cout);
    }
}

fn inverted_residual_plan(plan: &mut ParamPlan, p: &str, cin: usize, cout: usize, expand: usize) {
    let hidden = cin * expand;
    if expand != 1 {
        conv_plan(plan, &format!("{p}.expand"), 1, cin, hidden);
        plan.norm(&format!("{p}.expand_norm"), hidden);
    }
    plan.uniform(format!("{p}.dw.weight"), [9, hidden], 9);
    plan.norm(&format!("{p}.dw_norm"), hidden);
    conv_plan(plan, &format!("{p}.project"), 1, hidden, cout);
    plan.norm(&format!("{p}.project_norm"), cout);
}

/// Shapes of every backbone parameter, in initialisation order.
pub fn backbone_plan(cfg: &VisualConfig) -> Result<ParamPlan> {
    cfg.validate()?;
    let mut plan = ParamPlan::new();
    let [kt, kh, kw] = cfg.stem_3d_kernel;
    let stem = cfg.width(STEM_CHANNELS);
    conv_plan(&mut plan, &format!("{PREFIX}.stem.conv"), kt * kh * kw, 1, stem);
    plan.norm(&format!("{PREFIX}.stem.norm"), stem);
    let mut cin = stem;
    match cfg.backbone {
        Backbone::Resnet => {
            for (si, &(c, stride)) in RESNET_STAGES.iter().enumerate() {
                let cout = cfg.width(c);
                for bi in 0..RESNET_BLOCKS_PER_STAGE {
                    let s = if bi == 0 { stride } else { 1 };
                    let p = format!("{PREFIX}.trunk.s{si}.b{bi}");
                    basic_block_plan(&mut plan, &p, cin, cout, s);
                    cin = cout;
                }
            }
        }
        Backbone::Mobilenet => {
            for (gi, &(t, c, n, _)) in MOBILENET_GROUPS.iter().enumerate() {
                let cout = cfg.width(c);
                for bi in 0..n {
                    let p = format!("{PREFIX}.trunk.g{gi}.b{bi}");
                    inverted_residual_plan(&mut plan, &p, cin, cout, t);
                    cin = cout;
                }
            }
            let last = cfg.width(MOBILENET_LAST);
            conv_plan(&mut plan, &format!("{PREFIX}.trunk.last"), 1, cin, last);
            plan.norm(&format!("{PREFIX}.trunk.last_norm"), last);
        }
    }
    plan.linear(
        &format!("{PREFIX}.head"),
        cfg.trunk_out_channels(),
        cfg.embed_dim,
        true,
    );
    Ok(plan)
}

/// A visual backbone and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneModel {
    pub config: VisualConfig,
    pub params: ParamStore,
}

pub fn build_backbone(cfg: &VisualConfig, seed: u64) -> Result<BackboneModel> {
    let plan = backbone_plan(cfg)?;
    let params = plan.build(&mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(BackboneModel {
        config: cfg.clone(),
        params,
    })
}

/// Parameter counts of a built model: the total and per-submodule
/// (`stem`, `trunk`, `head`).
pub fn count_params(model: &BackboneModel) -> (usize, BTreeMap<String, usize>) {
    let parts = model
        .params
        .count_by_prefix(2)
        .into_iter()
        .map(|(k, v)| (k.trim_start_matches("visual.").to_string(), v))
        .collect();
    (model.params.num_params(), parts)
}

fn group_norm(s: &mut Session, name: &str, x: Var) -> Result<Var> {
    let gamma = s.param(&format!("{name}.gamma"))?;
    let beta = s.param(&format!("{name}.beta"))?;
    let c = s.g.dims(x).last().copied().unwrap_or(0);
    s.g.group_norm(x, gamma, beta, norm_groups(c), GN_EPS)
}

fn conv(s: &mut Session, name: &str, x: Var, k: usize, stride: usize) -> Result<Var> {
    let w = s.param(&format!("{name}.weight"))?;
    if k == 1 && stride == 1 {
        // A pointwise convolution is a matmul over flattened positions.
        let d = s.g.dims(x).to_vec();
        let flat = s.g.reshape(x, [d[0] * d[1] * d[2], d[3]])?;
        let y = s.g.matmul(flat, w)?;
        let cout = s.g.dims(y)[1];
        return s.g.reshape(y, [d[0], d[1], d[2], cout]);
    }
    let geom = ConvGeom {
        kt: 1,
        kh: k,
        kw: k,
        stride,
    };
    s.g.conv3d(x, w, geom)
}

fn basic_block(s: &mut Session, p: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(s, &format!("{p}.conv1"), x, 3, stride)?;
    let y = group_norm(s, &format!("{p}.norm1"), y)?;
    let y = s.g.relu(y);
    let y = conv(s, &format!("{p}.conv2"), y, 3, 1)?;
    let y = group_norm(s, &format!("{p}.norm2"), y)?;
    let shortcut = if s.store().contains(&format!("{p}.down.weight")) {
        let d = conv(s, &format!("{p}.down"), x, 1, stride)?;
        group_norm(s, &format!("{p}.down_norm"), d)?
    } else {
        x
    };
    let sum = s.g.add(y, shortcut)?;
    Ok(s.g.relu(sum))
}

fn inverted_residual(s: &mut Session, p: &str, x: Var, stride: usize) -> Result<Var> {
    let mut y = x;
    if s.store().contains(&format!("{p}.expand.weight")) {
        y = conv(s, &format!("{p}.expand"), y, 1, 1)?;
        y = group_norm(s, &format!("{p}.expand_norm"), y)?;
        y = s.g.relu(y);
    }
    let w = s.param(&format!("{p}.dw.weight"))?;
    let geom = ConvGeom {
        kt: 1,
        kh: 3,
        kw: 3,
        stride,
    };
    y = s.g.depthwise_conv2d(y, w, geom)?;
    y = group_norm(s, &format!("{p}.dw_norm"), y)?;
    y = s.g.relu(y);
    y = conv(s, &format!("{p}.project"), y, 1, 1)?;
    y = group_norm(s, &format!("{p}.project_norm"), y)?;
    if stride == 1 && s.g.dims(x) == s.g.dims(y) {
        y = s.g.add(x, y)?;
    }
    Ok(y)
}

/// Embeds frames `x: [T, S, S, 1]` (channels last) to `[T, embed_dim]`.
pub fn backbone_forward(s: &mut Session, cfg: &VisualConfig, x: Var) -> Result<Var> {
    let d = s.g.dims(x).to_vec();
    if d.len() != 4 || d[1] != cfg.frame_size || d[2] != cfg.frame_size || d[3] != 1 {
        return Err(shape_err!(
            "expected frames [T, {0}, {0}, 1], got {d:?}",
            cfg.frame_size
        ));
    }
    let w = s.param(&format!("{PREFIX}.stem.conv.weight"))?;
    let mut y = s.g.conv3d(x, w, cfg.stem_geom())?;
    y = group_norm(s, &format!("{PREFIX}.stem.norm"), y)?;
    y = s.g.relu(y);
    match cfg.backbone {
        Backbone::Resnet => {
            for (si, &(_, stride)) in RESNET_STAGES.iter().enumerate() {
                for bi in 0..RESNET_BLOCKS_PER_STAGE {
                    let st = if bi == 0 { stride } else { 1 };
                    y = basic_block(s, &format!("{PREFIX}.trunk.s{si}.b{bi}"), y, st)?;
                }
            }
        }
        Backbone::Mobilenet => {
            for (gi, &(_, _, n, stride)) in MOBILENET_GROUPS.iter().enumerate() {
                for bi in 0..n {
                    let st = if bi == 0 { stride } else { 1 };
                    y = inverted_residual(s, &format!("{PREFIX}.trunk.g{gi}.b{bi}"), y, st)?;
                }
            }
            y = conv(s, &format!("{PREFIX}.trunk.last"), y, 1, 1)?;
            y = group_norm(s, &format!("{PREFIX}.trunk.last_norm"), y)?;
            y = s.g.relu(y);
        }
    }
    let pooled = s.g.spatial_mean(y)?;
    linear(s, &format!("{PREFIX}.head"), pooled)
}

/// Converts a `[T, 1, S, S]` video tensor into the channels-last layout the
/// backbone consumes.
pub fn video_to_channels_last(frames: &Tensor) -> Result<Tensor> {
    match frames.dims() {
        &[t, 1, h, w] => frames.clone().reshape([t, h, w, 1]),
        d => Err(shape_err!("video must be [T, 1, S, S], got {d:?}")),
    }
}

/// One embedding per frame of `frames: [T, 1, S, S]`.
pub fn encode_video(model: &BackboneModel, frames: &Tensor) -> Result<FeatureSequence> {
    let x = video_to_channels_last(frames)?;
    let mut s = Session::new(&model.params);
    let xv = s.g.constant(x);
    let y = backbone_forward(&mut s, &model.config, xv)?;
    FeatureSequence::new(s.g.value(y).clone(), VIDEO_FPS, FeatureKind::Visual)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(backbone: Backbone) -> VisualConfig {
        VisualConfig {
            frame_size: 16,
            width_multiplier: 0.0625,
            embed_dim: 8,
            ..VisualConfig::desk(backbone)
        }
    }

    /// Hand count of the full-width trunks, written out layer by layer.
    fn resnet_trunk_oracle() -> usize {
        let gn = |c: usize| 2 * c;
        let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout;
        let mut n = 0;
        let mut cin = 64;
        for (cout, stride) in [(64, 1), (128, 2), (256, 2), (512, 1)] {
            for b in 0..2 {
                n += conv(3, cin, cout) + gn(cout) + conv(3, cout, cout) + gn(cout);
                if b == 0 && (stride != 1 || cin != cout) {
                    n += conv(1, cin, cout) + gn(cout);
                }
                cin = cout;
            }
        }
        n
    }

    fn mobilenet_trunk_oracle() -> usize {
        let mut n = 0;
        let mut cin = 64;
        for (t, c, reps) in [
            (1, 16, 1),
            (6, 24, 2),
            (6, 32, 3),
            (6, 64, 4),
            (6, 96, 3),
            (6, 160, 3),
            (6, 320, 1),
        ] {
            for _ in 0..reps {
                let hid = cin * t;
                if t != 1 {
                    n += cin * hid + 2 * hid;
                }
                n += 9 * hid + 2 * hid + hid * c + 2 * c;
                cin = c;
            }
        }
        n + 320 * 1280 + 2 * 1280
    }

    #[test]
    fn paper_scale_counts_match_layer_oracle() {
        let r = backbone_plan(&VisualConfig::paper(Backbone::Resnet, 768)).unwrap();
        let m = backbone_plan(&VisualConfig::paper(Backbone::Mobilenet, 768)).unwrap();
        assert_eq!(r.num_params_under("visual.trunk."), resnet_trunk_oracle());
        assert_eq!(m.num_params_under("visual.trunk."), mobilenet_trunk_oracle());
        let stem = 5 * 7 * 7 * 64 + 2 * 64;
        assert_eq!(r.num_params_under("visual.stem."), stem);
        assert_eq!(m.num_params_under("visual.stem."), stem);
        assert_eq!(r.num_params_under("visual.head."), 512 * 768 + 768);
        assert_eq!(m.num_params_under("visual.head."), 1280 * 768 + 768);
        assert!((11.0e6..11.4e6).contains(&(resnet_trunk_oracle() as f64)));
        assert!(m.num_params() < r.num_params());
    }

    #[test]
    fn stride_mismatch_is_config_error() {
        let mut cfg = tiny(Backbone::Resnet);
        cfg.frame_size = 20;
        assert!(backbone_plan(&cfg).unwrap_err().is_config());
        cfg.frame_size = 24;
        assert!(backbone_plan(&cfg).is_ok());
        assert_eq!(VisualConfig::paper(Backbone::Mobilenet, 768).total_stride(), 8);
    }

    #[test]
    fn deterministic_build() {
        let cfg = tiny(Backbone::Mobilenet);
        assert_eq!(build_backbone(&cfg, 7).unwrap(), build_backbone(&cfg, 7).unwrap());
        assert_ne!(build_backbone(&cfg, 7).unwrap(), build_backbone(&cfg, 8).unwrap());
        let m = build_backbone(&cfg, 7).unwrap();
        let (total, parts) = count_params(&m);
        assert_eq!(total, parts.values().sum::<usize>());
        assert_eq!(parts.keys().collect::<Vec<_>>(), ["head", "stem", "trunk"]);
    }

    #[test]
    fn shapes_and_constant_input() {
        for b in [Backbone::Resnet, Backbone::Mobilenet] {
            let m = build_backbone(&tiny(b), 1).unwrap();
            let y = encode_video(&m, &Tensor::zeros([6, 1, 16, 16])).unwrap();
            assert_eq!(y.frames().dims(), &[6, 8]);
            for t in 1..6 {
                for j in 0..8 {
                    assert!((y.frames().at2(t, j) - y.frames().at2(0, j)).abs() < 1e-9);
                }
            }
            let err = encode_video(&m, &Tensor::zeros([6, 1, 8, 8])).unwrap_err();
            assert!(matches!(err, Error::Shape(_)));
        }
    }

    #[test]
    fn bright_frame_only_moves_its_receptive_field() {
        let m = build_backbone(&tiny(Backbone::Resnet), 2).unwrap();
        let (t, k) = (12, 6);
        let base = encode_video(&m, &Tensor::zeros([t, 1, 16, 16])).unwrap();
        let mut x = Tensor::zeros([t, 1, 16, 16]);
        x.data_mut()[k * 256..(k + 1) * 256].fill(1.0);
        let lit = encode_video(&m, &x).unwrap();
        let half = 5 / 2;
        for i in 0..t {
            let diff = (0..8)
                .map(|j| (lit.frames().at2(i, j) - base.frames().at2(i, j)).abs())
                .fold(0.0, f64::max);
            if i.abs_diff(k) <= half {
                assert!(diff > 1e-9, "frame {i} should change");
            } else {
                assert_eq!(diff, 0.0, "frame {i} is outside the stem's reach");
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        use rand::Rng;
        for b in [Backbone::Resnet, Backbone::Mobilenet] {
            let m = build_backbone(&tiny(b), 3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x = Tensor::new(
                [3, 16, 16, 1],
                (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let mut s = Session::new(&m.params);
            let xv = s.g.constant(x);
            let y = backbone_forward(&mut s, &m.config, xv).unwrap();
            // A weighted sum, since a plain sum is blind to the final norm's gamma.
            let wts = s.g.constant(Tensor::uniform([3, 8], 1.0, &mut rng));
            let prod = s.g.mul(y, wts).unwrap();
            let loss = s.g.sum_all(prod);
            let grads = s.backward(loss).unwrap();
            assert_eq!(grads.len(), m.params.len());
            for (name, gr) in &grads {
                assert!(gr.max_abs() > 0.0, "{b}: {name} has zero gradient");
            }
        }
    }
}
