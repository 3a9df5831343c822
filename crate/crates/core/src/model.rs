//! The assembled audio-visual model: stream projections, visual backbone,
//! fusion, encoder stack, pre-training head and decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatureConfig;
use crate::encoder::{encode_stack_graph, encoder_plan, EncoderConfig, EncoderKind, StackOutput};
use crate::error::{shape_err, Error, Result};
use crate::fusion::{fuse_graph, fusion_plan, Dropped, FusionConfig, FusionMode};
use crate::numerics::ops::linear;
use crate::numerics::{ParamPlan, Session, Tensor, Var};
use crate::objectives::decoder::{decoder_plan, DecoderConfig};
use crate::visual::{backbone_forward, backbone_plan, Backbone, VisualConfig};

pub const FRONTEND: &str = "frontend";
pub const PRETRAIN_HEAD: &str = "pretrain.head";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub audio: AudioFeatureConfig,
    /// Audio frames concatenated per video frame.
    pub stack_factor: usize,
    pub visual: VisualConfig,
    pub fusion: FusionConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            audio: AudioFeatureConfig::fbank(26, 25.0),
            stack_factor: 4,
            visual: VisualConfig::desk(Backbone::Resnet),
            fusion: FusionConfig::default(),
            encoder: EncoderConfig::desk(EncoderKind::Conformer),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Full-size configuration used for parameter counting. The transformer
    /// system pairs 26-band filterbanks with concatenation fusion; the
    /// conformer system uses 80-band, 15 ms filterbanks with gated fusion.
    pub fn paper(encoder: EncoderKind, visual: Backbone) -> Self {
        let (audio, mode) = match encoder {
            EncoderKind::Transformer => (AudioFeatureConfig::fbank(26, 25.0), FusionMode::Concat),
            EncoderKind::Conformer => (AudioFeatureConfig::fbank(80, 15.0), FusionMode::Glu),
        };
        Self {
            audio,
            stack_factor: 4,
            visual: VisualConfig::paper(visual, 768),
            fusion: FusionConfig {
                mode,
                p_audio: 0.5,
                p_visual: 0.5,
            },
            encoder: EncoderConfig::paper(encoder),
            decoder: DecoderConfig::paper(),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn audio_dim(&self) -> usize {
        self.audio.n_mels * self.stack_factor
    }

    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        if self.stack_factor == 0 {
            return Err(Error::Config("stack_factor must be at least 1".into()));
        }
        self.visual.validate()?;
        self.fusion.validate()?;
        self.encoder.validate()?;
        self.decoder.validate(self.dim())
    }
}

/// Everything up to and including the encoder stack.
pub fn encoder_side_plan(cfg: &ModelConfig) -> Result<ParamPlan> {
    cfg.validate()?;
    let d = cfg.dim();
    let mut plan = ParamPlan::new();
    plan.linear(&format!("{FRONTEND}.audio_proj"), cfg.audio_dim(), d, true);
    plan.extend(backbone_plan(&cfg.visual)?);
    plan.linear(&format!("{FRONTEND}.visual_proj"), cfg.visual.embed_dim, d, true);
    plan.uniform(format!("{FRONTEND}.mask_emb"), [d], d);
    plan.extend(fusion_plan(cfg.fusion.mode, d));
    plan.extend(encoder_plan(&cfg.encoder)?);
    Ok(plan)
}

pub fn pretrain_head_plan(cfg: &ModelConfig, clusters: usize) -> ParamPlan {
    let mut plan = ParamPlan::new();
    plan.linear(PRETRAIN_HEAD, cfg.dim(), clusters, true);
    plan
}

pub fn full_decoder_plan(cfg: &ModelConfig, vocab_size: usize) -> Result<ParamPlan> {
    decoder_plan(&cfg.decoder, cfg.dim(), vocab_size)
}

/// Prefixes of every encoder-side parameter, used to freeze them while the
/// decoder warms up.
pub fn encoder_side_prefixes() -> Vec<String> {
    ["frontend.", "visual.", "fusion.", "encoder."]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Per-utterance options of one forward pass.
#[derive(Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Audio frames replaced by the learned mask embedding.
    pub mask: Option<&'a [bool]>,
    /// Stream zeroed for this utterance.
    pub dropped: Option<Dropped>,
}

/// Runs the model on `audio: [T, audio_dim]` and `video: [T, S, S, 1]` up to
/// the encoder output. Passing an rng enables dropout and layer drop.
pub fn encode(
    s: &mut Session,
    cfg: &ModelConfig,
    audio: &Tensor,
    video: &Tensor,
    opts: &ForwardOptions,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<StackOutput> {
    let t = audio.rows();
    if audio.ndim() != 2 || audio.last_dim() != cfg.audio_dim() {
        return Err(shape_err!(
            "audio features {:?} do not match width {}",
            audio.dims(),
            cfg.audio_dim()
        ));
    }
    if video.dims().first() != Some(&t) {
        return Err(Error::Alignment {
            audio: t,
            video: video.dims().first().copied().unwrap_or(0),
        });
    }
    let d = cfg.dim();
    let dropped = opts.dropped.unwrap_or(Dropped::Neither);
    let a = if dropped == Dropped::Audio {
        s.g.constant(Tensor::zeros([t, d]))
    } else {
        let x = s.g.constant(audio.clone());
        let a = linear(s, &format!("{FRONTEND}.audio_proj"), x)?;
        match opts.mask {
            Some(mask) => {
                let emb = s.param(&format!("{FRONTEND}.mask_emb"))?;
                s.g.mask_rows(a, mask, emb)?
            }
            None => a,
        }
    };
    let v = if dropped == Dropped::Visual {
        s.g.constant(Tensor::zeros([t, d]))
    } else {
        let x = s.g.constant(video.clone());
        let e = backbone_forward(s, &cfg.visual, x)?;
        linear(s, &format!("{FRONTEND}.visual_proj"), e)?
    };
    let fused = fuse_graph(s, cfg.fusion.mode, a, v)?;
    encode_stack_graph(s, &cfg.encoder, fused, rng)
}

/// Cluster-logits `[T, k]` of the pre-training head.
pub fn pretrain_logits(s: &mut Session, enc: Var) -> Result<Var> {
    linear(s, PRETRAIN_HEAD, enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionMode;
    use rand::SeedableRng;

    #[test]
    fn desk_forward_shapes() {
        let mut cfg = ModelConfig::default();
        cfg.visual.frame_size = 16;
        cfg.encoder.dim = 16;
        cfg.encoder.heads = 2;
        cfg.decoder.heads = 2;
        for mode in [FusionMode::Concat, FusionMode::Glu] {
            cfg.fusion.mode = mode;
            let store = encoder_side_plan(&cfg)
                .unwrap()
                .build(&mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
            let audio = Tensor::zeros([5, cfg.audio_dim()]);
            let video = Tensor::zeros([5, 16, 16, 1]);
            let mut s = Session::new(&store);
            let mask = [true, false, false, true, false];
            let opts = ForwardOptions {
                mask: Some(&mask),
                dropped: None,
            };
            let out = encode(&mut s, &cfg, &audio, &video, &opts, None).unwrap();
            assert_eq!(s.g.dims(out.output), &[5, 16]);
            assert_eq!(out.layers.len(), 2);
            let bad = Tensor::zeros([4, 16, 16, 1]);
            let mut s = Session::new(&store);
            let err = encode(&mut s, &cfg, &audio, &bad, &opts, None).unwrap_err();
            assert!(matches!(err, Error::Alignment { audio: 5, video: 4 }));
        }
    }
}
