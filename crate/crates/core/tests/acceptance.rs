//! Acceptance suite. Runs without the libtest harness so that every check
//! prints its PASS/FAIL line under a plain `cargo test`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use avsr_core::audio::{
    frame_signal, hz_to_mel, log_mel_fbank, mel_to_hz, mfcc39, AudioFeatureConfig, SAMPLE_RATE_HZ,
};
use avsr_core::encoder::{
    conformer_block, conformer_block_plan, EncoderConfig, EncoderKind,
};
use avsr_core::fusion::{gated_fuse, GatedFusionParams};
use avsr_core::harness::noise::{add_noise, mix_at_snr, power, synth_noise, NoiseCategory, NoiseMixSpec};
use avsr_core::harness::synth::{render_utterance, synth_corpus, write_corpus, SynthSpec};
use avsr_core::harness::{edit_distance, param_report, score_corpus, Pipeline, RunConfig, Unit};
use avsr_core::model::{
    encode, encoder_side_plan, pretrain_head_plan, pretrain_logits, ForwardOptions, ModelConfig,
};
use avsr_core::numerics::{
    checkpoint, grad_check, grad_check_params, ConvGeom, Graph, ParamStore, Session, Tensor, Var,
};
use avsr_core::objectives::train::masked_accuracy;
use avsr_core::objectives::MaskSpec;
use avsr_core::sequence::{FeatureKind, FeatureSequence};
use avsr_core::visual::Backbone;
use avsr_core::Result as AvResult;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---- straight-line oracles ------------------------------------------------

type Mat = Vec<Vec<f64>>;

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(name).unwrap_or_else(|_| panic!("missing {name}"))
}

fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(x: &Mat, w: &Tensor) -> Mat {
    let (n_in, n_out) = (w.dims()[0], w.dims()[1]);
    x.iter()
        .map(|row| {
            (0..n_out)
                .map(|j| (0..n_in).map(|i| row[i] * w.at2(i, j)).sum())
                .collect()
        })
        .collect()
}

fn plus_bias(x: Mat, b: &Tensor) -> Mat {
    x.into_iter()
        .map(|row| row.iter().zip(b.data()).map(|(v, c)| v + c).collect())
        .collect()
}

fn lin(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let y = mm(x, p(store, &format!("{prefix}.weight")));
    match store.get(&format!("{prefix}.bias")) {
        Ok(b) => plus_bias(y, b),
        Err(_) => y,
    }
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn ln(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let g = p(store, &format!("{prefix}.gamma")).data();
    let b = p(store, &format!("{prefix}.beta")).data();
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn add_scaled(x: &Mat, y: &Mat, w: f64) -> Mat {
    x.iter()
        .zip(y)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + w * v).collect())
        .collect()
}

fn ffn(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let h = lin(store, &format!("{prefix}.fc1"), x);
    let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v * sig(v)).collect()).collect();
    lin(store, &format!("{prefix}.fc2"), &h)
}

/// Self-attention with content and relative-position terms, per head.
fn mhsa(store: &ParamStore, prefix: &str, x: &Mat, heads: usize) -> Mat {
    let t = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let q = lin(store, &format!("{prefix}.q"), x);
    let k = lin(store, &format!("{prefix}.k"), x);
    let v = lin(store, &format!("{prefix}.v"), x);
    let u = p(store, &format!("{prefix}.pos_bias_u")).data();
    let bv = p(store, &format!("{prefix}.pos_bias_v")).data();
    let wpos = p(store, &format!("{prefix}.pos.weight"));
    // Sinusoid of offset r projected by the position matrix.
    let pos = |r: f64| -> Vec<f64> {
        let mut e = vec![0.0; d];
        for m in 0..d / 2 {
            let w = 10000f64.powf(-2.0 * m as f64 / d as f64);
            e[2 * m] = (r * w).sin();
            e[2 * m + 1] = (r * w).cos();
        }
        mm(&vec![e], wpos).remove(0)
    };
    let mut out = vec![vec![0.0; d]; t];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let mut logits = Vec::with_capacity(t);
            for j in 0..t {
                let pe = pos(i as f64 - j as f64);
                let mut content = 0.0;
                let mut position = 0.0;
                for c in cols.clone() {
                    content += (q[i][c] + u[c]) * k[j][c];
                    position += (q[i][c] + bv[c]) * pe[c];
                }
                logits.push((content + position) / (dh as f64).sqrt());
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..t).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    lin(store, &format!("{prefix}.out"), &out)
}

fn conv_module(store: &ParamStore, prefix: &str, x: &Mat) -> Mat {
    let d = x[0].len();
    let h = lin(store, &format!("{prefix}.pw1"), x);
    let g: Mat = h
        .iter()
        .map(|r| (0..d).map(|j| r[j] * sig(r[d + j])).collect())
        .collect();
    let k = p(store, &format!("{prefix}.dw.weight"));
    let b = p(store, &format!("{prefix}.dw.bias")).data();
    let taps = k.dims()[0];
    let half = taps as isize / 2;
    let t = g.len() as isize;
    let c: Mat = (0..t)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let mut acc = b[j];
                    for kk in 0..taps as isize {
                        let src = i + kk - half;
                        if (0..t).contains(&src) {
                            acc += g[src as usize][j] * k.at2(kk as usize, j);
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    let c = ln(store, &format!("{prefix}.norm"), &c);
    let c: Mat = c.into_iter().map(|r| r.into_iter().map(|v| v * sig(v)).collect()).collect();
    lin(store, &format!("{prefix}.pw2"), &c)
}

/// Post-norm conformer block with half-step feed-forward residuals;
/// `ffn_weight` lets the full-step variant be built as a mutant.
fn conformer_oracle(store: &ParamStore, prefix: &str, x: &Mat, heads: usize, ffn_weight: f64) -> Mat {
    let f = ffn(store, &format!("{prefix}.ffn1"), x);
    let x1 = ln(store, &format!("{prefix}.norm_ffn1"), &add_scaled(x, &f, ffn_weight));
    let a = mhsa(store, &format!("{prefix}.attn"), &x1, heads);
    let x2 = ln(store, &format!("{prefix}.norm_attn"), &add_scaled(&x1, &a, 1.0));
    let c = conv_module(store, &format!("{prefix}.conv"), &x2);
    let x3 = ln(store, &format!("{prefix}.norm_conv"), &add_scaled(&x2, &c, 1.0));
    let f = ffn(store, &format!("{prefix}.ffn2"), &x3);
    ln(store, &format!("{prefix}.norm_ffn2"), &add_scaled(&x3, &f, ffn_weight))
}

/// `m = [first; second] U + a`, `h = (a_t W + b) ⊙ σ(m V + c)`.
fn gate_oracle(p: &GatedFusionParams, a: &Mat, first: &Mat, second: &Mat) -> Mat {
    let d = p.dim();
    (0..a.len())
        .map(|t| {
            let cat: Vec<f64> = first[t].iter().chain(&second[t]).copied().collect();
            let m: Vec<f64> = (0..d)
                .map(|j| p.a.data()[j] + (0..2 * d).map(|i| cat[i] * p.u.at2(i, j)).sum::<f64>())
                .collect();
            (0..d)
                .map(|j| {
                    let lin = p.b.data()[j] + (0..d).map(|i| a[t][i] * p.w.at2(i, j)).sum::<f64>();
                    let g = p.c.data()[j] + (0..d).map(|i| m[i] * p.v.at2(i, j)).sum::<f64>();
                    lin * sig(g)
                })
                .collect()
        })
        .collect()
}

fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    a.iter()
        .flatten()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let mut r = Tensor::uniform(t.dims().to_vec(), 0.5, rng);
        if name.ends_with(".gamma") {
            r.data_mut().iter_mut().for_each(|v| *v += 1.0);
        }
        out.insert(name.clone(), r);
    }
    out
}

fn equation_fidelity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_block, mut worst_gate) = (0.0f64, 0.0f64);
    let (mut ffn_mutant_caught, mut order_mutant_caught) = (0, 0);
    for _ in 0..1000 {
        // Layer norm over two features only keeps signs, which hides the
        // residual weights, so the width starts at 4.
        let d = 2 * rng.gen_range(2..=8);
        let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
        let cfg = EncoderConfig {
            dim: d,
            heads: divisors[rng.gen_range(0..divisors.len())],
            blocks: 1,
            ffn_expansion: rng.gen_range(1..=4),
            conv_kernel: 2 * rng.gen_range(0..4) + 1,
            ..EncoderConfig::desk(EncoderKind::Conformer)
        };
        let t = rng.gen_range(1..=8);
        let store = conformer_block_plan("blk", &cfg).build(&mut rng).map_err(fail)?;
        let store = randomize(&store, &mut rng);
        let x = Tensor::uniform([t, d], 1.0, &mut rng);
        let y = conformer_block(&x, &store, "blk", &cfg).map_err(fail)?;
        let xm = to_mat(&x);
        worst_block = worst_block.max(max_diff(&conformer_oracle(&store, "blk", &xm, cfg.heads, 0.5), &y));
        if max_diff(&conformer_oracle(&store, "blk", &xm, cfg.heads, 1.0), &y) >= 1e-10 {
            ffn_mutant_caught += 1;
        }

        let gp = GatedFusionParams::random(d, 1.0, &mut rng);
        let a = Tensor::uniform([t, d], 1.0, &mut rng);
        let v = Tensor::uniform([t, d], 1.0, &mut rng);
        let seq = |x: &Tensor, k| FeatureSequence::new(x.clone(), 25.0, k).unwrap();
        let h = gated_fuse(&seq(&a, FeatureKind::Fbank), &seq(&v, FeatureKind::Visual), &gp)
            .map_err(fail)?;
        let (am, vm) = (to_mat(&a), to_mat(&v));
        worst_gate = worst_gate.max(max_diff(&gate_oracle(&gp, &am, &vm, &am), h.frames()));
        if max_diff(&gate_oracle(&gp, &am, &am, &vm), h.frames()) >= 1e-12 {
            order_mutant_caught += 1;
        }
    }
    ensure(
        worst_block < 1e-10 && worst_gate < 1e-12 && ffn_mutant_caught == 1000 && order_mutant_caught == 1000,
        format!(
            "block err {worst_block:.2e}, gate err {worst_gate:.2e}, \
             full-step mutant caught {ffn_mutant_caught}/1000, swapped-order mutant caught {order_mutant_caught}/1000"
        ),
    )
}

// ---- parameter counts -----------------------------------------------------

fn parameter_counts() -> Check {
    let report = |enc, bb| param_report(&ModelConfig::paper(enc, bb), 1000).map_err(fail);
    let tr = report(EncoderKind::Transformer, Backbone::Resnet)?;
    let co = report(EncoderKind::Conformer, Backbone::Resnet)?;
    let mo = report(EncoderKind::Conformer, Backbone::Mobilenet)?;
    let visual = |r: &avsr_core::harness::pipeline::ParamReport| r.components["visual"] as f64;
    let trunk = |bb| {
        let mut cfg = ModelConfig::paper(EncoderKind::Conformer, bb);
        cfg.fusion.mode = avsr_core::fusion::FusionMode::Glu;
        encoder_side_plan(&cfg).map(|p| p.num_params_under("visual.trunk.") as f64)
    };
    let visual_diff = visual(&co) - visual(&mo);
    let trunk_diff = trunk(Backbone::Resnet).map_err(fail)? - trunk(Backbone::Mobilenet).map_err(fail)?;
    let within = |n: usize, target: f64| (n as f64 - target).abs() <= 0.15 * target;
    ensure(
        within(tr.total, 103e6)
            && within(co.total, 183e6)
            && co.total > tr.total
            && (visual_diff - 7e6).abs() <= 1.5e6,
        format!(
            "transformer {:.1}M, conformer {:.1}M, resnet-mobilenet frontend {:.2}M (trunks alone {:.2}M)",
            tr.total as f64 / 1e6,
            co.total as f64 / 1e6,
            visual_diff / 1e6,
            trunk_diff / 1e6
        ),
    )
}

// ---- gradients ------------------------------------------------------------

fn primitive_grad_checks(rng: &mut ChaCha8Rng) -> AvResult<BTreeMap<&'static str, f64>> {
    type Prim = Box<dyn Fn(&mut Graph, Var) -> AvResult<Var>>;
    let mut out = BTreeMap::new();
    let m = |rng: &mut ChaCha8Rng, r, c| Tensor::uniform([r, c], 1.0, rng);
    let w = m(rng, 4, 3);
    let w2 = m(rng, 5, 4);
    let vec4 = Tensor::uniform([4], 1.0, rng);
    let gamma = Tensor::uniform([4], 1.0, rng);
    let kernel = m(rng, 3, 4);
    let table = m(rng, 7, 4);
    let conv_w = m(rng, 3 * 3 * 3 * 2, 3);
    let dw_w = m(rng, 9, 2);
    let weights = m(rng, 5, 4);
    // Every case reduces to a scalar with a weighted sum so each output
    // coordinate carries a different gradient.
    let reduce = move |g: &mut Graph, y: Var| -> AvResult<Var> {
        let n = g.value(y).len();
        let wts: Vec<f64> = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let c = g.constant(Tensor::new(g.dims(y).to_vec(), wts)?);
        let p = g.mul(y, c)?;
        Ok(g.sum_all(p))
    };
    let cases: Vec<(&'static str, Tensor, Prim)> = vec![
        ("matmul", m(rng, 5, 4), {
            let w = w.clone();
            Box::new(move |g, x| {
                let c = g.constant(w.clone());
                g.matmul(x, c)
            })
        }),
        ("matmul_nt", m(rng, 5, 4), {
            let w2 = w2.clone();
            Box::new(move |g, x| {
                let c = g.constant(w2.clone());
                g.matmul_nt(x, c)
            })
        }),
        ("transpose", m(rng, 3, 4), Box::new(|g, x| g.transpose(x))),
        ("reshape", m(rng, 3, 4), Box::new(|g, x| g.reshape(x, [4, 3]))),
        ("add", m(rng, 5, 4), {
            let w = weights.clone();
            Box::new(move |g, x| {
                let c = g.constant(w.clone());
                g.add(x, c)
            })
        }),
        ("sub", m(rng, 5, 4), {
            let w = weights.clone();
            Box::new(move |g, x| {
                let c = g.constant(w.clone());
                g.sub(c, x)
            })
        }),
        ("mul", m(rng, 5, 4), Box::new(|g, x| g.mul(x, x))),
        ("add_row", m(rng, 5, 4), {
            let b = vec4.clone();
            Box::new(move |g, x| {
                let c = g.constant(b.clone());
                g.add_row(x, c)
            })
        }),
        ("scale", m(rng, 5, 4), Box::new(|g, x| Ok(g.scale(x, -1.7)))),
        ("sigmoid", m(rng, 5, 4), Box::new(|g, x| Ok(g.sigmoid(x)))),
        ("swish", m(rng, 5, 4), Box::new(|g, x| Ok(g.swish(x)))),
        ("relu", m(rng, 5, 4), Box::new(|g, x| Ok(g.relu(x)))),
        ("glu", m(rng, 5, 4), Box::new(|g, x| g.glu(x))),
        ("layer_norm", m(rng, 5, 4), {
            let gm = gamma.clone();
            let b = vec4.clone();
            Box::new(move |g, x| {
                let (gv, bv) = (g.constant(gm.clone()), g.constant(b.clone()));
                g.layer_norm(x, gv, bv, 1e-5)
            })
        }),
        ("group_norm", Tensor::uniform([2, 3, 3, 4], 1.0, rng), {
            let gm = gamma.clone();
            let b = vec4.clone();
            Box::new(move |g, x| {
                let (gv, bv) = (g.constant(gm.clone()), g.constant(b.clone()));
                g.group_norm(x, gv, bv, 2, 1e-5)
            })
        }),
        ("softmax_rows", m(rng, 5, 4), Box::new(|g, x| Ok(g.softmax_rows(x)))),
        ("log_softmax_rows", m(rng, 5, 4), Box::new(|g, x| Ok(g.log_softmax_rows(x)))),
        ("masked_cross_entropy", m(rng, 5, 4), Box::new(|g, x| {
            let (l, _) = g.masked_cross_entropy(x, &[0, 3, 1, 2, 3], &[true, false, true, true, false])?;
            Ok(l)
        })),
        ("slice_cols", m(rng, 5, 4), Box::new(|g, x| g.slice_cols(x, 1, 2))),
        ("concat_cols", m(rng, 5, 4), Box::new(|g, x| {
            let s = g.scale(x, 2.0);
            g.concat_cols(&[x, s, x])
        })),
        ("rel_shift", m(rng, 4, 7), Box::new(|g, x| g.rel_shift(x))),
        ("mask_rows", m(rng, 5, 4), {
            let b = vec4.clone();
            Box::new(move |g, x| {
                let r = g.constant(b.clone());
                g.mask_rows(x, &[false, true, false, true, false], r)
            })
        }),
        ("gather_rows", table.clone(), Box::new(|g, x| g.gather_rows(x, &[3, 0, 3, 6]))),
        ("sum_all", m(rng, 5, 4), Box::new(|g, x| Ok(g.sum_all(x)))),
        ("depthwise_conv1d", m(rng, 6, 4), {
            let k = kernel.clone();
            Box::new(move |g, x| {
                let kv = g.constant(k.clone());
                g.depthwise_conv1d(x, kv)
            })
        }),
        ("conv3d", Tensor::uniform([3, 5, 5, 2], 1.0, rng), {
            let wv = conv_w.clone();
            Box::new(move |g, x| {
                let c = g.constant(wv.clone());
                g.conv3d(x, c, ConvGeom { kt: 3, kh: 3, kw: 3, stride: 2 })
            })
        }),
        ("depthwise_conv2d", Tensor::uniform([2, 5, 5, 2], 1.0, rng), {
            let wv = dw_w.clone();
            Box::new(move |g, x| {
                let c = g.constant(wv.clone());
                g.depthwise_conv2d(x, c, ConvGeom { kt: 1, kh: 3, kw: 3, stride: 2 })
            })
        }),
        ("spatial_mean", Tensor::uniform([2, 3, 3, 4], 1.0, rng), Box::new(|g, x| g.spatial_mean(x))),
    ];
    for (name, x, f) in cases {
        let err = grad_check(
            |g, v| {
                let y = f(g, v)?;
                reduce(g, y)
            },
            &x,
            1e-5,
        )?;
        out.insert(name, err);
    }
    // The weight side of the parameterised convolutions and products.
    let mut store = ParamStore::new();
    store.insert("w", conv_w);
    store.insert("k", kernel);
    store.insert("dw", dw_w);
    let xin = Tensor::uniform([3, 5, 5, 2], 1.0, rng);
    let xseq = m(rng, 6, 4);
    let err = grad_check_params(
        |s: &mut Session| {
            let x = s.g.constant(xin.clone());
            let w = s.param("w")?;
            let y = s.g.conv3d(x, w, ConvGeom { kt: 3, kh: 3, kw: 3, stride: 1 })?;
            let dw = s.param("dw")?;
            let x2 = s.g.constant(Tensor::uniform([2, 5, 5, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
            let z = s.g.depthwise_conv2d(x2, dw, ConvGeom { kt: 1, kh: 3, kw: 3, stride: 1 })?;
            let xs = s.g.constant(xseq.clone());
            let k = s.param("k")?;
            let c = s.g.depthwise_conv1d(xs, k)?;
            let (y, z, c) = (reduce(&mut s.g, y)?, reduce(&mut s.g, z)?, reduce(&mut s.g, c)?);
            let yz = s.g.add(y, z)?;
            s.g.add(yz, c)
        },
        &store,
        &["w", "k", "dw"],
        1e-5,
    )?;
    out.insert("conv weights", err);
    Ok(out)
}

fn toy_model_grad_check(rng: &mut ChaCha8Rng) -> AvResult<f64> {
    let mut cfg = ModelConfig::default();
    cfg.visual.frame_size = 8;
    cfg.visual.embed_dim = 4;
    cfg.visual.width_multiplier = 0.0625;
    cfg.encoder.dim = 8;
    cfg.encoder.heads = 2;
    cfg.encoder.blocks = 2;
    cfg.encoder.conv_kernel = 3;
    cfg.encoder.pos_conv_kernel = 3;
    cfg.encoder.ffn_expansion = 2;
    cfg.decoder.heads = 2;
    cfg.audio = AudioFeatureConfig::fbank(4, 25.0);
    cfg.stack_factor = 2;
    let mut store = encoder_side_plan(&cfg)?.build(rng)?;
    store.merge(pretrain_head_plan(&cfg, 5).build(rng)?);
    let store = randomize(&store, rng);
    let t = 5;
    let audio = Tensor::uniform([t, cfg.audio_dim()], 1.0, rng);
    let video = Tensor::uniform([t, 8, 8, 1], 1.0, rng);
    let mask = [true, false, true, true, false];
    let labels = [1, 4, 0, 2, 3];
    let names: Vec<String> = store
        .names()
        .filter(|n| !n.starts_with("visual."))
        .cloned()
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    grad_check_params(
        |s| {
            let opts = ForwardOptions {
                mask: Some(&mask),
                dropped: None,
            };
            let out = encode(s, &cfg, &audio, &video, &opts, None)?;
            let logits = pretrain_logits(s, out.output)?;
            Ok(s.g.masked_cross_entropy(logits, &labels, &mask)?.0)
        },
        &store,
        &names,
        1e-5,
    )
}

fn gradient_integrity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prims = primitive_grad_checks(&mut rng).map_err(fail)?;
    let (worst_name, worst) = prims
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, e)| (*n, *e))
        .unwrap();
    let toy = toy_model_grad_check(&mut rng).map_err(fail)?;
    ensure(
        worst < 1e-4 && toy < 1e-4,
        format!(
            "{} primitive checks, worst {worst_name} {worst:.2e}; two-block model {toy:.2e}",
            prims.len()
        ),
    )
}

// ---- toy training ---------------------------------------------------------

fn toy_corpus(dir: &Path, utterances: usize, seed: u64) -> AvResult<PathBuf> {
    let spec = SynthSpec {
        utterances,
        seed,
        ..SynthSpec::default()
    };
    write_corpus(dir, &synth_corpus(&spec)?)?;
    Ok(dir.join("manifest.tsv"))
}

fn toy_pretraining() -> Check {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let manifest = toy_corpus(&tmp.path().join("corpus"), 20, 1).map_err(fail)?;
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = 200;
    let pipe = Pipeline::new(cfg, tmp.path().join("run")).map_err(fail)?;
    pipe.featurize(&manifest).map_err(fail)?;
    let set = pipe.cluster(1).map_err(fail)?;
    pipe.pretrain(1).map_err(fail)?;
    let store = checkpoint::load(pipe.pretrain_dir(1).join("checkpoint")).map_err(fail)?;
    let data = pipe.utterances().map_err(fail)?;
    let labels = pipe.read_labels(1).map_err(fail)?;
    let mut acc = 0.0;
    for seed in 0..5 {
        acc += masked_accuracy(&store, &pipe.cfg.model, &data, &labels, &MaskSpec::default(), seed)
            .map_err(fail)?;
    }
    acc /= 5.0;
    ensure(
        acc >= 0.9 && set.clusters() == 100,
        format!(
            "k = {}, {} steps at D = {}, masked accuracy {:.3}",
            set.clusters(),
            pipe.cfg.pretrain.steps,
            pipe.cfg.model.dim(),
            acc
        ),
    )
}

fn toy_finetuning() -> Check {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let manifest = toy_corpus(&tmp.path().join("corpus"), 10, 2).map_err(fail)?;
    let mut cfg = RunConfig::default();
    cfg.finetune.steps = 500;
    let pipe = Pipeline::new(cfg, tmp.path().join("run")).map_err(fail)?;
    pipe.featurize(&manifest).map_err(fail)?;
    pipe.finetune().map_err(fail)?;
    let hyps = pipe.decode(None).map_err(fail)?;
    let data = pipe.utterances().map_err(fail)?;
    let pairs: Vec<(&str, &str)> = data
        .iter()
        .zip(&hyps)
        .map(|(u, (_, h))| (u.transcript.as_str(), h.as_str()))
        .collect();
    let exact = pairs.iter().filter(|(r, h)| r == h).count();
    let cer = score_corpus(pairs.iter().copied(), Unit::Char).map_err(fail)?;
    ensure(
        exact == 10 && cer.errors() == 0,
        format!(
            "{} steps, {exact}/10 exact, CER {:.4}",
            pipe.cfg.finetune.steps,
            cer.rate().unwrap_or(f64::NAN)
        ),
    )
}

fn phase_schedule() -> Check {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let manifest = toy_corpus(&tmp.path().join("corpus"), 90, 3).map_err(fail)?;
    let mut cfg = RunConfig::default();
    cfg.pretrain.steps = 3;
    cfg.pretrain.warmup_steps = 1;
    cfg.phases.kmeans_iters = 10;
    let pipe = Pipeline::new(cfg, tmp.path().join("run")).map_err(fail)?;
    pipe.featurize(&manifest).map_err(fail)?;
    pipe.run_phases().map_err(fail)?;
    let ids: Vec<String> = pipe.utterances().map_err(fail)?.into_iter().map(|u| u.id).collect();
    let mut counts = Vec::new();
    let mut ok = true;
    for phase in 1..=5 {
        let dir = pipe.labels_dir(phase);
        let centroids = avsr_core::numerics::avht::read_tensor(dir.join("centroids.avht")).map_err(fail)?;
        let labels = pipe.read_labels(phase).map_err(fail)?;
        let k = centroids.rows();
        ok &= ids.iter().all(|id| dir.join(format!("{id}.avht")).exists());
        ok &= labels.iter().flatten().all(|&l| l < k);
        let head = checkpoint::load(pipe.pretrain_dir(phase).join("checkpoint"))
            .map_err(fail)?
            .get("pretrain.head.weight")
            .map_err(fail)?
            .dims()[1];
        ok &= head == k;
        counts.push(k);
    }
    ensure(
        ok && counts == [100, 100, 500, 1000, 2000],
        format!("cluster counts {counts:?} over {} utterances", ids.len()),
    )
}

// ---- signal processing and scoring ----------------------------------------

fn measured_snr(speech: &[f64], mixed: &[f64]) -> f64 {
    let noise: Vec<f64> = mixed.iter().zip(speech).map(|(m, s)| m - s).collect();
    10.0 * (power(speech) / power(&noise)).log10()
}

fn snr_mixing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let speech = render_utterance("s", "abc de", 32, 0.0, &mut rng).map_err(fail)?.samples;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for cat in NoiseCategory::CONCRETE {
        for snr in [-5.0, 0.0, 5.0, 20.0] {
            let (noise, _) = synth_noise(cat, 12_000, 9).map_err(fail)?;
            let mixed = mix_at_snr(&speech, &noise, snr).map_err(fail)?;
            worst = worst.max((measured_snr(&speech, &mixed) - snr).abs());
            cases += 1;
        }
    }
    for (i, cat) in NoiseCategory::CONCRETE.into_iter().chain([NoiseCategory::All]).enumerate() {
        let spec = NoiseMixSpec {
            category: cat,
            snr_db: 5.0,
            seed: 4,
        };
        let mixed = add_noise(&speech, &spec, i).map_err(fail)?;
        worst = worst.max((measured_snr(&speech, &mixed) - 5.0).abs());
        cases += 1;
    }
    ensure(worst < 0.01, format!("{cases} mixtures, worst deviation {worst:.2e} dB"))
}

fn dp_distance<T: PartialEq>(r: &[T], h: &[T]) -> usize {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for i in 0..=r.len() {
        d[i][0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[r.len()][h.len()]
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let word = |rng: &mut ChaCha8Rng| {
            (0..rng.gen_range(1..=3))
                .map(|_| (b'a' + rng.gen_range(0..4)) as char)
                .collect::<String>()
        };
        let sentence = |rng: &mut ChaCha8Rng| {
            (0..rng.gen_range(0..=8)).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
        };
        let (r, h) = (sentence(&mut rng), sentence(&mut rng));
        for unit in [Unit::Word, Unit::Char] {
            let (rt, ht) = (unit.tokenize(&r), unit.tokenize(&h));
            let c = edit_distance(&rt, &ht);
            let consistent = c.errors() == dp_distance(&rt, &ht)
                && c.n_ref == rt.len()
                && rt.len() - c.deletions + c.insertions == ht.len();
            if !consistent {
                mismatches += 1;
            }
        }
    }
    let wer = |r: &str, h: &str| score_corpus([(r, h)], Unit::Word).map(|c| c.rate().unwrap());
    let hand = [
        (wer("the cat sat", "the bat sat").map_err(fail)?, 1.0 / 3.0),
        (wer("a b", "").map_err(fail)?, 1.0),
        (wer("a b c", "a b c").map_err(fail)?, 0.0),
    ];
    let hand_ok = hand.iter().all(|(got, want)| (got - want).abs() < 1e-15);
    ensure(
        mismatches == 0 && hand_ok,
        format!("2000 scored pairs, {mismatches} mismatches; hand cases {hand:?}"),
    )
}

fn feature_frontend() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut count_errors = 0;
    for _ in 0..20 {
        let w = rng.gen_range(16..=800usize);
        let h = rng.gen_range(1..=w);
        let n = rng.gen_range(w..=w + 5000);
        let cfg = AudioFeatureConfig {
            window_ms: w as f64 / 16.0,
            hop_ms: h as f64 / 16.0,
            ..AudioFeatureConfig::default()
        };
        let samples: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let frames = frame_signal(&samples, &cfg).map_err(fail)?;
        if frames.dims() != [1 + (n - w) / h, w] {
            count_errors += 1;
        }
    }
    let tone: Vec<f64> = (0..8000)
        .map(|i| (2.0 * PI * 1000.0 * i as f64 / SAMPLE_RATE_HZ as f64).sin())
        .collect();
    let mut dims = Vec::new();
    let mut peaks_ok = true;
    let mut peaks = Vec::new();
    for (n_mels, win) in [(26, 25.0), (80, 15.0), (80, 25.0)] {
        let cfg = AudioFeatureConfig::fbank(n_mels, win);
        let fb = log_mel_fbank(&frame_signal(&tone, &cfg).map_err(fail)?, &cfg).map_err(fail)?;
        dims.push(fb.dim());
        let f = fb.frames();
        let mean: Vec<f64> = (0..n_mels)
            .map(|j| (0..f.rows()).map(|i| f.at2(i, j)).sum::<f64>() / f.rows() as f64)
            .collect();
        let argmax = (0..n_mels).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
        // Filter centres sit at equal mel steps from 0 Hz to Nyquist.
        let top = 2595.0 * (1.0 + 8000.0 / 700.0f64).log10();
        let centre = |m: usize| 700.0 * (10f64.powf(top * (m + 1) as f64 / (n_mels + 1) as f64 / 2595.0) - 1.0);
        let below = (0..n_mels).filter(|&m| centre(m) <= 1000.0).next_back().unwrap();
        let expected = if 1000.0 - centre(below) <= centre(below + 1) - 1000.0 {
            below
        } else {
            below + 1
        };
        peaks_ok &= argmax == expected;
        peaks.push((n_mels, argmax, expected));
        peaks_ok &= (mel_to_hz(hz_to_mel(1000.0)) - 1000.0).abs() < 1e-9;
    }
    let mfcc = mfcc39(&tone, &AudioFeatureConfig::default()).map_err(fail)?;
    ensure(
        count_errors == 0 && dims == [26, 80, 80] && mfcc.dim() == 39 && peaks_ok,
        format!(
            "20 framing triples, {count_errors} wrong; fbank dims {dims:?}; mfcc dim {}; \
             1 kHz peak (n_mels, got, expected) {peaks:?}",
            mfcc.dim()
        ),
    )
}

// ---- determinism ----------------------------------------------------------

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn full_run(root: &Path) -> AvResult<BTreeMap<PathBuf, Vec<u8>>> {
    let manifest = toy_corpus(&root.join("corpus"), 12, 4)?;
    let mut cfg = RunConfig::default();
    cfg.seed = 17;
    cfg.model.fusion.p_audio = 0.3;
    cfg.model.fusion.p_visual = 0.3;
    cfg.model.encoder.dropout = 0.1;
    cfg.phases.clusters = vec![20, 30];
    cfg.pretrain.steps = 8;
    cfg.finetune.steps = 8;
    let out = root.join("run");
    let pipe = Pipeline::new(cfg, &out)?;
    pipe.featurize(&manifest)?;
    pipe.run_phases()?;
    pipe.finetune()?;
    pipe.evaluate(None)?;
    Ok(tree_bytes(&out))
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(fail)?, tempfile::tempdir().map_err(fail)?);
    let ra = full_run(a.path()).map_err(fail)?;
    let rb = full_run(b.path()).map_err(fail)?;
    let differing: Vec<_> = ra
        .keys()
        .chain(rb.keys())
        .filter(|k| ra.get(*k) != rb.get(*k))
        .collect();
    let has = |prefix: &str| ra.keys().any(|k| k.starts_with(prefix));
    ensure(
        differing.is_empty() && has("labels") && has("pretrain/phase2/checkpoint") && has("eval/report.tsv"),
        format!("{} files compared, differing: {differing:?}", ra.len()),
    )
}

fn main() {
    let checks: [(&str, fn() -> Check); 10] = [
        ("block and gate match straight-line oracles", equation_fidelity),
        ("paper-scale parameter counts", parameter_counts),
        ("tape gradients match finite differences", gradient_integrity),
        ("toy pre-training reaches 90% masked accuracy", toy_pretraining),
        ("toy fine-tuning transcribes all pairs", toy_finetuning),
        ("five-phase schedule emits 100/100/500/1000/2000 clusters", phase_schedule),
        ("noise mixed at the requested SNR", snr_mixing),
        ("error-rate scoring matches the DP oracle", metric_oracle),
        ("feature frontend frame counts, dims and tone peak", feature_frontend),
        ("repeated toy pipeline runs are byte-identical", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>())));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[{:>2}] PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[{:>2}] FAIL {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
