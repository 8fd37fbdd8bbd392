mod common;

use std::collections::BTreeSet;

use common::*;
use stan_core::branch::{
    build_first_input, cross_frame_attention, cross_frame_conv, fuse_final, fuse_level_input,
    init_branch, intra_frame_forward, layer_prefix, stan_forward, stan_layer_forward, StanSequence,
};
use stan_core::encoders::backbone::{backbone_layer_forward, OUTPUT_PARAMS};
use stan_core::encoders::{init_backbone, CrossFrameVariant, ModelConfig, Switches};
use stan_core::model::{FeatureBank, VideoModel};
use stan_core::numerics::rng::{stream_rng, streams};
use stan_core::numerics::{Graph, Tensor};
use stan_core::params::{grad_check_params, ParamSet};

const TIGHT: f64 = 1e-12;

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

fn seq(g: &mut Graph, cls: &Tensor, patches: &Tensor) -> StanSequence {
    StanSequence {
        video_cls: g.constant(cls.clone()),
        patches: g.constant(patches.clone()),
    }
}

fn values(g: &Graph, s: StanSequence) -> (Tensor, Tensor) {
    (g.value(s.video_cls).clone(), g.value(s.patches).clone())
}

fn rng() -> stan_core::numerics::rng::StreamRng {
    stream_rng(0, streams::DROPOUT)
}

/// `[B, T, L + 1, D]` level features from frame CLS rows and patch rows.
fn level_tensor(
    b: usize,
    t: usize,
    l: usize,
    d: usize,
    f: impl Fn(usize, usize, usize, usize) -> f64,
) -> Tensor {
    Tensor::from_fn(&[b, t, l + 1, d], |i| {
        f(
            i / (t * (l + 1) * d),
            i / ((l + 1) * d) % t,
            i / d % (l + 1),
            i % d,
        )
    })
}

fn conv_config() -> ModelConfig {
    ModelConfig {
        cross_frame_variant: CrossFrameVariant::Conv3d,
        ..tiny_config()
    }
}

/// Zeroes the named entries.
fn zero(set: &mut ParamSet, names: &[String]) {
    for n in names {
        let t = set.get_mut(n).unwrap();
        *t = Tensor::zeros(t.shape());
    }
}

// ---- build_first_input ----

#[test]
fn first_input_identity_with_zero_positions() {
    let cfg = tiny_config();
    let mut p = init_branch(&cfg, None, 1).unwrap();
    zero(&mut p, &["pos_t".into(), "pos_s".into()]);
    let lv = random(&[2, cfg.frames, cfg.patches() + 1, cfg.dim], 2);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(lv.clone());
    let s = build_first_input(&mut g, &b, x, &cfg, false, &mut rng()).unwrap();
    let patches = g.value(s.patches);
    assert_eq!(patches.shape(), &[2, cfg.frames, cfg.patches(), cfg.dim]);
    let per = (cfg.patches() + 1) * cfg.dim;
    for bt in 0..2 * cfg.frames {
        let src = &lv.data()[bt * per + cfg.dim..(bt + 1) * per];
        let dst = &patches.data()[bt * (per - cfg.dim)..(bt + 1) * (per - cfg.dim)];
        assert_eq!(src, dst);
    }
}

#[test]
fn first_input_video_cls_is_frame_mean() {
    let cfg = ModelConfig {
        grid_h: 1,
        grid_w: 1,
        dim: 2,
        heads: 1,
        ..tiny_config()
    };
    let p = init_branch(&cfg, None, 3).unwrap();
    let cls = [[1.0, 3.0], [3.0, 5.0]];
    let lv = level_tensor(
        1,
        2,
        1,
        2,
        |_, t, j, d| if j == 0 { cls[t][d] } else { 7.0 },
    );
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(lv);
    let s = build_first_input(&mut g, &b, x, &cfg, false, &mut rng()).unwrap();
    assert_eq!(g.value(s.video_cls).data(), &[2.0, 4.0]);
}

#[test]
fn first_input_positions_add() {
    let cfg = tiny_config();
    let mut p = init_branch(&cfg, None, 4).unwrap();
    *p.get_mut("pos_t").unwrap() =
        Tensor::from_fn(&[cfg.frames, cfg.dim], |i| (i / cfg.dim) as f64);
    *p.get_mut("pos_s").unwrap() =
        Tensor::from_fn(&[cfg.patches(), cfg.dim], |i| (i / cfg.dim) as f64);
    let lv = Tensor::zeros(&[1, cfg.frames, cfg.patches() + 1, cfg.dim]);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(lv);
    let s = build_first_input(&mut g, &b, x, &cfg, false, &mut rng()).unwrap();
    let out = g.value(s.patches);
    for i in 0..cfg.frames {
        for j in 0..cfg.patches() {
            for d in 0..cfg.dim {
                let v = out.data()[(i * cfg.patches() + j) * cfg.dim + d];
                assert_eq!(v, (i + j) as f64);
            }
        }
    }
    assert!(g.value(s.video_cls).data().iter().all(|&v| v == 0.0));
}

#[test]
fn first_input_video_cls_skips_dropout_and_positions() {
    let cfg = ModelConfig {
        dropout_p: 0.5,
        ..tiny_config()
    };
    let p = randomize(&init_branch(&cfg, None, 5).unwrap(), 70, 1.0);
    let lv = random(&[2, cfg.frames, cfg.patches() + 1, cfg.dim], 6);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(lv.clone());
    let s = build_first_input(&mut g, &b, x, &cfg, true, &mut rng()).unwrap();
    let per = (cfg.patches() + 1) * cfg.dim;
    for bi in 0..2 {
        let mut mean = vec![0.0; cfg.dim];
        for t in 0..cfg.frames {
            let off = (bi * cfg.frames + t) * per;
            for d in 0..cfg.dim {
                mean[d] += lv.data()[off + d] / cfg.frames as f64;
            }
        }
        close(&row(g.value(s.video_cls), bi), &mean, TIGHT);
    }
    // dropout does act on the patches
    let zeros = g
        .value(s.patches)
        .data()
        .iter()
        .filter(|&&v| v == 0.0)
        .count();
    assert!(zeros > 0);
}

#[test]
fn first_input_rejects_bad_shape() {
    let cfg = tiny_config();
    let p = init_branch(&cfg, None, 7).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[
        1,
        cfg.frames + 1,
        cfg.patches() + 1,
        cfg.dim,
    ]));
    assert!(build_first_input(&mut g, &b, x, &cfg, false, &mut rng()).is_err());
}

// ---- fuse_level_input ----

#[test]
fn fuse_level_zero_projection_keeps_previous() {
    let cfg = tiny_config();
    let (cls, pat) = (random(&[2, 8], 8), random(&[2, 2, 4, 8], 9));
    let lv = random(&[2, 2, 5, 8], 10);
    let mut g = Graph::new();
    let prev = seq(&mut g, &cls, &pat);
    let x = g.constant(lv);
    let w = g.constant(Tensor::zeros(&[cfg.dim, cfg.dim]));
    let out = fuse_level_input(&mut g, prev, x, w).unwrap();
    let (c, p) = values(&g, out);
    assert!(c.bitwise_eq(&cls) && p.bitwise_eq(&pat));
}

#[test]
fn fuse_level_identity_projection_from_zero() {
    let lv = random(&[1, 2, 5, 8], 11);
    let mut g = Graph::new();
    let prev = seq(
        &mut g,
        &Tensor::zeros(&[1, 8]),
        &Tensor::zeros(&[1, 2, 4, 8]),
    );
    let x = g.constant(lv.clone());
    let w = g.constant(Tensor::eye(8));
    let out = fuse_level_input(&mut g, prev, x, w).unwrap();
    let (c, p) = values(&g, out);
    let mean: Vec<f64> = (0..8)
        .map(|d| (lv.data()[d] + lv.data()[40 + d]) / 2.0)
        .collect();
    close(c.data(), &mean, TIGHT);
    for t in 0..2 {
        close(
            &p.data()[t * 32..(t + 1) * 32],
            &lv.data()[t * 40 + 8..(t + 1) * 40],
            TIGHT,
        );
    }
}

#[test]
fn fuse_level_gradient_through_projection() {
    let (cls, pat) = (random(&[2, 8], 12), random(&[2, 2, 4, 8], 13));
    let lv = random(&[2, 2, 5, 8], 14);
    let mut p = ParamSet::new();
    p.insert("w", random(&[8, 8], 15).map(|v| v * 0.3));
    let (_, rep) = grad_check_params(
        |g, b| {
            let prev = seq(g, &cls, &pat);
            let x = g.constant(lv.clone());
            let out = fuse_level_input(g, prev, x, b.get("w")?)?;
            let flat = g.reshape(out.patches, &[2, 64])?;
            let y = g.concat(&[out.video_cls, flat], 1)?;
            let y = g.gelu(y);
            weighted_sum(g, y, 16)
        },
        &p,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn fuse_level_shape_mismatch() {
    let mut g = Graph::new();
    let prev = seq(
        &mut g,
        &Tensor::zeros(&[1, 8]),
        &Tensor::zeros(&[1, 2, 4, 8]),
    );
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 8]));
    let w = g.constant(Tensor::eye(8));
    assert!(fuse_level_input(&mut g, prev, x, w).is_err());
}

// ---- intra-frame ----

#[test]
fn intra_residual_identity() {
    let cfg = tiny_config();
    let mut p = randomize(&init_branch(&cfg, None, 17).unwrap(), 80, 0.5);
    let pre = "layers.0.intra";
    zero(
        &mut p,
        &[
            format!("{pre}.attn.w_v"),
            format!("{pre}.mlp.fc2.w"),
            format!("{pre}.mlp.fc2.b"),
        ],
    );
    let (cls, pat) = (random(&[2, 8], 18), random(&[2, 2, 4, 8], 19));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let s = seq(&mut g, &cls, &pat);
    let out = intra_frame_forward(&mut g, &b, pre, s, &cfg).unwrap();
    let (c, q) = values(&g, out);
    close(c.data(), cls.data(), TIGHT);
    assert!(q.bitwise_eq(&pat));
}

#[test]
fn intra_identical_frames_match_single_frame() {
    let cfg = tiny_config();
    let p = randomize(&init_branch(&cfg, None, 20).unwrap(), 90, 0.5);
    let pre = "layers.1.intra";
    let cls = random(&[1, 8], 21);
    let frame = random(&[1, 1, 4, 8], 22);
    let mut two = frame.data().to_vec();
    two.extend_from_slice(frame.data());
    let two = Tensor::new(&[1, 2, 4, 8], two).unwrap();
    let run = |patches: &Tensor| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let s = seq(&mut g, &cls, patches);
        let out = intra_frame_forward(&mut g, &b, pre, s, &cfg).unwrap();
        values(&g, out)
    };
    let (c1, p1) = run(&frame);
    let (c2, p2) = run(&two);
    close(c2.data(), c1.data(), TIGHT);
    close(&p2.data()[..32], p1.data(), 0.0);
    close(&p2.data()[32..], p1.data(), 0.0);
}

#[test]
fn intra_single_patch_matches_brute_force() {
    let cfg = ModelConfig {
        frames: 1,
        grid_h: 1,
        grid_w: 1,
        heads: 1,
        ..tiny_config()
    };
    let p = randomize(&init_branch(&cfg, None, 23).unwrap(), 100, 0.4);
    let pre = "layers.0.intra";
    let (cls, pat) = (random(&[1, 8], 24), random(&[1, 1, 1, 8], 25));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let s = seq(&mut g, &cls, &pat);
    let out = intra_frame_forward(&mut g, &b, pre, s, &cfg).unwrap();
    let (c, q) = values(&g, out);
    let oracle = block(
        &[cls.data().to_vec(), pat.data().to_vec()],
        &p,
        pre,
        cfg.ln_eps,
    );
    close(c.data(), &oracle[0], TIGHT);
    close(q.data(), &oracle[1], TIGHT);
}

#[test]
fn intra_at_one_frame_reproduces_backbone_layer() {
    let cfg = ModelConfig {
        frames: 1,
        intra_init_from_backbone: true,
        ..tiny_config()
    };
    let bb = randomize(&init_backbone(&cfg, 26), 110, 0.5);
    let p = init_branch(&cfg, Some(&bb), 27).unwrap();
    let tokens = random(&[1, cfg.patches() + 1, cfg.dim], 28);
    // levels are {1, 2}: branch layer 1 copies backbone layer 2 (index 1)
    let mut g = Graph::new();
    let bbb = bb.bind(&mut g, false);
    let x = g.constant(tokens.clone());
    let y = backbone_layer_forward(&mut g, &bbb, 1, x, &cfg).unwrap();
    let expect = g.value(y).clone();

    let b = p.bind(&mut g, false);
    let cls = Tensor::new(&[1, cfg.dim], row(&tokens, 0)).unwrap();
    let pat = Tensor::new(
        &[1, 1, cfg.patches(), cfg.dim],
        tokens.data()[cfg.dim..].to_vec(),
    )
    .unwrap();
    let s = seq(&mut g, &cls, &pat);
    let out = intra_frame_forward(&mut g, &b, "layers.1.intra", s, &cfg).unwrap();
    let (c, q) = values(&g, out);
    close(c.data(), &expect.data()[..cfg.dim], TIGHT);
    close(q.data(), &expect.data()[cfg.dim..], TIGHT);
}

// ---- cross-frame attention ----

#[test]
fn cross_attention_single_frame() {
    let cfg = ModelConfig {
        frames: 1,
        ..tiny_config()
    };
    let mut p = randomize(&init_branch(&cfg, None, 29).unwrap(), 120, 0.5);
    let pre = "layers.0.cross";
    *p.get_mut(&format!("{pre}.attn.w_o")).unwrap() = Tensor::eye(8);
    let (cls, pat) = (random(&[1, 8], 30), random(&[1, 1, 4, 8], 31));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let s = seq(&mut g, &cls, &pat);
    let out = cross_frame_attention(&mut g, &b, pre, s, &cfg).unwrap();
    let (c, q) = values(&g, out);
    assert!(c.bitwise_eq(&cls));
    let gamma = p.get(&format!("{pre}.ln.gamma")).unwrap().data();
    let beta = p.get(&format!("{pre}.ln.beta")).unwrap().data();
    let wv = p.get(&format!("{pre}.attn.w_v")).unwrap();
    for j in 0..4 {
        let y = row(&pat, j);
        let expect = add(&vec_mat(&layer_norm(&y, gamma, beta, cfg.ln_eps), wv), &y);
        close(&row(&q, j), &expect, TIGHT);
    }
}

#[test]
fn cross_attention_permutation_equivariant() {
    let cfg = ModelConfig {
        frames: 4,
        ..tiny_config()
    };
    let p = randomize(&init_branch(&cfg, None, 32).unwrap(), 130, 0.5);
    let (cls, pat) = (random(&[1, 8], 33), random(&[1, 4, 4, 8], 34));
    let perm = [3, 1, 0, 2];
    let mut shuffled = Vec::new();
    for &i in &perm {
        shuffled.extend_from_slice(&pat.data()[i * 32..(i + 1) * 32]);
    }
    let shuffled = Tensor::new(pat.shape(), shuffled).unwrap();
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let s = seq(&mut g, &cls, x);
        {
            let o = cross_frame_attention(&mut g, &b, "layers.0.cross", s, &cfg).unwrap();
            values(&g, o)
        }
        .1
    };
    let (a, bq) = (run(&pat), run(&shuffled));
    for (j, &i) in perm.iter().enumerate() {
        close(
            &bq.data()[j * 32..(j + 1) * 32],
            &a.data()[i * 32..(i + 1) * 32],
            TIGHT,
        );
    }
}

#[test]
fn cross_attention_two_frames_matches_brute_force() {
    let cfg = ModelConfig {
        dim: 4,
        heads: 1,
        ..tiny_config()
    };
    let p = randomize(&init_branch(&cfg, None, 35).unwrap(), 140, 0.6);
    let pre = "layers.1.cross";
    let (cls, pat) = (random(&[1, 4], 36), random(&[1, 2, 4, 4], 37));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let s = seq(&mut g, &cls, &pat);
    let q = {
        let o = cross_frame_attention(&mut g, &b, pre, s, &cfg).unwrap();
        values(&g, o)
    }
    .1;
    let gamma = p.get(&format!("{pre}.ln.gamma")).unwrap().data();
    let beta = p.get(&format!("{pre}.ln.beta")).unwrap().data();
    for j in 0..4 {
        let ys: Vec<Vec<f64>> = (0..2).map(|t| row(&pat, t * 4 + j)).collect();
        let normed: Vec<_> = ys
            .iter()
            .map(|y| layer_norm(y, gamma, beta, cfg.ln_eps))
            .collect();
        let att = single_head_attention(&normed, &p, &format!("{pre}.attn"));
        for t in 0..2 {
            close(&row(&q, t * 4 + j), &add(&ys[t], &att[t]), TIGHT);
        }
    }
}

#[test]
fn cross_modules_reject_wrong_variant() {
    let cfg = tiny_config();
    let p = init_branch(&cfg, None, 38).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let s = seq(
        &mut g,
        &Tensor::zeros(&[1, 8]),
        &Tensor::zeros(&[1, 2, 4, 8]),
    );
    assert!(matches!(
        cross_frame_conv(&mut g, &b, "layers.0.cross", s, &cfg),
        Err(stan_core::Error::Config(_))
    ));
    let ccfg = conv_config();
    assert!(matches!(
        cross_frame_attention(&mut g, &b, "layers.0.cross", s, &ccfg),
        Err(stan_core::Error::Config(_))
    ));
}

// ---- cross-frame conv ----

#[test]
fn conv_zero_up_is_identity() {
    let cfg = conv_config();
    let mut p = randomize(&init_branch(&cfg, None, 39).unwrap(), 150, 0.5);
    let pre = "layers.0.cross";
    zero(&mut p, &[format!("{pre}.up.w"), format!("{pre}.up.b")]);
    let (cls, pat) = (random(&[2, 8], 40), random(&[2, 2, 4, 8], 41));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let s = seq(&mut g, &cls, &pat);
    let (c, q) = {
        let o = cross_frame_conv(&mut g, &b, pre, s, &cfg).unwrap();
        values(&g, o)
    };
    assert!(c.bitwise_eq(&cls) && q.bitwise_eq(&pat));
}

#[test]
fn conv_impulse_stays_in_temporal_window() {
    let cfg = ModelConfig {
        frames: 5,
        dim: 16,
        ..conv_config()
    };
    let p = randomize(&init_branch(&cfg, None, 42).unwrap(), 160, 0.8);
    let pre = "layers.0.cross";
    let cls = random(&[1, 16], 43);
    let base = random(&[1, 5, 4, 16], 44);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let s = seq(&mut g, &cls, x);
        {
            let o = cross_frame_conv(&mut g, &b, pre, s, &cfg).unwrap();
            values(&g, o)
        }
        .1
    };
    let y0 = run(&base);
    for (t, j) in [(0, 1), (2, 3), (4, 0)] {
        let mut x = base.clone();
        x.data_mut()[(t * 4 + j) * 16] += 1.0;
        let y = run(&x);
        for tt in 0..5 {
            for jj in 0..4 {
                let off = (tt * 4 + jj) * 16;
                let delta: f64 = (0..16)
                    .map(|d| (y.data()[off + d] - y0.data()[off + d]).abs())
                    .sum();
                let inside = jj == j && tt + 1 >= t && tt <= t + 1;
                if inside {
                    assert!(delta > 1e-9, "no response at frame {tt}");
                } else {
                    assert_eq!(delta, 0.0, "leak to frame {tt}, patch {jj}");
                }
            }
        }
    }
}

#[test]
fn conv_bottleneck_is_dim_over_eight() {
    let cfg = ModelConfig {
        cross_frame_variant: CrossFrameVariant::Conv3d,
        ..ModelConfig::default()
    };
    assert_eq!(cfg.dim, 64);
    let p = init_branch(&cfg, None, 45).unwrap();
    assert_eq!(p.get("layers.0.cross.down.w").unwrap().shape(), &[64, 8]);
    assert_eq!(
        p.get("layers.0.cross.conv.w").unwrap().shape(),
        &[8, 8, 3, 1, 1]
    );
    assert_eq!(p.get("layers.0.cross.up.w").unwrap().shape(), &[8, 64]);
    assert!(!p.contains("layers.0.cross.attn.w_q"));
}

#[test]
fn conv_rejects_non_grid_patch_count() {
    let cfg = conv_config();
    let p = init_branch(&cfg, None, 46).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let s = seq(
        &mut g,
        &Tensor::zeros(&[1, 8]),
        &Tensor::zeros(&[1, 2, 3, 8]),
    );
    assert!(cross_frame_conv(&mut g, &b, "layers.0.cross", s, &cfg).is_err());
}

// ---- stan layer ----

#[test]
fn layer_identity_configured_is_identity() {
    for cfg in [tiny_config(), conv_config()] {
        let mut p = randomize(&init_branch(&cfg, None, 47).unwrap(), 170, 0.5);
        let mut z = vec![
            "layers.0.intra.attn.w_v".to_string(),
            "layers.0.intra.mlp.fc2.w".into(),
            "layers.0.intra.mlp.fc2.b".into(),
        ];
        match cfg.cross_frame_variant {
            CrossFrameVariant::SelfAttention => z.push("layers.0.cross.attn.w_o".into()),
            CrossFrameVariant::Conv3d => {
                z.extend(["layers.0.cross.up.w".into(), "layers.0.cross.up.b".into()])
            }
        }
        zero(&mut p, &z);
        let (cls, pat) = (random(&[2, 8], 48), random(&[2, 2, 4, 8], 49));
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let s = seq(&mut g, &cls, &pat);
        let (c, q) = {
            let o = stan_layer_forward(&mut g, &b, 0, s, &cfg).unwrap();
            values(&g, o)
        };
        close(c.data(), cls.data(), TIGHT);
        close(q.data(), pat.data(), TIGHT);
    }
}

#[test]
fn layer_preserves_shape_under_all_switches() {
    for variant in [CrossFrameVariant::SelfAttention, CrossFrameVariant::Conv3d] {
        for (cross, intra) in [(true, true), (true, false), (false, true), (false, false)] {
            let cfg = ModelConfig {
                frames: 3,
                dim: 16,
                cross_frame_variant: variant,
                switches: Switches {
                    cross_frame: cross,
                    intra_frame: intra,
                    ..Switches::ALL
                },
                ..tiny_config()
            };
            let p = init_branch(&cfg, None, 50).unwrap();
            let (cls, pat) = (random(&[3, 16], 51), random(&[3, 3, 4, 16], 52));
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let s = seq(&mut g, &cls, &pat);
            let out = stan_layer_forward(&mut g, &b, 1, s, &cfg).unwrap();
            assert_eq!(out.shapes(&g), (vec![3, 16], vec![3, 3, 4, 16]));
            if !cross && !intra {
                assert_eq!(out, s);
            }
        }
    }
}

fn layer_grad_check(cfg: &ModelConfig, seed: u64) {
    let full = randomize(&init_branch(cfg, None, seed).unwrap(), seed * 10, 0.5);
    let mut layer = ParamSet::new();
    for (k, v) in full.iter() {
        if k.starts_with("layers.0.") {
            layer.insert(k.clone(), v.clone());
        }
    }
    let (cls, pat) = (random(&[1, 8], seed + 1), random(&[1, 2, 4, 8], seed + 2));
    let (_, rep) = grad_check_params(
        |g, b| {
            let s = seq(g, &cls, &pat);
            let out = stan_layer_forward(g, b, 0, s, cfg)?;
            let a = weighted_sum(g, out.video_cls, seed + 3)?;
            let c = weighted_sum(g, out.patches, seed + 4)?;
            g.add(a, c)
        },
        &layer,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(rep.passed(), "{:?}: {rep:?}", cfg.cross_frame_variant);
}

#[test]
fn layer_gradient_check_self_attention() {
    layer_grad_check(&tiny_config(), 53);
}

#[test]
fn layer_gradient_check_conv() {
    layer_grad_check(&conv_config(), 54);
}

// ---- stan_forward ----

#[test]
fn default_branch_depth_is_four() {
    assert_eq!(ModelConfig::default().branch_layers, 4);
}

#[test]
fn single_layer_chain_is_first_input_then_layer() {
    let cfg = ModelConfig {
        branch_layers: 1,
        ..tiny_config()
    };
    let p = randomize(&init_branch(&cfg, None, 55).unwrap(), 180, 0.5);
    let lv = random(&[2, 2, 5, 8], 56);
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(lv);
    let chained = stan_forward(&mut g, &b, &[x], &cfg, false, &mut rng()).unwrap();
    let first = build_first_input(&mut g, &b, x, &cfg, false, &mut rng()).unwrap();
    let manual = stan_layer_forward(&mut g, &b, 0, first, &cfg).unwrap();
    let (a, bb) = (values(&g, chained), values(&g, manual));
    assert!(a.0.bitwise_eq(&bb.0) && a.1.bitwise_eq(&bb.1));
}

#[test]
fn chain_fuses_each_level_before_its_layer() {
    let cfg = tiny_config();
    let p = randomize(&init_branch(&cfg, None, 57).unwrap(), 190, 0.5);
    let (l0, l1) = (random(&[1, 2, 5, 8], 58), random(&[1, 2, 5, 8], 59));
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let (x0, x1) = (g.constant(l0), g.constant(l1));
    let chained = stan_forward(&mut g, &b, &[x0, x1], &cfg, false, &mut rng()).unwrap();
    let s = build_first_input(&mut g, &b, x0, &cfg, false, &mut rng()).unwrap();
    let s = stan_layer_forward(&mut g, &b, 0, s, &cfg).unwrap();
    let s = fuse_level_input(&mut g, s, x1, b.get("layers.1.w_proj").unwrap()).unwrap();
    let s = stan_layer_forward(&mut g, &b, 1, s, &cfg).unwrap();
    assert!(values(&g, chained).1.bitwise_eq(&values(&g, s).1));

    // without multi-level input both layers read the last level
    let flat = ModelConfig {
        switches: Switches {
            multilevel: false,
            ..Switches::ALL
        },
        ..cfg.clone()
    };
    let a = stan_forward(&mut g, &b, &[x0, x1], &flat, false, &mut rng()).unwrap();
    let c = stan_forward(&mut g, &b, &[x1, x1], &cfg, false, &mut rng()).unwrap();
    assert!(values(&g, a).0.bitwise_eq(&values(&g, c).0));
}

#[test]
fn chain_rejects_wrong_level_count() {
    let cfg = tiny_config();
    let p = init_branch(&cfg, None, 60).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(&[1, 2, 5, 8]));
    assert!(stan_forward(&mut g, &b, &[x], &cfg, false, &mut rng()).is_err());
    assert!(stan_forward(&mut g, &b, &[x, x, x], &cfg, false, &mut rng()).is_err());
}

// ---- fusion and whole-model properties ----

fn clips(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            random(
                &[
                    cfg.frames,
                    cfg.channels,
                    cfg.frame_height(),
                    cfg.frame_width(),
                ],
                seed + i as u64,
            )
        })
        .collect()
}

fn embed(model: &VideoModel, clips: &[Tensor]) -> Tensor {
    let layers: BTreeSet<usize> = model.required_layers().unwrap();
    let bank = FeatureBank::build(clips, &model.backbone, &model.config, &layers).unwrap();
    let idx: Vec<usize> = (0..clips.len()).collect();
    let feats = bank.batch(&idx, &model.config).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false).unwrap();
    let v = model
        .video_embed(&mut g, &bound, &feats, false, &mut rng())
        .unwrap();
    g.value(v).clone()
}

fn baseline_oracle(
    model: &VideoModel,
    clips: &[Tensor],
    extra: Option<(&Tensor, f64)>,
) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let bb = &model.backbone;
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let outs = stan_core::encoders::backbone_forward_all(c, bb, cfg).unwrap();
            let last = outs.last().unwrap();
            let per = (cfg.patches() + 1) * cfg.dim;
            let mut pre: Vec<f64> = (0..cfg.dim)
                .map(|d| {
                    (0..cfg.frames)
                        .map(|t| last.data()[t * per + d])
                        .sum::<f64>()
                        / cfg.frames as f64
                })
                .collect();
            if let Some((cls, alpha)) = extra {
                pre = add(
                    &pre,
                    &row(cls, i).iter().map(|v| v * alpha).collect::<Vec<_>>(),
                );
            }
            let normed = layer_norm(
                &pre,
                bb.get("ln_post.gamma").unwrap().data(),
                bb.get("ln_post.beta").unwrap().data(),
                cfg.ln_eps,
            );
            vec_mat(&normed, bb.get("proj").unwrap())
        })
        .collect()
}

#[test]
fn zero_init_branch_equals_mean_pool_baseline() {
    for variant in [CrossFrameVariant::SelfAttention, CrossFrameVariant::Conv3d] {
        let cfg = ModelConfig {
            zero_init_branch: true,
            cross_frame_variant: variant,
            ..tiny_config()
        };
        let mut model = VideoModel::new(cfg.clone(), 61, 3).unwrap();
        model.backbone = randomize(&model.backbone, 200, 0.5);
        let cs = clips(&cfg, 3, 62);
        let with_branch = embed(&model, &cs);
        let mut base = model.clone();
        base.config.switches = Switches::NONE;
        let without = embed(&base, &cs);
        close(with_branch.data(), without.data(), TIGHT);
        let oracle: Vec<f64> = baseline_oracle(&model, &cs, None).concat();
        close(without.data(), &oracle, TIGHT);
    }
}

#[test]
fn fusion_is_linear_in_alpha_before_norm() {
    let cfg = tiny_config();
    let model = VideoModel::new(cfg.clone(), 63, 3).unwrap();
    let bb = randomize(&model.backbone, 210, 0.5);
    let final_out = random(&[2, 2, 5, 8], 64);
    let cls = random(&[2, 8], 65);
    for alpha in [0.7, 1.4] {
        let mut g = Graph::new();
        let bo = bb.bind_some(&mut g, &OUTPUT_PARAMS, false).unwrap();
        let f = g.constant(final_out.clone());
        let s = seq(&mut g, &cls, &Tensor::zeros(&[2, 2, 4, 8]));
        let a = g.constant(Tensor::scalar(alpha));
        let v = fuse_final(&mut g, &bo, f, Some(s), Some(a), &cfg).unwrap();
        for bi in 0..2 {
            let mut pre: Vec<f64> = (0..8)
                .map(|d| (final_out.data()[bi * 80 + d] + final_out.data()[bi * 80 + 40 + d]) / 2.0)
                .collect();
            pre = add(
                &pre,
                &row(&cls, bi).iter().map(|c| c * alpha).collect::<Vec<_>>(),
            );
            let normed = layer_norm(
                &pre,
                bb.get("ln_post.gamma").unwrap().data(),
                bb.get("ln_post.beta").unwrap().data(),
                cfg.ln_eps,
            );
            close(
                &row(g.value(v), bi),
                &vec_mat(&normed, bb.get("proj").unwrap()),
                TIGHT,
            );
        }
    }
}

#[test]
fn posterior_mode_embeds_stan_cls_only() {
    let cfg = ModelConfig {
        switches: Switches {
            branch: false,
            ..Switches::ALL
        },
        ..tiny_config()
    };
    let model = VideoModel::new(cfg.clone(), 66, 3).unwrap();
    let cs = clips(&cfg, 2, 67);
    let got = embed(&model, &cs);

    let bank =
        FeatureBank::build(&cs, &model.backbone, &cfg, &BTreeSet::from([cfg.depth])).unwrap();
    let last = Tensor::new(
        &[2, cfg.frames, cfg.patches() + 1, cfg.dim],
        [
            bank.layer(0, cfg.depth).unwrap().data(),
            bank.layer(1, cfg.depth).unwrap().data(),
        ]
        .concat(),
    )
    .unwrap();
    let mut g = Graph::new();
    let b = model.branch.bind(&mut g, false);
    let x = g.constant(last);
    let s = stan_forward(&mut g, &b, &[x, x], &cfg, false, &mut rng()).unwrap();
    let stan_cls = g.value(s.video_cls).clone();
    let bb = &model.backbone;
    for bi in 0..2 {
        let normed = layer_norm(
            &row(&stan_cls, bi),
            bb.get("ln_post.gamma").unwrap().data(),
            bb.get("ln_post.beta").unwrap().data(),
            cfg.ln_eps,
        );
        close(
            &row(&got, bi),
            &vec_mat(&normed, bb.get("proj").unwrap()),
            TIGHT,
        );
    }
}

#[test]
fn gradients_reach_branch_but_not_backbone() {
    let cfg = tiny_config();
    let model = VideoModel::new(cfg.clone(), 68, 3).unwrap();
    let cs = clips(&cfg, 2, 69);
    let bank = FeatureBank::build(
        &cs,
        &model.backbone,
        &cfg,
        &model.required_layers().unwrap(),
    )
    .unwrap();
    let feats = bank.batch(&[0, 1], &cfg).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true).unwrap();
    let v = model
        .video_embed(&mut g, &bound, &feats, true, &mut rng())
        .unwrap();
    let loss = weighted_sum(&mut g, v, 70).unwrap();
    let grads = g.backward(loss).unwrap();
    for (name, &var) in bound.backbone_out.vars() {
        assert!(
            !grads.has(var),
            "backbone parameter {name} received a gradient"
        );
    }
    let branch = bound.branch.gradients(&grads);
    let touched = branch
        .iter()
        .filter(|(_, t)| t.data().iter().any(|&x| x != 0.0))
        .count();
    assert!(branch.get("alpha").unwrap().data()[0] != 0.0);
    assert!(branch
        .get("layers.0.cross.attn.w_q")
        .unwrap()
        .data()
        .iter()
        .any(|&x| x != 0.0));
    assert!(branch
        .get("layers.1.intra.mlp.fc1.w")
        .unwrap()
        .data()
        .iter()
        .any(|&x| x != 0.0));
    assert!(
        touched * 10 >= branch.len() * 9,
        "{touched} of {}",
        branch.len()
    );
}

#[test]
fn without_temporal_positions_frame_order_is_invisible() {
    let cfg = ModelConfig {
        frames: 3,
        ..tiny_config()
    };
    let mut model = VideoModel::new(cfg.clone(), 71, 3).unwrap();
    model.branch = randomize(&model.branch, 220, 0.5);
    let c = clips(&cfg, 1, 72).remove(0);
    let per = c.numel() / cfg.frames;
    let mut rev = Vec::new();
    for t in (0..cfg.frames).rev() {
        rev.extend_from_slice(&c.data()[t * per..(t + 1) * per]);
    }
    let rev = Tensor::new(c.shape(), rev).unwrap();

    let a = embed(&model, std::slice::from_ref(&c));
    let b = embed(&model, std::slice::from_ref(&rev));
    assert!(a.max_abs_diff(&b) > 1e-6, "pos_t should make order visible");

    *model.branch.get_mut("pos_t").unwrap() = Tensor::zeros(&[cfg.frames, cfg.dim]);
    let a = embed(&model, std::slice::from_ref(&c));
    let b = embed(&model, std::slice::from_ref(&rev));
    close(a.data(), b.data(), 1e-10);
}

#[test]
fn conv_layer_only_sees_neighbouring_frames_in_full_layer() {
    // the intra module is per-frame, so a whole conv layer keeps the window
    let cfg = ModelConfig {
        frames: 5,
        switches: Switches {
            intra_frame: true,
            ..Switches::ALL
        },
        ..conv_config()
    };
    let p = randomize(&init_branch(&cfg, None, 73).unwrap(), 230, 0.5);
    let cls = random(&[1, 8], 74);
    let base = random(&[1, 5, 4, 8], 75);
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let b = p.bind(&mut g, false);
        let s = seq(&mut g, &cls, x);
        {
            let o = stan_layer_forward(&mut g, &b, 0, s, &cfg).unwrap();
            values(&g, o)
        }
        .1
    };
    let y0 = run(&base);
    let mut x = base.clone();
    x.data_mut()[(2 * 4 + 1) * 8 + 3] += 0.5;
    let y = run(&x);
    for tt in 0..5 {
        let changed = y.data()[tt * 32..(tt + 1) * 32] != y0.data()[tt * 32..(tt + 1) * 32];
        assert_eq!(changed, (1..=3).contains(&tt), "frame {tt}");
    }
}

#[test]
fn layer_prefixes_are_stable() {
    assert_eq!(layer_prefix(3), "layers.3");
    let p = init_branch(&tiny_config(), None, 76).unwrap();
    assert!(!p.contains("layers.0.w_proj"));
    assert_eq!(p.get("layers.1.w_proj").unwrap().shape(), &[8, 8]);
    assert_eq!(p.get("pos_t").unwrap().shape(), &[2, 8]);
    assert_eq!(p.get("pos_s").unwrap().shape(), &[4, 8]);
    assert_eq!(p.get("alpha").unwrap().data(), &[1.0]);
}
