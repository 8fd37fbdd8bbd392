//! Frozen vision transformer with intermediate-level taps.

use super::config::{select_levels, ModelConfig};
use super::layers::{self, join};
use crate::error::{shape_err, Error, Result};
use crate::numerics::rng::{gaussian, stream_rng, streams};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bindings, ParamSet};

/// Token states of one clip after backbone layer `level_index` (1-based).
///
/// `tokens` is `[T, L + 1, D]`; position 0 of every frame is its CLS token.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFeatures {
    pub level_index: usize,
    pub tokens: Tensor,
}

impl LevelFeatures {
    pub fn new(level_index: usize, tokens: Tensor, config: &ModelConfig) -> Result<Self> {
        let expect = [config.frames, config.patches() + 1, config.dim];
        if tokens.shape() != expect {
            return Err(shape_err!(
                "level {} tokens {:?}, expected {:?}",
                level_index,
                tokens.shape(),
                expect
            ));
        }
        Ok(Self {
            level_index,
            tokens,
        })
    }
}

pub fn layer_prefix(i: usize) -> String {
    format!("layers.{i}")
}

/// Random backbone weights; output projections of every residual branch are
/// scaled down so deep stacks stay well conditioned.
pub fn init_backbone(config: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = stream_rng(seed, streams::BACKBONE_INIT);
    let d = config.dim;
    let patch_in = config.channels * config.patch_size * config.patch_size;
    let mut set = ParamSet::new();
    set.insert(
        "patch_proj",
        layers::init_matrix(&mut rng, patch_in, d, 1.0),
    );
    set.insert("cls", gaussian(&mut rng, &[d], 0.1));
    set.insert("pos", gaussian(&mut rng, &[config.patches() + 1, d], 0.1));
    let out_gain = 1.0 / (config.depth as f64).sqrt();
    for i in 0..config.depth {
        layers::init_block(&mut set, &layer_prefix(i), d, &mut rng, out_gain);
    }
    layers::init_layer_norm(&mut set, "ln_post", d);
    set.insert("proj", layers::init_matrix(&mut rng, d, d, 1.0));
    set
}

/// Flattens non-overlapping patches of `[N, C, H, W]` frames into
/// `[N, L, C * p * p]`, patches in row-major grid order.
pub fn patch_pixels(frames: &Tensor, patch_size: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(shape_err!("frames must be [N, C, H, W], got {:?}", s));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(shape_err!(
            "frame {}x{} not divisible by patch size {}",
            h,
            w,
            patch_size
        ));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let p = patch_size;
    let fd = frames.data();
    let mut out = Vec::with_capacity(fd.len());
    for f in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        let row = ((f * c + ch) * h + gy * p + py) * w + gx * p;
                        out.extend_from_slice(&fd[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[n, gh * gw, c * p * p], out)
}

/// Patch tokens plus a leading CLS token, with position embeddings: `[N, L + 1, D]`.
pub fn patchify(g: &mut Graph, b: &Bindings, frames: &Tensor, config: &ModelConfig) -> Result<Var> {
    let pix = patch_pixels(frames, config.patch_size)?;
    let n = pix.shape()[0];
    if pix.shape()[1] != config.patches() || frames.shape()[1] != config.channels {
        return Err(shape_err!(
            "frames {:?} do not match a {}x{} grid of {}-channel patches",
            frames.shape(),
            config.grid_h,
            config.grid_w,
            config.channels
        ));
    }
    let pix = g.constant(pix);
    let tokens = g.matmul(pix, b.get("patch_proj")?)?;
    let cls = g.reshape(b.get("cls")?, &[1, 1, config.dim])?;
    let cls = g.expand(cls, 0, n)?;
    let seq = g.concat(&[cls, tokens], 1)?;
    g.add(seq, b.get("pos")?)
}

/// One backbone layer over `[N, L + 1, D]`; frames never interact.
pub fn backbone_layer_forward(
    g: &mut Graph,
    b: &Bindings,
    layer: usize,
    tokens: Var,
    config: &ModelConfig,
) -> Result<Var> {
    let s = g.shape(tokens);
    if s.len() != 3 || s[1] != config.patches() + 1 || s[2] != config.dim {
        return Err(shape_err!("backbone layer input {:?}", s));
    }
    layers::block(
        g,
        b,
        &layer_prefix(layer),
        tokens,
        config.heads,
        config.ln_eps,
        None,
    )
}

/// `W_out · LN(x)` over the last axis, using the backbone's final norm and projection.
pub fn project_output(g: &mut Graph, b: &Bindings, x: Var, config: &ModelConfig) -> Result<Var> {
    let h = layers::layer_norm(g, b, "ln_post", x, config.ln_eps)?;
    g.matmul(h, b.get("proj")?)
}

/// Names of the backbone parameters used after the last layer.
pub const OUTPUT_PARAMS: [&str; 3] = ["ln_post.gamma", "ln_post.beta", "proj"];

/// Outputs of every layer for `[N, C, H, W]` frames, each `[N, L + 1, D]`.
///
/// Runs in its own graph; the returned tensors carry no gradient history.
pub fn backbone_forward_all(
    frames: &Tensor,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let mut x = patchify(&mut g, &b, frames, config)?;
    let mut outs = Vec::with_capacity(config.depth);
    for i in 0..config.depth {
        x = backbone_layer_forward(&mut g, &b, i, x, config)?;
        outs.push(g.value(x).clone());
    }
    Ok(outs)
}

/// Runs the backbone over one clip `[T, C, H, W]`, returning the selected
/// levels (ascending) and the final-layer output `[T, L + 1, D]`.
pub fn backbone_forward_multilevel(
    frames: &Tensor,
    params: &ParamSet,
    config: &ModelConfig,
) -> Result<(Vec<LevelFeatures>, Tensor)> {
    let levels = select_levels(config)?;
    if frames.shape().first() != Some(&config.frames) {
        return Err(shape_err!(
            "clip {:?} does not have {} frames",
            frames.shape(),
            config.frames
        ));
    }
    let all = backbone_forward_all(frames, params, config)?;
    let picked = levels
        .iter()
        .map(|&l| LevelFeatures::new(l, all[l - 1].clone(), config))
        .collect::<Result<Vec<_>>>()?;
    let last = all
        .into_iter()
        .last()
        .ok_or_else(|| Error::Config("backbone has no layers".into()))?;
    Ok((picked, last))
}

/// Names of one backbone layer's parameters.
pub fn layer_param_names(layer: usize) -> Vec<String> {
    let p = layer_prefix(layer);
    [
        "ln1.gamma",
        "ln1.beta",
        "attn.w_q",
        "attn.w_k",
        "attn.w_v",
        "attn.w_o",
        "ln2.gamma",
        "ln2.beta",
        "mlp.fc1.w",
        "mlp.fc1.b",
        "mlp.fc2.w",
        "mlp.fc2.b",
    ]
    .iter()
    .map(|n| join(&p, n))
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_pixels_order() {
        // one 1-channel 4x4 frame, patch 2
        let f = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = patch_pixels(&f, 2).unwrap();
        assert_eq!(p.shape(), &[1, 4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn patchify_token_count_and_divisibility() {
        let cfg = ModelConfig::default();
        let params = init_backbone(&cfg, 0);
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let frames = Tensor::zeros(&[2, 1, 16, 16]);
        let x = patchify(&mut g, &b, &frames, &cfg).unwrap();
        assert_eq!(g.shape(x), &[2, 17, 64]);
        let bad = Tensor::zeros(&[2, 1, 15, 16]);
        assert!(patchify(&mut g, &b, &bad, &cfg).is_err());
    }

    #[test]
    fn zero_frames_give_cls_and_zero_patches() {
        let cfg = ModelConfig::default();
        let mut params = init_backbone(&cfg, 0);
        *params.get_mut("patch_proj").unwrap() = Tensor::zeros(&[16, 64]);
        *params.get_mut("pos").unwrap() = Tensor::zeros(&[17, 64]);
        let mut g = Graph::new();
        let b = params.bind(&mut g, false);
        let x = patchify(&mut g, &b, &Tensor::zeros(&[1, 1, 16, 16]), &cfg).unwrap();
        let v = g.value(x).data();
        assert_eq!(&v[..64], params.get("cls").unwrap().data());
        assert!(v[64..].iter().all(|&z| z == 0.0));
    }
}
