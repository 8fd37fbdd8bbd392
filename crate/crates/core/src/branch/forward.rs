use super::params::layer_prefix;
use crate::encoders::backbone;
use crate::encoders::config::{CrossFrameVariant, ModelConfig};
use crate::encoders::layers::{self, join};
use crate::error::{shape_err, Error, Result};
use crate::numerics::rng::StreamRng;
use crate::numerics::{Graph, Var};
use crate::params::Bindings;

/// Branch state: one video CLS token plus the patch tokens of every frame.
///
/// Shapes carry a leading batch dim: `video_cls` is `[B, D]`, `patches` is
/// `[B, T, L, D]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StanSequence {
    pub video_cls: Var,
    pub patches: Var,
}

impl StanSequence {
    pub fn shapes(&self, g: &Graph) -> (Vec<usize>, Vec<usize>) {
        (
            g.shape(self.video_cls).to_vec(),
            g.shape(self.patches).to_vec(),
        )
    }
}

fn check_level(g: &Graph, level: Var, config: &ModelConfig) -> Result<usize> {
    let s = g.shape(level);
    if s.len() != 4 || s[1] != config.frames || s[2] != config.patches() + 1 || s[3] != config.dim {
        return Err(shape_err!(
            "level features {:?}, expected [B, {}, {}, {}]",
            s,
            config.frames,
            config.patches() + 1,
            config.dim
        ));
    }
    Ok(s[0])
}

/// Per-clip mean of the frame CLS tokens of `[B, T, L + 1, D]` features: `[B, D]`.
pub fn mean_frame_cls(g: &mut Graph, level: Var) -> Result<Var> {
    let s = g.shape(level).to_vec();
    let cls = g.narrow(level, 2, 0, 1)?;
    let cls = g.reshape(cls, &[s[0], s[1], s[3]])?;
    g.mean_axis(cls, 1)
}

fn frame_patches(g: &mut Graph, level: Var) -> Result<Var> {
    let l = g.shape(level)[2] - 1;
    g.narrow(level, 2, 1, l)
}

/// First-layer input: averaged frame CLS as the video CLS, and patches with
/// temporal and spatial position embeddings followed by dropout. The video
/// CLS receives neither.
pub fn build_first_input(
    g: &mut Graph,
    b: &Bindings,
    level: Var,
    config: &ModelConfig,
    training: bool,
    rng: &mut StreamRng,
) -> Result<StanSequence> {
    check_level(g, level, config)?;
    let (t, l, d) = (config.frames, config.patches(), config.dim);
    let video_cls = mean_frame_cls(g, level)?;
    let patches = frame_patches(g, level)?;
    let pos_t = g.reshape(b.get("pos_t")?, &[t, 1, d])?;
    let pos_t = g.expand(pos_t, 1, l)?;
    let patches = g.add(patches, pos_t)?;
    let patches = g.add(patches, b.get("pos_s")?)?;
    let patches = g.dropout(patches, config.dropout_p, training, rng)?;
    Ok(StanSequence { video_cls, patches })
}

/// Adds the projected level-`k` features to the previous layer's output.
pub fn fuse_level_input(
    g: &mut Graph,
    prev: StanSequence,
    level: Var,
    w_proj: Var,
) -> Result<StanSequence> {
    let (cls_shape, patch_shape) = prev.shapes(g);
    let ls = g.shape(level).to_vec();
    if ls.len() != 4
        || ls[0] != patch_shape[0]
        || ls[1] != patch_shape[1]
        || ls[2] != patch_shape[2] + 1
        || ls[3] != patch_shape[3]
    {
        return Err(shape_err!(
            "level {:?} does not match sequence cls {:?} / patches {:?}",
            ls,
            cls_shape,
            patch_shape
        ));
    }
    let cls = mean_frame_cls(g, level)?;
    let cls = g.matmul(cls, w_proj)?;
    let video_cls = g.add(prev.video_cls, cls)?;
    let patches = frame_patches(g, level)?;
    let patches = g.matmul(patches, w_proj)?;
    let patches = g.add(prev.patches, patches)?;
    Ok(StanSequence { video_cls, patches })
}

/// Spatial module: per frame, the video CLS is duplicated in front of that
/// frame's patches and the L + 1 tokens pass through one pre-norm
/// transformer block; the duplicates are then averaged back into one CLS.
pub fn intra_frame_forward(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    seq: StanSequence,
    config: &ModelConfig,
) -> Result<StanSequence> {
    let ps = g.shape(seq.patches).to_vec();
    let (bsz, t, l, d) = (ps[0], ps[1], ps[2], ps[3]);
    let cls = g.reshape(seq.video_cls, &[bsz, 1, 1, d])?;
    let cls = g.expand(cls, 1, t)?;
    let x = g.concat(&[cls, seq.patches], 2)?;
    let x = g.reshape(x, &[bsz * t, l + 1, d])?;
    let x = layers::block(g, b, prefix, x, config.heads, config.ln_eps, None)?;
    let x = g.reshape(x, &[bsz, t, l + 1, d])?;
    let video_cls = mean_frame_cls(g, x)?;
    let patches = g.narrow(x, 2, 1, l)?;
    Ok(StanSequence { video_cls, patches })
}

/// Temporal self-attention at each spatial position; the video CLS is untouched.
pub fn cross_frame_attention(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    seq: StanSequence,
    config: &ModelConfig,
) -> Result<StanSequence> {
    if config.cross_frame_variant != CrossFrameVariant::SelfAttention {
        return Err(Error::Config(format!(
            "cross-frame attention called with variant {}",
            config.cross_frame_variant
        )));
    }
    let ps = g.shape(seq.patches).to_vec();
    let (bsz, t, l, d) = (ps[0], ps[1], ps[2], ps[3]);
    let y = g.permute(seq.patches, &[0, 2, 1, 3])?;
    let y = g.reshape(y, &[bsz * l, t, d])?;
    let h = layers::layer_norm(g, b, &join(prefix, "ln"), y, config.ln_eps)?;
    let a = layers::multi_head_attention(g, b, &join(prefix, "attn"), h, config.heads, None)?;
    let y = g.add(y, a)?;
    let y = g.reshape(y, &[bsz, l, t, d])?;
    let patches = g.permute(y, &[0, 2, 1, 3])?;
    Ok(StanSequence {
        video_cls: seq.video_cls,
        patches,
    })
}

/// Bottlenecked temporal convolution `Up(gelu(Conv3d(Down(Y)))) + Y` with a
/// `(3, 1, 1)` kernel and temporal zero padding; the video CLS is untouched.
pub fn cross_frame_conv(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    seq: StanSequence,
    config: &ModelConfig,
) -> Result<StanSequence> {
    if config.cross_frame_variant != CrossFrameVariant::Conv3d {
        return Err(Error::Config(format!(
            "cross-frame conv called with variant {}",
            config.cross_frame_variant
        )));
    }
    let ps = g.shape(seq.patches).to_vec();
    let (bsz, t, l, d) = (ps[0], ps[1], ps[2], ps[3]);
    if l != config.grid_h * config.grid_w {
        return Err(Error::Config(format!(
            "{} patches do not form a {}x{} grid",
            l, config.grid_h, config.grid_w
        )));
    }
    let cube = g.reshape(seq.patches, &[bsz, t, config.grid_h, config.grid_w, d])?;
    let down = layers::affine(
        g,
        cube,
        b.get(&join(prefix, "down.w"))?,
        b.get(&join(prefix, "down.b"))?,
    )?;
    let conv = g.conv3d(
        down,
        b.get(&join(prefix, "conv.w"))?,
        Some(b.get(&join(prefix, "conv.b"))?),
        [1, 0, 0],
    )?;
    let act = g.gelu(conv);
    let up = layers::affine(
        g,
        act,
        b.get(&join(prefix, "up.w"))?,
        b.get(&join(prefix, "up.b"))?,
    )?;
    let y = g.add(cube, up)?;
    let patches = g.reshape(y, &[bsz, t, l, d])?;
    Ok(StanSequence {
        video_cls: seq.video_cls,
        patches,
    })
}

/// One branch layer: cross-frame module, then intra-frame module, each
/// skipped when switched off.
pub fn stan_layer_forward(
    g: &mut Graph,
    b: &Bindings,
    layer: usize,
    seq: StanSequence,
    config: &ModelConfig,
) -> Result<StanSequence> {
    let p = layer_prefix(layer);
    let mut seq = seq;
    if config.switches.cross_frame {
        let cross = join(&p, "cross");
        seq = match config.cross_frame_variant {
            CrossFrameVariant::SelfAttention => cross_frame_attention(g, b, &cross, seq, config)?,
            CrossFrameVariant::Conv3d => cross_frame_conv(g, b, &cross, seq, config)?,
        };
    }
    if config.switches.intra_frame {
        seq = intra_frame_forward(g, b, &join(&p, "intra"), seq, config)?;
    }
    Ok(seq)
}

/// Chains the branch layers over ascending level features (`[B, T, L + 1, D]`
/// each): layer 1 reads the first-input construction of `levels[0]`, every
/// later layer reads the previous output fused with its own level.
///
/// With multi-level input switched off, every layer reads the last level.
pub fn stan_forward(
    g: &mut Graph,
    b: &Bindings,
    levels: &[Var],
    config: &ModelConfig,
    training: bool,
    rng: &mut StreamRng,
) -> Result<StanSequence> {
    if levels.len() != config.branch_layers {
        return Err(Error::Config(format!(
            "{} level inputs for {} branch layers",
            levels.len(),
            config.branch_layers
        )));
    }
    let level_at = |k: usize| {
        if config.switches.multilevel {
            levels[k]
        } else {
            levels[levels.len() - 1]
        }
    };
    let mut seq = build_first_input(g, b, level_at(0), config, training, rng)?;
    seq = stan_layer_forward(g, b, 0, seq, config)?;
    for k in 1..config.branch_layers {
        let w_proj = b.get(&join(&layer_prefix(k), "w_proj"))?;
        seq = fuse_level_input(g, seq, level_at(k), w_proj)?;
        seq = stan_layer_forward(g, b, k, seq, config)?;
    }
    Ok(seq)
}

/// Final video embedding `[B, D]`.
///
/// - No branch output: `W_out · LN(mean_t CLS_t)`, the mean-pool baseline.
/// - Branch beside the backbone: `W_out · LN(mean_t CLS_t + alpha · video_cls)`.
/// - Branch appended after the backbone: `W_out · LN(video_cls)`.
pub fn fuse_final(
    g: &mut Graph,
    backbone_out: &Bindings,
    backbone_final: Var,
    stan_out: Option<StanSequence>,
    alpha: Option<Var>,
    config: &ModelConfig,
) -> Result<Var> {
    let pre = match stan_out {
        None => mean_frame_cls(g, backbone_final)?,
        Some(seq) if config.switches.branch => {
            let base = mean_frame_cls(g, backbone_final)?;
            let alpha = alpha.ok_or_else(|| Error::Param("branch fusion needs alpha".into()))?;
            let gated = g.mul_scalar(seq.video_cls, alpha)?;
            g.add(base, gated)?
        }
        Some(seq) => seq.video_cls,
    };
    backbone::project_output(g, backbone_out, pre, config)
}
