//! Pre-norm transformer pieces shared by the backbone, the text encoder and
//! the branch.

use crate::error::Result;
use crate::numerics::rng::{gaussian, StreamRng};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bindings, ParamSet};

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn init_layer_norm(set: &mut ParamSet, prefix: &str, dim: usize) {
    set.insert(join(prefix, "gamma"), Tensor::full(&[dim], 1.0));
    set.insert(join(prefix, "beta"), Tensor::zeros(&[dim]));
}

/// Gaussian `[fan_in, fan_out]` matrix with std `gain / sqrt(fan_in)`; all
/// zeros when `gain == 0`.
pub fn init_matrix(rng: &mut StreamRng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    if gain == 0.0 {
        return Tensor::zeros(&[fan_in, fan_out]);
    }
    gaussian(rng, &[fan_in, fan_out], gain / (fan_in as f64).sqrt())
}

/// Query/key/value/output projections; `out_gain` scales the output projection.
pub fn init_attention(
    set: &mut ParamSet,
    prefix: &str,
    dim: usize,
    rng: &mut StreamRng,
    out_gain: f64,
) {
    for w in ["w_q", "w_k", "w_v"] {
        set.insert(join(prefix, w), init_matrix(rng, dim, dim, 1.0));
    }
    set.insert(join(prefix, "w_o"), init_matrix(rng, dim, dim, out_gain));
}

pub fn init_mlp(set: &mut ParamSet, prefix: &str, dim: usize, rng: &mut StreamRng, out_gain: f64) {
    let hidden = 4 * dim;
    set.insert(join(prefix, "fc1.w"), init_matrix(rng, dim, hidden, 1.0));
    set.insert(join(prefix, "fc1.b"), Tensor::zeros(&[hidden]));
    set.insert(
        join(prefix, "fc2.w"),
        init_matrix(rng, hidden, dim, out_gain),
    );
    set.insert(join(prefix, "fc2.b"), Tensor::zeros(&[dim]));
}

/// Attention block plus MLP block, each behind its own layer norm.
pub fn init_block(
    set: &mut ParamSet,
    prefix: &str,
    dim: usize,
    rng: &mut StreamRng,
    out_gain: f64,
) {
    init_layer_norm(set, &join(prefix, "ln1"), dim);
    init_attention(set, &join(prefix, "attn"), dim, rng, out_gain);
    init_layer_norm(set, &join(prefix, "ln2"), dim);
    init_mlp(set, &join(prefix, "mlp"), dim, rng, out_gain);
}

pub fn layer_norm(g: &mut Graph, b: &Bindings, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gamma = b.get(&join(prefix, "gamma"))?;
    let beta = b.get(&join(prefix, "beta"))?;
    g.layer_norm(x, gamma, beta, eps)
}

pub fn affine(g: &mut Graph, x: Var, w: Var, bias: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}

/// Multi-head self-attention over the second-to-last axis of `x: [N, S, D]`.
///
/// `mask`, when given, is added to the `[N, heads, S, S]` scores.
pub fn multi_head_attention(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (n, s, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let split = |g: &mut Graph, name: &str| -> Result<Var> {
        let w = b.get(&join(prefix, name))?;
        let y = g.matmul(x, w)?;
        let y = g.reshape(y, &[n, s, heads, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = split(g, "w_q")?;
    let k = split(g, "w_k")?;
    let v = split(g, "w_v")?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let attn = g.softmax(scores, 3)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[n, s, d])?;
    let w_o = b.get(&join(prefix, "w_o"))?;
    g.matmul(ctx, w_o)
}

pub fn mlp(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = affine(
        g,
        x,
        b.get(&join(prefix, "fc1.w"))?,
        b.get(&join(prefix, "fc1.b"))?,
    )?;
    let h = g.gelu(h);
    affine(
        g,
        h,
        b.get(&join(prefix, "fc2.w"))?,
        b.get(&join(prefix, "fc2.b"))?,
    )
}

/// `x + Attn(LN(x))`, then `x + MLP(LN(x))`, on `x: [N, S, D]`.
pub fn block(
    g: &mut Graph,
    b: &Bindings,
    prefix: &str,
    x: Var,
    heads: usize,
    eps: f64,
    mask: Option<Var>,
) -> Result<Var> {
    let h = layer_norm(g, b, &join(prefix, "ln1"), x, eps)?;
    let a = multi_head_attention(g, b, &join(prefix, "attn"), h, heads, mask)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, b, &join(prefix, "ln2"), x, eps)?;
    let m = mlp(g, b, &join(prefix, "mlp"), h)?;
    g.add(x, m)
}
