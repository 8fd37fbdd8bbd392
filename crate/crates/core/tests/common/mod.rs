//! Plain-loop reference implementations used as independent oracles.
#![allow(dead_code)]

use stan_core::encoders::ModelConfig;
use stan_core::numerics::rng::{gaussian, stream_rng, streams};
use stan_core::numerics::{Graph, Tensor, Var};
use stan_core::params::ParamSet;
use stan_core::Result;

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    gaussian(&mut stream_rng(seed, streams::TEST_FIXTURE), shape, 1.0)
}

/// Contracts `out` against fixed random weights.
pub fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let w = g.constant(random(g.shape(out), seed ^ 0x5eed));
    let p = g.mul(out, w)?;
    Ok(g.sum_all(p))
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        frames: 2,
        grid_h: 2,
        grid_w: 2,
        patch_size: 2,
        dim: 8,
        depth: 2,
        heads: 2,
        branch_layers: 2,
        level_interval: 1,
        level_range_end: 2,
        text_vocab: 10,
        text_len: 4,
        text_depth: 1,
        ..ModelConfig::default()
    }
}

/// Replaces every entry with a random tensor of the same shape, so identity
/// initializations (gamma = 1, zero biases) do not hide gradient bugs.
/// Layer-norm gains are drawn from `1 + 0.3 z`, clamped to `[0.4, 1.6]`.
pub fn randomize(set: &ParamSet, seed: u64, scale: f64) -> ParamSet {
    let mut out = set.clone();
    for (i, (name, t)) in out.iter_mut().enumerate() {
        let r = random(t.shape(), seed + i as u64);
        // gains stay away from 0: a near-zero gain makes some weight gradients
        // vanish up to cancellation, below finite-difference resolution
        *t = if name.ends_with("gamma") {
            r.map(|v| 1.0 + 0.3 * v.clamp(-2.0, 2.0))
        } else {
            r.map(|v| v * scale)
        };
    }
    out
}

pub fn row(t: &Tensor, r: usize) -> Vec<f64> {
    let d = *t.shape().last().unwrap();
    t.data()[r * d..(r + 1) * d].to_vec()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) / (var + eps).sqrt() * g + b)
        .collect()
}

/// Row vector times a `[in, out]` matrix.
pub fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (i_n, o_n) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), i_n);
    (0..o_n)
        .map(|o| (0..i_n).map(|i| x[i] * w.data()[i * o_n + o]).sum())
        .collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Single-head attention `softmax(Q K^T / sqrt(D)) V W_O` over a token list.
pub fn single_head_attention(x: &[Vec<f64>], p: &ParamSet, prefix: &str) -> Vec<Vec<f64>> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
    let q: Vec<_> = x.iter().map(|r| vec_mat(r, get("w_q"))).collect();
    let k: Vec<_> = x.iter().map(|r| vec_mat(r, get("w_k"))).collect();
    let v: Vec<_> = x.iter().map(|r| vec_mat(r, get("w_v"))).collect();
    let d = x[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut ctx = vec![0.0; x[0].len()];
            for (w, vj) in e.iter().zip(&v) {
                for (c, val) in ctx.iter_mut().zip(vj) {
                    *c += w / z * val;
                }
            }
            vec_mat(&ctx, get("w_o"))
        })
        .collect()
}

/// Pre-norm block with single-head attention and a GELU MLP.
pub fn block(x: &[Vec<f64>], p: &ParamSet, prefix: &str, eps: f64) -> Vec<Vec<f64>> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let normed: Vec<_> = x
        .iter()
        .map(|r| layer_norm(r, &get("ln1.gamma"), &get("ln1.beta"), eps))
        .collect();
    let attn = single_head_attention(&normed, p, &format!("{prefix}.attn"));
    let x: Vec<_> = x.iter().zip(&attn).map(|(a, b)| add(a, b)).collect();
    let fc1 = p.get(&format!("{prefix}.mlp.fc1.w")).unwrap();
    let fc2 = p.get(&format!("{prefix}.mlp.fc2.w")).unwrap();
    x.iter()
        .map(|r| {
            let h = layer_norm(r, &get("ln2.gamma"), &get("ln2.beta"), eps);
            let h: Vec<f64> = add(&vec_mat(&h, fc1), &get("mlp.fc1.b"))
                .into_iter()
                .map(gelu)
                .collect();
            let m = add(&vec_mat(&h, fc2), &get("mlp.fc2.b"));
            add(r, &m)
        })
        .collect()
}
