//! Small trainable text encoder for caption token sequences.

use super::config::ModelConfig;
use super::layers;
use crate::error::{Error, Result};
use crate::numerics::rng::{gaussian, stream_rng, streams};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bindings, ParamSet};

/// Additive score for masked-out keys; `exp` of it underflows to exactly 0.
const MASKED: f64 = -1e9;

pub fn init_text(config: &ModelConfig, seed: u64) -> ParamSet {
    let mut rng = stream_rng(seed, streams::TEXT_INIT);
    let d = config.dim;
    let mut set = ParamSet::new();
    set.insert("tok_emb", gaussian(&mut rng, &[config.text_vocab, d], 1.0));
    set.insert("pos", gaussian(&mut rng, &[config.text_len, d], 0.1));
    let out_gain = 1.0 / (config.text_depth.max(1) as f64).sqrt();
    for i in 0..config.text_depth {
        layers::init_block(&mut set, &format!("layers.{i}"), d, &mut rng, out_gain);
    }
    layers::init_layer_norm(&mut set, "ln_final", d);
    set.insert("proj", layers::init_matrix(&mut rng, d, d, 1.0));
    set
}

pub fn validate_tokens(ids: &[usize], config: &ModelConfig) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Param("empty token sequence".into()));
    }
    if ids.len() > config.text_len {
        return Err(Error::Param(format!(
            "sequence of {} tokens exceeds text_len {}",
            ids.len(),
            config.text_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= config.text_vocab) {
        return Err(Error::Param(format!(
            "token id {bad} outside vocabulary of {}",
            config.text_vocab
        )));
    }
    Ok(())
}

/// Encodes a batch of token sequences to `[B, D]`.
///
/// Sequences are right-padded to the longest one; padded keys are masked so
/// they never influence real tokens. The state of each sequence's last real
/// token is normed and projected.
pub fn text_encode(
    g: &mut Graph,
    b: &Bindings,
    batch: &[Vec<usize>],
    config: &ModelConfig,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Param("empty caption batch".into()));
    }
    for ids in batch {
        validate_tokens(ids, config)?;
    }
    let n = batch.len();
    let s = batch.iter().map(Vec::len).max().unwrap();
    let d = config.dim;
    let mut flat = Vec::with_capacity(n * s);
    for ids in batch {
        flat.extend_from_slice(ids);
        flat.extend(std::iter::repeat_n(0, s - ids.len()));
    }
    let emb = g.gather_rows(b.get("tok_emb")?, &flat)?;
    let emb = g.reshape(emb, &[n, s, d])?;
    let pos = g.narrow(b.get("pos")?, 0, 0, s)?;
    let mut x = g.add(emb, pos)?;

    if config.text_depth > 0 {
        let heads = config.heads;
        let mut mask = vec![0.0; n * heads * s * s];
        for (bi, ids) in batch.iter().enumerate() {
            for h in 0..heads {
                for q in 0..s {
                    for k in ids.len()..s {
                        mask[((bi * heads + h) * s + q) * s + k] = MASKED;
                    }
                }
            }
        }
        let mask = g.constant(Tensor::new(&[n, heads, s, s], mask)?);
        for i in 0..config.text_depth {
            x = layers::block(
                g,
                b,
                &format!("layers.{i}"),
                x,
                heads,
                config.ln_eps,
                Some(mask),
            )?;
        }
    }

    let flat_x = g.reshape(x, &[n * s, d])?;
    let last: Vec<usize> = batch
        .iter()
        .enumerate()
        .map(|(i, ids)| i * s + ids.len() - 1)
        .collect();
    let h = g.gather_rows(flat_x, &last)?;
    let h = layers::layer_norm(g, b, "ln_final", h, config.ln_eps)?;
    g.matmul(h, b.get("proj")?)
}
