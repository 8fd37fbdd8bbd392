use crate::encoders::backbone::layer_param_names;
use crate::encoders::config::{select_levels, CrossFrameVariant, ModelConfig};
use crate::encoders::layers::{self, init_matrix, join};
use crate::error::Result;
use crate::numerics::rng::{gaussian, stream_rng, streams};
use crate::numerics::Tensor;
use crate::params::ParamSet;

pub const POS_STD: f64 = 1.0;

pub fn layer_prefix(k: usize) -> String {
    format!("layers.{k}")
}

/// Trainable branch parameters.
///
/// Layer `k` (0-based) holds `intra.*`, `cross.*` and, for `k > 0`, the level
/// projection `w_proj`. `pos_t`/`pos_s` feed the first layer only; `alpha`
/// gates the branch output in the final fusion.
pub fn init_branch(
    config: &ModelConfig,
    backbone: Option<&ParamSet>,
    seed: u64,
) -> Result<ParamSet> {
    let mut rng = stream_rng(seed, streams::BRANCH_INIT);
    let d = config.dim;
    let k_layers = config.branch_layers;
    let out_gain = if config.zero_init_branch {
        0.0
    } else {
        1.0 / (2.0 * k_layers as f64).sqrt()
    };
    let mut set = ParamSet::new();
    set.insert("pos_t", gaussian(&mut rng, &[config.frames, d], POS_STD));
    set.insert("pos_s", gaussian(&mut rng, &[config.patches(), d], POS_STD));
    set.insert(
        "alpha",
        Tensor::scalar(if config.zero_init_branch { 0.0 } else { 1.0 }),
    );
    let levels = select_levels(config)?;
    for k in 0..k_layers {
        let p = layer_prefix(k);
        if k > 0 {
            set.insert(join(&p, "w_proj"), init_matrix(&mut rng, d, d, 1.0));
        }
        let intra = join(&p, "intra");
        layers::init_block(&mut set, &intra, d, &mut rng, out_gain);
        if let (true, Some(bb)) = (config.intra_init_from_backbone, backbone) {
            let src = levels[k] - 1;
            for name in layer_param_names(src) {
                let suffix = name.splitn(3, '.').nth(2).unwrap_or_default().to_string();
                let is_out = suffix.ends_with("w_o") || suffix.starts_with("mlp.fc2");
                let mut t = bb.get(&name)?.clone();
                if is_out && config.zero_init_branch {
                    t = Tensor::zeros(t.shape());
                }
                set.insert(join(&intra, &suffix), t);
            }
        }
        let cross = join(&p, "cross");
        match config.cross_frame_variant {
            CrossFrameVariant::SelfAttention => {
                layers::init_layer_norm(&mut set, &join(&cross, "ln"), d);
                layers::init_attention(&mut set, &join(&cross, "attn"), d, &mut rng, out_gain);
            }
            CrossFrameVariant::Conv3d => {
                let c = config.bottleneck();
                set.insert(join(&cross, "down.w"), init_matrix(&mut rng, d, c, 1.0));
                set.insert(join(&cross, "down.b"), Tensor::zeros(&[c]));
                set.insert(
                    join(&cross, "conv.w"),
                    gaussian(&mut rng, &[c, c, 3, 1, 1], 1.0 / ((3 * c) as f64).sqrt()),
                );
                set.insert(join(&cross, "conv.b"), Tensor::zeros(&[c]));
                set.insert(join(&cross, "up.w"), init_matrix(&mut rng, c, d, out_gain));
                set.insert(join(&cross, "up.b"), Tensor::zeros(&[d]));
            }
        }
    }
    Ok(set)
}
