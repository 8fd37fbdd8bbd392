//! The spatial-temporal auxiliary branch.
//!
//! Layer `k` reads the previous layer's output fused with backbone level `k`,
//! mixes tokens across frames at each spatial position (cross-frame), then
//! within each frame together with a duplicated video CLS token
//! (intra-frame). The final video CLS is fused with the backbone's own
//! pooled output.

mod forward;
mod params;

pub use forward::{
    build_first_input, cross_frame_attention, cross_frame_conv, fuse_final, fuse_level_input,
    intra_frame_forward, mean_frame_cls, stan_forward, stan_layer_forward, StanSequence,
};
pub use params::{init_branch, layer_prefix};
