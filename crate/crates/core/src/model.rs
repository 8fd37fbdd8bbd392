//! The assembled video model: frozen backbone, branch, text encoder and
//! classification head, plus cached backbone features.

use std::collections::BTreeSet;

use crate::branch::{self, StanSequence};
use crate::encoders::backbone::{self, OUTPUT_PARAMS};
use crate::encoders::config::{select_levels, ModelConfig};
use crate::encoders::layers::init_matrix;
use crate::encoders::{text, weights};
use crate::error::{shape_err, Error, Result};
use crate::numerics::rng::{stream_rng, streams, StreamRng};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bindings, ParamSet};

#[derive(Debug, Clone)]
pub struct VideoModel {
    pub config: ModelConfig,
    pub backbone: ParamSet,
    pub branch: ParamSet,
    pub text: ParamSet,
    pub head: ParamSet,
}

/// Graph handles of one forward pass.
pub struct BoundModel {
    pub backbone_out: Bindings,
    pub branch: Bindings,
    pub text: Bindings,
    pub head: Bindings,
}

impl VideoModel {
    pub fn new(config: ModelConfig, seed: u64, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let backbone = backbone::init_backbone(&config, seed);
        Self::with_backbone(config, backbone, seed, num_classes)
    }

    /// Fresh trainable parts around an existing backbone.
    pub fn with_backbone(
        config: ModelConfig,
        backbone: ParamSet,
        seed: u64,
        num_classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        let branch = branch::init_branch(&config, Some(&backbone), seed)?;
        let text = text::init_text(&config, seed);
        let mut rng = stream_rng(seed, streams::HEAD_INIT);
        let mut head = ParamSet::new();
        head.insert("w", init_matrix(&mut rng, config.dim, num_classes, 1.0));
        head.insert("b", Tensor::zeros(&[num_classes]));
        Ok(Self {
            config,
            backbone,
            branch,
            text,
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.get("b").map(|b| b.numel()).unwrap_or(0)
    }

    /// True when some branch submodule is active.
    pub fn uses_branch(&self) -> bool {
        !self.config.switches.is_baseline()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundModel> {
        Ok(BoundModel {
            backbone_out: self.backbone.bind_some(g, &OUTPUT_PARAMS, false)?,
            branch: self.branch.bind(g, trainable),
            text: self.text.bind(g, trainable),
            head: self.head.bind(g, trainable),
        })
    }

    /// Backbone layers (1-based) whose outputs the branch reads, plus the last layer.
    pub fn required_layers(&self) -> Result<BTreeSet<usize>> {
        let mut set: BTreeSet<usize> = select_levels(&self.config)?.into_iter().collect();
        set.insert(self.config.depth);
        Ok(set)
    }

    /// Branch output for a batch, or `None` for the baseline.
    pub fn branch_forward(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        feats: &BatchFeatures,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<Option<(StanSequence, Var)>> {
        if !self.uses_branch() {
            return Ok(None);
        }
        let final_out = g.constant(feats.final_out.clone());
        let levels: Vec<Var> = if self.config.switches.branch {
            feats.levels.iter().map(|t| g.constant(t.clone())).collect()
        } else {
            // appended after the backbone: every layer reads the final output
            vec![final_out; self.config.branch_layers]
        };
        let seq = branch::stan_forward(g, &bound.branch, &levels, &self.config, training, rng)?;
        Ok(Some((seq, final_out)))
    }

    /// Video embeddings `[B, D]`.
    pub fn video_embed(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        feats: &BatchFeatures,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        match self.branch_forward(g, bound, feats, training, rng)? {
            None => {
                let final_out = g.constant(feats.final_out.clone());
                branch::fuse_final(g, &bound.backbone_out, final_out, None, None, &self.config)
            }
            Some((seq, final_out)) => {
                let alpha = bound.branch.get("alpha")?;
                branch::fuse_final(
                    g,
                    &bound.backbone_out,
                    final_out,
                    Some(seq),
                    Some(alpha),
                    &self.config,
                )
            }
        }
    }

    pub fn class_logits(&self, g: &mut Graph, bound: &BoundModel, emb: Var) -> Result<Var> {
        let y = g.matmul(emb, bound.head.get("w")?)?;
        g.add(y, bound.head.get("b")?)
    }

    pub fn text_embed(
        &self,
        g: &mut Graph,
        bound: &BoundModel,
        captions: &[Vec<usize>],
    ) -> Result<Var> {
        text::text_encode(g, &bound.text, captions, &self.config)
    }

    /// Every parameter under `backbone.`, `branch.`, `text.` and `head.`.
    pub fn to_param_set(&self) -> ParamSet {
        let mut all = ParamSet::new();
        all.extend_prefixed("backbone", &self.backbone);
        all.extend_prefixed("branch", &self.branch);
        all.extend_prefixed("text", &self.text);
        all.extend_prefixed("head", &self.head);
        all
    }

    /// Rebuilds a model from a parameter file's contents, validating names and shapes.
    pub fn from_param_set(config: ModelConfig, set: &ParamSet, num_classes: usize) -> Result<Self> {
        let template = VideoModel::new(config.clone(), 0, num_classes)?;
        weights::validate_against(set, &template.to_param_set())?;
        Ok(Self {
            config,
            backbone: set.strip_prefix("backbone"),
            branch: set.strip_prefix("branch"),
            text: set.strip_prefix("text"),
            head: set.strip_prefix("head"),
        })
    }
}

/// Backbone outputs for a batch of clips, each `[B, T, L + 1, D]`.
#[derive(Debug, Clone)]
pub struct BatchFeatures {
    /// Selected levels, ascending.
    pub levels: Vec<Tensor>,
    pub final_out: Tensor,
}

/// Cached backbone layer outputs for a list of clips.
///
/// The backbone is frozen, so its outputs are computed once per clip.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    layers: Vec<usize>,
    /// `per_clip[i][j]` is clip `i` after layer `layers[j]`, `[T, L + 1, D]`.
    per_clip: Vec<Vec<Tensor>>,
    depth: usize,
}

impl FeatureBank {
    /// Runs the backbone over `clips` (each `[T, C, H, W]`), keeping `layers` (1-based).
    pub fn build(
        clips: &[Tensor],
        backbone: &ParamSet,
        config: &ModelConfig,
        layers: &BTreeSet<usize>,
    ) -> Result<Self> {
        if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > config.depth) {
            return Err(Error::Config(format!(
                "layer {bad} outside backbone depth {}",
                config.depth
            )));
        }
        const CHUNK: usize = 16;
        let t = config.frames;
        let mut per_clip = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(CHUNK) {
            let mut frames = Vec::new();
            for c in chunk {
                if c.shape().first() != Some(&t) {
                    return Err(shape_err!(
                        "clip {:?} does not have {} frames",
                        c.shape(),
                        t
                    ));
                }
                frames.extend_from_slice(c.data());
            }
            let fs = chunk[0].shape();
            let stacked = Tensor::new(&[chunk.len() * t, fs[1], fs[2], fs[3]], frames)?;
            let outs = backbone::backbone_forward_all(&stacked, backbone, config)?;
            let per = outs[0].numel() / chunk.len();
            for i in 0..chunk.len() {
                let kept = layers
                    .iter()
                    .map(|&l| {
                        let data = outs[l - 1].data()[i * per..(i + 1) * per].to_vec();
                        Tensor::new(&[t, config.patches() + 1, config.dim], data)
                    })
                    .collect::<Result<Vec<_>>>()?;
                per_clip.push(kept);
            }
        }
        Ok(Self {
            layers: layers.iter().copied().collect(),
            per_clip,
            depth: config.depth,
        })
    }

    pub fn len(&self) -> usize {
        self.per_clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_clip.is_empty()
    }

    pub fn layer(&self, clip: usize, layer: usize) -> Result<&Tensor> {
        let j = self
            .layers
            .iter()
            .position(|&l| l == layer)
            .ok_or_else(|| Error::Config(format!("layer {layer} was not cached")))?;
        Ok(&self.per_clip[clip][j])
    }

    /// Stacks the features `config` needs for the given clips.
    pub fn batch(&self, indices: &[usize], config: &ModelConfig) -> Result<BatchFeatures> {
        if config.depth != self.depth {
            return Err(Error::Config(format!(
                "features cached for depth {}, config has {}",
                self.depth, config.depth
            )));
        }
        let stack = |layer: usize| -> Result<Tensor> {
            let mut data = Vec::new();
            for &i in indices {
                data.extend_from_slice(self.layer(i, layer)?.data());
            }
            Tensor::new(
                &[
                    indices.len(),
                    config.frames,
                    config.patches() + 1,
                    config.dim,
                ],
                data,
            )
        };
        let levels = select_levels(config)?
            .into_iter()
            .map(stack)
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchFeatures {
            levels,
            final_out: stack(config.depth)?,
        })
    }
}
