use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::{RunConfig, Task};
use super::optim::{adamw_step, cosine_lr, AdamState, AdamW};
use crate::error::{Error, Result};
use crate::model::{FeatureBank, VideoModel};
use crate::numerics::rng::{stream_rng, streams, StreamRng};
use crate::numerics::{Graph, Tensor};
use crate::objectives::{
    alignment_diagnostics, cosine_similarity, cosine_sim_matrix, cross_entropy, dsl_transform,
    nce_loss, retrieval_metrics, topk_accuracy, MetricsReport, Phase, SimilarityMatrix,
    DEFAULT_KS,
};
use crate::params::ParamSet;
use crate::synthdata::{
    self, generate_retrieval_split, generate_split, reverse_partner, Dataset, Split, SynthConfig,
    NUM_CLASSES, NUM_COLORS, NUM_SHAPES,
};

/// Clips per forward pass when only encoding.
const EVAL_CHUNK: usize = 64;

/// Training and evaluation clips for a run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Dataset,
    pub test: Dataset,
}

impl RunData {
    /// Loads the configured files, or generates the splits from the seed.
    pub fn prepare(run: &RunConfig) -> Result<Self> {
        Ok(Self {
            train: Self::train_split(run)?,
            test: Self::test_split(run)?,
        })
    }

    pub fn train_split(run: &RunConfig) -> Result<Dataset> {
        let cfg = SynthConfig::for_model(&run.model);
        let ds = match &run.dataset {
            Some(p) => synthdata::load_dataset(p)?,
            None => match run.task {
                Task::Recognition => generate_split(run.seed, run.train_per_class, &cfg, Split::Train)?,
                Task::Retrieval => generate_retrieval_split(
                    run.seed,
                    &cfg,
                    Split::Train,
                    run.train_per_class.div_ceil(NUM_SHAPES * NUM_COLORS).max(1),
                )?,
            },
        };
        ds.check_model(&run.model)?;
        Ok(ds)
    }

    pub fn test_split(run: &RunConfig) -> Result<Dataset> {
        let cfg = SynthConfig::for_model(&run.model);
        let ds = match &run.test_dataset {
            Some(p) => synthdata::load_dataset(p)?,
            None => match run.task {
                Task::Recognition => generate_split(run.seed, run.test_per_class, &cfg, Split::Test)?,
                Task::Retrieval => generate_retrieval_split(run.seed, &cfg, Split::Test, 1)?,
            },
        };
        ds.check_model(&run.model)?;
        Ok(ds)
    }
}

/// Cached backbone features of both splits.
#[derive(Debug, Clone)]
pub struct RunFeatures {
    pub train: FeatureBank,
    pub test: FeatureBank,
}

impl RunFeatures {
    pub fn build(data: &RunData, model: &VideoModel, layers: &BTreeSet<usize>) -> Result<Self> {
        Ok(Self {
            train: FeatureBank::build(&data.train.clip_tensors(), &model.backbone, &model.config, layers)?,
            test: FeatureBank::build(&data.test.clip_tensors(), &model.backbone, &model.config, layers)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: VideoModel,
    /// Loss after every optimizer step.
    pub loss_trace: Vec<f64>,
}

/// Batches of at most `size` clips; for retrieval no caption repeats in a batch.
///
/// Retrieval clips are first grouped by (shape, color), in shuffled group order, so a
/// batch holds whole motion groups: captions that differ only in motion are each
/// other's negatives, otherwise motion is rarely needed to tell a batch apart.
fn make_batches(order: &[usize], data: &Dataset, size: usize, task: Task) -> Vec<Vec<usize>> {
    if task == Task::Recognition {
        return order.chunks(size).map(|c| c.to_vec()).collect();
    }
    let appearance = |i: usize| {
        let c = &data.clips[i].caption;
        &c[..c.len().min(2)]
    };
    let mut groups: Vec<(&[usize], Vec<usize>)> = Vec::new();
    for &i in order {
        match groups.iter_mut().find(|(k, _)| *k == appearance(i)) {
            Some((_, g)) => g.push(i),
            None => groups.push((appearance(i), vec![i])),
        }
    }
    let mut pending: Vec<usize> = groups.into_iter().flat_map(|(_, g)| g).collect();
    let mut out = Vec::new();
    while !pending.is_empty() {
        let mut batch: Vec<usize> = Vec::new();
        let mut rest = Vec::new();
        for &i in &pending {
            let dup = batch.iter().any(|&j| data.clips[j].caption == data.clips[i].caption);
            if batch.len() < size && !dup {
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        out.push(batch);
        pending = rest;
    }
    out
}

/// Loss of one batch; differentiable through the trainable groups.
fn batch_loss(
    g: &mut Graph,
    model: &VideoModel,
    bank: &FeatureBank,
    data: &Dataset,
    idx: &[usize],
    task: Task,
    rng: &mut StreamRng,
) -> Result<(crate::numerics::Var, crate::model::BoundModel)> {
    let bound = model.bind(g, true)?;
    let feats = bank.batch(idx, &model.config)?;
    let emb = model.video_embed(g, &bound, &feats, true, rng)?;
    let loss = match task {
        Task::Recognition => {
            let logits = model.class_logits(g, &bound, emb)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.clips[i].label).collect();
            cross_entropy(g, logits, &labels)?
        }
        Task::Retrieval => {
            let caps: Vec<Vec<usize>> = idx.iter().map(|&i| data.clips[i].caption.clone()).collect();
            let text = model.text_embed(g, &bound, &caps)?;
            let sim = cosine_similarity(g, emb, text)?;
            nce_loss(g, sim, model.config.nce_temperature)?
        }
    };
    Ok((loss, bound))
}

/// Trains the branch and the task's head (classifier or text encoder) in place.
///
/// Unlike [`RunConfig::validate`], a zero learning rate is accepted here.
pub fn train_model(
    model: &mut VideoModel,
    data: &Dataset,
    bank: &FeatureBank,
    run: &RunConfig,
) -> Result<Vec<f64>> {
    data.check_model(&model.config)?;
    if bank.len() != data.len() {
        return Err(Error::Config(format!(
            "{} cached feature sets for {} clips",
            bank.len(),
            data.len()
        )));
    }
    if !(run.lr_branch >= 0.0) || run.batch_size == 0 {
        return Err(Error::Config("need lr >= 0 and a positive batch size".into()));
    }
    if let Some(bad) = data.clips.iter().find(|c| c.label >= model.num_classes()) {
        return Err(Error::Config(format!(
            "label {} but the head has {} classes",
            bad.label,
            model.num_classes()
        )));
    }
    let frozen = model.backbone.clone();
    let opt = AdamW {
        weight_decay: run.weight_decay,
        ..AdamW::default()
    };
    let mut branch_state = AdamState::zeros_like(&model.branch);
    let mut head_state = AdamState::zeros_like(&model.head);
    let mut text_state = AdamState::zeros_like(&model.text);
    let mut shuffle = stream_rng(run.seed, streams::SHUFFLE);
    let mut dropout = stream_rng(run.seed, streams::DROPOUT);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let per_epoch = make_batches(&order, data, run.batch_size, run.task).len();
    let total = per_epoch * run.epochs;
    let mut trace = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..run.epochs {
        order.shuffle(&mut shuffle);
        for idx in make_batches(&order, data, run.batch_size, run.task) {
            let lr = cosine_lr(run.lr_branch, step, total);
            let mut g = Graph::new();
            let (loss, bound) = batch_loss(&mut g, model, bank, data, &idx, run.task, &mut dropout)?;
            trace.push(g.value(loss).data()[0]);
            let grads = g.backward(loss)?;
            if model.uses_branch() {
                let gb = bound.branch.gradients(&grads);
                adamw_step(&mut model.branch, &gb, &mut branch_state, lr, &opt)?;
            }
            match run.task {
                Task::Recognition => {
                    let gh = bound.head.gradients(&grads);
                    adamw_step(&mut model.head, &gh, &mut head_state, lr, &opt)?;
                }
                Task::Retrieval => {
                    let gt = bound.text.gradients(&grads);
                    adamw_step(&mut model.text, &gt, &mut text_state, lr, &opt)?;
                }
            }
            step += 1;
        }
        if !model.backbone.bitwise_eq(&frozen) {
            return Err(Error::NonDeterministic(format!(
                "backbone parameters changed during epoch {epoch}"
            )));
        }
    }
    Ok(trace)
}

/// Builds the model from the run seed, prepares data and trains.
pub fn train(run: &RunConfig) -> Result<(TrainOutput, RunData, RunFeatures)> {
    run.validate()?;
    let data = RunData::prepare(run)?;
    let mut model = VideoModel::new(run.model.clone(), run.seed, NUM_CLASSES)?;
    let feats = RunFeatures::build(&data, &model, &model.required_layers()?)?;
    let loss_trace = train_model(&mut model, &data.train, &feats.train, run)?;
    Ok((TrainOutput { model, loss_trace }, data, feats))
}

/// Inference-mode video embeddings `[N, D]` for every clip in the bank.
pub fn embed_videos(model: &VideoModel, bank: &FeatureBank) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(bank.len() * model.config.dim);
    let mut unused = stream_rng(0, streams::DROPOUT);
    let all: Vec<usize> = (0..bank.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false)?;
        let feats = bank.batch(chunk, &model.config)?;
        let emb = model.video_embed(&mut g, &bound, &feats, false, &mut unused)?;
        rows.extend_from_slice(g.value(emb).data());
    }
    Tensor::new(&[bank.len(), model.config.dim], rows)
}

pub fn embed_texts(model: &VideoModel, captions: &[Vec<usize>]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(captions.len() * model.config.dim);
    for chunk in captions.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false)?;
        let t = model.text_embed(&mut g, &bound, chunk)?;
        rows.extend_from_slice(g.value(t).data());
    }
    Tensor::new(&[captions.len(), model.config.dim], rows)
}

pub fn class_logits(model: &VideoModel, embeddings: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false)?;
    let e = g.constant(embeddings.clone());
    let l = model.class_logits(&mut g, &bound, e)?;
    Ok(g.value(l).clone())
}

/// Metrics of one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    Recognition(MetricsReport),
    /// Text queries ranking videos, and video queries ranking texts.
    Retrieval {
        text_to_video: MetricsReport,
        video_to_text: MetricsReport,
    },
}

impl Evaluation {
    /// Named values in a fixed order; retrieval names carry a `t2v_`/`v2t_` prefix.
    pub fn entries(&self) -> Vec<(String, f64)> {
        match self {
            Evaluation::Recognition(r) => r.entries(),
            Evaluation::Retrieval {
                text_to_video,
                video_to_text,
            } => {
                let mut out = Vec::new();
                for (prefix, r) in [("t2v", text_to_video), ("v2t", video_to_text)] {
                    out.extend(r.entries().into_iter().map(|(n, v)| (format!("{prefix}_{n}"), v)));
                }
                out
            }
        }
    }

    /// Top-1 accuracy for recognition, text-to-video R@1 for retrieval.
    pub fn headline(&self) -> f64 {
        match self {
            Evaluation::Recognition(r) => r.top1.unwrap_or(f64::NAN),
            Evaluation::Retrieval { text_to_video, .. } => {
                text_to_video.r_at.get(&1).copied().unwrap_or(f64::NAN)
            }
        }
    }
}

/// Percentage of reverse-pair clips whose own class outscores its time-reversed partner.
///
/// Chance is 50%; a model blind to frame order gets at most that on a
/// test set holding each clip together with its reversal.
pub fn reverse_pair_accuracy(logits: &Tensor, labels: &[usize]) -> Result<Option<f64>> {
    let c = logits.shape()[1];
    let (mut hits, mut n) = (0usize, 0usize);
    for (i, &y) in labels.iter().enumerate() {
        if let Some(p) = reverse_partner(y) {
            let row = &logits.data()[i * c..(i + 1) * c];
            if p >= c || y >= c {
                return Err(Error::Param(format!("label {y} out of range for {c} classes")));
            }
            n += 1;
            if row[y] > row[p] {
                hits += 1;
            }
        }
    }
    Ok((n > 0).then(|| 100.0 * hits as f64 / n as f64))
}

/// Top-1, top-5 and reverse-pair accuracy from logits.
pub fn evaluate_logits(logits: &Tensor, labels: &[usize]) -> Result<Evaluation> {
    let c = logits.shape().get(1).copied().unwrap_or(0);
    Ok(Evaluation::Recognition(MetricsReport {
        top1: Some(topk_accuracy(logits, labels, 1)?),
        top5: Some(topk_accuracy(logits, labels, 5.min(c))?),
        reverse_pair_acc: reverse_pair_accuracy(logits, labels)?,
        ..MetricsReport::default()
    }))
}

/// Both retrieval directions of a video-by-text similarity matrix.
///
/// Dual-softmax, when asked for, reweights each direction's matrix before
/// ranking; the alignment diagnostics always use the raw similarities.
pub fn evaluate_similarity(sim: &SimilarityMatrix, dsl: Option<f64>) -> Result<Evaluation> {
    let directions = [sim.transposed()?, sim.clone()];
    let mut reports = Vec::with_capacity(2);
    for m in &directions {
        let (pos, margin) = alignment_diagnostics(m)?;
        let ranked = match dsl {
            Some(t) => dsl_transform(m, t, Phase::Inference)?,
            None => m.clone(),
        };
        let mut r = retrieval_metrics(&ranked, &DEFAULT_KS)?;
        r.avg_pos_sim = Some(pos);
        r.avg_margin = Some(margin);
        reports.push(r);
    }
    let video_to_text = reports.pop().expect("two directions");
    let text_to_video = reports.pop().expect("two directions");
    Ok(Evaluation::Retrieval {
        text_to_video,
        video_to_text,
    })
}

/// Encodes the clips (and captions) behind `bank` and scores the task.
pub fn evaluate(
    model: &VideoModel,
    data: &Dataset,
    bank: &FeatureBank,
    task: Task,
    use_dsl: bool,
    dsl_temperature: f64,
) -> Result<Evaluation> {
    if use_dsl && task == Task::Recognition {
        return Err(Error::Usage("dual-softmax applies to retrieval only".into()));
    }
    if bank.len() != data.len() {
        return Err(Error::Config(format!(
            "{} cached feature sets for {} clips",
            bank.len(),
            data.len()
        )));
    }
    let video = embed_videos(model, bank)?;
    match task {
        Task::Recognition => evaluate_logits(&class_logits(model, &video)?, &data.labels()),
        Task::Retrieval => {
            let text = embed_texts(model, &data.captions())?;
            let sim = cosine_sim_matrix(&video, &text)?;
            evaluate_similarity(&sim, use_dsl.then_some(dsl_temperature))
        }
    }
}

/// Wall-clock seconds spent in `f`.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

/// Parameters that training may change: everything except the backbone.
pub fn trainable_params(model: &VideoModel) -> ParamSet {
    let mut all = ParamSet::new();
    all.extend_prefixed("branch", &model.branch);
    all.extend_prefixed("text", &model.text);
    all.extend_prefixed("head", &model.head);
    all
}
